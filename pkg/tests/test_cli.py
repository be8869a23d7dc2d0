import json
from dataclasses import asdict

import pytest

from conftest import SMALL_WORLD
from palavra.evalkit.cli import main
from palavra.vocab import TokenRegistry

FAST = {"epochs": 4, "hidden_dim": 32, "concepts_per_batch": 8, "batch_size": 32, "lambda_gt": 8.0, "lr": 3e-3, "tune_epochs": 3}


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "world_in.json").write_text(json.dumps(asdict(SMALL_WORLD)))
    assert main(["build-toy-benchmark", "--world", str(root / "world_in.json"), "--out", str(root / "w")]) == 0
    (root / "fast.json").write_text(json.dumps(FAST))
    return root


def test_build_writes_world(world):
    w = world / "w"
    for name in ("encoder.json", "train_manifest.json", "bench_manifest.json", "records.json", "config.json", "types.txt", "train.pvlc", "bench.pvlc"):
        assert (w / name).exists(), name
    assert json.loads((w / "world.json").read_text())["n_concepts"] == SMALL_WORLD.n_concepts


def test_train_personalize_evaluate(world, capsys):
    w, out = world / "w", world / "run"
    cfg = ["--config", str(world / "fast.json")]
    assert main(["train-inverter", "--train-manifest", str(w / "train_manifest.json"), "--out", str(out), "--seed", "1", *cfg]) == 0
    assert (out / "inverter-seed1.ckpt").exists()
    history = json.loads((out / "history-seed1.json").read_text())
    assert history["batch_kinds"][:2] == ["IMAGE", "TEXT"] and len(history["epoch_losses"]) == 4

    # global flags also work before the command
    assert main(["--seed", "1", *cfg, "personalize", "--bench", str(w / "bench_manifest.json"),
                 "--checkpoint", str(out / "inverter-seed1.ckpt"), "--shots", "2", "--symbols", "[C00]", "[C03]", "--out", str(out)]) == 0
    reg = TokenRegistry.load(out / "tokens-seed1-shots2.tok")
    assert sorted(t.symbol for t in reg) == ["[C00]", "[C03]"]
    assert all(t.provenance["shots"] == 2 for t in reg)

    assert main(["evaluate", "--bench", str(w / "bench_manifest.json"), "--checkpoint-dir", str(out), "--seeds", "1",
                 "--methods", "palavra", "text_only", "random", "--regime", "concept_only", "--plot", "--out", str(out), *cfg]) == 0
    report = json.loads((out / "palavra-concept_only.json").read_text())
    assert report["seeds"] == [1] and "banner" in report
    assert (out / "recall-concept_only.png").exists()
    assert "NOTE: toy-encoder run" in capsys.readouterr().out


def test_ablate_and_shots(world):
    w, out = world / "w", world / "abl"
    common = ["--bench", str(w / "bench_manifest.json"), "--train-manifest", str(w / "train_manifest.json"),
              "--seeds", "0", "--out", str(out), "--config", str(world / "fast.json")]
    assert main(["ablate", "--flags", "only_cycle", "no_alignment", *common]) == 0
    summary = json.loads((out / "ablation-summary.json").read_text())
    assert [s["flag"] for s in summary] == ["only_cycle", "no_alignment"]
    assert [s["stage"] for s in summary] == ["no_tuning", "with_tuning"]
    assert main(["shots-sweep", "--shots", "1", "2", "--methods", "avg_im", *common]) == 0
    assert (out / "shots-avg_im-2.json").exists() and (out / "shots.png").exists()


def test_cache_embeddings(world, tmp_path):
    w = world / "w"
    records = json.loads((w / "records.json").read_text())[:5]
    (tmp_path / "items.json").write_text(json.dumps(records))
    assert main(["cache-embeddings", "--items", str(tmp_path / "items.json"), "--encoder", str(w / "encoder.json"),
                 "--cache", str(tmp_path / "c.pvlc")]) == 0
    assert (tmp_path / "c.pvlc.ids").read_text().split() == [r["id"] for r in records]


def test_exit_codes(world, tmp_path, capsys):
    w = world / "w"
    bench = ["--bench", str(w / "bench_manifest.json"), "--out", str(tmp_path)]
    # configuration errors exit with 2
    assert main(["evaluate", *bench, "--methods", "magic"]) == 2
    assert main(["ablate", *bench, "--flags", "no_such_flag"]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"epochz": 1}))
    assert main(["evaluate", *bench, "--methods", "random", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["evaluate", *bench, "--methods", "palavra", "--seeds", "0"]) == 2  # no checkpoint, no training data
    (tmp_path / "items.json").write_text("[]")
    assert main(["cache-embeddings", "--items", str(tmp_path / "items.json"), "--out", str(tmp_path)]) == 2  # no encoder
    # data errors exit with 3
    assert main(["evaluate", "--bench", str(tmp_path / "missing.json"), "--encoder", str(w / "encoder.json")]) == 3
    (tmp_path / "items.json").write_text("{not json")
    assert main(["cache-embeddings", "--items", str(tmp_path / "items.json")]) == 3
    err = capsys.readouterr().err
    assert err.count("palavra: error:") == 7
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2
