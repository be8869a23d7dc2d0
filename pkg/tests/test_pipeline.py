import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import small_train_config
from palavra.cache import EmbeddingCache
from palavra.errors import ConfigError, DataError
from palavra.evalkit.benchmark import ConceptInfo, Query, RetrievalBenchmark
from palavra.evalkit.metrics import random_mrr_expectation
from palavra.evalkit.pipeline import Pipeline, evaluate, few_shot_ids, run_baseline, shots_sweep
from palavra.evalkit.report import TOY_BANNER, MetricsReport, format_table, pooled_sem
from palavra.inverter import save_checkpoint
from palavra.training import PersonalizeConfig


@pytest.fixture(scope="module")
def pipe(small_world):
    return Pipeline(small_world.bench, small_world.data, small_world.encoder, small_train_config(), PersonalizeConfig(tune_epochs=10))


def _bench(cache, **kw):
    base = dict(
        gallery=["g1", "g2"],
        queries=[Query("q1", "[C1]", "a photo of a [C1]", "g1")],
        concepts={"[C1]": ConceptInfo("<type-1>", ["t1"])},
        cache=cache,
        split="test",
    )
    base.update(kw)
    return RetrievalBenchmark(**base)


def test_benchmark_validation(tmp_path):
    cache = EmbeddingCache(tmp_path / "b.pvlc", 3)
    for i in ("g1", "g2", "t1"):
        cache.put(i, np.ones(3, np.float32))
    _bench(cache)
    cases = [
        (dict(split="train"), "split"),
        (dict(gallery=[]), "empty"),
        (dict(gallery=["g1", "g1"]), "duplicate"),
        (dict(queries=[Query("q1", "[C1]", "x", "g9")]), "g9"),
        (dict(queries=[Query("q1", "[C2]", "x", "g1")]), r"\[C2\]"),
        (dict(concepts={"[C1]": ConceptInfo("<type-1>", ["g1"])}), "overlap"),
        (dict(concepts={"[C1]": ConceptInfo("<type-1>", ["t9"])}), "t9"),
        (dict(concepts={"c1": ConceptInfo("<type-1>", [])}, queries=[]), "symbol"),
    ]
    for kw, msg in cases:
        with pytest.raises(DataError, match=msg):
            _bench(cache, **kw)
    (tmp_path / "m.json").write_text(json.dumps({"cache": "b.pvlc"}))
    cache.save()
    with pytest.raises(DataError):
        RetrievalBenchmark.load(tmp_path / "m.json")


def test_manifest_round_trip(small_world, tmp_path):
    bench = small_world.bench
    bench.cache.save()
    path = bench.cache.path.parent / "bench_roundtrip.json"
    path.write_text(json.dumps(bench.to_json(bench.cache.path.name)))
    back = RetrievalBenchmark.load(path)
    assert back.to_json("x") == bench.to_json("x")
    assert np.array_equal(back.gallery_matrix, bench.gallery_matrix)


def test_query_regimes(small_world):
    q = small_world.bench.queries[0]
    assert q.text("concept_only") == f"A photo of a {q.symbol}"
    assert q.text("rich") == q.caption
    assert q.text("detailed") == q.detailed_caption
    with pytest.raises(ConfigError):
        q.text("verbose")
    with pytest.raises(DataError):
        replace(q, detailed_caption=None).text("detailed")


def test_concept_only_ignores_captions(small_world, pipe):
    bench = small_world.bench
    shuffled = [replace(q, caption=bench.queries[(i + 3) % len(bench.queries)].caption) for i, q in enumerate(bench.queries)]
    other = Pipeline(
        RetrievalBenchmark(bench.gallery, shuffled, bench.concepts, bench.cache),
        None, small_world.encoder, pipe.tcfg, pipe.pcfg,
    )
    other._models = pipe._models  # same trained inverters
    for method in ("palavra", "text_only", "im_and_text"):
        a = pipe.evaluate(method, [0], "concept_only")
        b = other.evaluate(method, [0], "concept_only")
        assert a.per_seed == b.per_seed, method
    assert pipe.evaluate("text_only", [0], "rich").per_seed != other.evaluate("text_only", [0], "rich").per_seed


def test_avg_im_is_regime_independent(small_world):
    reports = [run_baseline("avg_im", small_world.bench, small_world.encoder, r, seeds=(0, 1)) for r in ("rich", "concept_only", "detailed")]
    assert reports[0].per_seed == reports[1].per_seed == reports[2].per_seed


def test_text_only_ignores_tokens(small_world, pipe):
    pipe.registry(0, 5, True)  # tokens exist for this seed
    with_tokens = pipe.evaluate("text_only", [0], "concept_only")
    without = run_baseline("text_only", small_world.bench, small_world.encoder, "concept_only")
    assert with_tokens.per_seed == without.per_seed


def test_subsets_are_seed_matched_and_nested(small_world, pipe):
    other = Pipeline(small_world.bench, None, small_world.encoder, pipe.tcfg, pipe.pcfg)
    assert other.subset_digest(0, 5) == pipe.subset_digest(0, 5)
    assert pipe.subset_digest(0, 5) != pipe.subset_digest(1, 5)
    ids = small_world.bench.concepts["[C00]"].train_ids
    for seed in range(5):
        prev = []
        for shots in (1, 2, 5, 10):
            cur = few_shot_ids(ids, "[C00]", seed, shots)
            assert cur[: len(prev)] == prev and len(set(cur)) == shots
            prev = cur
    with pytest.raises(DataError):
        few_shot_ids(ids, "[C00]", 0, len(ids) + 1)
    # every method reports the same subsets for a seed
    a = pipe.evaluate("avg_im", [0, 1])
    b = pipe.evaluate("palavra_no_tuning", [0, 1])
    assert {k: v for k, v in a.digests.items() if k.startswith("subset")} == {
        k: v for k, v in b.digests.items() if k.startswith("subset")
    }


def test_random_baseline_matches_harmonic_expectation(small_world):
    report = run_baseline("random", small_world.bench, small_world.encoder, seeds=range(400))
    n = len(small_world.bench.gallery)
    expected = random_mrr_expectation(n)
    assert abs(report.mean() - expected) < 4 * report.sem()
    assert run_baseline("random", small_world.bench, small_world.encoder).per_seed == run_baseline(
        "random", small_world.bench, small_world.encoder
    ).per_seed


def test_report_contents(tmp_path, pipe):
    report = pipe.evaluate("palavra", [0])
    assert report.sem() == 0.0 and report.seeds == [0]
    assert set(report.per_seed[0]) == {"seed", "mrr", "n_queries", "recall@1", "recall@5", "recall@10"}
    path = report.write(tmp_path / "r")
    doc = json.loads(path.read_text())
    assert doc["banner"] == TOY_BANNER and "28.4" in doc["banner"]
    assert MetricsReport.from_json(doc).to_json() == doc
    assert TOY_BANNER in format_table([report])
    two = pipe.evaluate("palavra", [0, 1])
    assert two.sem() > 0
    assert pooled_sem(two, two) == pytest.approx(np.sqrt(2) * two.sem())


def test_checkpoints_reproduce_training(tmp_path, small_world, pipe):
    save_checkpoint(pipe.model(0), tmp_path / "s0.ckpt", {"seed": 0})
    report = evaluate(
        "palavra_no_tuning", small_world.bench, [0], "rich", small_world.encoder,
        pcfg=pipe.pcfg, checkpoints={0: tmp_path / "s0.ckpt"}, out_dir=tmp_path,
    )
    assert report.per_seed == pipe.evaluate("palavra_no_tuning", [0]).per_seed
    assert (tmp_path / "palavra_no_tuning-rich.json").exists()


def test_pipeline_errors(tmp_path, small_world, pipe):
    with pytest.raises(ConfigError):
        pipe.evaluate("magic", [0])
    with pytest.raises(ConfigError):
        run_baseline("palavra", small_world.bench, small_world.encoder)
    with pytest.raises(ConfigError):
        Pipeline(small_world.bench, None, small_world.encoder, pipe.tcfg, pipe.pcfg).evaluate("palavra", [0])
    with pytest.raises(DataError):
        shots_sweep(pipe, "avg_im", [1, 50], [0])
    cache = EmbeddingCache(tmp_path / "b.pvlc", small_world.encoder.output_dim)
    for i in ("g1", "g2"):
        cache.put(i, small_world.bench.cache.get(small_world.bench.gallery[0]))
    bench = _bench(cache, concepts={"[C1]": ConceptInfo("<type-1>", [])})
    with pytest.raises(ConfigError, match="training images"):
        run_baseline("avg_im", bench, small_world.encoder)
    assert run_baseline("text_only", bench, small_world.encoder).mean() > 0


def test_shots_sweep_shape(small_world, pipe):
    out = shots_sweep(pipe, "avg_im", [1, 2, 5], [0, 1])
    assert sorted(out) == [1, 2, 5]
    assert all(r.shots == s for s, r in out.items())
