"""Command-line entry point: ``palavra <command> [options]``.

Global flags (``--config``, ``--seed``, ``--out``, encoder selection) may
appear before or after the command. Exit codes: 0 success, 2 configuration
or usage error, 3 data error, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from ..errors import (
    ConfigError,
    DataError,
    NotDifferentiableError,
    PalavraError,
    PreconditionError,
    TransportError,
)

logger = logging.getLogger("palavra")

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


# -- shared helpers ----------------------------------------------------------


def _out(args: argparse.Namespace) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _configs(args: argparse.Namespace):
    from ..training import load_config

    return load_config(args.config, seed=args.seed)


def _seeds(args: argparse.Namespace) -> list[int]:
    if args.seeds:
        return list(args.seeds)
    if args.seed is not None:
        return [args.seed]
    return list(DEFAULT_SEEDS)


def _encoder(args: argparse.Namespace, *near: str | None):
    """Resolve the encoder: explicit flags first, then an ``encoder.json`` next to a manifest."""
    from ..encoder import ClipEncoder, ExternalEncoderClient
    from ..toy import load_toy_encoder

    if args.real_encoder:
        return ClipEncoder(args.real_encoder)
    if args.encoder_url:
        return ExternalEncoderClient(args.encoder_url)
    if args.encoder:
        return load_toy_encoder(args.encoder)
    for p in near:
        if p and (Path(p).parent / "encoder.json").exists():
            return load_toy_encoder(Path(p).parent / "encoder.json")
    raise ConfigError("no encoder given: pass --encoder SPEC.json, --encoder-url URL or --real-encoder MODEL")


def _checkpoints(args: argparse.Namespace, seeds: Sequence[int]) -> dict[int, Path]:
    if not args.checkpoint_dir:
        return {}
    found = {}
    for s in seeds:
        p = Path(args.checkpoint_dir) / f"inverter-seed{s}.ckpt"
        if p.exists():
            found[s] = p
    return found


def _training_data(path: str | None):
    from ..training import TrainingDataset

    if path is None:
        return None
    data = TrainingDataset.from_manifest(path)
    data.validate()
    return data


# -- commands ------------------------------------------------------------------


def cmd_build_toy_benchmark(args: argparse.Namespace) -> int:
    from ..toy import ToyWorldConfig, build_toy_world, toy_train_config
    from ..training import PersonalizeConfig, dump_config
    from ..textaug import PromptBank

    overrides: dict[str, Any] = {}
    if args.world:
        try:
            overrides = json.loads(Path(args.world).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read world config {args.world}: {e}") from None
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = ToyWorldConfig(**overrides)
    except TypeError as e:
        raise ConfigError(f"bad world config: {e}") from None
    out = _out(args)
    world = build_toy_world(cfg, out)
    (out / "config.json").write_text(dump_config(toy_train_config(), PersonalizeConfig(), PromptBank()), encoding="utf-8")
    print(
        f"toy world in {out}: {len(world.data.image_split)} training concepts, "
        f"{len(world.bench.concepts)} benchmark concepts, gallery {len(world.bench.gallery)}"
    )
    return 0


def cmd_cache_embeddings(args: argparse.Namespace) -> int:
    from ..cache import cache_embeddings

    try:
        doc = json.loads(Path(args.items).read_text(encoding="utf-8"))
        items = [(str(d["id"]), d["record"] if "record" in d else d["path"]) for d in doc]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"bad item list {args.items}: {e}") from None
    enc = _encoder(args, args.items)
    cache_path = Path(args.cache) if args.cache else _out(args) / "cache.pvlc"
    cache = cache_embeddings(items, enc, cache_path)
    print(f"{len(cache)} embeddings of dim {cache.dim} in {cache_path}")
    return 0


def cmd_train_inverter(args: argparse.Namespace) -> int:
    from ..inverter import save_checkpoint
    from ..training import TrainingHistory, checkpoint_meta, train_inverter

    tcfg, _, bank = _configs(args)
    data = _training_data(args.train_manifest)
    enc = _encoder(args, args.train_manifest)
    out = _out(args)
    history = TrainingHistory()
    model = train_inverter(data, enc, tcfg, bank, history, checkpoint_dir=out if tcfg.checkpoint_every else None)
    path = out / f"inverter-seed{tcfg.seed}.ckpt"
    save_checkpoint(model, path, checkpoint_meta(tcfg, enc))
    (out / f"history-seed{tcfg.seed}.json").write_text(
        json.dumps({"epoch_losses": history.epoch_losses, "batch_kinds": history.batch_kinds}, indent=1) + "\n",
        encoding="utf-8",
    )
    print(f"checkpoint {path}; final epoch loss {history.epoch_losses[-1] if history.epoch_losses else float('nan'):.4f}")
    return 0


def cmd_personalize(args: argparse.Namespace) -> int:
    from ..inverter import load_checkpoint
    from ..training import ConceptExamples, personalize_many
    from ..vocab import TokenRegistry
    from .benchmark import RetrievalBenchmark
    from .pipeline import few_shot_ids

    _, pcfg, bank = _configs(args)
    if args.shots is not None:
        pcfg = replace(pcfg, shots=args.shots)
    if args.no_tune:
        pcfg = replace(pcfg, tune_epochs=0)
    bench = RetrievalBenchmark.load(args.bench)
    enc = _encoder(args, args.bench)
    model, _ = load_checkpoint(args.checkpoint)
    symbols = args.symbols or sorted(bench.concepts)
    concepts = []
    for sym in symbols:
        if sym not in bench.concepts:
            raise DataError(f"symbol {sym} not in benchmark {args.bench}")
        info = bench.concepts[sym]
        ids = few_shot_ids(info.train_ids, sym, pcfg.seed, pcfg.shots)
        concepts.append(ConceptExamples(sym, info.type_string, bench.cache.matrix(ids)))
    reg = TokenRegistry(enc.word_dim)
    for tok in personalize_many(concepts, model, enc, pcfg, bank):
        reg.register(tok)
    path = _out(args) / f"tokens-seed{pcfg.seed}-shots{pcfg.shots}.tok"
    reg.save(path)
    print(f"{len(reg)} personalized tokens in {path}")
    return 0


def _pipeline(args: argparse.Namespace, seeds: Sequence[int]):
    from .benchmark import RetrievalBenchmark
    from .pipeline import Pipeline

    tcfg, pcfg, bank = _configs(args)
    bench = RetrievalBenchmark.load(args.bench)
    data = _training_data(args.train_manifest)
    enc = _encoder(args, args.bench, args.train_manifest)
    # a seed without checkpoint or training data fails when a learned method first needs it
    ckpts = _checkpoints(args, seeds)
    return Pipeline(bench, data, enc, tcfg, pcfg, bank, checkpoints=ckpts)


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .pipeline import METHODS
    from .report import format_table, plot_recall_curves

    seeds = _seeds(args)
    methods = args.methods or list(METHODS)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    pipe = _pipeline(args, seeds)
    out = _out(args)
    reports = []
    for m in methods:
        r = pipe.evaluate(m, seeds, args.regime)
        r.write(out / f"{m}-{args.regime}")
        reports.append(r)
    print(format_table(reports))
    if args.plot:
        curves = {m: pipe.recall_curve(m, seeds, args.regime) for m in methods}
        print(f"plot {plot_recall_curves(curves, out / f'recall-{args.regime}.png')}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from ..training import ABLATIONS, run_ablation
    from .report import format_table, pooled_sem

    seeds = _seeds(args)
    flags = args.flags or list(ABLATIONS)
    for f in flags:
        if f not in ABLATIONS:
            raise ConfigError(f"unknown ablation {f!r}; choose from {', '.join(ABLATIONS)}")
    full = _pipeline(args, seeds)
    out = _out(args)
    summary = []
    reports = []
    for f in flags:
        res = run_ablation(f, full.bench, full.data, full.enc, full.tcfg, full.pcfg, seeds, args.regime,
                           full.bank, out_dir=out, full_pipeline=full)
        ref, abl = res["full"], res["ablated"]
        reports += [ref, abl]
        summary.append({"flag": f, "stage": res["stage"], "full": ref.mean(), "ablated": abl.mean(),
                        "gap": ref.mean() - abl.mean(), "pooled_sem": pooled_sem(ref, abl)})
    print(format_table(reports))
    (out / "ablation-summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_shots_sweep(args: argparse.Namespace) -> int:
    from .pipeline import shots_sweep
    from .report import format_table, plot_shots

    seeds = _seeds(args)
    pipe = _pipeline(args, seeds)
    out = _out(args)
    table = {}
    for m in args.methods:
        by_shot = shots_sweep(pipe, m, args.shots, seeds, args.regime)
        for s, r in by_shot.items():
            r.write(out / f"shots-{m}-{s}")
        table[m] = by_shot
    print(format_table([r for by in table.values() for r in by.values()]))
    print(f"plot {plot_shots(table, out / 'shots.png')}")
    return 0


# -- parser --------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="flat JSON config (see README)")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="seed for training and few-shot draws")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory (default: current directory)")
    p.add_argument("--encoder", metavar="PATH", default=d, help="toy encoder spec (encoder.json)")
    p.add_argument("--encoder-url", metavar="URL", default=d, help="external encoder service (inference only)")
    p.add_argument("--real-encoder", metavar="MODEL", default=d, help="CLIP checkpoint name; needs the [clip] extra")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palavra", description="Personalized word embeddings for a frozen dual encoder.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, fn, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        p.set_defaults(fn=fn)
        return p

    def bench_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--bench", required=True, metavar="PATH", help="benchmark manifest")
        p.add_argument("--train-manifest", metavar="PATH", help="training manifest, to train missing inverters")
        p.add_argument("--checkpoint-dir", metavar="DIR", help="directory with inverter-seed<N>.ckpt files")
        p.add_argument("--seeds", type=int, nargs="+", metavar="N")
        p.add_argument("--regime", default="rich", choices=("concept_only", "rich", "detailed"))

    p = command("build-toy-benchmark", cmd_build_toy_benchmark, "write the synthetic toy world")
    p.add_argument("--world", metavar="PATH", help="JSON overrides for the toy world config")

    p = command("cache-embeddings", cmd_cache_embeddings, "encode images into an embedding cache")
    p.add_argument("--items", required=True, metavar="PATH", help='JSON list of {"id", "record"} or {"id", "path"}')
    p.add_argument("--cache", metavar="PATH", help="cache file (default: <out>/cache.pvlc)")

    p = command("train-inverter", cmd_train_inverter, "train the set inverter")
    p.add_argument("--train-manifest", required=True, metavar="PATH")

    p = command("personalize", cmd_personalize, "learn tokens for benchmark concepts")
    p.add_argument("--bench", required=True, metavar="PATH")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--shots", type=int)
    p.add_argument("--symbols", nargs="+", metavar="SYM")
    p.add_argument("--no-tune", action="store_true", help="keep the inverter's initial embedding")

    p = command("evaluate", cmd_evaluate, "retrieval metrics for one or more methods")
    bench_args(p)
    p.add_argument("--methods", nargs="+", metavar="M")
    p.add_argument("--plot", action="store_true", help="also write a Recall@K plot")

    p = command("ablate", cmd_ablate, "compare the full method with ablated variants")
    bench_args(p)
    p.add_argument("--flags", nargs="+", metavar="FLAG")

    p = command("shots-sweep", cmd_shots_sweep, "MRR as a function of the number of shots")
    bench_args(p)
    p.add_argument("--shots", type=int, nargs="+", default=[1, 2, 5, 10])
    p.add_argument("--methods", nargs="+", default=["palavra"], metavar="M")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.fn(args) or 0)
    except (ConfigError, PreconditionError, NotDifferentiableError) as e:
        print(f"palavra: error: {e}", file=sys.stderr)
        return 2
    except (DataError, TransportError) as e:
        print(f"palavra: error: {e}", file=sys.stderr)
        return 3
    except PalavraError as e:
        print(f"palavra: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
