"""Per-seed evaluation of the personalized method and the non-learned baselines."""
from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import asdict, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..encoder import FrozenEncoderPair
from ..errors import ConfigError, DataError
from ..inverter import InverterModel, config_digest, load_checkpoint, save_checkpoint
from ..textaug import PromptBank
from ..training import (
    ConceptExamples,
    InverterTrainConfig,
    PersonalizeConfig,
    TrainingDataset,
    checkpoint_meta,
    personalize_many,
    train_inverter,
)
from ..vocab import TokenRegistry, encode_query, substitute_types
from .benchmark import RetrievalBenchmark
from .metrics import mrr, rank_gallery, recall_at_k, target_rank
from .report import RECALL_KS, MetricsReport

logger = logging.getLogger(__name__)

METHODS = ("palavra", "palavra_no_tuning", "text_only", "avg_im", "im_and_text", "random")
BASELINES = ("text_only", "avg_im", "im_and_text", "random")
# methods whose query vectors depend on the few-shot training subsets
USES_SUBSETS = ("palavra", "palavra_no_tuning", "avg_im", "im_and_text")


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return (v / np.linalg.norm(v)).astype(np.float32)


def few_shot_ids(train_ids: Sequence[str], symbol: str, seed: int, shots: int) -> list[str]:
    """The first ``shots`` ids of a seeded permutation; smaller subsets nest in larger ones."""
    if shots > len(train_ids):
        raise DataError(f"{symbol}: {shots} shots requested, only {len(train_ids)} training images")
    rng = np.random.default_rng([int(seed), zlib.crc32(symbol.encode("utf-8")), 1])
    order = rng.permutation(len(train_ids))
    return [train_ids[i] for i in order[:shots]]


class Pipeline:
    """Trains (or loads) one inverter per seed and evaluates methods on a benchmark.

    Inverters, registries and few-shot subsets are memoized per seed, so
    every method sees the same subsets and the same trained model.
    """

    def __init__(
        self,
        bench: RetrievalBenchmark,
        data: TrainingDataset | None,
        enc: FrozenEncoderPair,
        tcfg: InverterTrainConfig,
        pcfg: PersonalizeConfig,
        bank: PromptBank | None = None,
        variant: str = "full",
        checkpoints: Mapping[int, str | Path] | None = None,
        checkpoint_dir: str | Path | None = None,
    ):
        self.bench = bench
        self.data = data
        self.enc = enc
        self.tcfg = tcfg
        self.pcfg = pcfg
        self.bank = PromptBank() if bank is None else bank
        self.variant = variant
        self.checkpoints = dict(checkpoints or {})
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self._models: dict[int, InverterModel] = {}
        self._registries: dict[tuple[int, int, bool], TokenRegistry] = {}

    # -- models and tokens -------------------------------------------------

    def model(self, seed: int) -> InverterModel:
        if seed not in self._models:
            if seed in self.checkpoints:
                model, _ = load_checkpoint(self.checkpoints[seed])
            elif self.data is not None:
                cfg = replace(self.tcfg, seed=seed)
                logger.info("training inverter (%s) for seed %d", self.variant, seed)
                model = train_inverter(self.data, self.enc, cfg, self.bank)
                if self.checkpoint_dir is not None:
                    path = self.checkpoint_dir / f"inverter-{self.variant}-seed{seed}.ckpt"
                    save_checkpoint(model, path, checkpoint_meta(cfg, self.enc, variant=self.variant))
            else:
                raise ConfigError(f"no inverter checkpoint for seed {seed} and no training data to train one")
            self._models[seed] = model
        return self._models[seed]

    def subset(self, symbol: str, seed: int, shots: int) -> list[str]:
        return few_shot_ids(self.bench.concepts[symbol].train_ids, symbol, seed, shots)

    def subset_digest(self, seed: int, shots: int) -> str:
        h = hashlib.sha256()
        for sym in sorted(self.bench.concepts):
            h.update(sym.encode())
            for i in self.subset(sym, seed, shots):
                h.update(b"\0" + i.encode())
        return h.hexdigest()[:16]

    def registry(self, seed: int, shots: int, tuned: bool) -> TokenRegistry:
        key = (seed, shots, tuned)
        if key not in self._registries:
            pcfg = replace(self.pcfg, seed=seed, shots=shots, tune_epochs=self.pcfg.tune_epochs if tuned else 0)
            concepts = [
                ConceptExamples(sym, info.type_string, self.bench.cache.matrix(self.subset(sym, seed, shots)))
                for sym, info in sorted(self.bench.concepts.items())
            ]
            reg = TokenRegistry(self.enc.word_dim)
            for tok in personalize_many(concepts, self.model(seed), self.enc, pcfg, self.bank):
                reg.register(tok)
            self._registries[key] = reg
        return self._registries[key]

    # -- scoring -------------------------------------------------------------

    def _avg_im(self, symbol: str, seed: int, shots: int) -> np.ndarray:
        if not self.bench.concepts[symbol].train_ids:
            raise ConfigError(f"{symbol} has no training images; image-based methods need them")
        return _unit(self.bench.cache.matrix(self.subset(symbol, seed, shots)).mean(axis=0))

    def query_vector(self, method: str, query_text: str, symbol: str, seed: int, shots: int) -> np.ndarray:
        types = self.bench.type_map()
        if method in ("palavra", "palavra_no_tuning"):
            return encode_query(query_text, self.registry(seed, shots, method == "palavra"), self.enc)
        if method == "text_only":
            return self.enc.encode_sentence(substitute_types(query_text, types))
        if method == "avg_im":
            return self._avg_im(symbol, seed, shots)
        if method == "im_and_text":
            text = self.enc.encode_sentence(substitute_types(query_text, types))
            return _unit(self._avg_im(symbol, seed, shots).astype(np.float64) + text)
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")

    def ranks(self, method: str, seed: int, regime: str, shots: int) -> list[int]:
        ids = self.bench.gallery
        out = []
        for q in self.bench.queries:
            if method == "random":
                rng = np.random.default_rng([int(seed), zlib.crc32(q.id.encode("utf-8")), 2])
                ranking = [ids[i] for i in rng.permutation(len(ids))]
            else:
                v = self.query_vector(method, q.text(regime), q.symbol, seed, shots)
                ranking = rank_gallery(v, self.bench.gallery_matrix, ids)
            out.append(target_rank(ranking, q.target))
        return out

    def evaluate(self, method: str, seeds: Iterable[int], regime: str = "rich", shots: int | None = None) -> MetricsReport:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        shots = shots or self.pcfg.shots
        per_seed = []
        subsets = {}
        for seed in seeds:
            r = self.ranks(method, seed, regime, shots)
            row = {"seed": int(seed), "mrr": mrr(r), "n_queries": len(r)}
            for k in RECALL_KS:
                row[f"recall@{k}"] = recall_at_k(r, k)
            per_seed.append(row)
            if method in USES_SUBSETS:
                subsets[str(seed)] = self.subset_digest(seed, shots)
        digests = {
            "train_config": config_digest(asdict(self.tcfg)),
            "personalize_config": config_digest(asdict(self.pcfg)),
            "encoder": self.enc.digest()[:16],
            **{f"subset_seed{s}": d for s, d in subsets.items()},
        }
        return MetricsReport(method, regime, per_seed, self.bench.split, shots, digests=digests)

    def recall_curve(self, method: str, seeds: Iterable[int], regime: str, shots: int | None = None, kmax: int = 20) -> list[float]:
        shots = shots or self.pcfg.shots
        ranks = [r for s in seeds for r in self.ranks(method, s, regime, shots)]
        return [recall_at_k(ranks, k) for k in range(1, min(kmax, len(self.bench.gallery)) + 1)]


def evaluate(
    method: str,
    bench: RetrievalBenchmark,
    seeds: Sequence[int],
    regime: str,
    enc: FrozenEncoderPair,
    tcfg: InverterTrainConfig | None = None,
    pcfg: PersonalizeConfig | None = None,
    data: TrainingDataset | None = None,
    checkpoints: Mapping[int, str | Path] | None = None,
    bank: PromptBank | None = None,
    out_dir: str | Path | None = None,
) -> MetricsReport:
    """Evaluate one method over ``seeds``; writes ``<out_dir>/<method>-<regime>.json`` when asked."""
    pipe = Pipeline(bench, data, enc, tcfg or InverterTrainConfig(), pcfg or PersonalizeConfig(), bank, checkpoints=checkpoints)
    report = pipe.evaluate(method, seeds, regime)
    if out_dir is not None:
        report.write(Path(out_dir) / f"{method}-{regime}")
    return report


def run_baseline(
    name: str,
    bench: RetrievalBenchmark,
    enc: FrozenEncoderPair,
    regime: str = "rich",
    seeds: Sequence[int] = (0,),
    shots: int | None = None,
    pcfg: PersonalizeConfig | None = None,
) -> MetricsReport:
    """Metrics of one non-learned baseline; needs no inverter or training data."""
    if name not in BASELINES:
        raise ConfigError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
    pipe = Pipeline(bench, None, enc, InverterTrainConfig(), pcfg or PersonalizeConfig())
    return pipe.evaluate(name, seeds, regime, shots)


def shots_sweep(
    pipe: Pipeline,
    method: str,
    shot_counts: Sequence[int],
    seeds: Sequence[int],
    regime: str = "rich",
) -> dict[int, MetricsReport]:
    available = min(len(c.train_ids) for c in pipe.bench.concepts.values())
    if max(shot_counts) > available:
        raise DataError(f"{max(shot_counts)} shots requested; some concept has only {available} training images")
    return {s: pipe.evaluate(method, seeds, regime, shots=s) for s in shot_counts}
