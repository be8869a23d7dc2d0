"""Metrics reports and plots."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

RECALL_KS = (1, 5, 10)
METRICS = ("mrr",) + tuple(f"recall@{k}" for k in RECALL_KS)

TOY_BANNER = (
    "NOTE: toy-encoder run. Absolute published numbers (e.g. MRR 28.4 on DeepFashion2 and 61.2 on "
    "YTVOS) require the original CLIP ViT-B/32 encoder and datasets and are not reproduced here; "
    "only the ordering between methods is comparable. See README, 'real encoder'."
)


def sem(values: Sequence[float]) -> float:
    """Standard error of the mean; 0.0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class MetricsReport:
    method: str
    regime: str
    per_seed: list[dict[str, Any]]
    split: str = "test"
    shots: int | None = None
    banner: str | None = TOY_BANNER
    digests: dict[str, str] = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return [int(r["seed"]) for r in self.per_seed]

    def values(self, metric: str = "mrr") -> list[float]:
        return [float(r[metric]) for r in self.per_seed]

    def mean(self, metric: str = "mrr") -> float:
        return float(np.mean(self.values(metric)))

    def sem(self, metric: str = "mrr") -> float:
        return sem(self.values(metric))

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "method": self.method,
            "regime": self.regime,
            "split": self.split,
            "shots": self.shots,
            "seeds": self.seeds,
            "per_seed": self.per_seed,
            "mean": {m: self.mean(m) for m in METRICS},
            "sem": {m: self.sem(m) for m in METRICS},
            "digests": self.digests,
        }
        if self.banner:
            doc["banner"] = self.banner
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "MetricsReport":
        return cls(
            doc["method"], doc["regime"], doc["per_seed"], doc.get("split", "test"),
            doc.get("shots"), doc.get("banner"), doc.get("digests", {}),
        )

    def summary(self) -> str:
        parts = [f"{m} {100 * self.mean(m):.1f} ± {100 * self.sem(m):.1f}" for m in METRICS]
        return f"{self.method:<28} [{self.regime}] " + "  ".join(parts)

    def write(self, stem: str | Path) -> Path:
        path = Path(stem).with_suffix(".json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def pooled_sem(a: MetricsReport, b: MetricsReport, metric: str = "mrr") -> float:
    """``sqrt(sem_a^2 + sem_b^2)``: the standard error of the difference of means."""
    return math.hypot(a.sem(metric), b.sem(metric))


def format_table(reports: Sequence[MetricsReport]) -> str:
    lines = [r.summary() for r in reports]
    banners = {r.banner for r in reports if r.banner}
    return "\n".join(sorted(banners) + lines)


def plot_recall_curves(curves: dict[str, Sequence[float]], path: str | Path) -> Path:
    """One Recall@K curve per method; ``curves[name][k-1]`` is Recall@k."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, ys in curves.items():
        ax.plot(range(1, len(ys) + 1), [100 * y for y in ys], label=name)
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K (%)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None, "CreationDate": None} if path.suffix == ".pdf" else {"Software": None})
    plt.close(fig)
    return path


def plot_shots(table: dict[str, dict[int, MetricsReport]], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, by_shot in table.items():
        shots = sorted(by_shot)
        means = [100 * by_shot[s].mean() for s in shots]
        errs = [100 * by_shot[s].sem() for s in shots]
        ax.errorbar(shots, means, yerr=errs, label=name, capsize=3)
    ax.set_xlabel("shots")
    ax.set_ylabel("MRR (%)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
