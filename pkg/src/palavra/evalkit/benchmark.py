"""Retrieval benchmark manifests.

Manifest schema (JSON)::

    {
      "split": "val" | "test",
      "cache": "<path to embedding cache, relative to the manifest>",
      "gallery": [{"id": str}],
      "concepts": [{"symbol": "[C01]", "type": str, "train_ids": [str]}],
      "queries": [{"id": str, "symbol": "[C01]", "caption": str,
                   "detailed_caption": str (optional), "target": str}]
    }

Gallery and training embeddings are looked up in the cache by id. Training
ids must not appear in the gallery.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..cache import EmbeddingCache
from ..errors import ConfigError, DataError
from ..vocab import SYMBOL_RE

REGIMES = ("concept_only", "rich", "detailed")
CONCEPT_ONLY_TEMPLATE = "A photo of a {symbol}"


@dataclass
class Query:
    id: str
    symbol: str
    caption: str
    target: str
    detailed_caption: str | None = None

    def text(self, regime: str) -> str:
        if regime == "concept_only":
            return CONCEPT_ONLY_TEMPLATE.format(symbol=self.symbol)
        if regime == "rich":
            return self.caption
        if regime == "detailed":
            if self.detailed_caption is None:
                raise DataError(f"query {self.id} has no detailed caption")
            return self.detailed_caption
        raise ConfigError(f"unknown query regime {regime!r}; choose from {', '.join(REGIMES)}")


@dataclass
class ConceptInfo:
    type_string: str
    train_ids: list[str]


@dataclass
class RetrievalBenchmark:
    gallery: list[str]
    queries: list[Query]
    concepts: dict[str, ConceptInfo]
    cache: EmbeddingCache
    split: str = "test"
    path: Path | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.validate()
        self._gallery = self.cache.matrix(self.gallery)

    def validate(self) -> None:
        if self.split not in ("val", "test"):
            raise DataError(f"split must be 'val' or 'test', not {self.split!r}")
        if not self.gallery:
            raise DataError("empty gallery")
        gallery = set(self.gallery)
        if len(gallery) != len(self.gallery):
            raise DataError("duplicate gallery ids")
        for q in self.queries:
            if q.target not in gallery:
                raise DataError(f"query {q.id}: target {q.target!r} not in gallery")
            if q.symbol not in self.concepts:
                raise DataError(f"query {q.id}: symbol {q.symbol} has no concept entry")
        for sym, info in self.concepts.items():
            if not SYMBOL_RE.fullmatch(sym):
                raise DataError(f"bad concept symbol {sym!r}")
            overlap = gallery.intersection(info.train_ids)
            if overlap:
                raise DataError(f"{sym}: training ids overlap the gallery: {sorted(overlap)[:5]}")
        for i in list(self.gallery) + [t for c in self.concepts.values() for t in c.train_ids]:
            if i not in self.cache:
                raise DataError(f"item {i!r} missing from the embedding cache")

    @property
    def gallery_matrix(self) -> np.ndarray:
        return self._gallery

    def type_map(self) -> dict[str, str]:
        return {s: c.type_string for s, c in self.concepts.items()}

    def to_json(self, cache_ref: str) -> dict[str, Any]:
        return {
            "split": self.split,
            "cache": cache_ref,
            "gallery": [{"id": i} for i in self.gallery],
            "concepts": [
                {"symbol": s, "type": c.type_string, "train_ids": list(c.train_ids)}
                for s, c in self.concepts.items()
            ],
            "queries": [
                {
                    "id": q.id,
                    "symbol": q.symbol,
                    "caption": q.caption,
                    **({"detailed_caption": q.detailed_caption} if q.detailed_caption is not None else {}),
                    "target": q.target,
                }
                for q in self.queries
            ],
        }

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalBenchmark":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            cache = EmbeddingCache.load(path.parent / doc["cache"])
            gallery = [str(g["id"]) for g in doc["gallery"]]
            concepts = {c["symbol"]: ConceptInfo(c["type"], [str(t) for t in c["train_ids"]]) for c in doc["concepts"]}
            queries = [
                Query(str(q["id"]), q["symbol"], q["caption"], str(q["target"]), q.get("detailed_caption"))
                for q in doc["queries"]
            ]
            split = doc.get("split", "test")
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
            raise DataError(f"bad benchmark manifest {path}: {e}") from None
        return cls(gallery, queries, concepts, cache, split, path)
