"""Persistent embedding cache.

File layout (all little-endian)::

    b"PVLC" | u32 version=1 | u32 dim | u32 count | count x dim float32

plus a sidecar ``<path>.ids`` text file holding one item id per line (UTF-8),
row ``i`` of the matrix belonging to line ``i``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Iterator

import numpy as np

from .errors import DataError, InputError, PreconditionError

if TYPE_CHECKING:
    from .encoder import FrozenEncoderPair

MAGIC = b"PVLC"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def ids_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


class EmbeddingCache:
    def __init__(self, path: str | Path, dim: int):
        if dim <= 0:
            raise PreconditionError("cache dim must be positive")
        self.path = Path(path)
        self.dim = int(dim)
        self.entries: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def put(self, item_id: str, vector: Any) -> None:
        if "\n" in item_id or "\r" in item_id:
            raise InputError(f"item id may not contain line breaks: {item_id!r}")
        v = np.asarray(vector, dtype="<f4").reshape(-1)
        if v.shape != (self.dim,):
            raise InputError(f"vector for {item_id!r} has dim {v.size}, cache dim is {self.dim}")
        self.entries[item_id] = v.copy()

    def get(self, item_id: str) -> np.ndarray:
        try:
            return self.entries[item_id]
        except KeyError:
            raise DataError(f"item {item_id!r} not in cache {self.path}") from None

    def matrix(self, item_ids: Iterable[str]) -> np.ndarray:
        ids = list(item_ids)
        if not ids:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.get(i) for i in ids]).astype(np.float32)

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        ids = list(self.entries)
        with open(self.path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.dim, len(ids)))
            for i in ids:
                fh.write(self.entries[i].astype("<f4").tobytes())
        with open(ids_path(self.path), "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(i + "\n" for i in ids)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingCache":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, version, dim, count = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        body = raw[_HEADER.size :]
        if len(body) != count * dim * 4:
            raise DataError(f"{path}: expected {count} rows of dim {dim}, body has {len(body)} bytes")
        ids = ids_path(path).read_text(encoding="utf-8").splitlines()
        if len(ids) != count:
            raise DataError(f"{path}: {count} rows but {len(ids)} ids in sidecar")
        rows = np.frombuffer(body, dtype="<f4").reshape(count, dim) if count else np.zeros((0, dim), "<f4")
        cache = cls(path, dim)
        for i, row in zip(ids, rows):
            cache.entries[i] = row.copy()
        return cache


def cache_embeddings(
    items: Iterable[tuple[str, Any]],
    encoder: "FrozenEncoderPair",
    cache_path: str | Path,
) -> EmbeddingCache:
    """Encode image records into the cache at ``cache_path``.

    Items already present in an existing cache are not re-encoded, so a
    re-run with the same inputs leaves the file byte-identical.
    """
    items = list(items)
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise PreconditionError(f"duplicate item ids: {dupes}")
    path = Path(cache_path)
    if path.exists():
        cache = EmbeddingCache.load(path)
        if cache.dim != encoder.output_dim:
            raise DataError(f"existing cache {path} has dim {cache.dim}, encoder produces dim {encoder.output_dim}")
    else:
        cache = EmbeddingCache(path, encoder.output_dim)
    for item_id, record in items:
        if item_id not in cache:
            cache.put(item_id, encoder.encode_image(record))
    cache.save()
    return cache
