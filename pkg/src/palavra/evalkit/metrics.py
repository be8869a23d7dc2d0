"""Ranking and retrieval metrics."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import InputError, PreconditionError


def rank_gallery(q: np.ndarray, gallery: np.ndarray, item_ids: Sequence[str]) -> list[str]:
    """Item ids by descending cosine similarity to ``q``; ties by ascending id."""
    gallery = np.asarray(gallery, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise PreconditionError("gallery must be a non-empty (N, d) matrix")
    if q.shape != (gallery.shape[1],):
        raise InputError(f"query dim {q.shape} does not match gallery dim {gallery.shape[1]}")
    if len(item_ids) != gallery.shape[0]:
        raise InputError("one item id per gallery row is required")
    sims = (gallery @ q) / (np.linalg.norm(gallery, axis=1) * np.linalg.norm(q))
    order = np.lexsort((np.asarray(item_ids, dtype=object).astype(str), -sims))
    return [item_ids[i] for i in order]


def target_rank(ranking: Sequence[str], target: str) -> int:
    try:
        return list(ranking).index(target) + 1
    except ValueError:
        raise PreconditionError(f"target {target!r} is not in the ranking") from None


def _check_ranks(ranks: Sequence[int]) -> np.ndarray:
    r = np.asarray(ranks)
    if r.size == 0:
        raise PreconditionError("no ranks given")
    if (r < 1).any():
        raise PreconditionError("ranks are 1-based; got a rank below 1")
    return r


def mrr(ranks: Sequence[int]) -> float:
    r = _check_ranks(ranks)
    # correctly rounded sum, so the result does not depend on summation order
    return math.fsum(1.0 / r) / r.size


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if k < 1:
        raise PreconditionError("k must be >= 1")
    r = _check_ranks(ranks)
    return float(np.mean(r <= k))


def random_mrr_expectation(n: int) -> float:
    """Expected MRR of a uniformly random ranking over ``n`` items: ``H_n / n``."""
    return float(np.sum(1.0 / np.arange(1, n + 1)) / n)
