import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from palavra.errors import InputError, PreconditionError
from palavra.evalkit.metrics import mrr, random_mrr_expectation, rank_gallery, recall_at_k, target_rank


def brute_rank(q, gallery, ids):
    def key(i):
        g = gallery[i]
        sim = sum(a * b for a, b in zip(q, g)) / (math.sqrt(sum(a * a for a in g)) * math.sqrt(sum(a * a for a in q)))
        return (-sim, ids[i])

    return [ids[i] for i in sorted(range(len(ids)), key=key)]


def test_examples():
    assert mrr([1, 1, 1]) == 1.0
    assert mrr([1, 2, 4]) == pytest.approx(0.583333333, abs=1e-9)
    assert recall_at_k([1, 2, 4], 1) == pytest.approx(1 / 3)
    assert recall_at_k([1, 2, 4], 5) == 1.0
    assert all(recall_at_k([1] * 5, k) == 1.0 for k in (1, 5, 10))


def test_rank_gallery_trivial():
    assert rank_gallery(np.ones(3), np.ones((1, 3)), ["only"]) == ["only"]
    g = np.eye(4)
    assert rank_gallery(g[2], g, ["a", "b", "c", "d"])[0] == "c"


def test_ties_go_to_ascending_id():
    g = np.tile([1.0, 0.0], (4, 1))
    assert rank_gallery(np.array([1.0, 0.0]), g, ["d", "b", "a", "c"]) == ["a", "b", "c", "d"]


def test_matches_brute_force_on_1000_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        # coarse values make exact ties common
        gallery = rng.integers(-2, 3, size=(n, 3)).astype(np.float64)
        gallery[(gallery == 0).all(axis=1)] = [1.0, 0.0, 0.0]
        q = rng.integers(-2, 3, size=3).astype(np.float64)
        q = q if q.any() else np.array([0.0, 1.0, 0.0])
        ids = [f"item-{k:03d}" for k in rng.permutation(n)]
        assert rank_gallery(q, gallery, ids) == brute_rank(q, gallery, ids)

        ranks = rng.integers(1, 101, size=int(rng.integers(1, 50))).tolist()
        # exact rational sum of the float reciprocals, rounded once
        assert mrr(ranks) == float(sum(Fraction(1.0 / r) for r in ranks)) / len(ranks)
        k = int(rng.integers(1, 20))
        assert recall_at_k(ranks, k) == sum(r <= k for r in ranks) / len(ranks)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 200), min_size=1, max_size=60))
def test_metric_bounds(ranks):
    m = mrr(ranks)
    prev = 0.0
    for k in range(1, 30):
        r = recall_at_k(ranks, k)
        assert 0.0 <= r <= 1.0 and r >= prev
        prev = r
        assert m <= r + (1 - r) / (k + 1) + 1e-12
    assert recall_at_k(ranks, 1) <= m + 1e-12


def test_random_expectation():
    assert random_mrr_expectation(34) == pytest.approx(sum(1 / r for r in range(1, 35)) / 34)
    assert random_mrr_expectation(34) == pytest.approx(0.121, abs=5e-4)
    assert random_mrr_expectation(1) == 1.0
    # every rank equally likely: the expectation is the mean over all ranks
    assert random_mrr_expectation(7) == pytest.approx(mrr(list(range(1, 8))))


def test_errors():
    with pytest.raises(PreconditionError):
        mrr([])
    with pytest.raises(PreconditionError):
        mrr([1, 0])
    with pytest.raises(PreconditionError):
        recall_at_k([1, 2], 0)
    with pytest.raises(PreconditionError):
        recall_at_k([-1], 3)
    with pytest.raises(PreconditionError):
        rank_gallery(np.ones(3), np.zeros((0, 3)), [])
    with pytest.raises(InputError):
        rank_gallery(np.ones(2), np.ones((2, 3)), ["a", "b"])
    with pytest.raises(InputError):
        rank_gallery(np.ones(3), np.ones((2, 3)), ["a"])
    with pytest.raises(PreconditionError):
        target_rank(["a", "b"], "c")
    assert target_rank(["a", "b"], "b") == 2
