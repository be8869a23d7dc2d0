import os
import sys

# every encoder output is asserted unit-norm while the tests run
os.environ.setdefault("PALAVRA_CHECK_NORMS", "1")

import numpy as np
import pytest
import torch

from palavra.toy import ToyWorldConfig, build_toy_world, toy_train_config
from palavra.training import TrainingHistory, train_inverter

SMALL_WORLD = ToyWorldConfig(
    n_vocab_types=120,
    n_train_types=24,
    images_per_type=12,
    n_bench_types=3,
    n_concepts=8,
    train_shots=10,
)


def small_train_config(**overrides):
    base = dict(epochs=20, hidden_dim=64, concepts_per_batch=8, batch_size=32)
    return toy_train_config(**{**base, **overrides})


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    return build_toy_world(SMALL_WORLD, tmp_path_factory.mktemp("small_world"))


@pytest.fixture(scope="session")
def trained_small(small_world):
    history = TrainingHistory()
    model = train_inverter(small_world.data, small_world.encoder, small_train_config(), history=history)
    return model, history


def fd_gradient(f, x: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Central finite differences of scalar ``f`` at ``x`` (float64, every coordinate)."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(f())
            flat[i] = old - h
            down = float(f())
            flat[i] = old
            g.view(-1)[i] = (up - down) / (2 * h)
    return g


def grad_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, mask=None) -> float:
    """Normwise relative error ``|a - n| / max(|a|, |n|)`` over the entries kept by ``mask``."""
    a = analytic.detach().reshape(-1).double()
    n = numeric.reshape(-1).double()
    if mask is not None:
        a, n = a[mask.reshape(-1)], n[mask.reshape(-1)]
    scale = max(a.norm().item(), n.norm().item())
    return (a - n).norm().item() / scale if scale > 0 else 0.0


def assert_grad_close(analytic, f, x, rtol: float = 1e-4, floor: float = 1e-6, mask=None):
    """Central differences at step 1e-3, normwise; and elementwise at step 1e-4.

    Elementwise at 1e-3 the O(h^2) truncation error (about 1e-6 absolute
    with temperature-scaled logits) swamps the smallest components.
    """
    err = grad_relative_error(analytic, fd_gradient(f, x, 1e-3), mask)
    assert err < rtol, f"normwise relative error {err:.3e} at step 1e-3"
    fine = fd_gradient(f, x, 1e-4)
    a = analytic.detach().reshape(-1).double()
    n = fine.reshape(-1)
    keep = (a.abs() > floor) | (n.abs() > floor)
    if mask is not None:
        keep &= mask.reshape(-1)
    assert keep.any()
    rel = (a[keep] - n[keep]).abs() / torch.maximum(a[keep].abs(), n[keep].abs())
    assert rel.max().item() < rtol, f"elementwise relative error {rel.max().item():.3e} at step 1e-4"


def random_unit(rng: np.random.Generator, *shape: int) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
