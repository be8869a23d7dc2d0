"""Permutation-invariant set inverter and the text-to-image alignment matrix."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .errors import InputError, PreconditionError


def _mlp(d_in: int, d_hidden: int, d_out: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_hidden, d_out))


class InverterModel(nn.Module):
    """Deep-sets map from a set of image embeddings to one word embedding.

    ``rho(mean_k phi(z_k))``, where ``phi`` and ``rho`` are two-layer ReLU
    networks with dropout after the hidden layer. ``A`` maps text embeddings
    toward the image region of the output space; it starts at the identity.
    """

    def __init__(self, output_dim: int, word_dim: int, hidden_dim: int = 4096, dropout_rate: float = 0.25):
        super().__init__()
        if not 0.0 <= dropout_rate < 1.0:
            raise PreconditionError("dropout_rate must lie in [0, 1)")
        self.output_dim = output_dim
        self.word_dim = word_dim
        self.hidden_dim = hidden_dim
        self.dropout_rate = dropout_rate
        self.phi = _mlp(output_dim, hidden_dim, hidden_dim, dropout_rate)
        self.rho = _mlp(hidden_dim, hidden_dim, word_dim, dropout_rate)
        self.A = nn.Parameter(torch.eye(output_dim))

    def forward(self, sets: torch.Tensor) -> torch.Tensor:
        """``(C, K, output_dim) -> (C, word_dim)``."""
        if sets.ndim != 3 or sets.shape[-1] != self.output_dim:
            raise InputError(f"expected (C, K, {self.output_dim}) input, got {tuple(sets.shape)}")
        if sets.shape[1] == 0:
            raise PreconditionError("cannot invert an empty set")
        return self.rho(self.phi(sets).mean(dim=1))

    def invert_set(self, zs: Any, mode: str = "eval") -> torch.Tensor:
        """One set of unit vectors to a single word-space vector."""
        if mode not in ("train", "eval"):
            raise PreconditionError(f"mode must be 'train' or 'eval', not {mode!r}")
        x = torch.as_tensor(np.asarray(zs), dtype=self.A.dtype)
        if x.ndim != 2 or x.shape[0] == 0:
            raise PreconditionError("invert_set needs a non-empty (K, d) set")
        if x.shape[1] != self.output_dim:
            raise InputError(f"set elements have dim {x.shape[1]}, expected {self.output_dim}")
        was_training = self.training
        self.train(mode == "train")
        try:
            return self(x[None])[0]
        finally:
            self.train(was_training)

    def align(self, u: Any) -> torch.Tensor:
        """``A @ u`` (no renormalization); accepts ``(d,)`` or ``(N, d)``."""
        x = torch.as_tensor(np.asarray(u) if not torch.is_tensor(u) else u, dtype=self.A.dtype)
        if x.shape[-1] != self.output_dim:
            raise InputError(f"align expects dim {self.output_dim}, got {x.shape[-1]}")
        return x @ self.A.T

    def config(self) -> dict[str, Any]:
        return {
            "output_dim": self.output_dim,
            "word_dim": self.word_dim,
            "hidden_dim": self.hidden_dim,
            "dropout_rate": self.dropout_rate,
        }

    def digest(self) -> str:
        return state_digest(self)


def state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: InverterModel, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    record = {"kind": "inverter", "model": model.config(), **(meta or {})}
    save_archive(path, tensors, record)


def load_checkpoint(path: str | Path) -> tuple[InverterModel, dict[str, Any]]:
    tensors, meta = load_archive(path)
    model = InverterModel(**meta["model"])
    model.load_state_dict({k: torch.from_numpy(v.astype(np.float32)) for k, v in tensors.items()})
    model.eval()
    return model, meta


def config_digest(cfg: Any) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]
