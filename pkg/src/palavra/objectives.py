"""Loss functions for training the set inverter and tuning concept embeddings.

All similarities are cosine similarities divided by ``temp``; softmax
denominators go through ``logsumexp`` so that ``temp=0.25`` at similarity
+-1 stays well conditioned.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import NumericError, PreconditionError

DEFAULT_TEMP = 0.25
DEFAULT_LAMBDA_GT = 512.0


def _finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite value in loss input")


def _cos_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T


def cycle_loss_per_concept(zbar: torch.Tensor, zhat: torch.Tensor, temp: float = DEFAULT_TEMP) -> torch.Tensor:
    """Two-term symmetric contrastive loss for every concept in the batch.

    ``zbar[c]`` is the (normalized) mean image embedding of concept ``c`` and
    ``zhat[c]`` the embedding of a template sentence carrying its predicted
    word embedding. Returns shape ``(C,)``.
    """
    if zbar.ndim != 2 or zbar.shape != zhat.shape:
        raise PreconditionError(f"zbar and zhat must both be (C, d); got {tuple(zbar.shape)} and {tuple(zhat.shape)}")
    if zbar.shape[0] == 0:
        raise PreconditionError("cycle loss needs at least one concept")
    if temp <= 0:
        raise PreconditionError("temp must be positive")
    _finite(zbar, zhat)
    c = zbar.shape[0]
    s_bh = _cos_matrix(zbar, zhat) / temp  # s(zbar_i, zhat_j)
    s_hh = _cos_matrix(zhat, zhat) / temp
    s_bb = _cos_matrix(zbar, zbar) / temp
    off = ~torch.eye(c, dtype=torch.bool, device=zbar.device)
    neg_inf = torch.finfo(s_bh.dtype).min
    pos = torch.diagonal(s_bh)
    # term 1: zbar_c against every zhat, plus zhat_c against the other zhats
    den1 = torch.logsumexp(torch.cat([s_bh, s_hh.masked_fill(~off, neg_inf)], dim=1), dim=1)
    # term 2: zhat_c against every zbar, plus zbar_c against the other zbars
    den2 = torch.logsumexp(torch.cat([s_bh.T, s_bb.masked_fill(~off, neg_inf)], dim=1), dim=1)
    return (den1 - pos) + (den2 - pos)


def cycle_loss(zbar: torch.Tensor, zhat: torch.Tensor, temp: float = DEFAULT_TEMP) -> torch.Tensor:
    """Mean over concepts of :func:`cycle_loss_per_concept`."""
    return cycle_loss_per_concept(zbar, zhat, temp).mean()


def gt_regularizer(w0: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Negative cosine between predicted and ground-truth word embeddings (row-wise)."""
    _finite(w0, g)
    nw, ng = w0.norm(dim=-1), g.norm(dim=-1)
    if (nw == 0).any() or (ng == 0).any():
        raise NumericError("zero vector in ground-truth regularizer")
    return -(w0 * g).sum(dim=-1) / (nw * ng)


def total_inverter_loss(
    zbar: torch.Tensor,
    zhat: torch.Tensor,
    w0s: torch.Tensor,
    gs: torch.Tensor,
    lambda_gt: float = DEFAULT_LAMBDA_GT,
    temp: float = DEFAULT_TEMP,
    use_cycle: bool = True,
) -> torch.Tensor:
    """``cycle_loss + lambda_gt * mean(gt_regularizer)``.

    ``use_cycle=False`` drops the cycle term (ground-truth-only training).
    """
    if w0s.shape[0] != zbar.shape[0] or gs.shape != w0s.shape:
        raise PreconditionError("need one (w0, g) pair per concept")
    gt = gt_regularizer(w0s, gs).mean()
    if not use_cycle:
        return lambda_gt * gt
    return cycle_loss(zbar, zhat, temp) + lambda_gt * gt


def personalization_loss(
    zhat: torch.Tensor,
    zbar: torch.Tensor,
    eta: torch.Tensor,
    temp: float = DEFAULT_TEMP,
) -> torch.Tensor:
    """Contrast the template embedding against the image mean and the concept type.

    ``-log(e^{s(zbar,zhat)/T} / (e^{s(zbar,zhat)/T} + 2 e^{s(eta,zhat)/T}))``,
    computed row-wise over any leading batch dimensions.
    """
    if temp <= 0:
        raise PreconditionError("temp must be positive")
    _finite(zhat, zbar, eta)
    s_pos = F.cosine_similarity(zbar, zhat, dim=-1, eps=0.0) / temp
    s_neg = F.cosine_similarity(eta, zhat, dim=-1, eps=0.0) / temp
    return torch.logsumexp(torch.stack([s_pos, s_neg + math.log(2.0)]), dim=0) - s_pos


def alignment_loss(v: torch.Tensor, u: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Mean squared L2 distance between image embeddings ``v`` and mapped text embeddings ``A u``."""
    if v.ndim != 2 or v.shape[0] == 0:
        raise PreconditionError("alignment loss needs a non-empty (N, d) batch of pairs")
    if v.shape != u.shape:
        raise PreconditionError(f"image and text batches differ in shape: {tuple(v.shape)} vs {tuple(u.shape)}")
    _finite(v, u, A)
    return ((v - u @ A.T) ** 2).sum(dim=1).mean()
