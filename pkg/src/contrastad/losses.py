"""Contrastive and feature-adversarial objectives for stage-1 fine-tuning.

All functions are differentiable torch expressions so they can drive
backpropagation, but they accept plain floats as well. Distances are squared
Euclidean normalized by the feature dimension, which keeps loss scales
comparable across backbone depths. Reductions run in ascending index order
for bitwise reproducibility.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .extractor import PatchFeatureGrid

logger = logging.getLogger(__name__)

EXP_CLAMP = 80.0


@dataclass
class AnchorParams:
    alpha0: float = 1.0
    alpha1: float = 1.0
    m: float = 1.0

    def __post_init__(self):
        if self.alpha0 <= 0 or self.alpha1 <= 0:
            raise ValueError("alpha0 and alpha1 must be positive")


@dataclass
class TritanhParams:
    """Scaling factors and margins of the bounded pull/push ratio loss.

    lambda0 > lambda1 prioritizes the pulling force. m0 <= m1 + 2 keeps the
    loss inside (-1, 1].
    """

    lambda0: float = 2.0
    lambda1: float = 1.0
    m0: float = 1.0
    m1: float = 1.0

    def __post_init__(self):
        if self.lambda0 <= 0 or self.lambda1 <= 0:
            raise ValueError("lambda0 and lambda1 must be positive")
        if self.m0 < 0 or self.m1 < 0:
            raise ValueError("margins must be nonnegative")
        if self.m0 > self.m1 + 2:
            raise ValueError("boundedness requires m0 <= m1 + 2")


@dataclass
class SfaParams:
    gamma1: float = 0.01
    gamma2: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma weights must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class ContrastiveDistances:
    """Mean pull/push distances of one anchor/positive/negative triple."""

    d_pull: torch.Tensor
    d_push: torch.Tensor
    n_pull: int
    n_push: int

    def __post_init__(self):
        if self.n_pull <= 0 or self.n_push <= 0:
            raise ValueError("distance counts must be positive")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _grid_features(grid) -> torch.Tensor:
    if isinstance(grid, PatchFeatureGrid):
        return grid.features
    return grid


def masked_distances(anchor, positive, negative, neg_mask) -> ContrastiveDistances:
    """Pull/push distances between same-cell patch vectors.

    d_pull averages ||positive - anchor||^2 / D over every grid cell; d_push
    averages ||negative - anchor||^2 / D over the cells flagged by neg_mask.
    Raises DefectVanished when the mask is empty at grid resolution.
    """
    from .exceptions import DefectVanished

    a = _grid_features(anchor)
    p = _grid_features(positive)
    n = _grid_features(negative)
    if a.shape != p.shape or a.shape != n.shape:
        raise ValueError("all grids must share one shape")
    mask = torch.as_tensor(np.asarray(neg_mask), dtype=torch.bool)
    if mask.shape != a.shape[:2]:
        raise ValueError("neg_mask must match the grid's spatial shape")
    if not mask.any():
        raise DefectVanished("defect vanished at feature resolution")

    dim = a.shape[-1]
    d_pull = ((p - a) ** 2).sum(dim=-1).mean() / dim
    d_push = ((n - a) ** 2).sum(dim=-1)[mask].mean() / dim
    return ContrastiveDistances(d_pull=d_pull, d_push=d_push,
                                n_pull=int(mask.numel()), n_push=int(mask.sum()))


def anchor_loss(d: ContrastiveDistances, p: AnchorParams) -> torch.Tensor:
    """max(0, alpha0 * d_pull - alpha1 * d_push + m)."""
    raw = p.alpha0 * _as_tensor(d.d_pull) - p.alpha1 * _as_tensor(d.d_push) + p.m
    return torch.clamp(raw, min=0.0)


def tritanh_loss(d: ContrastiveDistances, p: TritanhParams) -> torch.Tensor:
    """(e^{l0 dp} - e^{l1 dq} + m0) / (e^{l0 dp} + e^{l1 dq} + m1).

    Exponent arguments are clamped at 80 before exponentiation; past the
    clamp the value is already within 1e-30 of its limit.
    """
    ep = p.lambda0 * _as_tensor(d.d_pull)
    eq = p.lambda1 * _as_tensor(d.d_push)
    if float(ep.detach()) > EXP_CLAMP or float(eq.detach()) > EXP_CLAMP:
        logger.warning("tritanh exponent clamped at %.0f (pull=%.3g, push=%.3g)",
                       EXP_CLAMP, float(ep.detach()), float(eq.detach()))
    a = torch.exp(torch.clamp(ep, max=EXP_CLAMP))
    b = torch.exp(torch.clamp(eq, max=EXP_CLAMP))
    return (a - b + p.m0) / (a + b + p.m1)


def ssl_loss(anchor, max_cells: int = 4096, sample_seed: int = 0) -> torch.Tensor:
    """Mean pairwise squared distance (over ordered pairs, / D) within a grid.

    Exact for grids up to `max_cells` cells; larger grids are reduced to a
    uniformly sampled subset drawn with `sample_seed` (record the seed in the
    run manifest when sampling triggers). The exact value uses the identity
    sum_{i!=j} ||Pi-Pj||^2 = 2N sum ||Pi||^2 - 2 ||sum Pi||^2.
    """
    feats = _grid_features(anchor)
    vecs = feats.reshape(-1, feats.shape[-1])
    n = vecs.shape[0]
    if n < 2:
        raise ValueError("need at least 2 grid cells")
    if n > max_cells:
        idx = np.random.default_rng(sample_seed).choice(n, size=max_cells, replace=False)
        vecs = vecs[np.sort(idx)]
        n = max_cells
    dim = vecs.shape[1]
    sq = (vecs ** 2).sum()
    total = vecs.sum(dim=0)
    pair_sum = 2.0 * n * sq - 2.0 * (total ** 2).sum()
    return pair_sum / (n * (n - 1) * dim)


def koleo_loss(features, p: SfaParams) -> torch.Tensor:
    """Spread regularizer: negative mean log Euclidean norm of the vectors."""
    feats = _grid_features(features)
    vecs = feats.reshape(-1, feats.shape[-1]) if feats.dim() > 2 else feats
    if vecs.shape[0] == 0:
        raise ValueError("need at least one feature vector")
    norms = torch.linalg.vector_norm(vecs, dim=-1)
    return -torch.log(norms + p.eps).mean()


def sfa_loss(anchor, p: SfaParams, sample_seed: int = 0) -> torch.Tensor:
    """gamma1 * self-similarity + gamma2 * spread regularizer on the anchor grid."""
    return p.gamma1 * ssl_loss(anchor, sample_seed=sample_seed) \
        + p.gamma2 * koleo_loss(anchor, p)


def total_loss(d: ContrastiveDistances, anchor, tp: TritanhParams,
               sp: SfaParams, sample_seed: int = 0) -> torch.Tensor:
    """Full training objective: bounded contrastive term plus the
    feature-adversarial pair."""
    return tritanh_loss(d, tp) + sfa_loss(anchor, sp, sample_seed=sample_seed)
