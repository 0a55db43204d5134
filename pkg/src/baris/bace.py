"""Boundary-aware cross-entropy via a range/null split of the mask.

The down-sampling operator ``A`` is block max pooling with kernel = stride =
``scale`` and its partner ``A^T`` is nearest-neighbour up-sampling. The
range part ``A^T A x`` keeps each block's dominant value; the null part
``x - A^T A x`` keeps what pooling discards, which concentrates on edges.

Max pooling is not linear, so ``A Gamma == A M_gt`` does not hold in
general. What does hold exactly, and is tested, is
``max_pool(range_project(x)) == max_pool(x)`` and
``range_project(x) + null_project(x) == x``. ``pool="avg"`` swaps in
average pooling, which is linear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .autodiff import Var, as_var


@dataclass
class BaceConfig:
    scale: int = 4
    lam: float = 1.0
    pool: str = "max"
    class_weight: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.pool not in ("max", "avg"):
            raise ValueError(f"pool must be 'max' or 'avg', got {self.pool!r}")


def _pool(x: Var, s: int, pool: str) -> Var:
    return ops.max_pool2d(x, s) if pool == "max" else ops.avg_pool2d(x, s)


def range_project(x, s: int, pool: str = "max") -> Var:
    """A^T A x."""
    return ops.nearest_upsample(_pool(as_var(x), s, pool), s)


def null_project(x, s: int, pool: str = "max") -> Var:
    """(I - A^T A) x."""
    x = as_var(x)
    return ops.sub(x, range_project(x, s, pool))


def refine_gamma(pred, gt, s: int, pool: str = "max") -> Var:
    """Ground-truth range component plus predicted null component."""
    pred, gt = as_var(pred), as_var(gt, dtype=pred.dtype if isinstance(pred, Var) else None)
    if pred.shape != gt.shape:
        raise ops.ShapeError(f"refine_gamma: pred shape {pred.shape} but gt shape {gt.shape}")
    return ops.add(range_project(gt.detach(), s, pool), null_project(pred, s, pool))


def _check_batch(pred: Var, gt) -> np.ndarray:
    gt = np.asarray(gt.value if isinstance(gt, Var) else gt)
    if gt.shape != pred.shape:
        raise ops.ShapeError(f"mask batch: pred shape {pred.shape} but gt shape {gt.shape}")
    if pred.ndim != 4 or pred.shape[1] != 1:
        raise ops.ShapeError(f"mask batch must be [N_inst, 1, H, W], got {pred.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth masks must be binary")
    return gt.astype(pred.dtype)


def bace_loss(pred, gt, cfg: BaceConfig | None = None) -> Var:
    """Mean over instances of BCE-with-logits(Gamma_i, gt_i).

    Gamma is passed to the BCE as logits, unclamped. With equal-size masks
    and uniform weight the per-instance mean followed by the instance mean
    equals one mean over the whole batch.
    """
    cfg = cfg or BaceConfig()
    pred = as_var(pred)
    gtv = _check_batch(pred, gt)
    gamma = refine_gamma(pred, gtv, cfg.scale, cfg.pool)
    return ops.bce_with_logits(gamma, gtv, cfg.class_weight)


def ce_loss(pred, gt, weight=None) -> Var:
    pred = as_var(pred)
    return ops.bce_with_logits(pred, _check_batch(pred, gt), weight)


def total_loss(pred, gt, cfg: BaceConfig | None = None) -> Var:
    """Plain BCE plus ``lam`` times the boundary-aware term."""
    cfg = cfg or BaceConfig()
    pred = as_var(pred)
    ce = ce_loss(pred, gt, cfg.class_weight)
    return ops.add(ce, ops.mul(bace_loss(pred, gt, cfg), cfg.lam))
