"""Mask IoU and boundary F-measure."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (the frame counts as outside)."""
    m = mask.astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = pred.astype(bool), gt.astype(bool)
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: float = 1.0) -> float:
    """F-score of boundary pixels matched within Euclidean distance ``tol``."""
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    precision = float((dist_to_gt[bp] <= tol).mean())
    recall = float((dist_to_pred[bg] <= tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def evaluate(pred_logits: np.ndarray, gt: np.ndarray) -> dict:
    """Mean IoU and boundary F over instances; logits thresholded at 0.

    Both arrays are [N_inst, 1, H, W] (or [N_inst, H, W]).
    """
    pred_logits = np.asarray(pred_logits)
    gt = np.asarray(gt)
    if pred_logits.shape != gt.shape:
        raise ValueError(f"pred shape {pred_logits.shape} != gt shape {gt.shape}")
    if pred_logits.shape[0] == 0:
        return {"mask_iou": 1.0, "boundary_f": 1.0}
    pred = pred_logits > 0
    ious, bfs = [], []
    for p, g in zip(pred, gt):
        p2, g2 = p.reshape(p.shape[-2:]), g.reshape(g.shape[-2:]) > 0
        ious.append(iou(p2, g2))
        bfs.append(boundary_f(p2, g2))
    return {"mask_iou": float(np.mean(ious)), "boundary_f": float(np.mean(bfs))}
