"""Training objective: focal loss on the probability map plus LIoU on lane shapes."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Lane
from .metrics import EvalConfig, greedy_pairs, iou_matrix
from .numerics import ContractError, Tensor, add, as_tensor, clip, log, maximum, mean, minimum, mul, power, sub, sum_


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not (0 < self.alpha <= 1) or self.gamma < 0:
            raise ValueError(f"invalid focal config alpha={self.alpha} gamma={self.gamma}")


@dataclass(frozen=True)
class LIoUConfig:
    extension_e: float = 3.0
    scale: float = 1.0  # multiplies x before banding (e.g. image px -> feature-grid px)

    def __post_init__(self):
        if self.extension_e <= 0:
            raise ValueError("extension_e must be positive")


def focal_loss(P, target: np.ndarray, cfg: FocalConfig = FocalConfig()) -> Tensor:
    """Mean over cells of -alpha (1 - p_t)^gamma log p_t."""
    P = as_tensor(P)
    y = np.asarray(target, dtype=np.float64)
    if P.shape != y.shape:
        raise ContractError(f"probability map {P.shape} and target {y.shape} differ")
    if np.any(P.data < 0) or np.any(P.data > 1) or not np.all(np.isfinite(P.data)):
        raise ContractError("probabilities must lie in [0, 1]")
    # p_t = P where y = 1, 1 - P where y = 0
    p_t = add(mul(P, 2 * y - 1), 1 - y)
    p_t = clip(p_t, 1e-12, None)
    term = log(p_t)
    if cfg.gamma != 0:
        term = mul(power(sub(1.0, p_t), cfg.gamma), term)
    return mean(term) * (-cfg.alpha)


def liou_x(pred_x, gt_x: np.ndarray, cfg: LIoUConfig = LIoUConfig()) -> Tensor:
    """1 - sum(overlap) / sum(union) over rows where both x-vectors are finite.

    Overlap may go negative, so the loss ranges over [0, 2].
    """
    pred_x = as_tensor(pred_x)
    gt = np.asarray(gt_x, dtype=np.float64)
    valid = np.isfinite(gt) & np.isfinite(pred_x.data)
    if not valid.any():
        warnings.warn("LIoU: no shared valid rows, returning neutral loss 1", RuntimeWarning, stacklevel=2)
        return Tensor(1.0)
    idx = np.nonzero(valid)[0]
    p = pred_x[idx] * cfg.scale
    g = gt[idx] * cfg.scale
    e = cfg.extension_e
    p_lo, p_hi = p - e, p + e
    g_lo, g_hi = Tensor(g - e), Tensor(g + e)
    overlap = sub(minimum(p_hi, g_hi), maximum(p_lo, g_lo))
    union = sub(maximum(p_hi, g_hi), minimum(p_lo, g_lo))
    return sub(1.0, sum_(overlap) / sum_(union))


def liou_loss(pred: Lane, gt: Lane, cfg: LIoUConfig = LIoUConfig()) -> float:
    """Lane-level LIoU loss; the lanes must share their sample rows."""
    if len(pred.points) != len(gt.points) or not np.allclose(pred.ys, gt.ys):
        raise ContractError("liou_loss needs lanes sampled at the same rows")
    return float(liou_x(pred.xs, gt.xs, cfg).data)


def assign_pairs(pred: Sequence[Lane], gt: Sequence[Lane], cfg: EvalConfig) -> list[tuple[int, int]]:
    """Greedy one-to-one pred/gt assignment by descending rasterized IoU (any overlap)."""
    ious = iou_matrix(pred, gt, cfg)
    return [(i, j) for i, j, _ in greedy_pairs(ious, 1e-12)]


def total_loss(P, target: np.ndarray, pred_x: Sequence, gt_x: Sequence[np.ndarray],
               focal_cfg: FocalConfig = FocalConfig(), liou_cfg: LIoUConfig = LIoUConfig(),
               pairs: Sequence[tuple[int, int]] | None = None, rows_px: np.ndarray | None = None,
               eval_cfg: EvalConfig | None = None) -> Tensor:
    """Focal term plus the mean LIoU over matched (pred, gt) pairs.

    Without explicit ``pairs`` the lanes are matched greedily by rasterized IoU,
    which needs ``rows_px`` and ``eval_cfg``.
    """
    loss = focal_loss(P, target, focal_cfg)
    if pairs is None:
        if not pred_x or not gt_x:
            return loss
        mk = lambda x: Lane(np.stack([np.asarray(x.data if isinstance(x, Tensor) else x), rows_px], axis=1))
        pairs = assign_pairs([mk(x) for x in pred_x], [mk(x) for x in gt_x], eval_cfg)
    if not pairs:
        return loss
    terms = [liou_x(pred_x[i], gt_x[j], liou_cfg) for i, j in pairs]
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return add(loss, acc * (1.0 / len(terms)))
