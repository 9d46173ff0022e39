"""Rasterized-IoU lane matching, F1 at IoU thresholds and mIoU over true positives."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Lane, raster_wide


@dataclass(frozen=True)
class EvalConfig:
    height: int = 192
    width: int = 320
    lane_width: float = 30.0
    tau_list: tuple[float, ...] = (0.5, 0.8)

    def __post_init__(self):
        if self.lane_width < 1:
            raise ValueError("lane_width must be >= 1")
        if any(not (0 < t <= 1) for t in self.tau_list):
            raise ValueError(f"thresholds must lie in (0, 1], got {self.tau_list}")


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    matched_ious: list[float] = field(default_factory=list)


def _mask(lane: Lane, cfg: EvalConfig) -> np.ndarray:
    return raster_wide(lane, cfg.height, cfg.width, cfg.lane_width)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def lane_iou(a: Lane, b: Lane, cfg: EvalConfig) -> float:
    return mask_iou(_mask(a, cfg), _mask(b, cfg))


def iou_matrix(preds: Sequence[Lane], gts: Sequence[Lane], cfg: EvalConfig) -> np.ndarray:
    pm = [_mask(p, cfg) for p in preds]
    gm = [_mask(g, cfg) for g in gts]
    out = np.zeros((len(pm), len(gm)))
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            out[i, j] = mask_iou(a, b)
    return out


def greedy_pairs(ious: np.ndarray, tau: float) -> list[tuple[int, int, float]]:
    """One-to-one pairs by descending IoU, ties by lower pred then lower gt index."""
    n_p, n_g = ious.shape
    order = sorted(((-ious[i, j], i, j) for i in range(n_p) for j in range(n_g)))
    used_p, used_g, pairs = set(), set(), []
    for neg, i, j in order:
        if -neg < tau:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, -neg))
    return pairs


def match_from_ious(ious: np.ndarray, tau: float) -> MatchResult:
    pairs = greedy_pairs(ious, tau)
    tp = len(pairs)
    return MatchResult(tp, ious.shape[0] - tp, ious.shape[1] - tp, [p[2] for p in pairs])


def match(preds: Sequence[Lane], gts: Sequence[Lane], tau: float, cfg: EvalConfig) -> MatchResult:
    return match_from_ious(iou_matrix(preds, gts, cfg), tau)


def f1(result: MatchResult) -> tuple[float, float, float]:
    tp, fp, fn = result.tp, result.fp, result.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, score


def combine(results: Sequence[MatchResult]) -> MatchResult:
    total = MatchResult()
    for r in results:
        total.tp += r.tp
        total.fp += r.fp
        total.fn += r.fn
        total.matched_ious.extend(r.matched_ious)
    return total


def miou(results: Sequence[MatchResult]) -> float:
    """Global mean IoU over every true-positive match in ``results``."""
    ious = [v for r in results for v in r.matched_ious]
    if not ious:
        warnings.warn("mIoU undefined without true positives; reporting 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.mean(ious))
