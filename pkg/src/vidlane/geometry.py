"""Lane polylines and their pixel rasterizations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Lane:
    """Polyline of (x, y) image points, y strictly increasing."""

    points: np.ndarray
    score: float = 1.0
    lane_id: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def xs(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.points[:, 1]

    def is_valid(self, height: int, width: int) -> bool:
        p = self.points
        if len(p) == 0 or not np.all(np.isfinite(p)):
            return False
        inside = (p[:, 0] >= 0) & (p[:, 0] < width) & (p[:, 1] >= 0) & (p[:, 1] < height)
        return bool(inside.all() and np.all(np.diff(p[:, 1]) > 0))

    def x_at(self, y: float) -> float:
        return float(np.interp(y, self.ys, self.xs))


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer pixels (x, y) on the segment, both endpoints included."""
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def raster_thin(lane: Lane | np.ndarray, height: int, width: int, out: np.ndarray | None = None) -> np.ndarray:
    """1-pixel rasterization: Bresenham segments between rounded, clamped sample points."""
    pts = lane.points if isinstance(lane, Lane) else np.asarray(lane, dtype=np.float64)
    mask = np.zeros((height, width), dtype=np.uint8) if out is None else out
    if len(pts) == 0:
        return mask
    ipts = [(min(max(_round(x), 0), width - 1), min(max(_round(y), 0), height - 1)) for x, y in pts]
    if len(ipts) == 1:
        mask[ipts[0][1], ipts[0][0]] = 1
    for (xa, ya), (xb, yb) in zip(ipts[:-1], ipts[1:]):
        for x, y in bresenham(xa, ya, xb, yb):
            mask[y, x] = 1
    return mask


def raster_wide(lane: Lane | np.ndarray, height: int, width: int, lane_width: float) -> np.ndarray:
    """Boolean mask of integer pixel centres within ``lane_width / 2`` of the polyline.

    Squared distances are compared against ``(lane_width / 2) ** 2`` so the
    result is exact set arithmetic; a single point rasterizes as a disc.
    """
    pts = lane.points if isinstance(lane, Lane) else np.asarray(lane, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    if len(pts) == 0:
        return mask
    r = lane_width / 2.0
    r2 = r * r
    segs = list(zip(pts[:-1], pts[1:])) if len(pts) > 1 else [(pts[0], pts[0])]
    for a, b in segs:
        x_lo = max(int(np.floor(min(a[0], b[0]) - r)), 0)
        x_hi = min(int(np.ceil(max(a[0], b[0]) + r)), width - 1)
        y_lo = max(int(np.floor(min(a[1], b[1]) - r)), 0)
        y_hi = min(int(np.ceil(max(a[1], b[1]) + r)), height - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        xs = np.arange(x_lo, x_hi + 1, dtype=np.float64)[None, :]
        ys = np.arange(y_lo, y_hi + 1, dtype=np.float64)[:, None]
        mask[y_lo:y_hi + 1, x_lo:x_hi + 1] |= segment_dist2(xs, ys, a[0], a[1], b[0], b[1]) <= r2
    return mask


def segment_dist2(px, py, ax: float, ay: float, bx: float, by: float):
    """Squared distance from points (px, py) to segment a-b (numpy broadcasting)."""
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    if len2 == 0.0:
        ex, ey = px - ax, py - ay
        return ex * ex + ey * ey
    t = ((px - ax) * dx + (py - ay) * dy) / len2
    t = np.minimum(np.maximum(t, 0.0), 1.0)
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    return ex * ex + ey * ey
