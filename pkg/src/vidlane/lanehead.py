"""Lane head: SVD shape basis, probability/parameter decoding, candidates and NMS.

Lane shapes live in a K-dimensional basis of x-offset vectors sampled at N
fixed rows. Offsets are expressed as fractions of the image width relative to
the anchor column of the cell that proposes the lane, so a reconstructed lane
is ``anchor + width * (x_mean + U^T c)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Lane, raster_wide
from .metrics import mask_iou
from .numerics import DimensionError, Tensor, concat, conv2d, sigmoid


@dataclass
class LaneBasis:
    U: np.ndarray  # K x N, orthonormal rows
    row_positions: np.ndarray  # N, fraction of image height
    x_mean: np.ndarray  # N, fraction of image width

    @property
    def k(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.U.shape[1]

    def rows_px(self, height: int) -> np.ndarray:
        return self.row_positions * height

    def project(self, offsets: np.ndarray) -> np.ndarray:
        return (np.asarray(offsets) - self.x_mean) @ self.U.T

    def offsets(self, coeffs: np.ndarray) -> np.ndarray:
        return self.x_mean + np.asarray(coeffs) @ self.U


def default_rows(n: int = 36, height: int = 192, top_fraction: float = 0.4) -> np.ndarray:
    """N sample rows spanning the lower part of the image, as fractions of height."""
    return np.linspace(top_fraction * height, height - 1, n) / height


def build_basis(library: np.ndarray, k: int, row_positions: np.ndarray) -> LaneBasis:
    """Top-k right singular vectors of the mean-centred library (M x N)."""
    lib = np.asarray(library, dtype=np.float64)
    if lib.ndim != 2 or lib.shape[1] != len(row_positions):
        raise DimensionError(f"library shape {lib.shape} does not match {len(row_positions)} rows")
    if lib.shape[0] < k:
        raise ValueError(f"library has {lib.shape[0]} vectors, need at least k={k}")
    x_mean = lib.mean(axis=0)
    centred = lib - x_mean
    # V^T must be a full N x N basis for the rank-deficient completion below; U is never needed
    _, s, vt = np.linalg.svd(centred, full_matrices=lib.shape[0] < lib.shape[1])
    rank = int(np.sum(s > s.max(initial=0.0) * 1e-12)) if s.size else 0
    if k > rank:
        # trailing rows of the full V^T are already an orthonormal completion
        warnings.warn(f"basis size {k} exceeds library rank {rank}; padding with an orthonormal completion",
                      RuntimeWarning, stacklevel=2)
    return LaneBasis(vt[:k].copy(), np.asarray(row_positions, dtype=np.float64), x_mean)


# ---------------------------------------------------------------- decoding

@dataclass
class DecoderWeights:
    kp: Tensor  # 3x3 x Cin x 1
    bp: Tensor
    kc: Tensor  # 3x3 x Cin x K
    bc: Tensor
    coords: bool = True

    def parameters(self) -> dict[str, Tensor]:
        return {"kp": self.kp, "bp": self.bp, "kc": self.kc, "bc": self.bc}

    @classmethod
    def init(cls, channels: int, k: int, rng: np.random.Generator, coords: bool = True,
             prior: float = 0.01) -> DecoderWeights:
        cin = channels + (2 if coords else 0)
        std = 1.0 / np.sqrt(9 * cin)
        return cls(
            Tensor(rng.normal(0, std, (3, 3, cin, 1)), requires_grad=True),
            Tensor(np.full(1, -np.log((1 - prior) / prior)), requires_grad=True),
            Tensor(rng.normal(0, 0.1 * std, (3, 3, cin, k)), requires_grad=True),
            Tensor(np.zeros(k), requires_grad=True),
            coords,
        )


def coord_channels(grid: tuple[int, int]) -> np.ndarray:
    """Two channels holding each cell's centre as (row, col) in [-1, 1]."""
    h, w = grid
    r = (np.arange(h) + 0.5) / h * 2 - 1
    c = (np.arange(w) + 0.5) / w * 2 - 1
    return np.stack(np.meshgrid(r, c, indexing="ij"), axis=-1)


def decode(F_hat: Tensor, w: DecoderWeights) -> tuple[Tensor, Tensor]:
    """Probability map (H' x W') and parameter map (H' x W' x K)."""
    expected = w.kp.shape[2] - (2 if w.coords else 0)
    if F_hat.ndim != 3 or F_hat.shape[2] != expected:
        raise DimensionError(f"decoder expects {expected} channels, got feature map {F_hat.shape}")
    x = concat([F_hat, Tensor(coord_channels(F_hat.shape[:2]))], axis=2) if w.coords else F_hat
    logits = conv2d(x, w.kp, w.bp)
    P = sigmoid(logits)
    C = conv2d(x, w.kc, w.bc)
    return P.reshape(P.shape[:2]), C


# ---------------------------------------------------------------- candidates / reconstruction / NMS

@dataclass
class LaneCandidate:
    score: float
    coeffs: np.ndarray
    anchor_column: float  # image pixels
    cell: tuple[int, int]


def anchor_column(col: int, grid_w: int, width: int) -> float:
    return (col + 0.5) * width / grid_w


def candidates(P, C, basis: LaneBasis, prob_threshold: float = 0.5, width: int | None = None) -> list[LaneCandidate]:
    """One candidate per cell with P >= threshold, in row-major order."""
    if not (0 < prob_threshold < 1):
        raise ValueError("prob_threshold must lie in (0, 1)")
    P = P.data if isinstance(P, Tensor) else np.asarray(P)
    C = C.data if isinstance(C, Tensor) else np.asarray(C)
    gh, gw = P.shape
    width = gw if width is None else width
    out = []
    for i, j in zip(*np.nonzero(P >= prob_threshold)):
        out.append(LaneCandidate(float(P[i, j]), C[i, j].copy(), anchor_column(j, gw, width), (int(i), int(j))))
    return out


def reconstruct(cand: LaneCandidate, basis: LaneBasis, height: int, width: int) -> Lane:
    xs = cand.anchor_column + width * basis.offsets(cand.coeffs)
    xs = np.clip(xs, 0.0, width - 1.0)
    ys = basis.rows_px(height)
    return Lane(np.stack([xs, ys], axis=1), score=cand.score)


def nms(cands: list[LaneCandidate], basis: LaneBasis, iou_threshold: float, lane_width: float,
        height: int, width: int) -> list[Lane]:
    """Greedy score-ordered suppression using rasterized lane IoU."""
    if not (0 < iou_threshold <= 1):
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].score, i))
    kept: list[Lane] = []
    kept_masks: list[np.ndarray] = []
    for i in order:
        lane = reconstruct(cands[i], basis, height, width)
        m = raster_wide(lane, height, width, lane_width)
        if all(mask_iou(m, km) < iou_threshold for km in kept_masks):
            kept.append(lane)
            kept_masks.append(m)
    return kept
