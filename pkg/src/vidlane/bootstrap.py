"""Video start: first-frame passthrough, lane-mask cue and the frame-2 state."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import Lane, raster_thin
from .numerics import DimensionError, Tensor, add, avg_pool, conv2d, matmul
from .tca import TCAWeights, TemporalState, tokens


@dataclass
class IDEmbedKernel:
    kernel: Tensor  # 3 x 3 x 1 x C
    bias: Tensor

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, scale: float = 1.0) -> IDEmbedKernel:
        return cls(Tensor(rng.normal(0, scale / 3.0, (3, 3, 1, channels)), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True))


def rasterize_lanes(lanes: Sequence[Lane], height: int, width: int) -> np.ndarray:
    """Union of 1-pixel polylines; an empty lane list yields an all-zero mask."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for lane in lanes:
        raster_thin(lane, height, width, out=mask)
    return mask


def id_embedding(mask: np.ndarray, k: IDEmbedKernel, grid: tuple[int, int]) -> Tensor:
    """Area-average the image-resolution mask onto ``grid``, then a same-padded conv."""
    h, w = mask.shape
    if h % grid[0] or w % grid[1] or h // grid[0] != w // grid[1]:
        raise DimensionError(f"mask {mask.shape} does not downsample evenly onto grid {grid}")
    m = avg_pool(Tensor(mask.astype(np.float64)[:, :, None]), h // grid[0])
    return conv2d(m, k.kernel, k.bias, stride=1, padding="same")


def bootstrap_second_frame(f_2: Tensor, E: Tensor, w: TCAWeights) -> TemporalState:
    """k = phi(f_2), v = phi_v(f_2 + E), zero accumulative query.

    The result stands in for the previous-frame key/value when refining frame 2.
    It is built from the current frame, so it keeps its graph.
    """
    if f_2.shape != E.shape:
        raise DimensionError(f"feature map {f_2.shape} and ID embedding {E.shape} differ")
    k = matmul(tokens(f_2), w.phi)
    v = matmul(tokens(add(f_2, E)), w.phi_v)
    return TemporalState(k, v, Tensor(np.zeros(k.shape)), 1, tuple(f_2.shape[:2]))


def apply_mask_cue(s: TemporalState, E: Tensor, w: TCAWeights) -> TemporalState:
    """Mask cue on a regular state: v <- phi_v(v + E). Used by the all-frames setting."""
    v = matmul(add(s.v_prev, tokens(E)), w.phi_v)
    return TemporalState(s.k_prev, v, s.q_acc, s.frame_index, s.grid)


def first_frame_detect(F_1: Tensor, head: Callable[[Tensor], list[Lane]]) -> tuple[list[Lane], Tensor]:
    """Image-only detection on raw encoder features; no temporal refinement."""
    return head(F_1), F_1
