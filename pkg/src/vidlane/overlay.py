"""Draw lanes over a frame and write a binary PPM (P6)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import Lane, raster_thin

PALETTE = ((255, 64, 64), (64, 255, 64), (64, 128, 255), (255, 220, 0), (255, 0, 255), (0, 255, 255))
LINE_WIDTH = 3


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square dilation: a pixel is set if any pixel within ``radius`` (Chebyshev) is set."""
    h, w = mask.shape
    padded = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def draw_lanes(frame: np.ndarray, lanes: Sequence[Lane], width: int = LINE_WIDTH) -> np.ndarray:
    """``frame`` is H x W x 3, uint8 or float in [0, 1]; returns a uint8 copy with each lane
    drawn as its 1-px polyline widened to ``width`` px (odd) in a palette colour."""
    if width < 1 or width % 2 == 0:
        raise ValueError("line width must be a positive odd number")
    img = np.asarray(frame)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 frame, got {img.shape}")
    img = img.copy() if img.dtype == np.uint8 else np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    for i, lane in enumerate(lanes):
        thin = raster_thin(lane, h, w).astype(bool)
        img[_dilate(thin, width // 2)] = PALETTE[i % len(PALETTE)]
    return img


def render_overlay(frame: np.ndarray, lanes: Sequence[Lane], path) -> np.ndarray:
    """Draw ``lanes`` over ``frame`` and write the result to ``path`` as binary PPM."""
    out = draw_lanes(frame, lanes)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="RGB").save(p, format="PPM")
    return out
