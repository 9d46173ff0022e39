"""Multi-head scaled dot-product attention over token matrices (T x C)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Tensor, add, matmul, reshape, softmax_rows, transpose


@dataclass
class AttentionWeights:
    """Bias-free q/k/v projections (C x C, split column-wise into heads) plus an
    output projection. ``wo=None`` drops the output projection entirely."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor | None
    bo: Tensor | None
    heads: int

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv}
        if self.wo is not None:
            out["wo"] = self.wo
        if self.bo is not None:
            out["bo"] = self.bo
        return out

    @classmethod
    def init(cls, channels: int, heads: int, rng: np.random.Generator, out_scale: float = 1.0) -> AttentionWeights:
        if channels % heads:
            raise DimensionError(f"channels {channels} not divisible by heads {heads}")
        std = 1.0 / np.sqrt(channels)

        def mat(scale=1.0):
            return Tensor(rng.normal(0.0, std * scale, (channels, channels)), requires_grad=True)

        return cls(mat(), mat(), mat(), mat(out_scale), Tensor(np.zeros(channels), requires_grad=True), heads)

    @classmethod
    def zeros(cls, channels: int, heads: int) -> AttentionWeights:
        z = lambda: Tensor(np.zeros((channels, channels)), requires_grad=True)
        return cls(z(), z(), z(), z(), Tensor(np.zeros(channels), requires_grad=True), heads)

    @classmethod
    def identity(cls, channels: int, heads: int, output: bool = True) -> AttentionWeights:
        eye = lambda: Tensor(np.eye(channels), requires_grad=True)
        return cls(eye(), eye(), eye(), eye() if output else None, None, heads)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, c = x.shape
    return transpose(reshape(x, (t, heads, c // heads)), (1, 0, 2))


def mha(q, k, v, w: AttentionWeights, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d)) V per head, heads concatenated, then output-projected.

    With ``return_weights`` also returns the (heads x Tq x Tk) attention array.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (q, k, v))
    c = w.channels
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"mha expects token matrices, got {q.shape}, {k.shape}, {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    if q.shape[1] != c or k.shape[1] != c or v.shape[1] != c:
        raise DimensionError(f"channel mismatch with weights ({c}): {q.shape}, {k.shape}, {v.shape}")
    h = w.heads
    d = c // h
    qh = _split_heads(matmul(q, w.wq), h)
    kh = _split_heads(matmul(k, w.wk), h)
    vh = _split_heads(matmul(v, w.wv), h)
    scores = matmul(qh, transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(d))
    attn = softmax_rows(scores)
    heads_out = matmul(attn, vh)
    out = reshape(transpose(heads_out, (1, 0, 2)), (q.shape[0], c))
    if w.wo is not None:
        out = matmul(out, w.wo)
    if w.bo is not None:
        out = add(out, w.bo)
    if return_weights:
        return out, attn.data
    return out


def self_attention(x, w: AttentionWeights, pos=None):
    """Residual self-attention ``x + mha(x, x, x)``.

    ``pos`` (same shape as x) is added to the query and key inputs only.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    qk = x if pos is None else add(x, pos)
    return add(x, mha(qk, qk, x, w))
