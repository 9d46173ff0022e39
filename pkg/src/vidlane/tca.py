"""Temporal context aggregation: current, adjacent and accumulative branches.

Feature maps are H x W x C tensors; ``tokens`` flattens them row-major into
(H*W) x C matrices, token ``i*W + j`` being grid cell (i, j).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionWeights, mha, self_attention
from .numerics import ContractError, DimensionError, Tensor, add, matmul, reshape


def tokens(f: Tensor) -> Tensor:
    h, w, c = f.shape
    return reshape(f, (h * w, c))


def untokens(t: Tensor, grid: tuple[int, int]) -> Tensor:
    return reshape(t, (grid[0], grid[1], t.shape[1]))


def sinusoidal_positions(grid: tuple[int, int], channels: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table, (H*W) x C; half the channels encode rows, half columns."""
    h, w = grid
    quarter = channels // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    rows = np.repeat(np.arange(h, dtype=float), w)
    cols = np.tile(np.arange(w, dtype=float), h)
    parts = []
    for coord in (rows, cols):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    table = np.concatenate(parts, axis=1)
    if table.shape[1] < channels:
        table = np.pad(table, ((0, 0), (0, channels - table.shape[1])))
    return table


@dataclass
class TemporalState:
    """The recurrent carry between frames. Its size never depends on ``frame_index``.

    ``frame_index == 0`` marks an unpopulated state.
    """

    k_prev: Tensor
    v_prev: Tensor
    q_acc: Tensor
    frame_index: int
    grid: tuple[int, int]

    def __post_init__(self):
        if not (self.k_prev.shape == self.v_prev.shape == self.q_acc.shape):
            raise DimensionError(
                f"state token matrices differ: {self.k_prev.shape}, {self.v_prev.shape}, {self.q_acc.shape}")
        if self.frame_index < 0:
            raise ContractError("frame_index must be nonnegative")

    @property
    def nbytes(self) -> int:
        return self.k_prev.data.nbytes + self.v_prev.data.nbytes + self.q_acc.data.nbytes

    def detached(self) -> TemporalState:
        return TemporalState(self.k_prev.detach(), self.v_prev.detach(), self.q_acc.detach(),
                             self.frame_index, self.grid)

    def with_zero_query(self) -> TemporalState:
        return TemporalState(self.k_prev, self.v_prev, Tensor(np.zeros_like(self.q_acc.data)),
                             self.frame_index, self.grid)


@dataclass
class TCAWeights:
    current: AttentionWeights
    adjacent: AttentionWeights
    accumulative: AttentionWeights
    phi: Tensor
    phi_v: Tensor  # second mapping, only used when building the frame-2 state

    @property
    def channels(self) -> int:
        return self.phi.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {"phi": self.phi, "phi_v": self.phi_v}
        for branch in ("current", "adjacent", "accumulative"):
            for k, v in getattr(self, branch).parameters().items():
                out[f"{branch}.{k}"] = v
        return out

    @classmethod
    def init(cls, channels: int, heads: int, rng: np.random.Generator) -> TCAWeights:
        std = 1.0 / np.sqrt(channels)
        branches = [AttentionWeights.init(channels, heads, rng, out_scale=0.5) for _ in range(3)]
        phi = Tensor(np.eye(channels) + rng.normal(0, 0.1 * std, (channels, channels)), requires_grad=True)
        phi_v = Tensor(np.eye(channels) + rng.normal(0, 0.1 * std, (channels, channels)), requires_grad=True)
        return cls(*branches, phi, phi_v)


@dataclass
class BranchConfig:
    adjacent: bool = True
    accumulative: bool = True
    pos: np.ndarray | None = None


def _check_populated(s: TemporalState):
    if s.frame_index < 1:
        raise ContractError("temporal state is unpopulated; bootstrap it before running cross-attention")


def current_branch(F_t: Tensor, w: TCAWeights, pos=None) -> tuple[Tensor, Tensor]:
    """Self-attention over the frame's own tokens, then the query mapping."""
    if F_t.ndim != 3 or F_t.shape[2] != w.channels:
        raise DimensionError(f"feature map {F_t.shape} does not match {w.channels} channels")
    grid = F_t.shape[:2]
    f_tok = self_attention(tokens(F_t), w.current, pos=pos)
    return untokens(f_tok, grid), matmul(f_tok, w.phi)


def adjacent_branch(q_t: Tensor, s: TemporalState, w: TCAWeights, pos=None, trace=None) -> Tensor:
    _check_populated(s)
    q = q_t if pos is None else add(q_t, pos)
    k = s.k_prev if pos is None else add(s.k_prev, pos)
    out, attn = mha(q, k, s.v_prev, w.adjacent, return_weights=True)
    if trace is not None:
        trace["adjacent_attn"] = attn
    return untokens(out, s.grid)


def accumulative_branch(s: TemporalState, w: TCAWeights, pos=None, trace=None) -> tuple[Tensor, Tensor]:
    """Cross-attention of the carried query against the previous key/value.

    Positions (if any) go on the keys only, so a zero query still attends uniformly.
    """
    _check_populated(s)
    k = s.k_prev if pos is None else add(s.k_prev, pos)
    out, attn = mha(s.q_acc, k, s.v_prev, w.accumulative, return_weights=True)
    if trace is not None:
        trace["accumulative_attn"] = attn
    return untokens(out, s.grid), out


def aggregate(f_t: Tensor, f_ad: Tensor | None, f_ac: Tensor | None) -> Tensor:
    out = f_t
    for part in (f_ad, f_ac):
        if part is None:
            continue
        if part.shape != f_t.shape:
            raise DimensionError(f"aggregate shape mismatch: {f_t.shape} vs {part.shape}")
        out = add(out, part)
    return out


def temporal_update(F_hat: Tensor, w: TCAWeights) -> tuple[Tensor, Tensor]:
    """k_t = phi(tokens(F_hat)); v_t = tokens(F_hat) untouched."""
    if F_hat.ndim != 3:
        raise DimensionError(f"expected H x W x C, got {F_hat.shape}")
    v = tokens(F_hat)
    return matmul(v, w.phi), v


def step(F_t: Tensor, s: TemporalState, w: TCAWeights, branches: BranchConfig | None = None,
         trace: dict | None = None) -> tuple[Tensor, TemporalState]:
    """Refine one frame and produce the state for the next one.

    The returned state is detached: gradients never cross frame boundaries.
    """
    b = branches or BranchConfig()
    _check_populated(s)
    pos = None if b.pos is None else Tensor(b.pos)
    f_t, q_t = current_branch(F_t, w, pos)
    f_ad = adjacent_branch(q_t, s, w, pos, trace) if b.adjacent else None
    if b.accumulative:
        f_ac, q_next = accumulative_branch(s, w, pos, trace)
    else:
        f_ac, q_next = None, s.q_acc
    F_hat = aggregate(f_t, f_ad, f_ac)
    k_t, v_t = temporal_update(F_hat, w)
    if trace is not None:
        trace.update(f_t=f_t, q_t=q_t, f_ad=f_ad, f_ac=f_ac, F_hat=F_hat, k_t=k_t, v_t=v_t)
    new_state = TemporalState(k_t.detach(), v_t.detach(), q_next.detach(), s.frame_index + 1, s.grid)
    return F_hat, new_state


def empty_state(grid: tuple[int, int], channels: int) -> TemporalState:
    z = lambda: Tensor(np.zeros((grid[0] * grid[1], channels)))
    return TemporalState(z(), z(), z(), 0, grid)
