"""Training: targets, per-clip unrolled loss, AdamW."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .geometry import Lane
from .infer import state_for_frame
from .lanehead import LaneBasis, anchor_column, build_basis
from .losses import FocalConfig, LIoUConfig, focal_loss, liou_x
from .model import LaneNet
from .numerics import ContractError, Tensor, add, backward, matmul, reshape

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    pass


@dataclass
class FrameTargets:
    prob: np.ndarray  # H' x W' in {0, 1}
    cells: list[tuple[int, int]]
    gt_x: list[np.ndarray]  # full x-vector (image px) of the lane owning each cell


def frame_targets(gt: Sequence[Lane], cfg: RunConfig) -> FrameTargets:
    """Positive cells: where each lane crosses the centres of the bottom ``positive_rows`` grid rows."""
    gh, gw = cfg.grid
    prob = np.zeros((gh, gw))
    cells, xs = [], []
    cell_w, cell_h = cfg.width / gw, cfg.height / gh
    for lane in gt:
        for r in range(gh - cfg.positive_rows, gh):
            x = lane.x_at((r + 0.5) * cell_h)
            j = min(max(int(x // cell_w), 0), gw - 1)
            if prob[r, j]:
                continue
            prob[r, j] = 1.0
            cells.append((r, j))
            xs.append(lane.xs.copy())
    return FrameTargets(prob, cells, xs)


def basis_library(sequences, cfg: RunConfig) -> np.ndarray:
    gw = cfg.grid[1]
    rows = []
    for seq in sequences:
        for gt in seq.gt:
            tg = frame_targets(gt, cfg)
            for (r, j), x in zip(tg.cells, tg.gt_x):
                rows.append((x - anchor_column(j, gw, cfg.width)) / cfg.width)
    return np.array(rows)


def fit_basis(sequences, cfg: RunConfig) -> LaneBasis:
    lib = basis_library(sequences, cfg)
    rows = sequences[0].rows / cfg.height
    return build_basis(lib, cfg.basis_k, rows)


def predicted_x(C: Tensor, cells: list[tuple[int, int]], basis: LaneBasis, cfg: RunConfig) -> Tensor:
    """Image-px x-vectors (M x N) reconstructed at the given cells, differentiable in C."""
    ri = np.array([c[0] for c in cells])
    ci = np.array([c[1] for c in cells])
    coeffs = C[(ri, ci)]
    anchors = np.array([anchor_column(j, cfg.grid[1], cfg.width) for j in ci])[:, None]
    offsets = add(matmul(coeffs, Tensor(basis.U)), basis.x_mean)
    return add(offsets * float(cfg.width), anchors)


def frame_loss(P: Tensor, C: Tensor, tg: FrameTargets, net: LaneNet) -> Tensor:
    cfg = net.cfg
    loss = focal_loss(P, tg.prob, FocalConfig(cfg.focal_alpha, cfg.focal_gamma))
    if not tg.cells:
        return loss
    px = predicted_x(C, tg.cells, net.basis, cfg)
    liou_cfg = LIoUConfig(cfg.liou_e, scale=cfg.grid[1] / cfg.width)
    terms = [liou_x(px[m], tg.gt_x[m], liou_cfg) for m in range(len(tg.cells))]
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return add(loss, acc * (1.0 / len(terms)))


def clip_loss(net: LaneNet, frames: Sequence[np.ndarray], gts: Sequence[list[Lane]]) -> Tensor:
    """Unrolled loss over one clip; the state is reset at the clip start and
    detached between frames. Mask cues use the previous frame's ground truth."""
    total = None
    state, prev_F_hat = None, None
    for t, (img, gt) in enumerate(zip(frames, gts), start=1):
        F_t = net.encode(img)
        if t == 1:
            F_hat = F_t
        else:
            s, _ = state_for_frame(net, t, F_t, state, prev_F_hat, gts[t - 2])
            F_hat, state = net.refine(F_t, s)
        P, C = net.head(F_hat)
        l = frame_loss(P, C, frame_targets(gt, net.cfg), net)
        total = l if total is None else add(total, l)
        prev_F_hat = F_hat
    return total * (1.0 / len(frames))


class AdamW:
    """Adam with decoupled weight decay (applied to tensors with ndim >= 2)."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.gradient
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if p.data.ndim >= 2 and self.wd:
                p.data -= self.lr * self.wd * p.data
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def learning_rate(cfg: RunConfig, step: int, total: int) -> float:
    """Learning rate for 0-based optimizer ``step`` out of ``total``."""
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))


def clips_of(sequences, clip_len: int) -> list[tuple[int, int]]:
    out = []
    for si, seq in enumerate(sequences):
        for start in range(0, len(seq) - clip_len + 1, clip_len):
            out.append((si, start))
    return out


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    steps: int = 0


def train(sequences, cfg: RunConfig, basis: LaneBasis | None = None, out_dir=None,
          max_steps: int | None = None, on_epoch: Callable[[int, LaneNet], None] | None = None,
          net: LaneNet | None = None) -> tuple[LaneNet, TrainLog]:
    """Fit a network on ``sequences``; deterministic for a fixed config and data."""
    from .checkpoint import save

    if not sequences:
        raise ValueError("training needs at least one sequence")
    basis = basis if basis is not None else (net.basis if net is not None else fit_basis(sequences, cfg))
    net = net or LaneNet.init(cfg, basis)
    params = net.parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 7919))
    clips = clips_of(sequences, min(cfg.clip_len, min(len(s) for s in sequences)))
    total = cfg.epochs * math.ceil(len(clips) / cfg.batch_clips)
    if max_steps is not None:
        total = min(total, max_steps)
    tlog = TrainLog()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clips))
        losses = []
        for b0 in range(0, len(order), cfg.batch_clips):
            batch = order[b0:b0 + cfg.batch_clips]
            opt.zero_grad()
            batch_loss = 0.0
            for ci in batch:
                si, start = clips[ci]
                seq = sequences[si]
                idx = range(start, start + min(cfg.clip_len, len(seq)))
                try:
                    loss = clip_loss(net, [seq.frame(t) for t in idx], [seq.gt[t] for t in idx])
                except ContractError as e:
                    if all(np.all(np.isfinite(p.data)) for p in params.values()):
                        raise
                    raise NumericFailure(f"non-finite parameters at epoch {epoch} step {tlog.steps}: {e}") from e
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericFailure(f"non-finite loss at epoch {epoch} step {tlog.steps} (sequence {si}, "
                                         f"frame {start})")
                backward(loss * (1.0 / len(batch)))
                batch_loss += value / len(batch)
            opt.lr = learning_rate(cfg, tlog.steps, total)
            opt.step()
            tlog.steps += 1
            tlog.step_losses.append(batch_loss)
            losses.append(batch_loss)
            if max_steps is not None and tlog.steps >= max_steps:
                break
        tlog.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.5f", epoch, tlog.epoch_losses[-1])
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save(net, Path(out_dir) / f"epoch_{epoch:03d}.ckpt", step=tlog.steps)
        if on_epoch is not None:
            on_epoch(epoch, net)
        if max_steps is not None and tlog.steps >= max_steps:
            break
    return net, tlog
