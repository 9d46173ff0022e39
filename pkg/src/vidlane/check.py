"""Self-checks run by ``vidlane check``: finite-difference gradients and invariants.

Every differentiable op is probed through a random linear readout
``sum(R * op(x))`` so no coordinate has a vanishing gradient by construction;
inputs are drawn away from kinks (relu/abs/max/min/clip) so central
differences are exact up to O(h^2).
"""
from __future__ import annotations

import time
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .attention import AttentionWeights, mha, self_attention
from .bootstrap import IDEmbedKernel, bootstrap_second_frame, id_embedding
from .geometry import Lane
from .lanehead import DecoderWeights, decode
from .losses import FocalConfig, LIoUConfig, focal_loss, liou_loss, liou_x
from .metrics import EvalConfig, lane_iou
from .numerics import Tensor, grad_check
from .tca import BranchConfig, TCAWeights, TemporalState, sinusoidal_positions, step

GRAD_TOL = 1e-6
H = 1e-5


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float
    passed: bool
    detail: str = ""


@dataclass
class Report:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.value:.3e} (limit {r.limit:.0e}) {r.detail}".rstrip()
               for r in self.results]
        out.append(f"{'PASS' if self.passed else 'FAIL'}  total {len(self.results)} checks in {self.seconds:.1f} s")
        return out


def _param(rng, shape, lo=None, scale=1.0):
    a = rng.normal(0, scale, shape)
    if lo is not None:  # push magnitudes away from zero: |a| >= lo
        a = np.sign(a) * (np.abs(a) + lo)
        a[a == 0] = lo
    return Tensor(a, requires_grad=True)


def _readout(out: Tensor, R: np.ndarray) -> Tensor:
    return nx.sum_(nx.mul(out, R))


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    def unary(name, fn, shape=(3, 4), lo=None, scale=1.0, shift=0.0):
        x = _param(rng, shape, lo, scale)
        x.data += shift
        out_shape = fn(x).shape
        R = rng.normal(size=out_shape)
        cases.append((name, lambda: _readout(fn(x), R), [x]))

    def binary(name, fn, sa=(3, 4), sb=(3, 4), lo=None, shift_b=0.0):
        a, b = _param(rng, sa, lo), _param(rng, sb, lo)
        b.data += shift_b
        R = rng.normal(size=fn(a, b).shape)
        cases.append((name, lambda: _readout(fn(a, b), R), [a, b]))

    binary("add (broadcast)", nx.add, sb=(4,))
    binary("sub (broadcast)", nx.sub, sb=(3, 1))
    binary("mul (broadcast)", nx.mul, sb=(1, 4))
    binary("div", nx.div, lo=0.5)
    unary("neg", nx.neg)
    unary("power 3", lambda x: nx.power(x, 3.0))
    x_pos = _param(rng, (3, 4))
    x_pos.data[:] = np.abs(x_pos.data) + 0.5
    R_pos = rng.normal(size=(3, 4))
    cases.append(("power 0.5", lambda: _readout(nx.power(x_pos, 0.5), R_pos), [x_pos]))
    cases.append(("log", lambda: _readout(nx.log(x_pos), R_pos), [x_pos]))
    unary("exp", nx.exp)
    unary("sigmoid", nx.sigmoid, scale=3.0)
    unary("relu", nx.relu, lo=0.1)
    unary("abs", nx.abs_, lo=0.1)
    a = _param(rng, (3, 4))
    b = Tensor(a.data + np.where(rng.random((3, 4)) < 0.5, 0.3, -0.3), requires_grad=True)
    R2 = rng.normal(size=(3, 4))
    cases.append(("maximum", lambda: _readout(nx.maximum(a, b), R2), [a, b]))
    cases.append(("minimum", lambda: _readout(nx.minimum(a, b), R2), [a, b]))
    xc = Tensor(rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.1, 0.4, (3, 4))
                + rng.choice([0.0, 1.5, -1.5], (3, 4)), requires_grad=True)
    cases.append(("clip", lambda: _readout(nx.clip(xc, -1.0, 1.0), R2), [xc]))
    unary("sum axis", lambda x: nx.sum_(x, axis=1, keepdims=True))
    unary("mean", lambda x: nx.mean(x, axis=0))
    unary("reshape", lambda x: nx.reshape(x, (2, 6)))
    unary("transpose", lambda x: nx.transpose(x, (2, 0, 1)), shape=(2, 3, 4))
    unary("index (repeated)", lambda x: nx.index(x, (np.array([0, 2, 0]), np.array([1, 3, 1]))))
    binary("concat", lambda p, q: nx.concat([p, q], axis=1), sb=(3, 2))
    binary("matmul", nx.matmul, sa=(3, 4), sb=(4, 5))
    binary("matmul batched", nx.matmul, sa=(2, 3, 4), sb=(2, 4, 5))
    unary("softmax_rows", nx.softmax_rows, shape=(4, 6), scale=2.0)
    xk = _param(rng, (6, 7, 3))
    kk = _param(rng, (3, 3, 3, 4), scale=0.5)
    bk = _param(rng, (4,))
    Rs = rng.normal(size=nx.conv2d(xk, kk, bk).shape)
    Rv = rng.normal(size=nx.conv2d(xk, kk, bk, stride=2, padding="valid").shape)
    cases.append(("conv2d same", lambda: _readout(nx.conv2d(xk, kk, bk), Rs), [xk, kk, bk]))
    cases.append(("conv2d stride 2 valid",
                  lambda: _readout(nx.conv2d(xk, kk, bk, stride=2, padding="valid"), Rv), [xk, kk, bk]))
    unary("avg_pool", lambda x: nx.avg_pool(x, 2), shape=(4, 6, 2))

    w = AttentionWeights.init(8, 4, rng)
    for t in w.parameters().values():
        t.data += rng.normal(0, 0.2, t.shape)
    q, k, v = _param(rng, (5, 8)), _param(rng, (6, 8)), _param(rng, (6, 8))
    Rm = rng.normal(size=(5, 8))
    wp = list(w.parameters().values())
    cases.append(("multi-head attention", lambda: _readout(mha(q, k, v, w), Rm), [q, k, v, *wp]))
    xs = _param(rng, (6, 8))
    pos = Tensor(rng.normal(size=(6, 8)))
    Rsa = rng.normal(size=(6, 8))
    cases.append(("self-attention", lambda: _readout(self_attention(xs, w, pos), Rsa), [xs, *wp]))

    logits = _param(rng, (5, 6))
    target = (rng.random((5, 6)) < 0.3).astype(float)
    cases.append(("focal loss", lambda: focal_loss(nx.sigmoid(logits), target, FocalConfig(0.25, 2.0)), [logits]))
    gt = rng.uniform(20, 80, 12)
    # keep every |pred - gt| away from 0 and from 2e so no min/max ties
    px = Tensor(gt + rng.choice([-1, 1], 12) * rng.uniform(0.5, 2.5, 12), requires_grad=True)
    cases.append(("LIoU loss", lambda: liou_x(px, gt, LIoUConfig(3.0, 1.0)), [px]))

    idk = IDEmbedKernel.init(4, rng)
    mask = (rng.random((8, 8)) < 0.3).astype(np.uint8)
    Rid = rng.normal(size=(4, 4, 4))
    cases.append(("ID embedding", lambda: _readout(id_embedding(mask, idk, (4, 4)), Rid),
                  [idk.kernel, idk.bias]))
    return cases


def tca_case(rng: np.random.Generator, grid=(4, 4), channels: int = 8, heads: int = 4, k: int = 2):
    """One full temporal step on a bootstrapped state, decoded and scored with the training loss."""
    tca = TCAWeights.init(channels, heads, rng)
    for t in tca.parameters().values():
        t.data += rng.normal(0, 0.2, t.shape)
    idk = IDEmbedKernel.init(channels, rng)
    # neutral prior: a confident-negative bias would flatten the focal gradient on most cells
    dec = DecoderWeights.init(channels, k, rng, prior=0.5)
    for t in dec.parameters().values():
        t.data += rng.normal(0, 0.3, t.shape)
    f2 = _param(rng, (*grid, channels))
    F3 = _param(rng, (*grid, channels))
    mask = np.zeros((grid[0] * 2, grid[1] * 2), dtype=np.uint8)
    mask[:, 3] = 1
    q_acc = _param(rng, (grid[0] * grid[1], channels), scale=0.5)
    branches = BranchConfig(pos=sinusoidal_positions(grid, channels))
    target = np.zeros(grid)
    target[-1, 1] = target[-1, 2] = 1.0
    n_rows = 6
    U = np.linalg.qr(rng.normal(size=(n_rows, k)))[0].T
    gt_x = rng.uniform(20, 40, (2, n_rows))
    cells = (np.array([grid[0] - 1, grid[0] - 1]), np.array([1, 2]))

    def loss():
        s0 = bootstrap_second_frame(f2, id_embedding(mask, idk, grid), tca)
        s = TemporalState(s0.k_prev, s0.v_prev, q_acc, s0.frame_index, s0.grid)
        F_hat, _ = step(F3, s, tca, branches)
        P, C = decode(F_hat, dec)
        pred = nx.add(nx.mul(nx.matmul(C[cells], Tensor(U)), 4.0), 30.0)
        total = focal_loss(P, target)
        for m in range(2):
            total = nx.add(total, liou_x(pred[m], gt_x[m], LIoUConfig(3.0, 1.0)) * 0.5)
        return total

    params = [f2, F3, q_acc, *tca.parameters().values(), *idk.parameters().values(), *dec.parameters().values()]
    return loss, params


def gradient_suite(seed: int = 0, h: float = H, tol: float = GRAD_TOL) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for name, fn, params in _op_cases(rng):
        r = grad_check(fn, params, h=h)
        out.append(CheckResult(f"grad {name}", r.max_rel_error, tol, r.ok and r.max_rel_error < tol))
    # own stream so the probe point does not depend on how many op cases precede it
    fn, params = tca_case(np.random.Generator(np.random.PCG64(seed)))
    r = grad_check(fn, params, h=h)
    n = sum(p.data.size for p in params)
    out.append(CheckResult("grad full 4x4x8 temporal step + loss", r.max_rel_error, tol,
                           r.ok and r.max_rel_error < tol, f"({n} coordinates)"))
    return out


# ---------------------------------------------------------------- attention invariants

def _random_attention(rng):
    c = int(rng.choice([4, 8, 12, 16]))
    heads = int(rng.choice([h for h in (1, 2, 4) if c % h == 0]))
    w = AttentionWeights.init(c, heads, rng)
    w.bo.data[:] = rng.normal(size=c)
    tq, tk = int(rng.integers(1, 10)), int(rng.integers(1, 12))
    q = rng.normal(0, 2, (tq, c))
    k = rng.normal(0, 2, (tk, c))
    v = rng.normal(0, 2, (tk, c))
    return w, q, k, v


def attention_suite(trials: int = 200, seed: int = 1) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    row_err = perm_err = zero_err = 0.0
    for _ in range(trials):
        w, q, k, v = _random_attention(rng)
        out, attn = mha(q, k, v, w, return_weights=True)
        row_err = max(row_err, float(np.max(np.abs(attn.sum(axis=-1) - 1.0))))
        perm = rng.permutation(k.shape[0])
        out_p = mha(q, k[perm], v[perm], w)
        perm_err = max(perm_err, float(np.max(np.abs(out_p.data - out.data))))
        z = mha(np.zeros_like(q), k, v, w)
        expect = (v @ w.wv.data).mean(axis=0) @ w.wo.data + w.bo.data
        zero_err = max(zero_err, float(np.max(np.abs(z.data - expect[None, :]))))
    return [
        CheckResult(f"attention rows sum to 1 ({trials} trials)", row_err, 1e-12, row_err <= 1e-12),
        CheckResult(f"key/value permutation invariance ({trials} trials)", perm_err, 1e-12, perm_err <= 1e-12),
        CheckResult(f"zero query gives the uniform value average ({trials} trials)", zero_err, 1e-12,
                    zero_err <= 1e-12),
    ]


# ---------------------------------------------------------------- losses and metric oracle

def random_lane(rng, height: int, width: int, n: int | None = None) -> Lane:
    n = n or int(rng.integers(2, 8))
    ys = np.sort(rng.choice(np.arange(height), n, replace=False)).astype(float) + rng.uniform(0, 0.99, n)
    ys = np.minimum(ys, height - 1)
    ys = np.maximum.accumulate(ys) + np.arange(n) * 1e-6
    xs = rng.uniform(0, width - 1, n)
    return Lane(np.stack([xs, ys], axis=1))


def _exact_dist2(px: int, py: int, a, b) -> Fraction:
    ax, ay, bx, by = (Fraction(float(v)) for v in (a[0], a[1], b[0], b[1]))
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    t = Fraction(0) if len2 == 0 else min(max(((px - ax) * dx + (py - ay) * dy) / len2, Fraction(0)), Fraction(1))
    ex, ey = px - (ax + t * dx), py - (ay + t * dy)
    return ex * ex + ey * ey


def pixel_oracle_mask(lane: Lane, height: int, width: int, lane_width: float) -> np.ndarray:
    """Every pixel centre against every segment, no bounding boxes.

    Distances come from the endpoint / perpendicular-foot decomposition; any
    pixel within 1e-9 of the radius is re-decided in exact rational arithmetic.
    """
    yy, xx = np.mgrid[0:height, 0:width]
    px, py = xx.ravel().astype(float), yy.ravel().astype(float)
    p = lane.points
    segs = list(zip(p[:-1], p[1:])) if len(p) > 1 else [(p[0], p[0])]
    d2 = np.full(px.shape, np.inf)
    for a, b in segs:
        da = (px - a[0]) ** 2 + (py - a[1]) ** 2
        db = (px - b[0]) ** 2 + (py - b[1]) ** 2
        seg = np.minimum(da, db)
        L2 = (b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2
        if L2 > 0:
            proj = (px - a[0]) * (b[0] - a[0]) + (py - a[1]) * (b[1] - a[1])
            inside = (proj > 0) & (proj < L2)
            cross = (px - a[0]) * (b[1] - a[1]) - (py - a[1]) * (b[0] - a[0])
            seg = np.where(inside, np.minimum(seg, cross * cross / L2), seg)
        d2 = np.minimum(d2, seg)
    r2 = (lane_width / 2) ** 2
    mask = d2 <= r2
    r2_exact = Fraction(float(lane_width) / 2) ** 2
    for i in np.nonzero(np.abs(d2 - r2) <= 1e-9 * max(r2, 1.0))[0]:
        x, y = int(px[i]), int(py[i])
        mask[i] = min(_exact_dist2(x, y, a, b) for a, b in segs) <= r2_exact
    return mask.reshape(height, width)


def oracle_iou(a: Lane, b: Lane, cfg: EvalConfig) -> float:
    ma = pixel_oracle_mask(a, cfg.height, cfg.width, cfg.lane_width)
    mb = pixel_oracle_mask(b, cfg.height, cfg.width, cfg.lane_width)
    inter = int(np.count_nonzero(ma & mb))
    union = int(np.count_nonzero(ma | mb))
    return inter / union if union else 0.0


def metric_suite(pairs: int = 100, seed: int = 2, size: int = 128) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = EvalConfig(size, size, lane_width=float(rng.choice([6.0, 10.0, 30.0])))
    mismatches = 0
    for _ in range(pairs):
        a, b = random_lane(rng, size, size), random_lane(rng, size, size)
        if lane_iou(a, b, cfg) != oracle_iou(a, b, cfg):
            mismatches += 1
    return [CheckResult(f"lane IoU equals pixel-count oracle ({pairs} pairs)", mismatches, 0, mismatches == 0)]


def loss_suite(cells: int = 1000, lanes: int = 100, seed: int = 3) -> list[CheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    p = rng.uniform(1e-6, 1 - 1e-6, cells)
    y = (rng.random(cells) < 0.5).astype(float)
    fl = float(focal_loss(p, y, FocalConfig(alpha=1.0, gamma=0.0)).data)
    bce = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
    worst = 0.0
    for _ in range(lanes):
        n = int(rng.integers(2, 40))
        xs = rng.uniform(0, 320, n)
        lane = Lane(np.stack([xs, np.arange(n, dtype=float) * 4], axis=1))
        worst = max(worst, abs(liou_loss(lane, lane)))
    return [
        CheckResult(f"focal(gamma=0, alpha=1) equals BCE ({cells} cells)", abs(fl - bce), 1e-12, abs(fl - bce) <= 1e-12),
        CheckResult(f"LIoU(a, a) is exactly 0 ({lanes} lanes)", worst, 0, worst == 0.0),
    ]


def run_all(seed: int = 0) -> Report:
    t0 = time.perf_counter()
    rep = Report()
    rep.results += gradient_suite(seed)
    rep.results += attention_suite(seed=seed + 1)
    rep.results += loss_suite(seed=seed + 3)
    rep.results += metric_suite(seed=seed + 2)
    rep.seconds = time.perf_counter() - t0
    return rep
