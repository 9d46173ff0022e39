"""Dense float64 arrays with a tape-based reverse-mode autodiff.

Every value is a numpy float64 array wrapped in :class:`Tensor`. Operations
record their inputs and a closure that pushes the output gradient back to
them; :func:`backward` walks the recorded graph in reverse topological order
and accumulates gradients additively, so fan-out is handled for free.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def gradient(self) -> np.ndarray:
        """Gradient buffer; all-zero until something flows into it."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return _node(out, (a,), lambda g: _accumulate(a, g * p * a.data ** (p - 1)), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: _accumulate(a, g * mask), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: _accumulate(a, g * np.sign(a.data)), "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g * pick_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~pick_a, b.shape))

    return _node(out, (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        _accumulate(a, _unbroadcast(g * pick_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~pick_a, b.shape))

    return _node(out, (a, b), bw, "minimum")


def clip(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    keep = out == a.data
    return _node(out, (a,), lambda g: _accumulate(a, g * keep), "clip")


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: _accumulate(a, np.transpose(g, inv)), "transpose")


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _node(out, (a,), bw, "index")


def concat(items: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in items]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _node(out, ts, bw, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), bw, "matmul")


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, (x,), bw, "softmax_rows")


def _conv_geometry(h, w, kh, kw, stride, padding):
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    return ph, pw, ho, wo


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of an HxWxCin map with a kh x kw x Cin x Cout kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((ho, wo, kh, kw, cin), dtype=DTYPE)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj, :] = xp[di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :]
    cols2 = cols.reshape(ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ kmat).reshape(ho, wo, cout)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(ho * wo, cout)
        if kernel.requires_grad:
            _accumulate(kernel, (cols2.T @ g2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0).reshape(bias.shape))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    dxp[di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :] += dcols[:, :, di, dj, :]
            _accumulate(x, dxp[ph:ph + h, pw:pw + w, :])

    return _node(out, parents, bw, "conv2d")


def avg_pool(x, factor: int) -> Tensor:
    """Non-overlapping area average over ``factor x factor`` blocks of an HxWxC map."""
    x = as_tensor(x)
    h, w, c = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool: {h}x{w} not divisible by {factor}")
    out = x.data.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))

    def bw(g):
        up = np.repeat(np.repeat(g, factor, axis=0), factor, axis=1) / (factor * factor)
        _accumulate(x, up)

    return _node(out, (x,), bw, "avg_pool")


# ---------------------------------------------------------------- autodiff driver

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Gradients accumulate into ``.grad`` of every reachable tensor that
    requires grad. Returns ``{id(leaf): grad}`` for the reachable leaves.
    """
    if root.data.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological(root)
    _accumulate(root, np.ones_like(root.data))
    leaves = {}
    for node in reversed(order):
        if node.backward_fn is not None:
            if node.grad is not None:
                node.backward_fn(node.grad)
            # interior buffers are not needed once propagated
            node.grad = None if node.parents else node.grad
        else:
            leaves[id(node)] = node.gradient
    return leaves


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[int, int] | None
    failures: list[tuple[int, int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare ``backward`` against central differences.

    ``f`` takes no arguments and rebuilds the graph from the current values of
    ``params``. Relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-12)``. ``max_coords`` subsamples each
    parameter's coordinates (with ``rng``) for large parameter sets.
    """
    if h <= 0:
        raise ContractError("grad_check needs h > 0")
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.gradient.copy() for p in params]
    worst_err, worst = 0.0, None
    failures = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            fp = float(f().data)
            flat[ci] = orig - h
            fm = float(f().data)
            flat[ci] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append((pi, int(ci), "non-finite function value at probe point"))
                continue
            num = (fp - fm) / (2 * h)
            ana = analytic[pi].reshape(-1)[ci]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            if err > worst_err:
                worst_err, worst = err, (pi, int(ci))
    return GradCheckResult(worst_err, worst, failures)
