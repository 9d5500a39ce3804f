"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node holding its inputs and a
backward closure.  ``backward`` walks the recorded nodes reachable from a
scalar loss in reverse execution order and accumulates gradients into leaf
tensors that have ``requires_grad`` set.  The graph is kept after
``backward`` so repeated calls accumulate, which is what a per-width loop of
``loss.backward()`` calls relies on.
"""

from __future__ import annotations

import contextlib
import itertools
import weakref
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "ShapeError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "batch_norm2d",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "clamp",
    "add",
    "mul",
    "scale",
    "softmax_channels",
    "bilinear_upsample",
    "adaptive_avg_pool",
    "concat",
    "detach",
    "backward",
    "grad_check",
]

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("seq", "op", "inputs", "backward", "out_ref")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, out: "Tensor"):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward = backward_fn
        self.out_ref = weakref.ref(out)


class Tensor:
    """An n-dimensional float32/float64 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn, out)
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op}: non-finite input")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Executed operations reachable from a loss, in recording order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes = []
        stack = [root._node] if root._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        """Sever recorded nodes from their outputs; leaves keep their values."""
        for node in self.nodes:
            out = node.out_ref()
            if out is not None:
                out._node = None
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
        return
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = id(t._node)
                prev = grads.get(key)
                grads[key] = tg if prev is None else prev + tg
            else:
                t.grad = _accumulate(t.grad, tg)


def _accumulate(prev: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    if prev is None:
        return np.array(g, copy=True)
    return prev + g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.data.dtype.type(factor)

    def bw(g):
        return (g * g.dtype.type(factor),)

    return _result(out, (x,), bw, "scale")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = x.data * pos

    def bw(g):
        return (g * pos,)

    return _result(out, (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)

    def bw(g):
        return (g * out * (1 - out),)

    return _result(out, (x,), bw, "sigmoid")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ValueError("log: input must be strictly positive")
    out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _result(out, (x,), bw, "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _result(out, (x,), bw, "exp")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return _result(out, (x,), bw, "clamp")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(out, (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    edges = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(edges[i], edges[i + 1])
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(parts)

    return _result(out, tensors, bw, "concat")


def detach(x: Tensor) -> Tensor:
    """Same values, cut out of the graph; nothing upstream sees its gradient."""
    return Tensor._wrap(x.data)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 with max subtraction."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if Ck != C:
        raise ShapeError(f"conv2d kernel expects {Ck} input channels, input has {C}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {O} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    _check_finite(x.data, "conv2d")
    k, s, p = kh, stride, padding
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {H}x{W}")

    # im2col on a channels-last copy so every window row is a contiguous run
    xl = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xl, ((0, 0), (p, p), (p, p), (0, 0))) if p else np.ascontiguousarray(xl)
    sb, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Ho, Wo, k, k, C), strides=(sb, sh * s, sw * s, sh, sw, sc), writeable=False
    )
    cols = windows.reshape(B * Ho * Wo, k * k * C)
    kmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(O, k * k * C)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gk = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((gm.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2))
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # one gemm per kernel offset keeps the scatter-add source contiguous
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    blk = kmat[:, (i * k + j) * C : (i * k + j + 1) * C]
                    dxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += (gm @ blk).reshape(B, Ho, Wo, C)
            gx = dxp[:, p : p + H, p : p + W, :] if p else dxp
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, bw, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
    initialized: bool = True,
) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In train mode the batch statistics (biased variance) normalize the input
    and ``running_mean``/``running_var`` get fresh ``data`` arrays holding
    ``(1 - momentum) * running + momentum * batch``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects 4-D input, got {x.shape}")
    C = x.shape[1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (C,):
            raise ShapeError(f"batch_norm2d parameter shape {t.shape} does not match {C} channels")
    dt = x.dtype.type
    if mode == "eval":
        if not initialized:
            raise RuntimeError("batch_norm2d: running statistics are uninitialized")
        invstd = 1.0 / np.sqrt(running_var.data + dt(eps))
        xhat = (x.data - running_mean.data[None, :, None, None]) * invstd[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bw_eval(g):
            gx = g * (gamma.data * invstd)[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _result(out, (x, gamma, beta), bw_eval, "batch_norm_eval")
    if mode != "train":
        raise ValueError(f"batch_norm2d mode must be 'train' or 'eval', got {mode!r}")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError("batch_norm2d in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + dt(eps))
    xhat = centered * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    m = dt(momentum)
    running_mean.data = (1 - m) * running_mean.data + m * mean
    running_var.data = (1 - m) * running_var.data + m * var

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gx = (invstd * gamma.data / n)[None, :, None, None] * (
                n * g - gb[None, :, None, None] - xhat * gg[None, :, None, None]
            )
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw, "batch_norm_train")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _pool_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = ((i + 1) * n_in) // n_out
        m[i, lo:hi] = 1.0 / (hi - lo)
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str) -> Tensor:
    out = np.ascontiguousarray(np.matmul(np.matmul(rows, x.data), cols.T))

    def bw(g):
        return (np.ascontiguousarray(np.matmul(np.matmul(rows.T, g), cols)),)

    return _result(out, (x,), bw, op)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample target must be at least 1x1, got {out_h}x{out_w}")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return _separable(x, np.eye(H, dtype=x.dtype), np.eye(W, dtype=x.dtype), "bilinear")
    dt = x.dtype.str
    return _separable(x, _bilinear_matrix(H, out_h, dt), _bilinear_matrix(W, out_w, dt), "bilinear")


def adaptive_avg_pool(x: Tensor, out: int) -> Tensor:
    H, W = x.shape[-2:]
    if out < 1 or out > H or out > W:
        raise ShapeError(f"adaptive_avg_pool output {out} must lie in [1, min({H}, {W})]")
    dt = x.dtype.str
    return _separable(x, _pool_matrix(H, out, dt), _pool_matrix(W, out, dt), "adaptive_avg_pool")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(x)`` with central differences.

    The relative error per entry is ``|a - n| / max(|a|, |n|, 1e-3)``; the
    floor keeps near-zero gradients from inflating the ratio.  With
    ``max_entries`` only a seeded random subset of entries is probed.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs float64 inputs")
    probe = Tensor(x.data, requires_grad=True)
    loss = f(probe)
    backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    flat_idx = np.arange(x.data.size)
    if max_entries is not None and max_entries < flat_idx.size:
        flat_idx = np.sort(np.random.default_rng(seed).choice(flat_idx, max_entries, replace=False))
    base = x.data.copy()
    worst = 0.0
    with no_grad():
        for i in flat_idx:
            idx = np.unravel_index(i, base.shape)
            plus = base.copy()
            plus[idx] += step
            minus = base.copy()
            minus[idx] -= step
            numeric = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * step)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, err)
    return GradCheckReport(float(worst), tolerance)
