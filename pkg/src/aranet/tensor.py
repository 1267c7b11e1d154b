"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive records one node on a thread-local tape when any input
requires a gradient.  ``backward`` collects the nodes reachable from the
root and replays their adjoints in reverse recording order, so each
recorded operation is visited exactly once.

Storage follows the input dtype (float32 for the networks, float64 for
gradient checks); convolution inner products and reductions accumulate in
float64.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_recording",
    "conv2d",
    "upsample_nearest2x",
    "avgpool2x",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "scalar_add",
    "square",
    "relu",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "mean_all",
    "sum_all",
    "mean_spatial",
    "linear",
    "reshape",
    "smooth_l1",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_state = threading.local()
_counter = itertools.count()


def is_recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = is_recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "inputs", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], backward: Callable[[np.ndarray], Sequence]):
        self.seq = next(_counter)
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """An n-dimensional real array that can participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = is_recording() and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out._node = _Node(inputs, backward_fn)
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from a scalar root."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not require grad (not on the tape)")

    nodes: dict[int, tuple[_Node, Tensor]] = {}
    stack = [root]
    seen = {id(root)}
    while stack:
        t = stack.pop()
        if t._node is None:
            continue
        nodes[t._node.seq] = (t._node, t)
        for inp in t._node.inputs:
            if inp.requires_grad and id(inp) not in seen:
                seen.add(id(inp))
                stack.append(inp)

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=np.float64)}
    owners: dict[int, Tensor] = {id(root): root}
    for seq in sorted(nodes, reverse=True):
        node, out = nodes[seq]
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                owners[key] = inp

    for key, g in grads.items():
        t = owners[key]
        g = np.array(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.dtype for t in ts))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make((a.data * c).astype(a.dtype, copy=False), (a,), lambda g: (g * c,))


def scalar_add(a: Tensor, c: float) -> Tensor:
    return _make((a.data + float(c)).astype(a.dtype, copy=False), (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    out = np.where(pos, a.data, a.data * a.dtype.type(slope))
    return _make(out, (a,), lambda g: (g * scale,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data.astype(np.float64)
    # two-sided form avoids overflow in exp
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s.astype(a.dtype), (a,), lambda g: (g * s * (1.0 - s),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels: no inputs")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4:
            raise ShapeError(f"concat_channels: expected 4D tensors, got {t.shape}")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: non-channel extents differ {t.shape} vs {ref}")
    dtype = _result_dtype(*tensors)
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw)


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def smooth_l1(residual: Tensor, delta: float) -> Tensor:
    """Elementwise ½r² for |r| < delta, delta·(|r| − ½delta) otherwise."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    r = residual.data.astype(np.float64)
    ar = np.abs(r)
    quad = ar < delta
    out = np.where(quad, 0.5 * r * r, delta * (ar - 0.5 * delta))
    deriv = np.where(quad, r, delta * np.sign(r))
    return _make(out.astype(residual.dtype), (residual,), lambda g: (g * deriv,))


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("sum_all: empty tensor")
    shape = a.shape
    total = np.sum(a.data, dtype=np.float64)
    return _make(np.asarray(total, dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean_all: empty tensor")
    shape, n = a.shape, a.size
    total = np.sum(a.data, dtype=np.float64) / n
    return _make(np.asarray(total, dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def mean_spatial(a: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] mean over the spatial axes."""
    if a.data.ndim != 4:
        raise ShapeError(f"mean_spatial: expected 4D tensor, got {a.shape}")
    shape = a.shape
    hw = shape[2] * shape[3]
    out = np.sum(a.data, axis=(2, 3), dtype=np.float64) / hw
    return _make(out.astype(a.dtype), (a,),
                 lambda g: (np.broadcast_to((g / hw)[:, :, None, None], shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """[N, F] @ [F, O] + [O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot apply {weight.shape} weight to {x.shape} input")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    xd = x.data.astype(np.float64)
    wd = weight.data.astype(np.float64)
    out = xd @ wd + bias.data
    return _make(out.astype(x.dtype), (x, weight, bias),
                 lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------- spatial


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of [N,C,H,W] with [F,C,k,k] plus per-filter bias."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [F,C,k,k], got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    n, c, h, w = x.shape
    f, kc, k, _ = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: channel axis mismatch, input has {c}, kernel expects {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias axis mismatch, expected ({f},), got {bias.shape}")
    for axis, ext in (("height", h), ("width", w)):
        span = ext + 2 * padding - k
        if span < 0:
            raise ShapeError(f"conv2d: {axis} axis {ext} (+2*{padding}) smaller than kernel {k}")
        if span % stride:
            raise ShapeError(f"conv2d: {axis} axis {ext} not compatible with stride {stride}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    cols = kernels.im2col(x.data, k, stride, padding)
    wmat = kernel.data.reshape(f, -1).astype(np.float64)
    out = wmat @ cols
    out += bias.data.astype(np.float64)[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    dtype = _result_dtype(x, kernel)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=1) if bias.requires_grad else None
        gx = kernels.col2im(wmat.T @ gm, x.shape, k, stride, padding) if x.requires_grad else None
        return gx, gw, gb

    return _make(np.ascontiguousarray(out, dtype=dtype), (x, kernel, bias), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected [N,C,H,W], got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def avgpool2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2x: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x: spatial extents must be even, got {h}x{w}")
    blocks = x.data.astype(np.float64).reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.sum(axis=(3, 5)) / 4.0

    def bw(g):
        return (np.broadcast_to((g / 4.0)[:, :, :, None, :, None], (n, c, h // 2, 2, w // 2, 2))
                .reshape(n, c, h, w),)

    return _make(out.astype(x.dtype), (x,), bw)
