"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it in
execution order. :func:`backward` walks the tape in strict reverse order, so
every node's gradient is complete before it is pushed to its inputs.

Outside a tape, operations still compute values but record nothing, which is
what inference and finite-difference probes use.

Elementwise binary ops only broadcast a size-1 operand against a tensor. Any
other broadcast must be spelled out with :func:`broadcast_to`, which keeps
gradient reductions explicit.
"""
from __future__ import annotations

import threading
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "backward", "no_tape",
    "add", "sub", "mul", "div", "neg", "scale", "exp", "log", "sigmoid",
    "relu", "sqrt", "square", "sin", "cos", "clamp", "elementwise",
    "matmul", "softmax", "log_softmax", "conv2d", "avg_pool2d",
    "upsample_nearest", "sum", "mean", "reshape", "transpose",
    "broadcast_to", "concat", "stack", "index", "take_along_axis",
    "amin", "amax", "detach", "straight_through", "spire", "spire_pattern",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "kind")

    def __init__(self, kind, out, inputs, backward_fn):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations inside the ``with`` block whose
    inputs require gradients are recorded. Tapes nest per thread and never
    share state, so separate threads may each run their own tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._producer: dict[int, _Node] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        node = _Node(kind, out, tuple(inputs), backward_fn)
        self.nodes.append(node)
        self._producer[id(out)] = node

    def backward(self, root: Tensor) -> None:
        backward(self, root)


class no_tape:
    """Suspend recording inside the block (used for parameter updates)."""

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(None)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if id(root) not in tape._producer:
        if root.requires_grad:
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones_like(root.data)
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.kind}: gradient shape {gi.shape} != input shape {t.shape}")
            if id(t) in tape._producer:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = needs
    if needs:
        tape.record(kind, out, inputs, backward_fn)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to a size-1 operand's shape."""
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _binary_shapes(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} need explicit broadcast_to")


# --------------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    return _make("add", out, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    return _make("sub", out, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    return _make("mul", out, (a, b),
                 lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _reduce_to(ga, a.shape), _reduce_to(-ga * out, b.shape)

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, k: float) -> Tensor:
    a = _as_tensor(a)
    k = float(k)
    return _make("scale", a.data * k, (a,), lambda g: (g * k,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a, mask: np.ndarray | None = None) -> Tensor:
    """``max(a, 0)``; a given boolean ``mask`` replaces the sign test (pins the linear piece)."""
    a = _as_tensor(a)
    if mask is None:
        mask = a.data > 0
    elif mask.shape != a.shape:
        raise ShapeError(f"relu mask shape {mask.shape} != {a.shape}")
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make("cos", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]. Gradient is 1 on the closed interval, 0 strictly outside."""
    a = _as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: {lo} > {hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _make("clamp", out, (a,), lambda g: (g * inside,))


_UNARY = {"exp": exp, "sigmoid": sigmoid, "neg": neg, "relu": relu, "sqrt": sqrt,
          "square": square, "log": log, "sin": sin, "cos": cos}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch by name; ``scale`` takes ``k=``, ``clamp`` takes ``lo=``/``hi=``."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, kw["k"] if b is None else b)
    if kind == "clamp":
        return clamp(a, kw["lo"], kw["hi"])
    raise ValueError(f"unknown elementwise op {kind!r}")


# --------------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    Batch axes of ``a`` and ``b`` must match exactly, or ``b`` may be a plain
    2-D matrix shared across ``a``'s batch (its gradient is summed).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


# --------------------------------------------------------------------- convolution

def _corr_direct(xp, k, stride):
    kh, kw = k.shape[-2:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwij,ocij->bohw", win, k, optimize=True)


def _corr_fft(xp, k):
    # circular correlation of size (Hp, Wp) is exact on the valid region
    hp, wp = xp.shape[-2:]
    kh, kw = k.shape[-2:]
    X = np.fft.rfft2(xp, s=(hp, wp))
    K = np.fft.rfft2(k[..., ::-1, ::-1], s=(hp, wp))
    Y = np.einsum("bcuv,ocuv->bouv", X, K, optimize=True)
    full = np.fft.irfft2(Y, s=(hp, wp))
    return full[..., kh - 1:, kw - 1:]


def conv2d(x, kernels, pad: int = 0, stride: int = 1, method: str = "auto") -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``(C_in, H, W)`` or ``(B, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, k, k)`` with odd ``k``. Zero padding of ``pad`` pixels on
    every side. ``method`` picks the direct (windowed einsum) or FFT path;
    ``auto`` uses FFT for kernels wider than 5.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d shapes {x.shape}, {kernels.shape}")
    xd = x.data[None] if squeeze else x.data
    kd = kernels.data
    cout, cin, kh, kw = kd.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {kh}x{kw}")
    if xd.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {xd.shape[1]}, kernel {cin}")
    H, W = xd.shape[2:]
    hp, wp = H + 2 * pad, W + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if method == "auto":
        method = "fft" if kh > 5 else "direct"
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if method == "fft":
        out = _corr_fft(xp, kd)[..., ::stride, ::stride]
    elif method == "direct":
        out = _corr_direct(xp, kd, stride)
    else:
        raise ValueError(f"unknown conv2d method {method!r}")
    out = np.ascontiguousarray(out)
    ho, wo = out.shape[-2:]

    def bw(g):
        g4 = g[None] if squeeze else g
        if stride > 1:
            gd = np.zeros(g4.shape[:2] + (hp - kh + 1, wp - kw + 1))
            gd[..., ::stride, ::stride] = g4
        else:
            gd = g4
        gxp = gk = None
        # input grad: full convolution of gd with the kernel
        if method == "fft":
            G = np.fft.rfft2(gd, s=(hp, wp))
            if x.requires_grad:
                Kf = np.fft.rfft2(kd, s=(hp, wp))
                gxp = np.fft.irfft2(np.einsum("bouv,ocuv->bcuv", G, Kf, optimize=True), s=(hp, wp))
            if kernels.requires_grad:
                Xf = np.fft.rfft2(xp, s=(hp, wp))
                gk = np.fft.irfft2(np.einsum("bcuv,bouv->ocuv", Xf, np.conj(G), optimize=True),
                                   s=(hp, wp))[..., :kh, :kw]
        else:
            if x.requires_grad:
                gpad = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gxp = _corr_direct(gpad, np.swapaxes(kd[..., ::-1, ::-1], 0, 1), 1)
            if kernels.requires_grad:
                win = sliding_window_view(xp, gd.shape[-2:], axis=(2, 3))
                gk = np.einsum("bcijhw,bohw->ocij", win, gd, optimize=True)
        gx = None
        if gxp is not None:
            gx = gxp[..., pad:pad + H, pad:pad + W]
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        return gx, None if gk is None else np.ascontiguousarray(gk)

    return _make("conv2d", out[0] if squeeze else out, (x, kernels), bw)


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k``x``k`` mean pooling over the last two axes."""
    x = _as_tensor(x)
    H, W = x.shape[-2:]
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (H // k, k, W // k, k)).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k),)

    return _make("avg_pool2d", out, (x,), bw)


def upsample_nearest(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    lead = x.shape[:-2]
    H, W = x.shape[-2:]

    def bw(g):
        return (g.reshape(lead + (H, factor, W, factor)).sum(axis=(-3, -1)),)

    return _make("upsample_nearest", out, (x,), bw)


# --------------------------------------------------------------------- shape & reduction

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()) if g.size == 1 else g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast_to", out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _make("stack", out, ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def index(a, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = _as_tensor(a)
    out = np.array(a.data[key], dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g.reshape(np.shape(a.data[key])))
        return (ga,)

    return _make("index", out, (a,), bw)


def take_along_axis(a, idx: np.ndarray, axis: int) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        ax = axis % a.ndim
        if idx.shape[ax] == 1:
            np.put_along_axis(ga, idx, g, axis=ax)     # one pick per row: nothing to accumulate
            return (ga,)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(ga, tuple(grids), g)
        return (ga,)

    return _make("take_along_axis", out, (a,), bw)


def _arg_extreme(a: Tensor, axis: int, keepdims: bool, fn) -> Tensor:
    ad = a.data
    pos = fn(ad, axis=axis)
    idx = np.expand_dims(pos, axis)
    out = np.take_along_axis(ad, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
        if out.ndim == 0:
            out = out.reshape(1)

    def bw(g):
        ga = np.zeros_like(ad)
        gk = g.reshape(idx.shape)
        np.put_along_axis(ga, idx, gk, axis=axis)
        return (ga,)

    return _make(fn.__name__, out, (a,), bw)


def amin(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Minimum along ``axis``; gradient goes to the first minimising entry."""
    return _arg_extreme(_as_tensor(a), axis, keepdims, np.argmin)


def amax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximising entry."""
    return _arg_extreme(_as_tensor(a), axis, keepdims, np.argmax)


def detach(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data.copy())


def straight_through(hard: np.ndarray, soft) -> Tensor:
    """Forward value ``hard``; backward passes the gradient to ``soft`` unchanged.

    Equivalent to ``hard + soft - stopgrad(soft)``.
    """
    soft = _as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through shapes {hard.shape} vs {soft.shape}")
    return _make("straight_through", hard.copy(), (soft,), lambda g: (g,))


def spire_pattern(diff: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Window/sign code for :func:`spire`: +-1 inside ``|diff| < h``, 0 outside."""
    side = np.where(diff >= 0, 1, -1).astype(np.int8)
    return side * (np.abs(diff) < h).astype(np.int8)


def spire(values, levels, half, normalized: bool = False,
          pattern: np.ndarray | None = None) -> Tensor:
    """Triangular soft assignment of each value to nearby levels.

    ``values`` ``(..., P)``, ``levels`` ``(..., M)``, ``half`` ``(..., 1)``.
    Returns ``(..., P, M)`` with entry ``1 - |L - v|`` (or ``1 - |L - v| / half``
    when ``normalized``) wherever ``|L - v| < half`` and 0 elsewhere. The
    unnormalised window is also cut at distance 1, where its ramp reaches
    zero, so no weight is ever negative. The window test carries no gradient.

    ``pattern`` optionally fixes the piece: an int8 array of the output's
    shape holding ``sign(L - v)`` (+1 at zero) inside the window and 0 outside. The
    result is then the smooth continuation ``1 - pattern * (L - v)`` on that
    window, which is what the gradient differentiates anyway.
    """
    values, levels, half = _as_tensor(values), _as_tensor(levels), _as_tensor(half)
    diff = levels.data[..., None, :] - values.data[..., :, None]
    h = half.data[..., None]
    if pattern is None:
        pattern = spire_pattern(diff, h if normalized else np.minimum(h, 1.0))
    elif pattern.shape != diff.shape:
        raise ShapeError(f"spire pattern shape {pattern.shape} != {diff.shape}")
    active = pattern != 0
    dist = pattern * diff
    if normalized:
        out = np.where(active, 1.0 - dist / h, 0.0)
    else:
        out = np.where(active, 1.0 - dist, 0.0)

    def bw(g):
        gs = g * pattern
        if normalized:
            gs = gs / h
            gh = (g * active * dist / (h * h)).sum(axis=(-2, -1))[..., None]
        else:
            gh = np.zeros_like(half.data)
        return gs.sum(axis=-1), -gs.sum(axis=-2), gh

    return _make("spire", out, (values, levels, half), bw)


def spire_uniform(values, levels, half, normalized: bool = False,
                  piece: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """:func:`spire` for evenly spaced levels ``levels[..., m] = levels[..., 0] + 2*m*half``.

    Windows are then disjoint, so each value sits in at most one of them and
    the assignment is stored per value as ``(level index, sign)`` with sign 0
    meaning no window. Returns the dense ``(..., P, M)`` output and that piece,
    which can be passed back to pin the same windows.
    """
    values, levels, half = _as_tensor(values), _as_tensor(levels), _as_tensor(half)
    v, L, h = values.data, levels.data, half.data
    M = L.shape[-1]
    if piece is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = (v - L[..., :1]) / (2.0 * h)
        pos = np.where(np.isfinite(pos), pos, -1.0)
        idx = np.clip(np.rint(pos), 0, M - 1).astype(np.intp)
        diff = np.take_along_axis(L, idx, axis=-1) - v
        reach = h if normalized else np.minimum(h, 1.0)
        sign = np.where(diff >= 0, 1, -1).astype(np.int8) * (np.abs(diff) < reach)
        sign = sign.astype(np.int8)
    else:
        idx, sign = piece
        if idx.shape != v.shape or sign.shape != v.shape:
            raise ShapeError(f"spire piece shape {idx.shape} != values shape {v.shape}")
        diff = np.take_along_axis(L, idx, axis=-1) - v
    dist = sign * diff
    w = 1.0 - dist / h if normalized else 1.0 - dist
    w = np.where(sign != 0, w, 0.0)
    out = np.zeros(v.shape + (M,))
    np.put_along_axis(out, idx[..., None], w[..., None], axis=-1)

    def bw(g):
        g_sel = np.take_along_axis(g, idx[..., None], axis=-1)[..., 0]
        gs = g_sel * sign
        if normalized:
            gs = gs / h
            gh = (g_sel * (sign != 0) * dist / (h * h)).sum(axis=-1, keepdims=True)
        else:
            gh = np.zeros_like(h)
        lead = int(np.prod(v.shape[:-1]))
        flat_idx = (np.arange(lead)[:, None] * M + idx.reshape(lead, -1)).ravel()
        gL = -np.bincount(flat_idx, weights=gs.reshape(-1), minlength=lead * M).reshape(L.shape)
        return gs, gL, gh

    return _make("spire", out, (values, levels, half), bw), (idx, sign)
