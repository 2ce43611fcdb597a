"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the CAM classifier are provided: 3x3-style
convolution with zero padding (stride 1), 2x2 max-pooling, global average
pooling, matrix multiply, bias add, ReLU, sigmoid, elementwise add/mul,
reductions and a fused, numerically stable binary cross-entropy.

Image tensors use NHWC layout. Convolution kernels are stored as
``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


def _shape_error(op: str, *shapes) -> ShapeError:
    shown = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {shown}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")  # keeps 0-d scalars 0-d
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputationTape:
    """Ordered record of primitive applications, replayed backwards."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._producers: dict[int, int] = {}

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._producers[id(out)] = len(self.nodes)
        self.nodes.append((out, tuple(inputs), vjp))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._producers

    def clear(self) -> None:
        self.nodes.clear()
        self._producers.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = ComputationTape()
_GRAD_ENABLED = True


def active_tape() -> ComputationTape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPE.record(out, inputs, vjp)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    The tape is cleared afterwards, so each forward pass supports exactly one
    backward call. Gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    if not _TAPE.produced(loss):
        raise ValueError("backward: loss was not produced on the active tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes = _TAPE.nodes[: _TAPE._producers[id(loss)] + 1]
    try:
        for out, inputs, vjp in reversed(nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            out.grad = g if out.grad is None else out.grad + g
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if _TAPE.produced(inp):
                    key = id(inp)
                    pending[key] = pending[key] + gi if key in pending else gi
                else:
                    _accumulate(inp, gi)
    finally:
        _TAPE.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise _shape_error("backward", g.shape, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise _shape_error("add", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise _shape_error("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit(ad * bd, (a, b), vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` with ``w`` stored as (out_features, in_features)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_error("linear", x.shape, w.shape)
    xd, wd = x.data, w.data

    def vjp(g):
        return g @ wd, g.T @ xd

    out = _emit(xd @ wd.T, (x, w), vjp)
    return out if b is None else bias_add(out, b)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise _shape_error("transpose", a.shape)
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise _shape_error("bias_add", x.shape, b.shape)
    axes = tuple(range(x.data.ndim - 1))

    def vjp(g):
        return g, g.sum(axis=axes)

    return _emit(x.data + b.data, (x, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit(np.where(mask, x.data, 0.0), (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (x,), vjp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _emit(np.asarray(x.data.sum()), (x,), vjp)


def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _emit(np.asarray(x.data.mean()), (x,), vjp)


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _emit(x.data * alpha, (x,), lambda g: (g * alpha,))


def _zero_pad(a: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two spatial axes of an NHWC array (much cheaper than ``np.pad``)."""
    if not p:
        return a
    n, h, w, c = a.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=a.dtype)
    out[:, p:p + h, p:p + w] = a
    return out


def conv2d(x: Tensor, w: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 convolution (cross-correlation) of NHWC ``x`` with zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise _shape_error("conv2d", x.shape, w.shape)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", x.shape, w.shape)
    p = padding
    xp = _zero_pad(x.data, p)
    # (n, ho, wo, cin, kh, kw) -> (n*ho*wo, kh*kw*cin)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # full correlation of the output gradient with the flipped kernel
            q = kh - 1 - p
            gp = _zero_pad(g, q)
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gcols = np.ascontiguousarray(gwin.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cout)
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gx = (gcols @ wflip).reshape(n, h, wd, cin)
        return gx, gw

    return _emit(out, (x, w), vjp)


def max_pool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max-pooling; ties route the gradient to the first maximum."""
    if x.data.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise _shape_error("max_pool2d", x.shape)
    n, h, w, c = x.shape
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        g4 = np.zeros(win.shape)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        gx = g4.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return _emit(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NHWC map -> (N, C)."""
    if x.data.ndim != 4:
        raise _shape_error("global_avg_pool", x.shape)
    n, h, w, c = x.shape
    hw = h * w

    def vjp(g):
        return (np.broadcast_to(g[:, None, None, :] / hw, x.shape).copy(),)

    return _emit(x.data.mean(axis=(1, 2)), (x,), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets.

    Evaluated as ``max(z, 0) - z*t + log1p(exp(-|z|))`` so it never overflows.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise _shape_error("bce_with_logits", logits.shape, t.shape)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    z = logits.data
    n = z.size
    val = np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def vjp(g):
        return (float(g) * (_sigmoid(z) - t) / n,)

    return _emit(np.asarray(val), (logits,), vjp)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "global_avg_pool": global_avg_pool,
    "matmul": matmul,
    "linear": linear,
    "transpose": transpose,
    "bias_add": bias_add,
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "mul": mul,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "bce_with_logits": bce_with_logits,
}


def forward_primitive(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply the primitive named ``op_kind`` to ``inputs``."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*[_as_tensor(t) for t in inputs], **kwargs)
