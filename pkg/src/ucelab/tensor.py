"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Only what a small convolutional segmentation network needs is provided:
same-padded 2d convolution, a handful of elementwise ops, softmax, reductions
and inverted dropout. Storage defaults to float32; reductions accumulate in
float64.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, NumericError, PreconditionError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable operation recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float array plus an optional gradient slot.

    Tensors produced by differentiable ops while recording is enabled keep a
    reference to their inputs and a backward rule; ``backward()`` on a scalar
    result replays those rules in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            elif isinstance(data, Tensor):
                dtype = data.data.dtype
            else:
                dtype = np.float32
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise PreconditionError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"{what} contains non-finite values")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


Operand = Union[Tensor, float, int, np.ndarray]


def _as_tensor(x: Operand, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` and, when recording, attach the backward rule.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# -- computation record ---------------------------------------------------


class CompRecord:
    """Operations reachable from an output, in topological (creation) order."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_output(cls, output: Tensor) -> "CompRecord":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls([t for t in order if t._backward is not None])

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor) -> CompRecord:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers across calls.
    """
    if loss.size != 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise PreconditionError("loss is not connected to any tensor requiring grad")
    record = CompRecord.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(record.ops):
        g_out = grads.pop(id(node), None)
        if g_out is None:
            continue
        for parent, g in zip(node._parents, node._backward(g_out)):
            if not parent.requires_grad:
                continue
            if parent._backward is None:
                leaves[id(parent)] = parent
            if g is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return record


# -- elementwise ----------------------------------------------------------


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if b.ndim != 0 and a.ndim != 0 and a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_like(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(dtype=np.float64), dtype=t.dtype)
    return g


def add(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_pair(a, b, "add")

    def _bw(g):
        return _reduce_like(g, a), _reduce_like(g, b)

    return _record((a.data + b.data).astype(a.dtype, copy=False), (a, b), _bw, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_pair(a, b, "sub")

    def _bw(g):
        return _reduce_like(g, a), _reduce_like(-g, b)

    return _record((a.data - b.data).astype(a.dtype, copy=False), (a, b), _bw, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_pair(a, b, "mul")

    def _bw(g):
        ga = _reduce_like(g * b.data, a) if a.requires_grad else None
        gb = _reduce_like(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return _record((a.data * b.data).astype(a.dtype, copy=False), (a, b), _bw, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _bw(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0).astype(a.dtype), (a,), _bw, "relu")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")

    def _bw(g):
        return (g / a.data,)

    return _record(np.log(a.data), (a,), _bw, "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _bw(g):
        return (g * out,)

    return _record(out, (a,), _bw, "exp")


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)

    def _bw(g):
        return (g * exponent * np.power(a.data, exponent - 1),)

    return _record(np.power(a.data, exponent).astype(a.dtype), (a,), _bw, "pow")


def elementwise(op: str, a: Operand, b: Operand = None) -> Tensor:
    """Dispatch by name: add, mul, sub, relu, log, exp, pow_scalar."""
    binary = {"add": add, "mul": mul, "sub": sub, "pow_scalar": pow_scalar}
    unary = {"relu": relu, "log": log, "exp": exp}
    if op in binary:
        return binary[op](_as_tensor(a), b)
    if op in unary:
        return unary[op](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions -----------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def _bw(g):
        return (_expand(g, a.shape, axis).astype(a.dtype),)

    return _record(out, (a,), _bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = (np.sum(a.data, axis=axis, dtype=np.float64) / count).astype(a.dtype)

    def _bw(g):
        return ((_expand(g, a.shape, axis) / count).astype(a.dtype),)

    return _record(out, (a,), _bw, "mean")


def std_unbiased(a: Tensor, axis=None) -> Tensor:
    """Sample standard deviation with the (n - 1) denominator."""
    n = a.size if axis is None else a.shape[axis]
    if n < 2:
        raise PreconditionError("std_unbiased needs at least two values along the axis")
    x = a.data.astype(np.float64)
    mu = np.mean(x, axis=axis, keepdims=True)
    dev = x - mu
    std = np.sqrt(np.sum(dev * dev, axis=axis) / (n - 1))

    def _bw(g):
        s = std if axis is None else np.expand_dims(std, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(s > 0, gg * dev / ((n - 1) * s), 0.0)
        return (out.astype(a.dtype),)

    return _record(std.astype(a.dtype), (a,), _bw, "std")


def argmax(a: Operand, axis=None) -> np.ndarray:
    """Index of the maximum; ties go to the lowest index. Not differentiable."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.argmax(data, axis=axis)


def reduce(op: str, t: Tensor, axis=None):
    table = {"sum": sum_, "mean": mean, "std_unbiased": std_unbiased, "argmax": argmax}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](t, axis)


# -- softmax --------------------------------------------------------------


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    x64 = x.astype(np.float64)
    shifted = x64 - np.max(x64, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _check_classes(a: Tensor, axis: int) -> None:
    if a.shape[axis] < 2:
        raise DimensionError("softmax needs at least two classes")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("non-finite logits")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    _check_classes(a, axis)
    p = np.exp(_log_softmax_np(a.data, axis))

    def _bw(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return ((p * (g - dot)).astype(a.dtype),)

    return _record(p.astype(a.dtype), (a,), _bw, "softmax")


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    _check_classes(a, axis)
    lp = _log_softmax_np(a.data, axis)

    def _bw(g):
        total = np.sum(g, axis=axis, keepdims=True, dtype=np.float64)
        return ((g - np.exp(lp) * total).astype(a.dtype),)

    return _record(lp.astype(a.dtype), (a,), _bw, "log_softmax")


def softmax_logs(a: Tensor, axis: int = 1) -> tuple:
    """Return ``(probs, log_probs)`` along ``axis``, both differentiable."""
    return softmax(a, axis), log_softmax(a, axis)


def take_class(a: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Gather ``a`` along ``axis`` at integer ``index`` (shape of ``a`` minus ``axis``)."""
    idx = np.expand_dims(np.asarray(index, dtype=np.intp), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis).astype(a.dtype), axis=axis)
        return (full,)

    return _record(out, (a,), _bw, "take_class")


# -- convolution ----------------------------------------------------------


def _conv_same(x: np.ndarray, w: np.ndarray, keep_cols: bool = False):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    pad = (k - 1) // 2
    if k == 1:
        cols = x.reshape(n, cin, h * wd)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, Cin, H, W, k, k
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * k * k, h * wd)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, h, wd)
    return (out, cols) if keep_cols else (out, None)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding (odd kernels only)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects input [N,Cin,H,W] and kernel [Cout,Cin,k,k]")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    need_cols = is_grad_enabled() and weight.requires_grad
    out, cols = _conv_same(x.data, weight.data, keep_cols=need_cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    out = out.astype(x.dtype, copy=False)
    if not np.all(np.isfinite(out)):
        raise NumericError("conv2d produced non-finite values")

    def _bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_same(g, flipped)
        if weight.requires_grad:
            gm = g.reshape(g.shape[0], cout, -1)
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, _bw, "conv2d")


# -- dropout --------------------------------------------------------------


def dropout(x: Tensor, ratio: float, rng=None, active: bool = True) -> Tensor:
    """Inverted dropout. ``rng`` is an ``RngStream`` or ``numpy.random.Generator``."""
    if not 0.0 <= ratio < 1.0:
        raise PreconditionError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not active or ratio == 0.0:
        return x
    if rng is None:
        raise PreconditionError("active dropout needs a random stream")
    gen = rng.generator() if hasattr(rng, "generator") else rng
    keep = gen.random(x.shape, dtype=np.float32) >= ratio
    scale = np.where(keep, 1.0 / (1.0 - ratio), 0.0).astype(x.dtype)

    def _bw(g):
        return (g * scale,)

    return _record(x.data * scale, (x,), _bw, "dropout")
