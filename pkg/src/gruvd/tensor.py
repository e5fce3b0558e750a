"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation
creates a :class:`ComputationRecord` holding the inputs and a closure that
maps the output gradient to input gradients. :meth:`Tensor.backward` replays
the records reachable from a scalar loss in reverse execution order.

Broadcasting is restricted to two cases: a scalar operand, and a per-channel
``[1, C, 1, 1]`` operand against ``[B, C, H, W]``.
"""
from __future__ import annotations

import contextlib
import itertools
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ShapeError",
    "tensor",
    "zeros",
    "zeros_like",
    "ones_like",
    "add",
    "sub",
    "mul",
    "scale",
    "abs_",
    "elementwise",
    "sigmoid",
    "tanh",
    "relu",
    "activation",
    "conv2d",
    "concat",
    "channel_slice",
    "repeat_channels",
    "sum_",
    "mean",
    "no_grad",
    "grad_enabled",
    "finite_difference_check",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_seq = itertools.count()
_grad_enabled = True


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


def grad_enabled() -> bool:
    return _grad_enabled


class ComputationRecord:
    """One executed operation: its inputs and the gradient rule."""

    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)

    def clear(self) -> None:
        self.inputs = ()
        self.backward_fn = None


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.record: Optional[ComputationRecord] = None
        self.name: Optional[str] = None

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
    def is_leaf(self) -> bool:
        return self.record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __abs__(self):
        return abs_(self)

    # -- differentiation ----------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar. Calling twice without zeroing the leaves
        accumulates; the graph is kept until :meth:`release_graph`.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if grad is None:
            grad = np.ones_like(self.data)

        # collect reachable records; sorting by seq gives execution order
        records = {}
        leaves = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.record is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            records[t.record.seq] = t
            stack.extend(x for x in t.record.inputs if isinstance(x, Tensor) and x.requires_grad)

        pending = {id(self): np.asarray(grad, dtype=self.dtype).reshape(self.shape)}
        for seq in sorted(records, reverse=True):
            out = records[seq]
            g = pending.pop(id(out), None)
            if g is None:
                continue
            rec = out.record
            in_grads = rec.backward_fn(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + ig
                else:
                    pending[key] = ig

        for leaf in leaves:
            g = pending.pop(id(leaf), None)
            if g is None:
                g = np.zeros_like(leaf.data)
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=leaf.dtype, copy=True)
            else:
                leaf.grad = leaf.grad + g

    def release_graph(self) -> None:
        """Drop every record reachable from this tensor."""
        stack = [self]
        while stack:
            t = stack.pop()
            rec = t.record
            if rec is None:
                continue
            stack.extend(x for x in rec.inputs if isinstance(x, Tensor))
            rec.clear()
            t.record = None


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.record = ComputationRecord(op, inputs, backward_fn)
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or int(np.prod(a)) == 1:
        return b
    if len(b) == 0 or int(np.prod(b)) == 1:
        return a
    for big, small in ((a, b), (b, a)):
        if len(big) == 4 and small == (1, big[1], 1, 1):
            return big
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.sum(axis=(0, 2, 3), keepdims=True)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _reduce_to(g * bd, ad.shape) if a.requires_grad else None,
            _reduce_to(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def abs_(a: Tensor) -> Tensor:
    # sign(0) = 0: the subgradient at a kink is zero
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sgn,))


_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul (binary), abs, neg (unary), scale (b is a float)."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "abs":
        return abs_(a)
    if op_kind == "neg":
        return scale(a, -1.0)
    if op_kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- activations ---------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, "tanh", (x,), lambda g: (g * (1 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(kind: str, x: Tensor) -> Tensor:
    if kind in (None, "none"):
        return x
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# -- convolution --------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIkk weights (im2col + GEMM)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d input has {C} channels but weight {w.shape} expects {Ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {O} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if H + 2 * padding - k < 0 or W + 2 * padding - k < 0 or Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {k}, padding {padding}")

    if stride == 1:
        out, bw = _conv_flat(x, w, bias, padding)
    else:
        out, bw = _conv_im2col(x, w, bias, stride, padding, Ho, Wo)
    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(out, "conv2d", inputs, bw)


def _conv_flat(x, w, bias, padding):
    # stride 1: on the row-major padded grid, tap (i, j) is a constant offset
    # i*Wp + j, so every tap is a contiguous slice of the flattened image.
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = Hp - k + 1, Wp - k + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    flat = xp.reshape(B, C, Hp * Wp)
    L = (Ho - 1) * Wp + Wo
    offsets = [i * Wp + j for i in range(k) for j in range(k)]
    cols = np.concatenate([flat[:, :, s:s + L] for s in offsets], axis=1)  # [B, k*k*C, L]
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, k * k * C)
    res = wmat @ cols
    if bias is not None:
        res += bias.data[:, None]
    grid = np.zeros((B, O, Ho * Wp), dtype=res.dtype)
    grid[:, :, :L] = res
    out = np.ascontiguousarray(grid.reshape(B, O, Ho, Wp)[:, :, :, :Wo])

    def bw(g):
        gg = np.zeros((B, O, Ho, Wp), dtype=g.dtype)
        gg[:, :, :, :Wo] = g
        gl = gg.reshape(B, O, Ho * Wp)[:, :, :L]
        gw = gb = gx = None
        if w.requires_grad:
            gw = (gl @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(O, k, k, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = wmat.T @ gl
            gflat = np.zeros((B, C, Hp * Wp), dtype=g.dtype)
            for n, s in enumerate(offsets):
                gflat[:, :, s:s + L] += gcols[:, n * C:(n + 1) * C]
            gx = gflat.reshape(B, C, Hp, Wp)
            if padding:
                gx = gx[:, :, padding:padding + H, padding:padding + W]
        return gx, gw, gb

    return out, bw


def _conv_im2col(x, w, bias, stride, padding, Ho, Wo):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(O, C * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    return out, bw


# -- structural ------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel dimension by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(d1 != d2 for ax, (d1, d2) in enumerate(zip(ref, t.shape)) if ax != axis):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), bw)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    C = x.shape[1]
    if not 0 <= start < stop <= C:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {C} channels")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop].copy(), "channel_slice", (x,), bw)


def repeat_channels(x: Tensor, times: int) -> Tensor:
    """Replicate a ``[B, 1, H, W]`` map into ``[B, times, H, W]``."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"repeat_channels expects a single-channel map, got {x.shape}")
    if times == 1:
        return x
    return _make(np.repeat(x.data, times, axis=1), "repeat_channels", (x,),
                 lambda g: (g.sum(axis=1, keepdims=True),))


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    return _make(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# -- gradient checking -------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5,
                            indices: Optional[Iterable[int]] = None) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    Error per element is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``indices`` restricts the check to a subset of flat positions.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad.reshape(-1)

    flat = x.data.reshape(-1).copy()
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f(Tensor(flat.reshape(x.shape).copy())).data)
            flat[i] = orig - epsilon
            fm = float(f(Tensor(flat.reshape(x.shape).copy())).data)
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            a = float(analytic[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# -- serialization -------------------------------------------------------

TENSOR_MAGIC = b"GVTD"


def write_tensor(fh, t) -> None:
    """Write ``magic, u32 rank, u64 dims..., float32 LE values``."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh) -> Tensor:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} at offset 0")
    (rank,) = struct.unpack("<I", fh.read(4))
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank} at offset 4")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    n = int(np.prod(dims)) if dims else 1
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError(f"truncated tensor payload: expected {4 * n} bytes at offset {8 + 8 * rank}, got {len(raw)}")
    return Tensor(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
