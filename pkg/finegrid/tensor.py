"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a plain function that computes its result with numpy and, when a
``Tape`` is active and one of its inputs requires gradients, appends an entry
(op kind, inputs, output, saved context) to that tape. ``backward`` walks the
tape in reverse and looks up each op's rule in ``BACKWARD``.

Ops accept the per-frame ``C x H x W`` layout as well as a leading batch axis
(``N x C x H x W``).
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float32
_local = threading.local()
_ids = itertools.count()


# ============================================================================
# Precision
# ============================================================================


def set_precision(bits: int):
    """Set the default floating-point precision (32 or 64 bits)."""
    global _dtype
    if bits not in _DTYPES:
        raise UsageError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype() -> np.dtype:
    """Get the current default dtype."""
    return np.dtype(_dtype)


def get_precision() -> int:
    """Get the current default precision in bits."""
    return 64 if _dtype is np.float64 else 32


@contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default precision."""
    previous = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


# ============================================================================
# Tensor
# ============================================================================


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "id")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(np.array(data, dtype=dtype or _dtype))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        """Wrap an op result without copying."""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array)
        out.requires_grad = requires_grad
        out.grad = None
        out.id = next(_ids)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data: ArrayLike) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


# ============================================================================
# Tape
# ============================================================================


@dataclass
class TapeEntry:
    """One recorded op: kind, operands, result and the context its backward rule needs."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    ctx: dict

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


class Tape:
    """Ordered record of differentiable ops, rebuilt for every training step."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._produced: Dict[int, int] = {}

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, ctx: dict):
        self._produced[output.id] = len(self.entries)
        self.entries.append(TapeEntry(op, inputs, output, ctx))

    def produced(self, tensor: Tensor) -> bool:
        return tensor.id in self._produced

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Optional[Tape]:
    """Get the innermost active tape of this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording: ops inside run as plain value computations."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, ctx: dict) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        tape.record(op, tuple(inputs), result, ctx)
    return result


# ============================================================================
# Backward
# ============================================================================

BackwardRule = Callable[[dict, np.ndarray], Tuple[Optional[np.ndarray], ...]]
BACKWARD: Dict[str, BackwardRule] = {}


def backward_rule(op: str):
    """Register the backward rule for an op kind."""
    def decorator(fn: BackwardRule) -> BackwardRule:
        BACKWARD[op] = fn
        return fn
    return decorator


def backward(loss: Tensor, tape: Optional[Tape] = None):
    """Populate ``grad`` on every trainable leaf reachable from ``loss``.

    Gradients accumulate: calling backward twice without zeroing doubles them.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or current_tape()
    if tape is None or not tape.produced(loss):
        raise UsageError("loss was not produced on the active tape")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.id, None)
        if g is None:
            continue
        input_grads = BACKWARD[entry.op](entry.ctx, g)
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise DimensionError(
                    f"{entry.op} backward produced gradient {grad.shape} for input {tensor.shape}"
                )
            if tensor.id in grads:
                grads[tensor.id] = grads[tensor.id] + grad
            else:
                grads[tensor.id] = grad
            if not tape.produced(tensor):
                leaves[tensor.id] = tensor

    for tid, tensor in leaves.items():
        g = grads[tid].astype(tensor.dtype, copy=False)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# ============================================================================
# Helpers
# ============================================================================


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


# ============================================================================
# Elementwise ops
# ============================================================================


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, {"a_shape": a.shape, "b_shape": b.shape})


@backward_rule("add")
def _add_backward(ctx, g):
    return _unbroadcast(g, ctx["a_shape"]), _unbroadcast(g, ctx["b_shape"])


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, {"a_shape": a.shape, "b_shape": b.shape})


@backward_rule("sub")
def _sub_backward(ctx, g):
    return _unbroadcast(g, ctx["a_shape"]), _unbroadcast(-g, ctx["b_shape"])


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record("mul", (a, b), a.data * b.data, {"a": a.data, "b": b.data})


@backward_rule("mul")
def _mul_backward(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _record("div", (a, b), out, {"a": a.data, "b": b.data})


@backward_rule("div")
def _div_backward(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def scale(x: ArrayLike, c: float) -> Tensor:
    x = as_tensor(x)
    return _record("scale", (x,), x.data * x.dtype.type(c), {"c": c})


@backward_rule("scale")
def _scale_backward(ctx, g):
    return (g * ctx["c"],)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), {"mask": mask})


@backward_rule("relu")
def _relu_backward(ctx, g):
    # subgradient at 0 is 0
    return (g * ctx["mask"],)


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, {"y": y})


@backward_rule("tanh")
def _tanh_backward(ctx, g):
    y = ctx["y"]
    return (g * (1 - y * y),)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _record("exp", (x,), y, {"y": y})


@backward_rule("exp")
def _exp_backward(ctx, g):
    return (g * ctx["y"],)


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _record("log", (x,), y, {"x": x.data})


@backward_rule("log")
def _log_backward(ctx, g):
    return (g / ctx["x"],)


# ============================================================================
# Reductions and layout
# ============================================================================


def tensor_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _record("sum", (x,), np.asarray(out, dtype=x.dtype),
                   {"shape": x.shape, "axis": axis, "keepdims": keepdims})


@backward_rule("sum")
def _sum_backward(ctx, g):
    shape, axis = ctx["shape"], ctx["axis"]
    if axis is not None and not ctx["keepdims"]:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, {"shape": x.shape})


@backward_rule("reshape")
def _reshape_backward(ctx, g):
    return (g.reshape(ctx["shape"]),)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    return _record("transpose", (x,), np.transpose(x.data, axes), {"axes": axes})


@backward_rule("transpose")
def _transpose_backward(ctx, g):
    return (np.transpose(g, np.argsort(ctx["axes"])),)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _record("concat", tuple(tensors), out, {"axis": axis, "sizes": sizes})


@backward_rule("concat")
def _concat_backward(ctx, g):
    splits = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=ctx["axis"]))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _record("stack", tuple(tensors), out, {"axis": axis, "n": len(tensors)})


@backward_rule("stack")
def _stack_backward(ctx, g):
    return tuple(np.take(g, i, axis=ctx["axis"]) for i in range(ctx["n"]))


def take(x: ArrayLike, indices: Union[np.ndarray, Sequence[int]], axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices are allowed."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    try:
        out = np.take(x.data, indices, axis=axis)
    except IndexError as e:
        raise DimensionError(f"take: {e}") from None
    return _record("take", (x,), out, {"shape": x.shape, "indices": indices, "axis": axis})


@backward_rule("take")
def _take_backward(ctx, g):
    axis = ctx["axis"] % len(ctx["shape"])
    gx = np.zeros(ctx["shape"], dtype=g.dtype)
    moved = np.moveaxis(gx, axis, 0)
    flat_idx = ctx["indices"].reshape(-1)
    g_moved = np.moveaxis(g, list(range(axis, axis + ctx["indices"].ndim)),
                          list(range(ctx["indices"].ndim)))
    np.add.at(moved, flat_idx, g_moved.reshape((flat_idx.size,) + moved.shape[1:]))
    return (gx,)


# ============================================================================
# Linear algebra
# ============================================================================


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; leading axes broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from None
    return _record("matmul", (a, b), out, {"a": a.data, "b": b.data})


@backward_rule("matmul")
def _matmul_backward(ctx, g):
    a, b = ctx["a"], ctx["b"]
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _record("softmax", (x,), y, {"y": y, "axis": axis})


@backward_rule("softmax")
def _softmax_backward(ctx, g):
    y, axis = ctx["y"], ctx["axis"]
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * x_hat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last axis {d} vs gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out = x_hat * gamma.data + beta.data
    return _record("layer_norm", (x, gamma, beta), out.astype(x.dtype, copy=False),
                   {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma.data})


@backward_rule("layer_norm")
def _layer_norm_backward(ctx, g):
    x_hat, inv_std, gamma = ctx["x_hat"], ctx["inv_std"], ctx["gamma"]
    g_hat = g * gamma
    gx = inv_std * (
        g_hat
        - g_hat.mean(axis=-1, keepdims=True)
        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    reduce_axes = tuple(range(g.ndim - 1))
    g_gamma = np.sum(g * x_hat, axis=reduce_axes)
    g_beta = np.sum(g, axis=reduce_axes)
    return gx, g_gamma, g_beta


# ============================================================================
# Convolution and sampling
# ============================================================================


def _as_batch(x: Tensor, name: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{name} expects C x H x W or N x C x H x W, got {x.shape}")


def conv2d(x: ArrayLike, k: ArrayLike, padding: int = 0, dilation: int = 1) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    x, k = as_tensor(x), as_tensor(k)
    xd, squeeze = _as_batch(x, "conv2d")
    if k.ndim != 4:
        raise DimensionError(f"conv2d kernel must be C_out x C_in x kh x kw, got {k.shape}")
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = k.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernel expects {k_in}")
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if span_h > h + 2 * padding or span_w > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel span {span_h}x{span_w} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))[..., ::dilation, ::dilation]
    # windows: n x c_in x h_out x w_out x kh x kw
    out = np.tensordot(windows, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    ctx = {"windows": windows, "k": k.data, "xp_shape": xp.shape, "padding": padding,
           "dilation": dilation, "squeeze": squeeze, "hw": (h, w)}
    return _record("conv2d", (x, k), out.astype(x.dtype, copy=False), ctx)


@backward_rule("conv2d")
def _conv2d_backward(ctx, g):
    g4 = g[None] if ctx["squeeze"] else g
    windows, k = ctx["windows"], ctx["k"]
    p, dil = ctx["padding"], ctx["dilation"]
    h, w = ctx["hw"]
    _, _, kh, kw = k.shape
    h_out, w_out = g4.shape[2], g4.shape[3]

    gk = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
    g_cols = np.tensordot(g4, k, axes=([1], [0]))  # n x h_out x w_out x c_in x kh x kw
    gxp = np.zeros(ctx["xp_shape"], dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            r, c = i * dil, j * dil
            gxp[:, :, r:r + h_out, c:c + w_out] += g_cols[..., i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, p:p + h, p:p + w]
    if ctx["squeeze"]:
        gx = gx[0]
    return np.ascontiguousarray(gx), gk.astype(g.dtype, copy=False)


def bilinear_sample(x: ArrayLike, rows: ArrayLike, cols: ArrayLike) -> Tensor:
    """Bilinearly interpolate ``x`` at fractional (row, col) coordinates.

    Cells outside the grid read as 0. For a ``C x H x W`` input the
    coordinates may have any shape P and the result is ``C x P``; for a batched
    ``N x C x H x W`` input they must be ``N x P`` and the result is ``N x C x P``.
    """
    x, rows, cols = as_tensor(x), as_tensor(rows), as_tensor(cols)
    xd, squeeze = _as_batch(x, "bilinear_sample")
    if rows.shape != cols.shape:
        raise DimensionError(f"row coords {rows.shape} and col coords {cols.shape} differ")
    r = rows.data[None] if squeeze else rows.data
    c = cols.data[None] if squeeze else cols.data
    n, ch, h, w = xd.shape
    if r.ndim < 1 or r.shape[0] != n:
        raise DimensionError(f"coordinates {rows.shape} do not match batch of {n}")
    point_shape = r.shape[1:]
    r = r.reshape(n, -1)
    c = c.reshape(n, -1)

    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = (r - r0).astype(xd.dtype)
    fc = (c - c0).astype(xd.dtype)
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)
    xt = xd.transpose(0, 2, 3, 1)  # n x h x w x ch
    batch = np.arange(n)[:, None]

    corners = {}
    for dr in (0, 1):
        for dc in (0, 1):
            rr, cc = r0 + dr, c0 + dc
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rr_c, cc_c = np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)
            vals = xt[batch, rr_c, cc_c] * valid[..., None]  # n x m x ch
            corners[dr, dc] = (rr_c, cc_c, valid, vals)

    w00 = ((1 - fr) * (1 - fc))[..., None]
    w01 = ((1 - fr) * fc)[..., None]
    w10 = (fr * (1 - fc))[..., None]
    w11 = (fr * fc)[..., None]
    out = (w00 * corners[0, 0][3] + w01 * corners[0, 1][3]
           + w10 * corners[1, 0][3] + w11 * corners[1, 1][3])
    out = out.transpose(0, 2, 1).reshape((n, ch) + point_shape)
    if squeeze:
        out = out[0]
    ctx = {"corners": corners, "fr": fr, "fc": fc, "shape": xd.shape, "squeeze": squeeze,
           "point_shape": point_shape, "coord_shape": rows.shape}
    return _record("bilinear_sample", (x, rows, cols), out.astype(x.dtype, copy=False), ctx)


@backward_rule("bilinear_sample")
def _bilinear_backward(ctx, g):
    n, ch, h, w = ctx["shape"]
    g4 = g[None] if ctx["squeeze"] else g
    gt = g4.reshape(n, ch, -1).transpose(0, 2, 1)  # n x m x ch
    fr, fc = ctx["fr"][..., None], ctx["fc"][..., None]
    corners = ctx["corners"]
    weights = {(0, 0): (1 - fr) * (1 - fc), (0, 1): (1 - fr) * fc,
               (1, 0): fr * (1 - fc), (1, 1): fr * fc}

    gxt = np.zeros((n, h, w, ch), dtype=g.dtype)
    batch = np.broadcast_to(np.arange(n)[:, None], ctx["fr"].shape)
    for key, (rr, cc, valid, _) in corners.items():
        np.add.at(gxt, (batch, rr, cc), gt * weights[key] * valid[..., None])
    gx = gxt.transpose(0, 3, 1, 2)

    v00, v01 = corners[0, 0][3], corners[0, 1][3]
    v10, v11 = corners[1, 0][3], corners[1, 1][3]
    d_row = (1 - fc) * (v10 - v00) + fc * (v11 - v01)
    d_col = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
    g_rows = np.sum(gt * d_row, axis=-1)
    g_cols = np.sum(gt * d_col, axis=-1)
    if ctx["squeeze"]:
        gx = gx[0]
    coord_shape = ctx["coord_shape"]
    return (np.ascontiguousarray(gx), g_rows.reshape(coord_shape), g_cols.reshape(coord_shape))


def pixel_shuffle(x: ArrayLike, factor: int) -> Tensor:
    """Rearrange ``(..., S*S*C, H, W)`` into ``(..., C, S*H, S*W)``.

    Channel ``c*S*S + s*S + t`` at (i, j) lands on channel c at (S*i + s, S*j + t).
    """
    x = as_tensor(x)
    s = factor
    if x.ndim < 3 or x.shape[-3] % (s * s):
        raise DimensionError(f"pixel_shuffle: {x.shape} channels not divisible by {s * s}")
    lead = x.shape[:-3]
    c, h, w = x.shape[-3] // (s * s), x.shape[-2], x.shape[-1]
    k = len(lead)
    out = x.data.reshape(lead + (c, s, s, h, w))
    out = out.transpose(tuple(range(k)) + (k, k + 3, k + 1, k + 4, k + 2))
    out = out.reshape(lead + (c, h * s, w * s))
    return _record("pixel_shuffle", (x,), out, {"factor": s})


@backward_rule("pixel_shuffle")
def _pixel_shuffle_backward(ctx, g):
    return (_unshuffle_array(g, ctx["factor"]),)


def _unshuffle_array(a: np.ndarray, s: int) -> np.ndarray:
    lead = a.shape[:-3]
    c, hs, ws = a.shape[-3:]
    h, w = hs // s, ws // s
    k = len(lead)
    out = a.reshape(lead + (c, h, s, w, s))
    out = out.transpose(tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3))
    return out.reshape(lead + (c * s * s, h, w))


def pixel_unshuffle(x: ArrayLike, factor: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    s = factor
    if x.ndim < 3 or x.shape[-2] % s or x.shape[-1] % s:
        raise DimensionError(f"pixel_unshuffle: spatial dims of {x.shape} not divisible by {s}")
    return _record("pixel_unshuffle", (x,), _unshuffle_array(x.data, s), {"factor": s})


@backward_rule("pixel_unshuffle")
def _pixel_unshuffle_backward(ctx, g):
    s = ctx["factor"]
    lead = g.shape[:-3]
    c, h, w = g.shape[-3] // (s * s), g.shape[-2], g.shape[-1]
    k = len(lead)
    out = g.reshape(lead + (c, s, s, h, w))
    out = out.transpose(tuple(range(k)) + (k, k + 3, k + 1, k + 4, k + 2))
    return (out.reshape(lead + (c, h * s, w * s)),)


# ============================================================================
# Composite helpers
# ============================================================================


def elementwise(kind: str, *operands, c: Optional[float] = None) -> Tensor:
    """Dispatch one of the pointwise ops by name."""
    unary = {"relu": relu, "tanh": tanh, "exp": exp, "log": log}
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind in unary:
        return unary[kind](*operands)
    if kind in binary:
        a, b = operands
        a, b = as_tensor(a), as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")
        return binary[kind](a, b)
    if kind == "scale":
        return scale(operands[0], c)
    raise UsageError(f"unknown elementwise op {kind!r}")


def mse(pred: ArrayLike, target: ArrayLike) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))
