"""Parameterised building blocks shared by the encoders and decoders."""

import math
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError
from .tensor import (
    Tensor,
    add,
    bilinear_sample,
    conv2d,
    layer_norm,
    matmul,
    parameter,
    reshape,
    scale,
    softmax,
    take,
    transpose,
)


class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = parameter(value)
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, trainable: bool):
        for p in self.parameters():
            p.requires_grad = trainable
            p.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: Mapping[str, np.ndarray], group: str = "model"):
        """Copy ``state`` into the parameters, checking every segment's shape."""
        params = dict(self.named_parameters())
        missing = [name for name in params if name not in state]
        if missing:
            raise CheckpointError(f"segment {group}.{missing[0]} missing from checkpoint")
        unknown = [name for name in state if name not in params]
        if unknown:
            raise CheckpointError(f"segment {group}.{unknown[0]} does not exist in the model")
        for name, tensor in params.items():
            values = np.asarray(state[name])
            if values.shape != tensor.shape:
                raise CheckpointError(
                    f"segment {group}.{name}: checkpoint shape {values.shape} does not match "
                    f"model shape {tensor.shape}"
                )
        for name, tensor in params.items():
            tensor.data = np.array(state[name], dtype=tensor.dtype)
            tensor.grad = None


def init_weight(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                init_scale: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, init_scale / math.sqrt(fan_in), size=shape)


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


class Conv2d(Module):
    """Same-size convolution with bias."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, dilation: int = 1,
                 rng: Optional[np.random.Generator] = None, init_scale: float = 1.0,
                 zero: bool = False):
        super().__init__()
        self.kernel_size = kernel_size
        self.dilation = dilation
        shape = (c_out, c_in, kernel_size, kernel_size)
        if zero or rng is None:
            weight = np.zeros(shape)
        else:
            weight = init_weight(rng, shape, c_in * kernel_size * kernel_size, init_scale)
        self.weight = self.add_param("weight", weight)
        self.bias = self.add_param("bias", np.zeros(c_out))

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size // 2)

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, padding=self.padding, dilation=self.dilation)
        return add(out, reshape(self.bias, (-1, 1, 1)))


def tap_grid(kernel_size: int, dilation: int, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Base sampling rows / cols ``K x H x W`` for every kernel tap at every position.

    Tap ``n = a * k + b`` sits at offset ``((a - k//2) * dilation, (b - k//2) * dilation)``.
    """
    half = kernel_size // 2
    taps = (np.arange(kernel_size) - half) * dilation
    di = np.repeat(taps, kernel_size)
    dj = np.tile(taps, kernel_size)
    rows = np.arange(height)[None, :, None] + di[:, None, None]
    cols = np.arange(width)[None, None, :] + dj[:, None, None]
    rows = np.broadcast_to(rows, (kernel_size * kernel_size, height, width))
    cols = np.broadcast_to(cols, (kernel_size * kernel_size, height, width))
    return rows.astype(np.float64), cols.astype(np.float64)


def deform_conv(x: Tensor, offsets: Tensor, weight: Tensor, bias: Optional[Tensor],
                dilation: int = 1) -> Tensor:
    """Deformable convolution of a batch ``N x C x H x W``.

    ``offsets`` is ``N x 2K x H x W`` with channels interleaved as
    (row offset, col offset) per tap.
    """
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = weight.shape
    if k_in != c_in or kh != kw:
        raise DimensionError(f"deformable kernel {weight.shape} does not fit input {x.shape}")
    taps = kh * kw
    if offsets.shape != (n, 2 * taps, h, w):
        raise DimensionError(f"offsets {offsets.shape}, expected {(n, 2 * taps, h, w)}")

    base_r, base_c = tap_grid(kh, dilation, h, w)
    split = reshape(offsets, (n, taps, 2, h, w))
    rows = add(take(split, 0, axis=2), base_r.astype(x.dtype))
    cols = add(take(split, 1, axis=2), base_c.astype(x.dtype))

    samples = bilinear_sample(x, rows, cols)  # n x c_in x K x h x w
    samples = reshape(samples, (n, c_in * taps, h * w))
    out = matmul(reshape(weight, (c_out, c_in * taps)), samples)
    out = reshape(out, (n, c_out, h, w))
    if bias is not None:
        out = add(out, reshape(bias, (-1, 1, 1)))
    return out


class DeformableConv2d(Module):
    """Deformable convolution whose offsets are predicted from its input.

    The offset predictor starts at zero, so a fresh layer is a plain convolution.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, dilation: int = 1,
                 rng: Optional[np.random.Generator] = None, init_scale: float = 1.0):
        super().__init__()
        self.kernel_size = kernel_size
        self.dilation = dilation
        fan_in = c_in * kernel_size * kernel_size
        shape = (c_out, c_in, kernel_size, kernel_size)
        weight = np.zeros(shape) if rng is None else init_weight(rng, shape, fan_in, init_scale)
        self.weight = self.add_param("weight", weight)
        self.bias = self.add_param("bias", np.zeros(c_out))
        self.offset = self.add_child(
            "offset", Conv2d(c_in, 2 * kernel_size * kernel_size, kernel_size, dilation, zero=True)
        )

    def __call__(self, x: Tensor, offsets: Optional[Tensor] = None) -> Tensor:
        xb, squeeze = _batched(x)
        if offsets is None:
            offsets = self.offset(xb)
        else:
            offsets, _ = _batched(offsets)
        out = deform_conv(xb, offsets, self.weight, self.bias, self.dilation)
        return _unbatched(out, squeeze)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Bias-free multi-head self-attention over a ``... x L x d`` sequence."""

    def __init__(self, dim: int, heads: int, rng: Optional[np.random.Generator] = None,
                 init_scale: float = 1.0):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model.heads: {heads} heads do not divide width {dim}")
        self.dim = dim
        self.heads = heads
        for name in ("wq", "wk", "wv", "wo"):
            value = np.zeros((dim, dim)) if rng is None else init_weight(rng, (dim, dim), dim, init_scale)
            setattr(self, name, self.add_param(name, value))

    def _split_heads(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        k = len(lead)
        x = reshape(x, tuple(lead) + (length, self.heads, self.dim // self.heads))
        return transpose(x, tuple(range(k)) + (k + 1, k, k + 2))

    def _merge_heads(self, x: Tensor) -> Tensor:
        *lead, heads, length, d_head = x.shape
        k = len(lead)
        x = transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
        return reshape(x, tuple(lead) + (length, heads * d_head))

    def attention(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Return the merged output and the ``heads x L x L`` attention weights."""
        if x.shape[-1] != self.dim:
            raise DimensionError(f"attention width {self.dim} vs input {x.shape}")
        q = self._split_heads(matmul(x, self.wq))
        k = self._split_heads(matmul(x, self.wk))
        v = self._split_heads(matmul(x, self.wv))
        k_t = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        scores = scale(matmul(q, k_t), 1.0 / math.sqrt(self.dim // self.heads))
        weights = softmax(scores, axis=-1)
        out = self._merge_heads(matmul(weights, v))
        return matmul(out, self.wo), weights

    def __call__(self, x: Tensor) -> Tensor:
        return self.attention(x)[0]


class AttentionBlock(Module):
    """``LN(x + MHA(x))`` over a token sequence."""

    def __init__(self, dim: int, heads: int, eps: float = 1e-5,
                 rng: Optional[np.random.Generator] = None, init_scale: float = 1.0):
        super().__init__()
        self.mha = self.add_child("mha", MultiHeadAttention(dim, heads, rng, init_scale))
        self.norm = self.add_child("norm", LayerNorm(dim, eps))

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(add(x, self.mha(x)))
