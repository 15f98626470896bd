"""Multi-scale encoders.

The neighborhood encoder stacks deformable convolutions so each region mixes
information from a learned, input-dependent local footprint. The city encoder
runs self-attention over every region of the frame, giving each output
position a global receptive field.
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Union

import numpy as np

from .config import ModelConfig
from .errors import DimensionError, UsageError
from .layers import AttentionBlock, Conv2d, DeformableConv2d, Module, MultiHeadAttention
from .tensor import Tensor, add, as_tensor, relu, reshape, transpose


class FeatureScale(str, Enum):
    NEIGHBORHOOD = "neighborhood"
    CITY = "city"


@dataclass
class FeatureMap:
    """Encoder output: ``C x H x W`` (or ``N x C x H x W``) with its scale tag."""
    values: Tensor
    scale: FeatureScale

    @property
    def shape(self):
        return self.values.shape

    @property
    def channels(self) -> int:
        return self.values.shape[-3]


def frame_input(frames: Union[np.ndarray, Tensor]) -> Tensor:
    """Add the single input channel: ``H x W`` -> ``1 x H x W``, ``N x H x W`` -> ``N x 1 x H x W``."""
    t = as_tensor(frames)
    if t.ndim == 2:
        return reshape(t, (1,) + t.shape)
    if t.ndim == 3:
        return reshape(t, (t.shape[0], 1) + t.shape[1:])
    raise DimensionError(f"expected H x W or N x H x W frames, got {t.shape}")


# ============================================================================
# Positional encoding
# ============================================================================


@lru_cache(maxsize=32)
def _pe_table(channels: int, height: int, width: int) -> np.ndarray:
    if channels % 4:
        raise DimensionError(f"positional encoding needs a multiple of 4 channels, got {channels}")
    n_freq = channels // 4
    freqs = 1.0 / (10000.0 ** (np.arange(n_freq) / n_freq))
    rows = np.arange(height)[:, None] * freqs[None, :]  # h x f
    cols = np.arange(width)[:, None] * freqs[None, :]   # w x f
    table = np.zeros((channels, height, width), dtype=np.float64)
    table[0::4] = np.sin(rows).T[:, :, None]
    table[1::4] = np.cos(rows).T[:, :, None]
    table[2::4] = np.sin(cols).T[:, None, :]
    table[3::4] = np.cos(cols).T[:, None, :]
    table.setflags(write=False)
    return table


def positional_table(channels: int, height: int, width: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table; channels cycle (sin row, cos row, sin col, cos col)."""
    return _pe_table(channels, height, width)


def positional_encode(x: Tensor) -> Tensor:
    """Add the positional table to a channel-lifted frame or batch."""
    c, h, w = x.shape[-3:]
    return add(x, positional_table(c, h, w).astype(x.dtype))


# ============================================================================
# Neighborhood encoder
# ============================================================================


class NeighborhoodEncoder(Module):
    """1x1 lift followed by deformable convolutions, each followed by ReLU."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        c = cfg.channels
        self.lift = self.add_child("lift", Conv2d(1, c, 1, rng=rng, init_scale=cfg.init_scale))
        self.layers: List[DeformableConv2d] = [
            self.add_child(f"layer{i}", DeformableConv2d(c, c, cfg.kernel_size, cfg.dilation,
                                                         rng=rng, init_scale=cfg.init_scale))
            for i in range(cfg.neighborhood_layers)
        ]

    def __call__(self, x: Tensor) -> FeatureMap:
        return neighborhood_encode(x, self)


def deform_conv_forward(x: Tensor, layer: DeformableConv2d) -> Tensor:
    """Pre-activation output of one deformable layer."""
    return layer(x)


def neighborhood_encode(x: Tensor, encoder: NeighborhoodEncoder) -> FeatureMap:
    z = encoder.lift(x)
    for layer in encoder.layers:
        z = relu(deform_conv_forward(z, layer))
    return FeatureMap(z, FeatureScale.NEIGHBORHOOD)


# ============================================================================
# City encoder
# ============================================================================


def to_tokens(x: Tensor) -> Tensor:
    """``(N x) C x H x W`` -> ``(N x) HW x C``."""
    *lead, c, h, w = x.shape
    k = len(lead)
    flat = reshape(x, tuple(lead) + (c, h * w))
    return transpose(flat, tuple(range(k)) + (k + 1, k))


def from_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`to_tokens`."""
    *lead, _, c = tokens.shape
    k = len(lead)
    grid = transpose(tokens, tuple(range(k)) + (k + 1, k))
    return reshape(grid, tuple(lead) + (c, height, width))


def mha_forward(x_p: Tensor, mha: MultiHeadAttention) -> Tensor:
    """Self-attention across all regions of a frame, returned in grid layout."""
    h, w = x_p.shape[-2:]
    return from_tokens(mha(to_tokens(x_p)), h, w)


class CityEncoder(Module):
    """1x1 lift, positional encoding, then ``LN(x + MHA(x))`` blocks."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        c = cfg.channels
        self.lift = self.add_child("lift", Conv2d(1, c, 1, rng=rng, init_scale=cfg.init_scale))
        self.blocks: List[AttentionBlock] = [
            self.add_child(f"block{i}", AttentionBlock(c, cfg.heads, cfg.ln_eps, rng=rng,
                                                       init_scale=cfg.init_scale))
            for i in range(cfg.city_blocks)
        ]

    def __call__(self, x: Tensor) -> FeatureMap:
        return city_encode(x, self)


def city_encode(x: Tensor, encoder: CityEncoder) -> FeatureMap:
    h, w = x.shape[-2:]
    tokens = to_tokens(positional_encode(encoder.lift(x)))
    for block in encoder.blocks:
        tokens = block(tokens)
    return FeatureMap(from_tokens(tokens, h, w), FeatureScale.CITY)


def require_scale(features: FeatureMap, expected: FeatureScale):
    if features.scale != expected:
        raise UsageError(f"expected {expected.value} features, got {features.scale.value}")
