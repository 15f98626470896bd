"""Decoders, weighted fusion and mass-preserving upsampling.

The upsampler predicts S*S allocation logits per coarse cell. A softmax over
them, multiplied by the raw coarse value and rearranged with a pixel shuffle,
gives a fine map whose S x S blocks sum to the coarse cell by construction.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .encoders import (
    CityEncoder,
    FeatureMap,
    FeatureScale,
    NeighborhoodEncoder,
    frame_input,
    from_tokens,
    require_scale,
    to_tokens,
)
from .errors import CheckpointError, DimensionError, UsageError
from .grid import ScalerParams, apply_scaler
from .layers import AttentionBlock, Conv2d, DeformableConv2d, Module
from .storage import Checkpoint, Stage
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    mul,
    no_grad,
    pixel_shuffle,
    relu,
    reshape,
    softmax,
    take,
)

logger = logging.getLogger(__name__)

GROUPS = ("encoder_b", "encoder_c", "decoders", "fusion", "upsampler")


# ============================================================================
# Decoders
# ============================================================================


class NeighborhoodDecoder(Module):
    """Deformable-convolution stack; ReLU between layers, linear output."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        c = cfg.channels
        self.layers = [
            self.add_child(f"layer{i}", DeformableConv2d(c, c, cfg.kernel_size, cfg.dilation,
                                                         rng=rng, init_scale=cfg.init_scale))
            for i in range(cfg.neighborhood_layers)
        ]

    def __call__(self, h: Tensor) -> Tensor:
        z = h
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < len(self.layers) - 1:
                z = relu(z)
        return z


class CityDecoder(Module):
    """One ``LN(x + MHA(x))`` block over the regions of a frame."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.block = self.add_child("block", AttentionBlock(cfg.channels, cfg.heads, cfg.ln_eps,
                                                            rng=rng, init_scale=cfg.init_scale))

    def __call__(self, h: Tensor) -> Tensor:
        height, width = h.shape[-2:]
        return from_tokens(self.block(to_tokens(h)), height, width)


class DecoderSet(Module):
    """Private decoders per branch plus the interactive decoder when both branches exist."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        c = cfg.channels
        self.d_b = self.add_child("d_b", NeighborhoodDecoder(cfg, rng)) if cfg.uses_neighborhood else None
        self.d_c = self.add_child("d_c", CityDecoder(cfg, rng)) if cfg.uses_city else None
        self.d_bc = None
        if cfg.uses_neighborhood and cfg.uses_city:
            self.d_bc = self.add_child("d_bc", Conv2d(2 * c, c, 3, rng=rng, init_scale=cfg.init_scale))


def decode_private(features: FeatureMap, decoders: DecoderSet,
                   branch: Optional[FeatureScale] = None) -> Tensor:
    """Run the private decoder of ``branch`` (default: the features' own scale)."""
    branch = FeatureScale(branch) if branch is not None else features.scale
    require_scale(features, branch)
    decoder = decoders.d_b if branch == FeatureScale.NEIGHBORHOOD else decoders.d_c
    if decoder is None:
        raise UsageError(f"model has no {branch.value} branch")
    return decoder(features.values)


def decode_interactive(h_b: FeatureMap, h_c: FeatureMap, decoders: DecoderSet) -> Tensor:
    """Convolution over the channel concatenation (neighborhood first, then city)."""
    require_scale(h_b, FeatureScale.NEIGHBORHOOD)
    require_scale(h_c, FeatureScale.CITY)
    if decoders.d_bc is None:
        raise UsageError("model has no interactive decoder")
    if h_b.shape[-2:] != h_c.shape[-2:] or h_b.shape[:-3] != h_c.shape[:-3]:
        raise DimensionError(f"neighborhood {h_b.shape} and city {h_c.shape} features do not align")
    return decoders.d_bc(concat([h_b.values, h_c.values], axis=-3))


# ============================================================================
# Fusion
# ============================================================================


class FusionWeights(Module):
    """Three logits whose softmax weights the private and interactive outputs."""

    def __init__(self):
        super().__init__()
        self.logits = self.add_param("logits", np.zeros(3))

    def weights(self) -> Tensor:
        return softmax(self.logits, axis=0)


def fuse(o_b: Tensor, o_c: Tensor, o_bc: Tensor, fusion: FusionWeights) -> Tensor:
    """``w1 * o_b + w2 * o_c + w3 * o_bc`` with weights on the simplex."""
    if not (o_b.shape == o_c.shape == o_bc.shape):
        raise DimensionError(f"fusion inputs differ: {o_b.shape}, {o_c.shape}, {o_bc.shape}")
    w = fusion.weights()
    out = mul(take(w, 0), o_b)
    out = add(out, mul(take(w, 1), o_c))
    return add(out, mul(take(w, 2), o_bc))


# ============================================================================
# Upsampling
# ============================================================================


class UpsamplerHead(Module):
    """3x3 convolution from C channels to S*S allocation logits."""

    def __init__(self, channels: int, upscale: int, rng: Optional[np.random.Generator] = None,
                 init_scale: float = 1.0):
        super().__init__()
        self.upscale = upscale
        self.conv = self.add_child("conv", Conv2d(channels, upscale * upscale, 3, rng=rng,
                                                  init_scale=init_scale))

    def __call__(self, r: Tensor) -> Tensor:
        return self.conv(r)


def m2_normalize(logits: Tensor, coarse_raw, upscale: int) -> Tensor:
    """Allocate each raw coarse value over its S*S subregions by softmax weights.

    ``logits`` is ``(N x) S*S x H x W``; ``coarse_raw`` is ``(N x) H x W``. The
    result is ``(N x) SH x SW`` and its block sums equal ``coarse_raw``.
    """
    coarse = as_tensor(coarse_raw)
    s2 = upscale * upscale
    if logits.ndim < 3 or logits.shape[-3] != s2:
        raise DimensionError(f"allocation logits {logits.shape} need {s2} channels")
    if coarse.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise DimensionError(f"coarse frame {coarse.shape} does not match logits {logits.shape}")
    dist = softmax(logits, axis=-3)
    mass = reshape(coarse, coarse.shape[:-2] + (1,) + coarse.shape[-2:])
    fine = pixel_shuffle(mul(dist, mass), upscale)
    return reshape(fine, fine.shape[:-3] + fine.shape[-2:])


# ============================================================================
# Full model
# ============================================================================


@dataclass
class ModelOutput:
    pred: Tensor
    h_b: Optional[FeatureMap]
    h_c: Optional[FeatureMap]


class FlowModel:
    """Encoders, decoders, fusion and upsampler with the fitted scalers."""

    def __init__(self, cfg: ModelConfig, upscale: int, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.upscale = upscale
        self.encoder_b = NeighborhoodEncoder(cfg, rng) if cfg.uses_neighborhood else None
        self.encoder_c = CityEncoder(cfg, rng) if cfg.uses_city else None
        self.decoders = DecoderSet(cfg, rng)
        self.fusion = FusionWeights()
        self.upsampler = UpsamplerHead(cfg.channels, upscale, rng, cfg.init_scale)
        self.coarse_scaler: Optional[ScalerParams] = None
        self.fine_scaler: Optional[ScalerParams] = None

    # -- parameters ----------------------------------------------------------

    def groups(self) -> Dict[str, Module]:
        modules = {
            "encoder_b": self.encoder_b,
            "encoder_c": self.encoder_c,
            "decoders": self.decoders,
            "fusion": self.fusion,
            "upsampler": self.upsampler,
        }
        return {name: m for name, m in modules.items() if m is not None}

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for group, module in self.groups().items():
            yield from module.named_parameters(f"{group}.")

    def set_encoders_trainable(self, trainable: bool):
        for name in ("encoder_b", "encoder_c"):
            module = self.groups().get(name)
            if module is not None:
                module.set_trainable(trainable)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def restore(self, state: Dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            p.data = state[name].copy()

    # -- forward -------------------------------------------------------------

    def require_scalers(self):
        if self.coarse_scaler is None or self.fine_scaler is None:
            raise UsageError("model scalers are not fitted")

    def forward(self, coarse_raw) -> ModelOutput:
        """Predict fine maps (raw units) for ``N x H x W`` raw coarse frames."""
        self.require_scalers()
        raw = as_tensor(coarse_raw)
        x = frame_input(apply_scaler(self.coarse_scaler, raw.data))
        h_b = self.encoder_b(x) if self.encoder_b is not None else None
        h_c = self.encoder_c(x) if self.encoder_c is not None else None

        if h_b is not None and h_c is not None:
            r = fuse(decode_private(h_b, self.decoders), decode_private(h_c, self.decoders),
                     decode_interactive(h_b, h_c, self.decoders), self.fusion)
        else:
            r = decode_private(h_b if h_b is not None else h_c, self.decoders)

        pred = m2_normalize(self.upsampler(r), raw, self.upscale)
        return ModelOutput(pred, h_b, h_c)

    __call__ = forward

    # -- checkpoints ---------------------------------------------------------

    def checkpoint(self, stage: Stage = Stage.III) -> Checkpoint:
        self.require_scalers()
        segments = dict(self.snapshot())
        for name, params in (("coarse", self.coarse_scaler), ("fine", self.fine_scaler)):
            segments[f"scaler.{name}"] = np.array([params.min, params.max], dtype=np.float64)
        return Checkpoint(stage, segments)

    def load_group(self, ckpt: Checkpoint, group: str):
        module = self.groups().get(group)
        if module is None:
            raise CheckpointError(f"segment group {group} is not part of this model")
        state = ckpt.group(group)
        if not state:
            raise CheckpointError(f"checkpoint has no {group} segments")
        module.load_state(state, group)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: ModelConfig) -> "FlowModel":
        """Rebuild a trained model; the upscale factor comes from the upsampler shape."""
        if ckpt.stage != Stage.III:
            raise CheckpointError(f"expected a stage III model checkpoint, got stage {ckpt.stage.name}")
        head = ckpt.segments.get("upsampler.conv.weight")
        if head is None:
            raise CheckpointError("segment upsampler.conv.weight missing from checkpoint")
        upscale = int(round(math.sqrt(head.shape[0])))
        model = cls(cfg, upscale)
        for group in model.groups():
            model.load_group(ckpt, group)
        extra = set(ckpt.groups) - set(model.groups()) - {"scaler"}
        if extra:
            raise CheckpointError(f"segment group {sorted(extra)[0]} does not exist in the model")
        scalers = ckpt.group("scaler")
        try:
            model.coarse_scaler = ScalerParams(*map(float, scalers["coarse"]))
            model.fine_scaler = ScalerParams(*map(float, scalers["fine"]))
        except (KeyError, TypeError, UsageError):
            raise CheckpointError("segment scaler.coarse / scaler.fine missing or invalid") from None
        return model


def infer_fine(coarse, model: FlowModel, chunk: int = 64) -> np.ndarray:
    """Fine-grained maps for one ``H x W`` frame or an ``N x H x W`` batch."""
    model.require_scalers()
    frames = np.asarray(coarse)
    single = frames.ndim == 2
    if single:
        frames = frames[None]
    if frames.ndim != 3:
        raise DimensionError(f"expected H x W or N x H x W coarse frames, got {frames.shape}")
    out = []
    with no_grad():
        for start in range(0, frames.shape[0], chunk):
            out.append(model(frames[start:start + chunk]).pred.data)
    fine = np.concatenate(out, axis=0) if out else np.zeros(
        (0, frames.shape[1] * model.upscale, frames.shape[2] * model.upscale))
    return fine[0] if single else fine
