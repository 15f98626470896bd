"""Contrastive pretraining of the neighborhood and city encoders.

Each epoch re-encodes the training frames with the current encoder, rebuilds
the positive / negative sample sets from those features, then takes Adam steps
on the contrastive loss over mini-batches.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from .config import ModelConfig, PretrainConfig
from .encoders import CityEncoder, NeighborhoodEncoder, frame_input, to_tokens
from .errors import DimensionError, NumericDomainError, TrainingError, UsageError
from .grid import FlowData, ScalerParams, apply_scaler, fit_scaler
from .optim import Adam
from .sampler import SampleMatrix, city_samples, neighborhood_samples
from .storage import Checkpoint, Stage
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    sub,
    take,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

# Offset below the row maximum given to non-member scores; exp() of it is 0.
_EXCLUDED = 1.0e3


def similarity(u, v, mode: str = "exp_inner", temperature: float = 0.5) -> Tensor:
    """Inner-product similarity; ``exp_inner`` is ``exp(<u, v> / temperature)``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"similarity needs equal-length vectors, got {u.shape} and {v.shape}")
    dot = tensor_sum(mul(u, v))
    if mode == "raw_inner":
        return dot
    if mode == "exp_inner":
        return exp(scale(dot, 1.0 / temperature))
    raise UsageError(f"unknown similarity mode {mode!r}")


def _masked_logsumexp(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise ``log(sum(exp(logits)))`` over the entries where ``mask`` is set."""
    member = mask.astype(logits.dtype)
    shift = np.max(np.where(mask, logits.data, -np.inf), axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0).astype(logits.dtype)
    filled = add(mul(logits, member), (1 - member) * (shift - _EXCLUDED))
    total = tensor_sum(exp(sub(filled, shift)), axis=1)
    return add(log(total), shift[:, 0])


def contrastive_loss_from_scores(scores: Tensor, pos_mask: np.ndarray, neg_mask: np.ndarray,
                                 mode: str = "exp_inner",
                                 temperature: float = 0.5) -> Tuple[Optional[Tensor], np.ndarray]:
    """Mean contrastive loss over anchors given an ``A x M`` score matrix.

    Returns the loss (``None`` when no anchor is usable) and a boolean mask of
    the anchors that contributed. Anchors without a positive or a negative are
    skipped, and so are ``raw_inner`` anchors whose similarity sums are not
    positive.
    """
    pos_mask = np.asarray(pos_mask, dtype=bool)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    if scores.ndim != 2 or pos_mask.shape != scores.shape or neg_mask.shape != scores.shape:
        raise DimensionError(
            f"scores {scores.shape} and masks {pos_mask.shape}/{neg_mask.shape} must be A x M"
        )
    if np.any(pos_mask & neg_mask):
        raise UsageError("a candidate cannot be both positive and negative")
    used = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    all_mask = pos_mask | neg_mask

    if mode == "exp_inner":
        rows = np.flatnonzero(used)
        if rows.size == 0:
            return None, used
        logits = scale(take(scores, rows, axis=0), 1.0 / temperature)
        lse_pos = _masked_logsumexp(logits, pos_mask[rows])
        lse_all = _masked_logsumexp(logits, all_mask[rows])
        return mean(sub(lse_all, lse_pos)), used

    if mode == "raw_inner":
        s = scores.data.astype(np.float64)
        pos_sum = np.sum(np.where(pos_mask, s, 0.0), axis=1)
        all_sum = np.sum(np.where(all_mask, s, 0.0), axis=1)
        domain_ok = (pos_sum > 0) & (all_sum > 0)
        bad = used & ~domain_ok
        if np.any(bad):
            logger.warning("skipping %d anchors with non-positive similarity sums", int(bad.sum()))
        used = used & domain_ok
        rows = np.flatnonzero(used)
        if rows.size == 0:
            return None, used
        sel = take(scores, rows, axis=0)
        pos_total = tensor_sum(mul(sel, pos_mask[rows].astype(sel.dtype)), axis=1)
        all_total = tensor_sum(mul(sel, all_mask[rows].astype(sel.dtype)), axis=1)
        return mean(sub(log(all_total), log(pos_total))), used

    raise UsageError(f"unknown similarity mode {mode!r}")


def contrastive_loss(anchor, positives, negatives, mode: str = "exp_inner",
                     temperature: float = 0.5) -> Tensor:
    """Loss of one anchor vector against ``P x C`` positives and ``Q x C`` negatives."""
    anchor, positives, negatives = as_tensor(anchor), as_tensor(positives), as_tensor(negatives)
    if positives.ndim != 2 or negatives.ndim != 2:
        raise DimensionError("positives and negatives must be 2-D (samples x channels)")
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise UsageError("contrastive loss needs at least one positive and one negative")
    c = anchor.shape[-1]
    if anchor.ndim != 1 or positives.shape[1] != c or negatives.shape[1] != c:
        raise DimensionError(
            f"anchor {anchor.shape}, positives {positives.shape}, negatives {negatives.shape}"
        )
    p, q = positives.shape[0], negatives.shape[0]
    candidates = concat([positives, negatives], axis=0)
    scores = reshape(matmul(candidates, reshape(anchor, (c, 1))), (1, p + q))
    pos_mask = np.array([[True] * p + [False] * q])
    loss, used = contrastive_loss_from_scores(scores, pos_mask, ~pos_mask, mode, temperature)
    if loss is None:
        raise NumericDomainError("similarity sums are not positive; anchor skipped")
    return loss


# ============================================================================
# Pretraining
# ============================================================================


@dataclass
class PretrainResult:
    """A pretrained encoder with its per-epoch loss trace."""
    encoder: Union[NeighborhoodEncoder, CityEncoder]
    stage: Stage
    losses: List[float] = field(default_factory=list)
    scaler: Optional[ScalerParams] = None
    skipped: List[int] = field(default_factory=list)

    @property
    def group(self) -> str:
        return "encoder_b" if self.stage == Stage.I else "encoder_c"

    def checkpoint(self) -> Checkpoint:
        segments = {f"{self.group}.{name}": values
                    for name, values in self.encoder.state_dict().items()}
        return Checkpoint(self.stage, segments)

    def loss_rows(self):
        return [(epoch + 1, loss) for epoch, loss in enumerate(self.losses)]


def encode_frames(encoder, frames: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Encode ``T x H x W`` frames without recording, returning ``T x C x H x W``."""
    out = []
    with no_grad():
        for start in range(0, frames.shape[0], chunk):
            out.append(encoder(frame_input(frames[start:start + chunk])).values.data)
    return np.concatenate(out, axis=0)


def _training_frames(data: FlowData) -> Tuple[np.ndarray, ScalerParams]:
    coarse, _ = data.part("train")
    scaler = fit_scaler(coarse)
    return apply_scaler(scaler, coarse.frames), scaler


def _epoch_pool(n_frames: int, cfg: PretrainConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.frames_per_epoch and cfg.frames_per_epoch < n_frames:
        return np.sort(rng.choice(n_frames, size=cfg.frames_per_epoch, replace=False))
    return np.arange(n_frames)


def _scatter_mask(idx: np.ndarray, mask: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((idx.shape[0], width), dtype=bool)
    rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
    out[rows[mask.reshape(-1)], idx.reshape(-1)[mask.reshape(-1)]] = True
    return out


def pretrain_neighborhood(data: FlowData, cfg: PretrainConfig,
                          model_cfg: ModelConfig) -> PretrainResult:
    """Stage I: contrastive pretraining of the neighborhood encoder."""
    rng = np.random.default_rng(cfg.seed)
    encoder = NeighborhoodEncoder(model_cfg, rng)
    optimizer = Adam(encoder.named_parameters(), lr=cfg.lr)
    frames, scaler = _training_frames(data)
    result = PretrainResult(encoder, Stage.I, scaler=scaler)
    hw = frames.shape[1] * frames.shape[2]

    for epoch in range(cfg.epochs):
        pool = _epoch_pool(frames.shape[0], cfg, rng)
        samples = neighborhood_samples(encode_frames(encoder, frames[pool]), cfg.sampler)
        order = rng.permutation(pool.size)
        total, count, skipped = 0.0, 0, 0

        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            rows = (batch[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
            pos = _scatter_mask(samples.pos_idx[rows], samples.pos_mask[rows], hw)
            neg = _scatter_mask(samples.neg_idx[rows], samples.neg_mask[rows], hw)

            with Tape():
                feats = encoder(frame_input(frames[pool[batch]]))
                z = to_tokens(feats.values)  # b x hw x c
                scores = matmul(z, transpose(z, (0, 2, 1)))
                scores = reshape(scores, (batch.size * hw, hw))
                loss, used = contrastive_loss_from_scores(scores, pos, neg,
                                                          cfg.similarity_mode, cfg.temperature)
                skipped += int((~used).sum())
                if loss is None:
                    continue
                optimizer.zero_grad()
                backward(loss)
            optimizer.step()
            n_used = int(used.sum())
            total += loss.item() * n_used
            count += n_used
            logger.debug("stage I epoch %d batch %d loss %.6f", epoch + 1, start // cfg.batch_size,
                         loss.item())

        if count == 0:
            raise TrainingError(f"stage I epoch {epoch + 1}: every anchor was skipped")
        result.losses.append(total / count)
        result.skipped.append(skipped)
        logger.info("stage I epoch %d/%d loss %.6f (%d anchors skipped)", epoch + 1, cfg.epochs,
                    result.losses[-1], skipped)
    return result


def _city_batch_scores(encoder: CityEncoder, frames: np.ndarray, anchors: np.ndarray,
                       samples: SampleMatrix, sample_rows: np.ndarray, hw: int) -> Tensor:
    """Encode only the frames a batch touches and score anchors against their samples."""
    t, r = anchors[:, 0], anchors[:, 1]
    cand_frames = np.concatenate([samples.pos_idx[sample_rows], samples.neg_idx[sample_rows]], axis=1)
    needed, inverse = np.unique(np.concatenate([t, cand_frames.reshape(-1)]), return_inverse=True)
    anchor_pos = inverse[:t.size]
    cand_pos = inverse[t.size:].reshape(cand_frames.shape)

    feats = encoder(frame_input(frames[needed]))
    flat = reshape(to_tokens(feats.values), (needed.size * hw, feats.channels))
    anchor_vecs = take(flat, anchor_pos * hw + r, axis=0)              # a x c
    cand_vecs = take(flat, cand_pos * hw + r[:, None], axis=0)         # a x 2k x c
    scores = matmul(cand_vecs, reshape(anchor_vecs, anchor_vecs.shape + (1,)))
    return reshape(scores, cand_frames.shape)


def pretrain_city(data: FlowData, cfg: PretrainConfig, model_cfg: ModelConfig) -> PretrainResult:
    """Stage II: contrastive pretraining of the city encoder.

    Each epoch draws at most ``max_city_anchors`` (frame, region) anchors; the
    candidates of an anchor are the other training frames at the same region.
    """
    rng = np.random.default_rng(cfg.seed)
    encoder = CityEncoder(model_cfg, rng)
    optimizer = Adam(encoder.named_parameters(), lr=cfg.lr)
    frames, scaler = _training_frames(data)
    result = PretrainResult(encoder, Stage.II, scaler=scaler)
    n, hw = frames.shape[0], frames.shape[1] * frames.shape[2]
    if n < 2:
        raise TrainingError("city pretraining needs at least two training frames")

    for epoch in range(cfg.epochs):
        pool = _epoch_pool(n, cfg, rng)
        h = encode_frames(encoder, frames[pool])
        n_anchors = min(cfg.max_city_anchors, pool.size * hw)
        flat_ids = np.sort(rng.choice(pool.size * hw, size=n_anchors, replace=False))
        anchors = np.stack([flat_ids // hw, flat_ids % hw], axis=1)  # (pool position, region)
        anchor_frames, sample_rows = np.unique(anchors[:, 0], return_inverse=True)
        samples = city_samples(h, anchor_frames, cfg.sampler)
        k = cfg.sampler.k
        pos_mask = np.concatenate([samples.pos_mask, np.zeros_like(samples.neg_mask)], axis=1)
        neg_mask = np.concatenate([np.zeros_like(samples.pos_mask), samples.neg_mask], axis=1)

        order = rng.permutation(n_anchors)
        total, count, skipped = 0.0, 0, 0
        pool_frames = frames[pool]
        for start in range(0, n_anchors, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            rows = sample_rows[batch]
            with Tape():
                scores = _city_batch_scores(encoder, pool_frames, anchors[batch], samples, rows, hw)
                loss, used = contrastive_loss_from_scores(scores, pos_mask[rows], neg_mask[rows],
                                                          cfg.similarity_mode, cfg.temperature)
                skipped += int((~used).sum())
                if loss is None:
                    continue
                optimizer.zero_grad()
                backward(loss)
            optimizer.step()
            n_used = int(used.sum())
            total += loss.item() * n_used
            count += n_used

        if count == 0:
            raise TrainingError(f"stage II epoch {epoch + 1}: every anchor was skipped")
        result.losses.append(total / count)
        result.skipped.append(skipped)
        logger.info("stage II epoch %d/%d loss %.6f over %d anchors (top-%d)", epoch + 1,
                    cfg.epochs, result.losses[-1], count, k)
    return result
