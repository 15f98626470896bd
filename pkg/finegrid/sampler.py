"""Dynamic positive / negative sample selection from encoder features.

Neighborhood samples compare an anchor region with every other region of the
same frame; city samples compare an anchor frame with every other candidate
frame at the same region, using a distance that averages over all regions.
"""

import logging
from dataclasses import dataclass
from typing import Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .config import SamplerConfig
from .errors import DimensionError

logger = logging.getLogger(__name__)

NEIGHBORHOOD = "neighborhood"
CITY = "city"


@dataclass
class SampleSet:
    """Top-K positives and negatives of one anchor, each sorted by distance."""
    anchor: Hashable
    positives: List[Hashable]
    positive_distances: np.ndarray
    negatives: List[Hashable]
    negative_distances: np.ndarray
    threshold: float
    short_set: bool = False


@dataclass
class SampleMatrix:
    """Vectorised samples for A anchors: candidate column indices padded with 0.

    ``pos_mask``/``neg_mask`` mark which of the K slots hold a real sample.
    """
    pos_idx: np.ndarray
    pos_mask: np.ndarray
    neg_idx: np.ndarray
    neg_mask: np.ndarray
    thresholds: np.ndarray
    short: np.ndarray

    @property
    def usable(self) -> np.ndarray:
        """Anchors with at least one positive and one negative."""
        return self.pos_mask.any(axis=1) & self.neg_mask.any(axis=1)


def _as_sequence(features) -> np.ndarray:
    values = getattr(features, "values", features)
    values = getattr(values, "data", values)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[None]
    if values.ndim != 4:
        raise DimensionError(f"features must be C x H x W or T x C x H x W, got {values.shape}")
    return values


def _check_cell(values: np.ndarray, t: int, cell: Tuple[int, int]):
    n, _, h, w = values.shape
    i, j = cell
    if not (0 <= t < n and 0 <= i < h and 0 <= j < w):
        raise IndexError(f"position {t}, ({i}, {j}) outside {n} frames of {h}x{w}")


# ============================================================================
# Distances
# ============================================================================


def neighborhood_distance(h_b, t: int, a: Tuple[int, int], b: Tuple[int, int]) -> float:
    """Euclidean distance over channels between regions ``a`` and ``b`` of frame ``t``."""
    values = _as_sequence(h_b)
    _check_cell(values, t, a)
    _check_cell(values, t, b)
    diff = values[t, :, a[0], a[1]] - values[t, :, b[0], b[1]]
    return float(np.sqrt(np.dot(diff, diff)))


def city_distance(h_c, cell: Tuple[int, int], t: int, t2: int) -> float:
    """Root-mean-square over all regions of the feature difference between frames.

    The result does not depend on ``cell``; it only has to lie inside the grid.
    """
    values = _as_sequence(h_c)
    _check_cell(values, t, cell)
    _check_cell(values, t2, cell)
    _, _, h, w = values.shape
    diff = values[t] - values[t2]
    return float(np.sqrt(np.sum(diff * diff) / (h * w)))


def neighborhood_distance_matrix(h_b, chunk: int = 32) -> np.ndarray:
    """``T x HW x HW`` region-to-region distances per frame."""
    values = _as_sequence(h_b)
    n, c, h, w = values.shape
    flat = values.reshape(n, c, h * w).transpose(0, 2, 1)
    out = np.empty((n, h * w, h * w), dtype=np.float64)
    for start in range(0, n, chunk):
        x = flat[start:start + chunk]
        diff = x[:, :, None, :] - x[:, None, :, :]
        out[start:start + chunk] = np.sqrt(np.einsum("nabc,nabc->nab", diff, diff))
    return out


def city_distance_matrix(h_c, other=None) -> np.ndarray:
    """Frame-to-frame distances between ``h_c`` and ``other`` (default itself)."""
    a = _as_sequence(h_c)
    b = a if other is None else _as_sequence(other)
    _, _, h, w = a.shape
    fa = a.reshape(a.shape[0], -1)
    fb = b.reshape(b.shape[0], -1)
    sq = (np.sum(fa * fa, axis=1)[:, None] + np.sum(fb * fb, axis=1)[None, :]
          - 2.0 * fa @ fb.T)
    dist = np.sqrt(np.clip(sq, 0.0, None) / (h * w))
    if other is None:
        np.fill_diagonal(dist, 0.0)
    return dist


# ============================================================================
# Selection
# ============================================================================


def topk_select(values: Sequence[float], k: int, ascending: bool = True) -> np.ndarray:
    """Indices of the ``k`` extreme values; ties go to the smaller index."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        return np.zeros(0, dtype=np.intp)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    keys = values if ascending else -values
    return np.argsort(keys, kind="stable")[:k]


def _thresholds(distances: np.ndarray, valid: np.ndarray, cfg: SamplerConfig,
                absolute: float) -> np.ndarray:
    n_rows = distances.shape[0]
    if cfg.threshold_mode == "absolute":
        return np.full(n_rows, absolute, dtype=np.float64)
    masked = np.where(valid, distances, np.inf)
    ordered = np.sort(masked, axis=1)
    n_valid = valid.sum(axis=1)
    rank = np.floor(cfg.percentile * np.maximum(n_valid - 1, 0)).astype(np.intp)
    thr = np.take_along_axis(ordered, rank[:, None], axis=1)[:, 0]
    return np.where(n_valid > 0, thr, -np.inf)


def classify_matrix(distances: np.ndarray, valid: Optional[np.ndarray], cfg: SamplerConfig,
                    scale: str = NEIGHBORHOOD) -> SampleMatrix:
    """Split each row's valid candidates into Top-K positives and hardest negatives.

    A candidate is positive when its distance is at most the row threshold.
    Positives keep the K nearest, negatives the K nearest above the threshold.
    """
    distances = np.asarray(distances, dtype=np.float64)
    if distances.ndim != 2:
        raise DimensionError(f"distances must be anchors x candidates, got {distances.shape}")
    if valid is None:
        valid = np.ones(distances.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != distances.shape:
        raise DimensionError(f"valid mask {valid.shape} vs distances {distances.shape}")

    k = cfg.k
    absolute = cfg.delta if scale == NEIGHBORHOOD else cfg.theta
    thresholds = _thresholds(distances, valid, cfg, absolute)

    positive = valid & (distances <= thresholds[:, None])
    negative = valid & ~positive
    n_pos = positive.sum(axis=1)
    n_neg = negative.sum(axis=1)

    # Positives sort ahead of negatives: distance <= threshold < distance.
    keys = np.where(valid, distances, np.inf)
    order = np.argsort(keys, axis=1, kind="stable")
    m = distances.shape[1]
    slots = np.arange(k)[None, :]

    pos_mask = slots < np.minimum(n_pos, k)[:, None]
    pos_cols = np.minimum(slots, m - 1) if m else np.zeros((1, k), dtype=np.intp)
    neg_mask = slots < np.minimum(n_neg, k)[:, None]
    neg_cols = np.minimum(n_pos[:, None] + slots, max(m - 1, 0))

    if m:
        pos_idx = np.take_along_axis(order, np.broadcast_to(pos_cols, pos_mask.shape), axis=1)
        neg_idx = np.take_along_axis(order, neg_cols, axis=1)
    else:
        pos_idx = np.zeros(pos_mask.shape, dtype=np.intp)
        neg_idx = np.zeros(neg_mask.shape, dtype=np.intp)
    pos_idx = np.where(pos_mask, pos_idx, 0)
    neg_idx = np.where(neg_mask, neg_idx, 0)
    short = (n_pos < k) | (n_neg < k)
    return SampleMatrix(pos_idx, pos_mask, neg_idx, neg_mask, thresholds, short)


def classify(anchors: Sequence[Hashable], candidates: Sequence[Hashable], distances,
             cfg: SamplerConfig, scale: str = NEIGHBORHOOD) -> List[SampleSet]:
    """Per-anchor sample sets over a shared candidate list.

    ``distances[a, m]`` is the distance from ``anchors[a]`` to ``candidates[m]``;
    a candidate equal to its anchor is excluded.
    """
    distances = np.asarray(distances, dtype=np.float64)
    if distances.shape != (len(anchors), len(candidates)):
        raise DimensionError(
            f"distances {distances.shape} vs {len(anchors)} anchors x {len(candidates)} candidates"
        )
    valid = np.array([[cand != anchor for cand in candidates] for anchor in anchors],
                     dtype=bool).reshape(distances.shape)
    matrix = classify_matrix(distances, valid, cfg, scale)

    sets = []
    for a, anchor in enumerate(anchors):
        pos = matrix.pos_idx[a][matrix.pos_mask[a]]
        neg = matrix.neg_idx[a][matrix.neg_mask[a]]
        sets.append(SampleSet(
            anchor=anchor,
            positives=[candidates[m] for m in pos],
            positive_distances=distances[a, pos],
            negatives=[candidates[m] for m in neg],
            negative_distances=distances[a, neg],
            threshold=float(matrix.thresholds[a]),
            short_set=bool(matrix.short[a]),
        ))
    n_short = int(matrix.short.sum())
    if n_short:
        logger.debug("%d of %d anchors have short %s sample sets", n_short, len(anchors), scale)
    return sets


def neighborhood_samples(h_b, cfg: SamplerConfig) -> SampleMatrix:
    """Samples for every region of every frame; rows are ``t * HW + region``."""
    dist = neighborhood_distance_matrix(h_b)
    n, hw, _ = dist.shape
    valid = np.broadcast_to(~np.eye(hw, dtype=bool), dist.shape).reshape(n * hw, hw)
    return classify_matrix(dist.reshape(n * hw, hw), valid, cfg, NEIGHBORHOOD)


def city_samples(h_c, anchor_frames: Sequence[int], cfg: SamplerConfig) -> SampleMatrix:
    """Samples for anchor frames against every frame of ``h_c``; columns are frame indices."""
    dist = city_distance_matrix(h_c)
    rows = np.asarray(anchor_frames, dtype=np.intp)
    valid = np.ones((rows.size, dist.shape[1]), dtype=bool)
    valid[np.arange(rows.size), rows] = False
    return classify_matrix(dist[rows], valid, cfg, CITY)
