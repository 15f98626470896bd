"""Evaluation metrics and the MEAN / HA heuristic baselines."""

import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import DimensionError, UsageError
from .fusion import infer_fine
from .grid import FlowGrid, mean_partition, validate_constraint

logger = logging.getLogger(__name__)

METRIC_NAMES = ("rmse", "mae", "mape")


@dataclass(frozen=True)
class MetricsReport:
    """RMSE / MAE / MAPE in raw flow units plus the worst structural-constraint residual."""
    rmse: float
    mae: float
    mape: float
    constraint_residual: float
    n_frames: int
    mape_mask_threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> List[Tuple[str, float]]:
        return [(name, getattr(self, name)) for name in
                ("rmse", "mae", "mape", "constraint_residual")]


def compute_metrics(pred, truth, coarse=None, upscale: Optional[int] = None,
                    mape_mask_threshold: float = 1.0) -> MetricsReport:
    """Metrics over every fine cell and frame.

    MAPE averages ``|pred - truth| / truth`` over cells whose truth exceeds
    the mask threshold, and is 0 when no cell does.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {truth.shape}")
    if pred.size == 0:
        raise UsageError("cannot evaluate an empty split")

    err = pred - truth
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    mask = truth > mape_mask_threshold
    mape = float(np.mean(np.abs(err[mask]) / truth[mask])) if mask.any() else 0.0

    residual = 0.0
    if coarse is not None:
        residual = validate_constraint(coarse, pred, upscale)
    n_frames = pred.shape[0] if pred.ndim == 3 else 1
    return MetricsReport(rmse, mae, mape, residual, n_frames, mape_mask_threshold)


def evaluate(model, coarse: FlowGrid, fine: FlowGrid, mape_mask_threshold: float = 1.0) -> MetricsReport:
    """Score a fitted model on one split."""
    if coarse.n_frames == 0:
        raise UsageError("cannot evaluate an empty split")
    pred = infer_fine(coarse.frames, model)
    return compute_metrics(pred, fine.frames, coarse.frames, model.upscale, mape_mask_threshold)


def baseline_mean(coarse: FlowGrid, fine: FlowGrid, mape_mask_threshold: float = 1.0) -> MetricsReport:
    """Spread each coarse value uniformly over its subregions."""
    s = fine.upscale
    pred = mean_partition(coarse.frames, s)
    return compute_metrics(pred, fine.frames, coarse.frames, s, mape_mask_threshold)


class HistoricalAverage:
    """Per-slot mean of the fine training maps; unseen slots use the global mean."""

    def __init__(self):
        self.slot_means: dict = {}
        self.global_mean: Optional[np.ndarray] = None

    def fit(self, train_fine: FlowGrid) -> "HistoricalAverage":
        if train_fine.n_frames == 0:
            raise UsageError("historical average needs a non-empty training split")
        frames = train_fine.frames.astype(np.float64)
        slots = train_fine.slots
        self.slot_means = {int(s): frames[slots == s].mean(axis=0) for s in np.unique(slots)}
        self.global_mean = frames.mean(axis=0)
        if len(self.slot_means) < train_fine.slots_per_day:
            logger.warning("training split covers %d of %d daily slots; unseen slots use the "
                           "global mean", len(self.slot_means), train_fine.slots_per_day)
        return self

    def predict(self, slots) -> np.ndarray:
        if self.global_mean is None:
            raise UsageError("historical average is not fitted")
        return np.stack([self.slot_means.get(int(s), self.global_mean) for s in slots])


def baseline_ha(train_fine: FlowGrid, eval_coarse: FlowGrid, eval_fine: FlowGrid,
                mape_mask_threshold: float = 1.0) -> MetricsReport:
    ha = HistoricalAverage().fit(train_fine)
    if eval_fine.n_frames == 0:
        raise UsageError("cannot evaluate an empty split")
    pred = ha.predict(eval_fine.slots)
    return compute_metrics(pred, eval_fine.frames, eval_coarse.frames, eval_fine.upscale,
                           mape_mask_threshold)
