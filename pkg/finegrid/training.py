"""Supervised training of the full model: fine-tuning and end-to-end.

Losses are computed on fine maps mapped through the fine-grid scaler; metrics
are reported in raw flow units.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .config import EvalConfig, ModelConfig, RunConfig, TrainConfig
from .contrastive import pretrain_city, pretrain_neighborhood
from .encoders import FeatureMap
from .errors import CheckpointError, DimensionError, UsageError
from .fusion import FlowModel
from .grid import FlowData, FlowGrid, apply_scaler, fit_scaler
from .metrics import MetricsReport, compute_metrics, evaluate
from .optim import Adam
from .storage import Checkpoint, Stage
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    mean,
    mse,
    mul,
    no_grad,
    relu,
    scale,
    tanh,
    tensor_sum,
)

logger = logging.getLogger(__name__)


# ============================================================================
# Losses
# ============================================================================


def _values(features) -> Tensor:
    if isinstance(features, FeatureMap):
        return features.values
    return as_tensor(features)


def feature_diff_loss(h_b, h_c, alpha: float = 1.0, form: str = "as_written") -> Tensor:
    """Regulariser relating the two feature scales, averaged over frames.

    Per frame, ``inner = alpha / (2HW) * sum_ij <h_c, h_b + h_c>``; the loss is
    ``-relu(tanh(inner))`` as written or ``+relu(tanh(inner))`` when
    penalising similarity.
    """
    hb, hc = _values(h_b), _values(h_c)
    if hb.shape != hc.shape:
        raise DimensionError(f"neighborhood {hb.shape} and city {hc.shape} features differ")
    if hb.ndim not in (3, 4):
        raise DimensionError(f"features must be C x H x W or N x C x H x W, got {hb.shape}")
    if form not in ("as_written", "penalize_similarity"):
        raise UsageError(f"unknown feature-differentiating loss form {form!r}")
    h, w = hb.shape[-2:]
    per_cell = mul(hc, add(hb, hc))
    inner = scale(tensor_sum(per_cell, axis=(-3, -2, -1)), alpha / (2.0 * h * w))
    gated = relu(tanh(inner))
    loss = mean(gated)
    return scale(loss, -1.0) if form == "as_written" else loss


def total_loss(y_pred, y_true, h_b, h_c, cfg: TrainConfig) -> Tensor:
    """``MSE(y_pred, y_true) + lam * L_d``; L_d is 0 when a branch is missing."""
    loss = mse(y_pred, y_true)
    if h_b is None or h_c is None:
        return loss
    return add(loss, scale(feature_diff_loss(h_b, h_c, cfg.alpha, cfg.diff_loss_form), cfg.lam))


# ============================================================================
# Training loop
# ============================================================================


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_rmse: float
    val_mae: float
    val_mape: float
    val_residual: float
    fusion_weights: Tuple[float, ...] = ()


@dataclass
class TrainResult:
    """A trained model with its per-epoch history; the model holds the best-val parameters."""
    model: FlowModel
    mode: str
    initial: EpochRecord
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best(self) -> EpochRecord:
        return self.history[self.best_epoch - 1] if self.best_epoch else self.initial

    def checkpoint(self) -> Checkpoint:
        return self.model.checkpoint(Stage.III)

    def loss_rows(self):
        return [(r.epoch, r.train_loss, r.val_loss, r.val_rmse, r.val_mae, r.val_mape, r.val_residual)
                for r in self.history]


LOSS_TRACE_HEADER = ("epoch", "train_loss", "val_loss", "val_rmse", "val_mae", "val_mape",
                     "val_residual")


def _scaled_loss(model: FlowModel, coarse: np.ndarray, fine: np.ndarray,
                 cfg: TrainConfig) -> Tuple[Tensor, np.ndarray]:
    out = model(coarse)
    pred_scaled = apply_scaler(model.fine_scaler, out.pred)
    target = apply_scaler(model.fine_scaler, fine)
    return total_loss(pred_scaled, target, out.h_b, out.h_c, cfg), out.pred.data


def _validate(model: FlowModel, coarse: FlowGrid, fine: FlowGrid, cfg: TrainConfig,
              eval_cfg: EvalConfig, epoch: int, train_loss: float, chunk: int = 64) -> EpochRecord:
    total, preds = 0.0, []
    with no_grad():
        for start in range(0, coarse.n_frames, chunk):
            c = coarse.frames[start:start + chunk]
            f = fine.frames[start:start + chunk]
            loss, pred = _scaled_loss(model, c, f, cfg)
            total += loss.item() * c.shape[0]
            preds.append(pred)
        weights = tuple(float(w) for w in model.fusion.weights().data)
    report = compute_metrics(np.concatenate(preds), fine.frames, coarse.frames, model.upscale,
                             eval_cfg.mape_mask_threshold)
    return EpochRecord(epoch, train_loss, total / coarse.n_frames, report.rmse, report.mae,
                       report.mape, report.constraint_residual, weights)


def _validation_part(data: FlowData) -> Tuple[FlowGrid, FlowGrid]:
    if len(data.split.val) == 0:
        logger.warning("validation split is empty; validating on the training split")
        return data.part("train")
    return data.part("val")


def fit_model_scalers(model: FlowModel, data: FlowData):
    coarse, fine = data.part("train")
    model.coarse_scaler = fit_scaler(coarse)
    model.fine_scaler = fit_scaler(fine)


def _train(model: FlowModel, data: FlowData, cfg: TrainConfig, eval_cfg: EvalConfig,
           mode: str) -> TrainResult:
    fit_model_scalers(model, data)
    if cfg.freeze_encoders:
        model.set_encoders_trainable(False)
    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    optimizer = Adam(params, lr=cfg.lr)
    order_rng = np.random.default_rng([cfg.seed, 1])

    train_coarse, train_fine = data.part("train")
    val_coarse, val_fine = _validation_part(data)
    initial = _validate(model, val_coarse, val_fine, cfg, eval_cfg, 0, float("nan"))
    result = TrainResult(model, mode, initial)
    best_loss, best_state = initial.val_loss, model.snapshot()
    logger.info("%s: initial val loss %.6f rmse %.4f", mode, initial.val_loss, initial.val_rmse)

    n = train_coarse.n_frames
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            with Tape():
                loss, _ = _scaled_loss(model, train_coarse.frames[batch], train_fine.frames[batch], cfg)
                optimizer.zero_grad()
                backward(loss)
            optimizer.step()
            total += loss.item() * batch.size

        record = _validate(model, val_coarse, val_fine, cfg, eval_cfg, epoch, total / n)
        result.history.append(record)
        if record.val_residual >= eval_cfg.constraint_tol:
            logger.warning("epoch %d: constraint residual %.3g above tolerance", epoch,
                           record.val_residual)
        if record.val_loss < best_loss:
            best_loss, best_state = record.val_loss, model.snapshot()
            result.best_epoch = epoch
        logger.info("%s epoch %d/%d train %.6f val %.6f rmse %.4f", mode, epoch, cfg.epochs,
                    record.train_loss, record.val_loss, record.val_rmse)

    model.restore(best_state)
    return result


def _model_rng(cfg: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 0])


def _check_stage(ckpt: Checkpoint, expected: Stage, what: str):
    if ckpt.stage != expected:
        raise CheckpointError(
            f"{what} checkpoint must be stage {expected.name}, got stage {ckpt.stage.name}"
        )


def finetune(data: FlowData, ckpt_b: Optional[Checkpoint], ckpt_c: Optional[Checkpoint],
             cfg: TrainConfig, model_cfg: ModelConfig,
             eval_cfg: Optional[EvalConfig] = None) -> TrainResult:
    """Stage III: load pretrained encoders, then train on the total loss."""
    eval_cfg = eval_cfg or EvalConfig()
    model = FlowModel(model_cfg, data.upscale, _model_rng(cfg))
    for ckpt, group, stage, what in ((ckpt_b, "encoder_b", Stage.I, "neighborhood"),
                                     (ckpt_c, "encoder_c", Stage.II, "city")):
        if group not in model.groups():
            continue
        if ckpt is None:
            raise UsageError(f"two-stage training needs a {what} encoder checkpoint")
        _check_stage(ckpt, stage, what)
        model.load_group(ckpt, group)
    return _train(model, data, cfg, eval_cfg, "two_stage")


def end_to_end_train(data: FlowData, cfg: TrainConfig, model_cfg: ModelConfig,
                     eval_cfg: Optional[EvalConfig] = None) -> TrainResult:
    """Train every parameter from random initialisation, no contrastive stages."""
    eval_cfg = eval_cfg or EvalConfig()
    model = FlowModel(model_cfg, data.upscale, _model_rng(cfg))
    return _train(model, data, cfg, eval_cfg, "end_to_end")


# ============================================================================
# Paired comparison
# ============================================================================


@dataclass
class ComparisonRow:
    label: str
    report: MetricsReport
    first_val_loss: float
    best_val_loss: float
    pretrain_losses: Tuple[List[float], List[float]] = ((), ())


def compare_modes(data: FlowData, run: RunConfig, branches: Optional[List[str]] = None) -> List[ComparisonRow]:
    """Two-stage vs end-to-end under one seed and one data order, scored on the test split.

    With ``branches`` set, both modes are run for every branch setting.
    """
    test_coarse, test_fine = data.part("test")
    rows = []
    for branch in branches or [run.model.branches]:
        model_cfg = replace(run.model, branches=branch)
        model_cfg.validate()
        suffix = "" if branches is None else f" [{branch}]"

        pre_b = pretrain_neighborhood(data, run.pretrain, model_cfg) if model_cfg.uses_neighborhood else None
        pre_c = pretrain_city(data, run.pretrain, model_cfg) if model_cfg.uses_city else None
        two_stage = finetune(data, pre_b.checkpoint() if pre_b else None,
                             pre_c.checkpoint() if pre_c else None, run.train, model_cfg, run.eval)
        end_to_end = end_to_end_train(data, run.train, model_cfg, run.eval)

        for label, result in (("two_stage", two_stage), ("end_to_end", end_to_end)):
            report = evaluate(result.model, test_coarse, test_fine, run.eval.mape_mask_threshold)
            pretrain = ((pre_b.losses if pre_b else []), (pre_c.losses if pre_c else [])) \
                if label == "two_stage" else ([], [])
            rows.append(ComparisonRow(label + suffix, report, result.history[0].val_loss,
                                      result.best.val_loss, pretrain))
    return rows
