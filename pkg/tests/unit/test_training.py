"""Tests for finegrid.training module - losses, fine-tuning and end-to-end training."""

import math
from dataclasses import replace

import numpy as np
import pytest

from finegrid.config import (
    DataConfig,
    EvalConfig,
    ModelConfig,
    PretrainConfig,
    SamplerConfig,
    TrainConfig,
)
from finegrid.contrastive import pretrain_city, pretrain_neighborhood
from finegrid.encoders import FeatureMap, FeatureScale
from finegrid.errors import CheckpointError, DimensionError, UsageError
from finegrid.grid import synth_data
from finegrid.metrics import baseline_mean, evaluate
from finegrid.storage import Stage
from finegrid.tensor import Tape, Tensor, backward, mse, parameter
from finegrid.training import (
    LOSS_TRACE_HEADER,
    compare_modes,
    end_to_end_train,
    feature_diff_loss,
    finetune,
    total_loss,
)


def loop_diff_loss(h_b, h_c, alpha, form):
    """Direct evaluation over frames, cells and channels."""
    n, c, h, w = h_b.shape
    gated = []
    for t in range(n):
        inner = 0.0
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    inner += h_b[t, k, i, j] * h_c[t, k, i, j] + h_c[t, k, i, j] ** 2
        gated.append(max(0.0, math.tanh(alpha * inner / (2 * h * w))))
    value = sum(gated) / n
    return -value if form == "as_written" else value


@pytest.fixture(scope="module")
def pretrained():
    """Stage I and II checkpoints on the tiny dataset, shared across the module."""
    data = synth_data(DataConfig(height=4, width=4, upscale=2, frames=48, slots_per_day=12,
                                 blobs=2, blob_width=1.2, peak=10.0, noise=0.3, seed=3))
    model_cfg = ModelConfig(channels=4, heads=2, city_blocks=1, neighborhood_layers=1)
    cfg = PretrainConfig(epochs=1, batch_size=4, lr=1e-2, max_city_anchors=16,
                         frames_per_epoch=8, sampler=SamplerConfig(k=3, percentile=0.3))
    return (pretrain_neighborhood(data, cfg, model_cfg).checkpoint(),
            pretrain_city(data, cfg, model_cfg).checkpoint())


class TestFeatureDiffLoss:
    """Tests for the feature-differentiating regulariser."""

    @pytest.mark.parametrize("form", ["as_written", "penalize_similarity"])
    def test_zero_city_features(self, rng, form):
        """h_c = 0 should give a loss of 0 in both forms."""
        h_b = rng.normal(size=(4, 3, 3))
        assert feature_diff_loss(h_b, np.zeros((4, 3, 3)), form=form).item() == 0.0

    def test_saturation(self):
        """A large inner product should push the loss to -1 as written, +1 otherwise."""
        h = np.full((4, 2, 2), 10.0)
        assert feature_diff_loss(h, h).item() == pytest.approx(-1.0)
        assert feature_diff_loss(h, h, form="penalize_similarity").item() == pytest.approx(1.0)

    @pytest.mark.parametrize("form", ["as_written", "penalize_similarity"])
    def test_matches_loop_oracle(self, f64, rng, form):
        h_b, h_c = rng.normal(size=(3, 4, 2, 3)), rng.normal(size=(3, 4, 2, 3))
        loss = feature_diff_loss(h_b, h_c, alpha=0.7, form=form)
        assert loss.item() == pytest.approx(loop_diff_loss(h_b, h_c, 0.7, form), abs=1e-8)

    def test_range(self, rng):
        for _ in range(10):
            loss = feature_diff_loss(rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))).item()
            assert -1.0 <= loss <= 0.0

    def test_accepts_feature_maps(self, rng):
        h_b = FeatureMap(Tensor(rng.normal(size=(4, 2, 2))), FeatureScale.NEIGHBORHOOD)
        h_c = FeatureMap(Tensor(np.zeros((4, 2, 2))), FeatureScale.CITY)
        assert feature_diff_loss(h_b, h_c).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            feature_diff_loss(np.ones((4, 2, 2)), np.ones((4, 2, 3)))

    def test_unknown_form(self):
        with pytest.raises(UsageError):
            feature_diff_loss(np.ones((4, 2, 2)), np.ones((4, 2, 2)), form="absolute")

    def test_gradient_reaches_both_inputs(self, f64, rng):
        h_b = parameter(rng.uniform(0.1, 0.3, size=(4, 2, 2)))
        h_c = parameter(rng.uniform(0.1, 0.3, size=(4, 2, 2)))
        with Tape():
            backward(feature_diff_loss(h_b, h_c))
        assert np.all(h_b.grad < 0) and np.all(h_c.grad < 0)


class TestTotalLoss:
    """Tests for the supervised objective."""

    def test_lambda_zero_is_mse(self, f64, rng):
        """lam = 0 should give exactly the MSE."""
        pred, truth = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
        h_b, h_c = rng.normal(size=(2, 4, 2, 2)), rng.normal(size=(2, 4, 2, 2))
        loss = total_loss(pred, truth, h_b, h_c, TrainConfig(lam=0.0))
        assert loss.item() == mse(pred, truth).item()

    def test_perfect_prediction(self, rng):
        """y_pred = y_true with h_c = 0 should give 0."""
        y = rng.normal(size=(4, 4))
        loss = total_loss(y, y, rng.normal(size=(4, 2, 2)), np.zeros((4, 2, 2)), TrainConfig())
        assert loss.item() == 0.0

    def test_linear_in_lambda(self, f64, rng):
        pred, truth = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        h_b, h_c = rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))
        base = mse(pred, truth).item()
        one = total_loss(pred, truth, h_b, h_c, TrainConfig(lam=1.0)).item() - base
        three = total_loss(pred, truth, h_b, h_c, TrainConfig(lam=3.0)).item() - base
        assert three == pytest.approx(3.0 * one, abs=1e-10)

    def test_matches_recomputation(self, f64, rng):
        pred, truth = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
        h_b, h_c = rng.normal(size=(2, 4, 2, 2)), rng.normal(size=(2, 4, 2, 2))
        cfg = TrainConfig(lam=0.25, alpha=0.5)
        expected = np.mean((pred - truth) ** 2) + 0.25 * loop_diff_loss(h_b, h_c, 0.5, "as_written")
        assert total_loss(pred, truth, h_b, h_c, cfg).item() == pytest.approx(expected, abs=1e-8)

    def test_missing_branch(self, rng):
        pred, truth = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        loss = total_loss(pred, truth, None, rng.normal(size=(4, 2, 2)), TrainConfig(lam=5.0))
        assert loss.item() == mse(pred, truth).item()


class TestFinetune:
    """Tests for stage III training from pretrained encoders."""

    def test_runs_and_keeps_constraint(self, tiny_data, tiny_train_cfg, tiny_model_cfg, pretrained):
        result = finetune(tiny_data, *pretrained, tiny_train_cfg, tiny_model_cfg)
        assert result.mode == "two_stage"
        assert [r.epoch for r in result.history] == [1, 2]
        assert all(r.val_residual < 1e-4 for r in result.history)
        assert result.checkpoint().stage == Stage.III
        assert len(result.loss_rows()[0]) == len(LOSS_TRACE_HEADER)

    def test_validation_rmse_improves(self, tiny_data, tiny_model_cfg, pretrained):
        cfg = TrainConfig(epochs=5, batch_size=8, lr=1e-2)
        result = finetune(tiny_data, *pretrained, cfg, tiny_model_cfg)
        assert result.best_epoch >= 1
        assert result.history[-1].val_rmse < result.initial.val_rmse

    def test_loads_pretrained_encoders(self, tiny_data, tiny_model_cfg, pretrained):
        """With frozen encoders the trained model keeps the pretrained weights."""
        cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-2, freeze_encoders=True)
        result = finetune(tiny_data, *pretrained, cfg, tiny_model_cfg)
        for name, values in result.model.encoder_b.state_dict().items():
            np.testing.assert_array_equal(values, pretrained[0].segments[f"encoder_b.{name}"])

    def test_stage_mismatch(self, tiny_data, tiny_train_cfg, tiny_model_cfg, pretrained):
        """A city checkpoint passed as the neighborhood encoder should be rejected."""
        with pytest.raises(CheckpointError, match="must be stage I, got stage II"):
            finetune(tiny_data, pretrained[1], pretrained[1], tiny_train_cfg, tiny_model_cfg)

    def test_missing_checkpoint(self, tiny_data, tiny_train_cfg, tiny_model_cfg, pretrained):
        with pytest.raises(UsageError, match="city"):
            finetune(tiny_data, pretrained[0], None, tiny_train_cfg, tiny_model_cfg)

    def test_shape_mismatch_names_segment(self, tiny_data, tiny_train_cfg, tiny_model_cfg,
                                          pretrained):
        wide = replace(tiny_model_cfg, channels=8)
        with pytest.raises(CheckpointError, match="encoder_b"):
            finetune(tiny_data, *pretrained, tiny_train_cfg, wide)

    def test_single_branch_ignores_other_checkpoint(self, tiny_data, tiny_train_cfg,
                                                    tiny_model_cfg, pretrained):
        cfg = replace(tiny_model_cfg, branches="neighborhood")
        result = finetune(tiny_data, pretrained[0], None, tiny_train_cfg, cfg)
        assert result.model.encoder_c is None


class TestEndToEnd:
    """Tests for training from random initialisation."""

    def test_history(self, tiny_data, tiny_train_cfg, tiny_model_cfg):
        result = end_to_end_train(tiny_data, tiny_train_cfg, tiny_model_cfg)
        assert result.mode == "end_to_end"
        assert len(result.history) == tiny_train_cfg.epochs
        assert all(np.isfinite(r.train_loss) for r in result.history)
        assert all(len(r.fusion_weights) == 3 for r in result.history)
        assert sum(result.history[-1].fusion_weights) == pytest.approx(1.0, abs=1e-5)

    def test_deterministic(self, tiny_data, tiny_train_cfg, tiny_model_cfg):
        """The same seed should give identical histories and parameters."""
        a = end_to_end_train(tiny_data, tiny_train_cfg, tiny_model_cfg)
        b = end_to_end_train(tiny_data, tiny_train_cfg, tiny_model_cfg)
        assert a.loss_rows() == b.loss_rows()
        for name, values in a.model.snapshot().items():
            np.testing.assert_array_equal(values, b.model.snapshot()[name])

    def test_best_epoch_restored(self, tiny_data, tiny_model_cfg):
        result = end_to_end_train(tiny_data, TrainConfig(epochs=3, batch_size=8, lr=1e-2),
                                  tiny_model_cfg, EvalConfig())
        losses = [result.initial.val_loss] + [r.val_loss for r in result.history]
        assert result.best.val_loss == min(losses)

    def test_scalers_fitted_on_train(self, tiny_data, tiny_train_cfg, tiny_model_cfg):
        result = end_to_end_train(tiny_data, tiny_train_cfg, tiny_model_cfg)
        _, train_fine = tiny_data.part("train")
        assert result.model.fine_scaler.max == float(train_fine.frames.max())


@pytest.fixture(scope="module")
def periodic_data():
    """Eight noiseless days of 4x4 coarse / 8x8 fine frames."""
    return synth_data(DataConfig(height=4, width=4, upscale=2, frames=96, slots_per_day=12,
                                 blobs=2, blob_width=1.2, peak=10.0, noise=0.0, seed=3))


@pytest.mark.slow
class TestAgainstMean:
    """Two-stage training should beat the uniform partition on the test split."""

    @pytest.fixture(scope="class")
    def trained(self, periodic_data):
        model_cfg = ModelConfig(channels=4, heads=2, city_blocks=1, neighborhood_layers=1)
        pre = PretrainConfig(epochs=3, batch_size=4, lr=1e-2, max_city_anchors=64,
                             frames_per_epoch=16, sampler=SamplerConfig(k=3, percentile=0.3))
        ckpt_b = pretrain_neighborhood(periodic_data, pre, model_cfg).checkpoint()
        ckpt_c = pretrain_city(periodic_data, pre, model_cfg).checkpoint()
        cfg = TrainConfig(epochs=50, batch_size=8, lr=1e-2)
        return finetune(periodic_data, ckpt_b, ckpt_c, cfg, model_cfg)

    def test_below_mean(self, periodic_data, trained):
        test_coarse, test_fine = periodic_data.part("test")
        model = evaluate(trained.model, test_coarse, test_fine)
        mean = baseline_mean(test_coarse, test_fine)
        assert model.rmse < mean.rmse
        assert model.constraint_residual < 1e-4

    def test_twenty_percent_below_mean(self, periodic_data, trained):
        test_coarse, test_fine = periodic_data.part("test")
        model = evaluate(trained.model, test_coarse, test_fine)
        mean = baseline_mean(test_coarse, test_fine)
        assert model.rmse <= 0.8 * mean.rmse


@pytest.mark.slow
class TestCompareModes:
    def test_rows(self, tiny_data, tiny_run_cfg):
        rows = compare_modes(tiny_data, tiny_run_cfg)
        assert [r.label for r in rows] == ["two_stage", "end_to_end"]
        assert len(rows[0].pretrain_losses[0]) == tiny_run_cfg.pretrain.epochs
        assert rows[1].pretrain_losses == ([], [])
        for row in rows:
            assert all(np.isfinite(value) for _, value in row.report.rows())
            assert np.isfinite(row.first_val_loss)

    def test_pretrained_start_is_lower(self, tiny_data, tiny_run_cfg):
        """Same seed and data order: epoch 1 val loss favours the pretrained encoders."""
        run = replace(tiny_run_cfg, pretrain=replace(tiny_run_cfg.pretrain, epochs=5,
                                                     frames_per_epoch=0, max_city_anchors=128),
                      train=replace(tiny_run_cfg.train, epochs=1))
        two_stage, end_to_end = compare_modes(tiny_data, run)
        assert two_stage.first_val_loss < end_to_end.first_val_loss

    def test_branch_sweep(self, tiny_data, tiny_run_cfg):
        rows = compare_modes(tiny_data, tiny_run_cfg, ["neighborhood", "city"])
        assert [r.label for r in rows] == ["two_stage [neighborhood]", "end_to_end [neighborhood]",
                                           "two_stage [city]", "end_to_end [city]"]
