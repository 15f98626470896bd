"""Tests for finegrid.grid module - flow grids, constraint, scaling, splits, synthetic data."""

import numpy as np
import pytest

from finegrid.config import DataConfig, SynthConfig
from finegrid.errors import DimensionError, FormatError, UsageError
from finegrid.grid import (
    FlowData,
    FlowGrid,
    Granularity,
    ScalerParams,
    apply_scaler,
    block_sum,
    chronological_split,
    coarsen,
    fit_scaler,
    frame_timestamps,
    invert_scaler,
    mean_partition,
    synth_data,
    synth_generate,
    validate_constraint,
)
from finegrid.tensor import Tensor


def loop_block_sum(fine, s):
    t, fh, fw = fine.shape
    out = np.zeros((t, fh // s, fw // s))
    for k in range(t):
        for i in range(fh):
            for j in range(fw):
                out[k, i // s, j // s] += fine[k, i, j]
    return out


class TestFlowGrid:
    """Tests for the FlowGrid value type."""

    def test_rejects_negative_values(self):
        """Should raise on negative flows."""
        with pytest.raises(FormatError):
            FlowGrid.from_frames(np.array([[[-1.0]]]), Granularity.COARSE, 2, 4)

    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionError):
            FlowGrid.from_frames(np.ones((2, 2)), Granularity.COARSE, 2, 4)

    def test_frames_are_read_only(self, fine_grid):
        """Frames should not be writable after construction."""
        with pytest.raises(ValueError):
            fine_grid.frames[0, 0, 0] = 5.0

    def test_timestamps(self):
        """Timestamps should be (day, slot) pairs."""
        assert frame_timestamps([0, 3, 7], 3).tolist() == [[0, 0], [1, 0], [2, 1]]

    def test_select_keeps_timestamps(self, fine_grid):
        part = fine_grid.select(range(4, 6))
        assert part.n_frames == 2
        assert part.timestamps.tolist() == [[1, 1], [1, 2]]


class TestCoarsen:
    """Tests for block-sum aggregation."""

    def test_two_by_two(self):
        """[[1,2],[3,4]] with S=2 should give [[10]]."""
        assert block_sum(np.array([[1, 2], [3, 4]]), 2).tolist() == [[10]]

    def test_uniform(self):
        """Uniform v should give 4v per coarse cell."""
        out = coarsen(np.full((1, 4, 4), 2.5), 2)
        assert np.all(out == 10.0)

    @pytest.mark.parametrize("s", [2, 4])
    def test_matches_loop_oracle(self, rng, s):
        """Random 8x8 grids should match the loop block sum exactly."""
        for _ in range(10):
            fine = rng.integers(0, 50, size=(3, 8, 8)).astype(np.float64)
            np.testing.assert_array_equal(coarsen(fine, s), loop_block_sum(fine, s))

    def test_indivisible(self):
        """Should raise when dims are not divisible by S."""
        with pytest.raises(DimensionError):
            coarsen(np.ones((1, 5, 4)), 2)

    def test_flowgrid_keeps_metadata(self, fine_grid):
        coarse = coarsen(fine_grid)
        assert coarse.granularity == Granularity.COARSE
        assert coarse.height == fine_grid.height // 2
        np.testing.assert_array_equal(coarse.timestamps, fine_grid.timestamps)

    def test_raw_array_needs_factor(self):
        with pytest.raises(UsageError):
            coarsen(np.ones((1, 4, 4)))


class TestValidateConstraint:
    """Tests for the structural-constraint residual."""

    def test_mean_partition_is_exact(self, coarse_grid):
        """Uniformly distributed coarse values should give residual 0."""
        fine = mean_partition(coarse_grid.frames, 2)
        assert validate_constraint(coarse_grid.frames, fine, 2) == 0.0

    def test_perturbed_cell(self, coarse_grid, fine_grid):
        """One fine cell perturbed by +1 should give residual 1."""
        fine = fine_grid.frames.copy()
        fine[2, 1, 3] += 1.0
        assert validate_constraint(coarse_grid, fine, 2) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            validate_constraint(np.ones((1, 2, 2)), np.ones((1, 6, 6)), 2)


class TestScaler:
    """Tests for min-max scaling."""

    def test_affine_map(self):
        """Values 0..10 should give min 0, max 10 and map 5 to 0.5."""
        params = fit_scaler(np.arange(11.0).reshape(1, 1, 11))
        assert (params.min, params.max) == (0.0, 10.0)
        assert apply_scaler(params, np.array([5.0])).tolist() == [0.5]

    def test_inverse(self, rng):
        """invert(apply(x)) should return x."""
        params = ScalerParams(2.0, 37.0)
        x = rng.uniform(0, 50, size=20)
        np.testing.assert_allclose(invert_scaler(params, apply_scaler(params, x)), x, atol=1e-6)

    def test_constant_grid(self):
        """A constant grid should give (c, c+1) and scale to zeros."""
        params = fit_scaler(np.full((2, 3, 3), 4.0))
        assert (params.min, params.max) == (4.0, 5.0)
        assert np.all(apply_scaler(params, np.full(3, 4.0)) == 0)

    def test_tensor_input(self, f64):
        params = ScalerParams(0.0, 4.0)
        out = apply_scaler(params, Tensor([2.0]))
        assert isinstance(out, Tensor)
        assert out.data.tolist() == [0.5]

    def test_invalid_params(self):
        with pytest.raises(UsageError):
            ScalerParams(3.0, 3.0)

    def test_empty_grid(self):
        with pytest.raises(UsageError):
            fit_scaler(np.zeros((0, 2, 2)))


class TestSplit:
    """Tests for chronological splitting."""

    def test_default_sizes(self):
        """1440 frames should split 1008 / 144 / 288."""
        split = chronological_split(1440)
        assert (len(split.train), len(split.val), len(split.test)) == (1008, 144, 288)

    def test_ranges_are_chronological(self):
        split = chronological_split(100, 0.6, 0.2)
        assert split.train.stop == split.val.start
        assert split.val.stop == split.test.start
        assert split.test.stop == 100

    def test_no_room_for_test(self):
        with pytest.raises(UsageError):
            chronological_split(10, 0.7, 0.3)

    def test_flowdata_checks_pairing(self, fine_grid):
        """Should reject a fine grid that is not S times the coarse grid."""
        bad_coarse = FlowGrid.from_frames(np.ones((6, 3, 3)), Granularity.COARSE, 2, 3)
        with pytest.raises(DimensionError):
            FlowData.from_grids(bad_coarse, fine_grid, 0.5, 0.2)

    def test_flowdata_checks_granularity(self, fine_grid):
        with pytest.raises(FormatError):
            FlowData.from_grids(fine_grid, fine_grid, 0.5, 0.2)


class TestSynthGenerate:
    """Tests for the synthetic generator."""

    def test_deterministic(self):
        """The same seed should give identical grids."""
        cfg = SynthConfig(height=4, width=4, frames=24, slots_per_day=12, seed=5)
        fine_a, coarse_a = synth_generate(cfg)
        fine_b, coarse_b = synth_generate(cfg)
        np.testing.assert_array_equal(fine_a.frames, fine_b.frames)
        np.testing.assert_array_equal(coarse_a.frames, coarse_b.frames)

    def test_constraint_is_exact(self):
        """The coarse grid should be the exact block sum of the fine grid."""
        fine, coarse = synth_generate(SynthConfig(height=4, width=4, frames=30, seed=1))
        assert validate_constraint(coarse, fine) == 0.0

    def test_static_noiseless_is_periodic(self):
        """Zero noise and a static blob should repeat every day."""
        cfg = SynthConfig(height=4, width=4, frames=36, slots_per_day=12, blobs=1,
                          blob_speed=0.0, noise=0.0)
        fine, _ = synth_generate(cfg)
        np.testing.assert_array_equal(fine.frames[:12], fine.frames[12:24])
        np.testing.assert_array_equal(fine.frames[:12], fine.frames[24:])

    def test_shapes_and_values(self):
        fine, coarse = synth_generate(SynthConfig(height=3, width=5, upscale=2, frames=10))
        assert fine.frames.shape == (10, 6, 10)
        assert coarse.frames.shape == (10, 3, 5)
        assert np.min(fine.frames) >= 0
        np.testing.assert_array_equal(fine.frames, np.round(fine.frames))

    def test_synth_data_split(self):
        data = synth_data(DataConfig(height=2, width=2, frames=20, slots_per_day=5))
        assert (len(data.split.train), len(data.split.val), len(data.split.test)) == (14, 2, 4)
        coarse, fine = data.part("val")
        assert coarse.n_frames == fine.n_frames == 2
