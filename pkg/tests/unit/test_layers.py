"""Tests for finegrid.layers module - parameter containers and building blocks."""

import numpy as np
import pytest

from finegrid.errors import CheckpointError, ConfigError, DimensionError
from finegrid.layers import (
    AttentionBlock,
    Conv2d,
    DeformableConv2d,
    LayerNorm,
    Module,
    MultiHeadAttention,
    deform_conv,
    tap_grid,
)
from finegrid.tensor import Tensor, add, conv2d, reshape


class TestModule:
    """Tests for parameter registration and state loading."""

    def test_named_parameters_are_prefixed(self):
        block = AttentionBlock(4, 2)
        names = [name for name, _ in block.named_parameters("encoder_c.")]
        assert names[:4] == ["encoder_c.mha.wq", "encoder_c.mha.wk", "encoder_c.mha.wv",
                             "encoder_c.mha.wo"]
        assert "encoder_c.norm.gamma" in names

    def test_state_round_trip(self, rng):
        a = Conv2d(2, 3, rng=rng)
        b = Conv2d(2, 3)
        b.load_state(a.state_dict())
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_missing_segment(self, rng):
        """A checkpoint missing a parameter should name the segment."""
        state = Conv2d(2, 3, rng=rng).state_dict()
        del state["bias"]
        with pytest.raises(CheckpointError, match="encoder_b.bias"):
            Conv2d(2, 3).load_state(state, "encoder_b")

    def test_shape_mismatch(self, rng):
        """A kernel-size mismatch should name the segment and both shapes."""
        state = Conv2d(2, 3, kernel_size=5, rng=rng).state_dict()
        with pytest.raises(CheckpointError, match=r"encoder_b.weight.*\(3, 2, 5, 5\)"):
            Conv2d(2, 3, kernel_size=3).load_state(state, "encoder_b")

    def test_unknown_segment(self):
        state = Conv2d(1, 1).state_dict()
        state["extra"] = np.zeros(1)
        with pytest.raises(CheckpointError, match="extra"):
            Conv2d(1, 1).load_state(state)

    def test_set_trainable(self):
        layer = LayerNorm(3)
        layer.set_trainable(False)
        assert not any(p.requires_grad for p in layer.parameters())

    def test_empty_module(self):
        assert Module().parameters() == []


class TestConv2dLayer:
    """Tests for the same-size convolution layer."""

    def test_zero_layer_returns_bias(self):
        layer = Conv2d(1, 2, zero=True)
        layer.bias.data = np.array([1.0, -1.0], dtype=layer.bias.dtype)
        out = layer(Tensor(np.ones((1, 3, 3))))
        assert out.shape == (2, 3, 3)
        assert np.all(out.data[0] == 1.0) and np.all(out.data[1] == -1.0)

    def test_dilated_padding_keeps_size(self, rng):
        layer = Conv2d(1, 1, kernel_size=3, dilation=2, rng=rng)
        assert layer.padding == 2
        assert layer(Tensor(rng.normal(size=(1, 5, 5)))).shape == (1, 5, 5)


class TestDeformableConv:
    """Tests for deformable convolution."""

    def test_tap_grid_offsets(self):
        """Tap 0 of a 3x3 kernel at dilation 2 should sit two cells up and left."""
        rows, cols = tap_grid(3, 2, 4, 4)
        assert rows.shape == (9, 4, 4)
        assert (rows[0, 0, 0], cols[0, 0, 0]) == (-2.0, -2.0)
        assert (rows[4, 1, 3], cols[4, 1, 3]) == (1.0, 3.0)

    @pytest.mark.parametrize("dilation", [1, 2])
    def test_zero_offsets_match_conv2d(self, f64, rng, dilation):
        """A fresh layer has zero offsets and should equal a plain convolution."""
        layer = DeformableConv2d(2, 3, 3, dilation, rng=rng)
        layer.bias.data = rng.normal(size=3)
        x = Tensor(rng.normal(size=(2, 5, 5)))
        expected = add(conv2d(x, layer.weight, padding=dilation, dilation=dilation),
                       reshape(layer.bias, (-1, 1, 1)))
        np.testing.assert_allclose(layer(x).data, expected.data, atol=1e-6)

    def test_half_cell_offset(self, f64):
        """A 1x1 kernel of 1 with offset (0.5, 0.5) on a single cell v should read v/4."""
        layer = DeformableConv2d(1, 1, kernel_size=1)
        layer.weight.data = np.ones((1, 1, 1, 1))
        out = layer(Tensor(np.full((1, 1, 1), 8.0)), offsets=Tensor(np.full((2, 1, 1), 0.5)))
        assert out.data.tolist() == [[[2.0]]]

    def test_integer_offset_shifts(self, f64, rng):
        """Column offset +1 should read the right neighbour, zero past the edge."""
        x = rng.normal(size=(1, 1, 3, 4))
        offsets = np.zeros((1, 2, 3, 4))
        offsets[:, 1] = 1.0
        out = deform_conv(Tensor(x), Tensor(offsets), Tensor(np.ones((1, 1, 1, 1))), None)
        np.testing.assert_allclose(out.data[0, 0, :, :3], x[0, 0, :, 1:])
        assert np.all(out.data[0, 0, :, 3] == 0)

    def test_offset_shape_checked(self, rng):
        with pytest.raises(DimensionError):
            deform_conv(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros((1, 2, 3, 3))),
                        Tensor(np.ones((1, 1, 3, 3))), None)


class TestMultiHeadAttention:
    """Tests for self-attention."""

    def test_heads_must_divide_width(self):
        """Should raise a config error when heads do not divide the width."""
        with pytest.raises(ConfigError):
            MultiHeadAttention(5, 2)

    def test_zero_query_gives_mean(self, f64, rng):
        """Zero query/key weights with identity V and merge should average positions."""
        mha = MultiHeadAttention(4, 2)
        mha.wv.data = np.eye(4)
        mha.wo.data = np.eye(4)
        x = rng.normal(size=(6, 4))
        out = mha(Tensor(x)).data
        np.testing.assert_allclose(out, np.broadcast_to(x.mean(axis=0), x.shape), atol=1e-12)

    def test_single_token(self, f64, rng):
        """A length-1 sequence should return its V projection merged."""
        mha = MultiHeadAttention(4, 2, rng=rng)
        x = rng.normal(size=(1, 4))
        expected = x @ mha.wv.data @ mha.wo.data
        np.testing.assert_allclose(mha(Tensor(x)).data, expected, atol=1e-12)

    def test_weights_are_distributions(self, rng):
        mha = MultiHeadAttention(4, 2, rng=rng)
        _, weights = mha.attention(Tensor(rng.normal(size=(2, 5, 4))))
        assert weights.shape == (2, 2, 5, 5)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-5)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            MultiHeadAttention(4, 2).attention(Tensor(np.ones((3, 6))))

    def test_block_output_is_normalized(self, f64, rng):
        """LN(x + MHA(x)) should give zero-mean unit-variance tokens at init."""
        block = AttentionBlock(4, 2, rng=rng)
        out = block(Tensor(rng.normal(size=(7, 4)))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)
