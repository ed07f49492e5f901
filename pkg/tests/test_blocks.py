import numpy as np
import pytest

from ssa_nowcast.errors import ConfigurationError
from ssa_nowcast.models import Mode
from ssa_nowcast.nn.blocks import (CBAM, DepthwiseSeparableConv, DoubleConvBlock, ShuffleAttention,
                                   ShuffledDepthwiseSeparableConv, param_count)
from ssa_nowcast.nn.module import Tape
from ssa_nowcast.tensor import ops
from ssa_nowcast.tensor.gradcheck import finite_difference_check


class TestParameterCounts:

    def test_separable_conv(self, rng):
        assert param_count(DepthwiseSeparableConv(4, 8, 3, rng)) == 224

    def test_shuffled_separable_conv_is_cheaper(self, rng):
        assert param_count(ShuffledDepthwiseSeparableConv(32, 64, 3, 16, rng)) == 1408
        assert param_count(DepthwiseSeparableConv(32, 64, 3, rng)) == 7168

    def test_attention_modules(self, rng):
        assert param_count(CBAM(64, 16, rng)) == 679
        assert param_count(ShuffleAttention(64, 2)) == 96

    @pytest.mark.parametrize("channels", [64, 128, 256, 512, 1024])
    def test_shuffle_attention_below_cbam_at_every_width(self, channels, rng):
        cbam = param_count(CBAM(channels, 16, rng))
        for groups in (1, 2, 4, 8, 16, 32):
            assert param_count(ShuffleAttention(channels, groups)) < cbam

    def test_double_conv_swaps_only_first_conv(self, rng):
        plain = DoubleConvBlock(32, 64, 3, rng)
        shuffled = DoubleConvBlock(32, 64, 3, rng, shuffle_groups=16)
        assert param_count(plain) - param_count(shuffled) == 7168 - 1408


class TestSeparableConv:

    def test_pointwise_only_matches_one_by_one_conv(self, rng):
        block = DepthwiseSeparableConv(4, 6, 1, rng).astype(np.float64)
        block.depthwise.weight.value[:] = 0
        block.depthwise.weight.value[:, 0, 1, 1] = 1
        block.depthwise.bias.value[:] = 0
        block.pointwise.bias.value[:] = rng.standard_normal(6)
        x = rng.standard_normal((2, 4, 5, 5))
        weight = block.pointwise.weight.value[:, :, 0, 0]
        expected = np.einsum("oc,nchw->nohw", weight, x) + block.pointwise.bias.value[None, :, None, None]
        assert np.allclose(block(x), expected, rtol=0, atol=1e-12)


class TestShuffledSeparableConv:

    def test_single_group_matches_plain_separable(self, rng):
        plain = DepthwiseSeparableConv(4, 6, 2, np.random.default_rng(5))
        shuffled = ShuffledDepthwiseSeparableConv(4, 6, 2, 1, np.random.default_rng(5))
        x = rng.standard_normal((2, 4, 5, 5))
        assert np.array_equal(plain(x), shuffled(x))

    def test_groups_interleave_after_shuffle(self, rng):
        block = ShuffledDepthwiseSeparableConv(4, 6, 3, 3, rng).astype(np.float64)
        for conv in (block.depthwise, block.pointwise):
            conv.weight.value[:] = 0
            conv.bias.value[:] = 0
        # pointwise group k writes the constant k + 1
        block.pointwise.bias.value[:] = [1, 1, 2, 2, 3, 3]
        out = block(rng.standard_normal((1, 4, 5, 5)))
        assert out[0, :, 2, 2].tolist() == [1, 2, 3, 1, 2, 3]

    def test_indivisible_groups_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            ShuffledDepthwiseSeparableConv(4, 6, 3, 4, rng)

    def test_output_shape(self, rng):
        out = ShuffledDepthwiseSeparableConv(8, 16, 3, 4, rng)(rng.standard_normal((1, 8, 6, 6)))
        assert out.shape == (1, 16, 6, 6)


class TestShuffleAttention:

    def test_saturated_gates_reduce_to_shuffle(self, rng):
        sa = ShuffleAttention(8, 2).astype(np.float64)
        sa.channel_bias.value[:] = 50.0
        sa.spatial_bias.value[:] = 50.0
        x = rng.standard_normal((2, 8, 4, 4))
        expected, _ = ops.channel_shuffle(x, 2)
        assert np.allclose(sa(x), expected, rtol=0, atol=1e-12)

    def test_neutral_gates_halve_then_shuffle(self, rng):
        sa = ShuffleAttention(8, 2).astype(np.float64)
        for param in (sa.channel_weight, sa.channel_bias, sa.spatial_weight, sa.spatial_bias):
            param.value[:] = 0
        x = rng.standard_normal((2, 8, 4, 4))
        expected, _ = ops.channel_shuffle(x / 2, 2)
        assert np.allclose(sa(x), expected, rtol=0, atol=1e-15)

    def test_closed_gates_zero_output(self, rng):
        sa = ShuffleAttention(8, 2).astype(np.float64)
        sa.channel_bias.value[:] = -50.0
        sa.spatial_bias.value[:] = -50.0
        assert np.abs(sa(rng.standard_normal((1, 8, 4, 4)))).max() < 1e-15

    def test_shape_preserved(self, rng):
        assert ShuffleAttention(16, 4)(rng.standard_normal((3, 16, 6, 6))).shape == (3, 16, 6, 6)

    def test_indivisible_channels(self):
        with pytest.raises(ConfigurationError, match="2\\*G"):
            ShuffleAttention(12, 4)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed, module_op):
        rng = np.random.default_rng(seed)
        sa = ShuffleAttention(8, 2).astype(np.float64)
        for param in sa.parameters():
            param.value = rng.standard_normal(param.value.shape)
        x = rng.standard_normal((2, 8, 4, 4))
        assert finite_difference_check(module_op(sa), [x], seed=seed).passed
        for name in ("channel_weight", "spatial_bias", "norm_gamma"):
            param = getattr(sa, name)
            report = finite_difference_check(module_op(sa, param=param), [x, param.value.copy()], wrt=[1], seed=seed)
            assert report.passed, (name, report)


class TestCBAM:

    def test_neutral_gates_quarter_input(self, rng):
        cbam = CBAM(8, 4, rng).astype(np.float64)
        for conv in (cbam.expand, cbam.spatial):
            conv.weight.value[:] = 0
            conv.bias.value[:] = 0
        x = rng.standard_normal((2, 8, 5, 5))
        assert np.allclose(cbam(x), x / 4, rtol=0, atol=1e-15)

    def test_indivisible_reduction(self, rng):
        with pytest.raises(ConfigurationError):
            CBAM(10, 4, rng)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed, module_op):
        rng = np.random.default_rng(seed)
        cbam = CBAM(8, 4, rng).astype(np.float64)
        x = rng.standard_normal((2, 8, 6, 6))
        assert finite_difference_check(module_op(cbam), [x], seed=seed).passed
        weight = cbam.reduce.weight
        report = finite_difference_check(module_op(cbam, param=weight), [x, weight.value.copy()], wrt=[1], seed=seed)
        assert report.passed, report


class TestDoubleConv:

    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.EVAL])
    @pytest.mark.parametrize("shuffle_groups", [None, 2])
    def test_gradcheck(self, mode, shuffle_groups, module_op):
        rng = np.random.default_rng(11)
        block = DoubleConvBlock(4, 8, 2, rng, shuffle_groups=shuffle_groups).astype(np.float64)
        block.assign_paths("block")
        x = rng.standard_normal((2, 4, 6, 6))
        assert finite_difference_check(module_op(block, mode), [x]).passed
        weight = block.conv1.pointwise.weight
        report = finite_difference_check(module_op(block, mode, param=weight), [x, weight.value.copy()], wrt=[1])
        assert report.passed, report

    def test_tape_contexts_are_consumed(self, rng):
        block = DoubleConvBlock(2, 4, 2, rng)
        tape = Tape()
        out = block(rng.standard_normal((1, 2, 4, 4)).astype(np.float32), Mode.TRAIN, tape)
        block.backprop(np.ones_like(out), tape)
        assert all(not stack for stack in tape._contexts.values())
        assert block.conv2.pointwise.weight.grad.any()
