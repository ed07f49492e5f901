import numpy as np
import pytest

from ssa_nowcast.errors import ConfigurationError, DimensionError, UsageError
from ssa_nowcast.models import Mode
from ssa_nowcast.tensor import ops, parallel
from ssa_nowcast.tensor.gradcheck import finite_difference_check

SEEDS = range(5)


def naive_conv2d(x, weight, bias, padding, groups):
    n, c_in, h, w = x.shape
    c_out, cg, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    og = c_out // groups
    out = np.zeros((n, c_out, oh, ow))
    for i in range(n):
        for o in range(c_out):
            g = o // og
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if bias is None else bias[o]
                    for ci in range(cg):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[i, g * cg + ci, y + ky, xx + kx] * weight[o, ci, ky, kx]
                    out[i, o, y, xx] = acc
    return out


class TestConv2d:

    def test_sum_of_ones(self):
        out, _ = ops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9

    def test_depthwise_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        weight = np.zeros((3, 1, 3, 3))
        weight[:, 0, 1, 1] = 1.0
        out, _ = ops.conv2d(x, weight, padding=1, groups=3)
        assert np.array_equal(out, x)

    @pytest.mark.parametrize("case", range(20))
    def test_matches_loop_oracle(self, case):
        rng = np.random.default_rng(case)
        groups = [1, 2][case % 2]
        k = [1, 3][(case // 2) % 2]
        x = rng.standard_normal((2, 4, 5, 5))
        weight = rng.standard_normal((6, 4 // groups, k, k))
        bias = rng.standard_normal(6)
        out, _ = ops.conv2d(x, weight, bias, padding=k // 2, groups=groups)
        expected = naive_conv2d(x, weight, bias, k // 2, groups)
        assert np.max(np.abs(out - expected)) <= 1e-10 * np.max(np.abs(expected))

    def test_grouped_equals_sliced_convolutions(self, rng):
        x = rng.standard_normal((1, 4, 6, 6))
        weight = rng.standard_normal((6, 2, 3, 3))
        out, _ = ops.conv2d(x, weight, padding=1, groups=2)
        first, _ = ops.conv2d(x[:, :2], weight[:3], padding=1)
        second, _ = ops.conv2d(x[:, 2:], weight[3:], padding=1)
        assert np.allclose(out, np.concatenate([first, second], axis=1), rtol=0, atol=1e-12)

    def test_result_independent_of_thread_count(self, rng):
        x = rng.standard_normal((5, 4, 6, 6))
        weight = rng.standard_normal((4, 4, 3, 3))
        serial, ctx = ops.conv2d(x, weight, padding=1)
        serial_grads = ops.conv2d_backward(ctx, np.ones_like(serial))
        parallel.set_threads(3)
        try:
            threaded, ctx = ops.conv2d(x, weight, padding=1)
            threaded_grads = ops.conv2d_backward(ctx, np.ones_like(threaded))
        finally:
            parallel.set_threads(1)
        assert np.array_equal(serial, threaded)
        assert np.array_equal(serial_grads[0], threaded_grads[0])
        assert np.array_equal(serial_grads[1], threaded_grads[1])

    def test_errors(self, rng):
        with pytest.raises(ConfigurationError):
            ops.conv2d(np.ones((1, 3, 4, 4)), np.ones((4, 1, 3, 3)), groups=2)
        with pytest.raises(DimensionError, match="weight axis 1"):
            ops.conv2d(np.ones((1, 4, 4, 4)), np.ones((4, 3, 3, 3)))

    def test_zero_grad_gives_zero_gradients(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        out, ctx = ops.conv2d(x, rng.standard_normal((2, 2, 3, 3)), np.zeros(2), padding=1)
        gx, gw, gb = ops.conv2d_backward(ctx, np.zeros_like(out))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_backward_without_context_is_usage_error(self):
        with pytest.raises(UsageError):
            ops.conv2d_backward(None, np.zeros((1, 1, 1, 1)))

    def test_context_is_consumed_once(self, rng):
        out, ctx = ops.conv2d(rng.standard_normal((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        ops.conv2d_backward(ctx, np.ones_like(out))
        with pytest.raises(UsageError, match="already consumed"):
            ops.conv2d_backward(ctx, np.ones_like(out))

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("groups", [1, 2])
    def test_gradcheck(self, seed, groups):
        rng = np.random.default_rng(seed)
        inputs = [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2 // groups, 3, 3)),
                  rng.standard_normal(2)]
        report = finite_difference_check(ops.CONV2D.bind(padding=1, groups=groups), inputs, seed=seed)
        assert report.passed, report


class TestChannelShuffle:

    def test_six_channels_two_groups(self):
        x = np.arange(6, dtype=np.float64).reshape(1, 6, 1, 1)
        out, _ = ops.channel_shuffle(x, 2)
        assert out[0, :, 0, 0].tolist() == [0, 3, 1, 4, 2, 5]
        assert ops.shuffle_permutation(6, 2).tolist() == [0, 3, 1, 4, 2, 5]

    def test_single_group_is_identity(self, rng):
        x = rng.standard_normal((1, 5, 2, 2))
        assert np.array_equal(ops.channel_shuffle(x, 1)[0], x)

    @pytest.mark.parametrize("seed", range(20))
    def test_shuffle_then_transposed_shuffle_is_identity(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 129))
        divisors = [g for g in range(1, c + 1) if c % g == 0]
        g = int(rng.choice(divisors))
        perm = ops.shuffle_permutation(c, g)
        assert sorted(perm.tolist()) == list(range(c))
        x = np.arange(c, dtype=np.float64).reshape(1, c, 1, 1)
        once, _ = ops.channel_shuffle(x, g)
        back, _ = ops.channel_shuffle(once, c // g)
        assert np.array_equal(back, x)

    def test_indivisible_groups(self):
        with pytest.raises(ConfigurationError):
            ops.channel_shuffle(np.zeros((1, 6, 1, 1)), 4)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        report = finite_difference_check(ops.CHANNEL_SHUFFLE.bind(groups=3), [rng.standard_normal((2, 6, 2, 2))])
        assert report.passed and report.max_rel_error < 1e-8


class TestNormalization:

    def test_batch_norm_train_statistics(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        running = ops.RunningStats.create(3, np.float64)
        out, _ = ops.batch_norm(x, np.ones(3), np.zeros(3), running, Mode.TRAIN)
        assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        assert np.allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
        assert not np.allclose(running.mean, 0)

    def test_batch_norm_constant_channel_gives_beta(self):
        running = ops.RunningStats.create(2, np.float64)
        beta = np.array([0.5, -1.5])
        out, _ = ops.batch_norm(np.full((2, 2, 3, 3), 7.0), np.ones(2), beta, running, Mode.TRAIN)
        assert np.allclose(out[:, 0], 0.5) and np.allclose(out[:, 1], -1.5)

    def test_batch_norm_eval_uses_initial_running_stats(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        running = ops.RunningStats.create(2, np.float64)
        out, _ = ops.batch_norm(x, np.ones(2), np.zeros(2), running, Mode.EVAL)
        assert np.allclose(out, x / np.sqrt(1 + ops.BN_EPSILON))

    def test_group_norm_constant_plane_gives_beta(self):
        out, _ = ops.group_norm_per_channel(np.full((1, 2, 3, 3), 4.0), np.ones(2), np.array([1.0, 2.0]))
        assert np.allclose(out[0, 0], 1.0) and np.allclose(out[0, 1], 2.0)

    def test_group_norm_zero_mean(self, rng):
        out, _ = ops.group_norm_per_channel(rng.standard_normal((2, 3, 4, 4)) + 5, np.ones(3), np.zeros(3))
        assert np.allclose(out.mean(axis=(2, 3)), 0, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.EVAL])
    def test_batch_norm_gradcheck(self, seed, mode):
        rng = np.random.default_rng(seed)
        op = ops.BATCH_NORM.bind(running=ops.RunningStats.create(3, np.float64), mode=mode)
        inputs = [rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
        assert finite_difference_check(op, inputs, seed=seed).passed

    @pytest.mark.parametrize("seed", SEEDS)
    def test_group_norm_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        inputs = [rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
        assert finite_difference_check(ops.GROUP_NORM, inputs, seed=seed).passed


class TestActivationsAndPooling:

    def test_relu_and_sigmoid_values(self):
        out, _ = ops.relu(np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1))
        assert out.ravel().tolist() == [0, 0, 2]
        assert ops.sigmoid(np.zeros((1, 1, 1, 1)))[0].item() == 0.5

    def test_max_pool_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert ops.max_pool_2x2(x)[0].item() == 4

    def test_max_pool_ties_route_to_top_left(self):
        out, ctx = ops.max_pool_2x2(np.ones((1, 1, 4, 4)))
        assert np.array_equal(out, np.ones((1, 1, 2, 2)))
        (grad,) = ops.max_pool_2x2_backward(ctx, np.ones_like(out))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1
        assert np.array_equal(grad[0, 0], expected)

    def test_max_pool_odd_size(self):
        with pytest.raises(DimensionError):
            ops.max_pool_2x2(np.ones((1, 1, 3, 4)))

    def test_global_avg_pool_values(self):
        x = np.arange(1, 5, dtype=np.float64).reshape(1, 1, 2, 2)
        assert ops.global_avg_pool(x)[0].item() == 2.5
        assert ops.global_avg_pool(np.full((1, 1, 3, 3), 7.0))[0].item() == 7.0

    def test_pools_preserve_batch_and_channels(self, rng):
        x = rng.standard_normal((3, 5, 4, 4))
        assert ops.max_pool_2x2(x)[0].shape == (3, 5, 2, 2)
        assert ops.bilinear_upsample_x2(x)[0].shape == (3, 5, 8, 8)

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("op", [ops.RELU, ops.SIGMOID, ops.MAX_POOL, ops.GLOBAL_AVG_POOL, ops.GLOBAL_MAX_POOL,
                                    ops.CHANNEL_MEAN_POOL, ops.CHANNEL_MAX_POOL, ops.UPSAMPLE],
                             ids=lambda op: op.name)
    def test_gradcheck(self, seed, op):
        rng = np.random.default_rng(seed)
        report = finite_difference_check(op, [rng.standard_normal((1, 2, 6, 6))], seed=seed)
        assert report.passed, report


class TestBilinear:

    def test_half_pixel_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
        out, _ = ops.bilinear_upsample_x2(x)
        expected = np.array([[0.0, 0.25, 0.75, 1.0],
                             [0.5, 0.75, 1.25, 1.5],
                             [1.5, 1.75, 2.25, 2.5],
                             [2.0, 2.25, 2.75, 3.0]])
        assert np.allclose(out[0, 0], expected, rtol=0, atol=1e-15)

    def test_constant_input(self):
        out, _ = ops.bilinear_upsample_x2(np.full((1, 2, 3, 3), 1.5))
        assert np.allclose(out, 1.5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_resize_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        report = finite_difference_check(ops.RESIZE.bind(out_h=7, out_w=5), [rng.standard_normal((1, 2, 3, 4))])
        assert report.passed and report.max_rel_error < 1e-8


class TestChannelAlgebra:

    def test_concat_order_and_split(self, rng):
        a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
        out, ctx = ops.concat_channels(a, b)
        assert out.shape == (1, 5, 3, 3)
        assert np.array_equal(out[:, :2], a) and np.array_equal(out[:, 2:], b)
        ga, gb = ops.concat_channels_backward(ctx, out)
        assert np.array_equal(ga, a) and np.array_equal(gb, b)

    def test_concat_rejects_mismatch_and_empty(self):
        with pytest.raises(DimensionError):
            ops.concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))
        with pytest.raises(DimensionError):
            ops.concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 0, 2, 2)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_broadcast_ops_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 4, 4))
        gate = rng.standard_normal((2, 3, 1, 1))
        assert finite_difference_check(ops.MULTIPLY, [x, gate], seed=seed).passed
        assert finite_difference_check(ops.ADD, [x, gate], seed=seed).passed
        assert finite_difference_check(ops.SCALE_SHIFT, [x, rng.standard_normal(3), rng.standard_normal(3)],
                                       seed=seed).passed
        assert finite_difference_check(ops.CONCAT, [x, rng.standard_normal((2, 1, 4, 4))], seed=seed).passed
