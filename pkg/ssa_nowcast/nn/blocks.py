"""Composite layers of SSA-UNet and of its CBAM baseline."""
from typing import Optional

import numpy as np

from ..errors import ConfigurationError
from ..tensor import ops
from .module import BatchNorm2d, Conv2d, Module, ReLU, Sequential


def param_count(block: Module) -> int:
    """Number of trainable scalars registered under block."""
    return block.param_count()


class DepthwiseSeparableConv(Sequential):
    """3x3 depthwise convolution with depth multiplier km, then 1x1 pointwise mixing."""

    def __init__(self, in_channels: int, out_channels: int, kernels_per_layer: int,
                 rng: np.random.Generator):
        if kernels_per_layer < 1:
            raise ConfigurationError(f"kernels per layer must be >= 1, got {kernels_per_layer}")
        mid = in_channels * kernels_per_layer
        self.depthwise = Conv2d(in_channels, mid, 3, rng, groups=in_channels)
        self.pointwise = Conv2d(mid, out_channels, 1, rng)
        super().__init__(depthwise=self.depthwise, pointwise=self.pointwise)
        self.in_channels = in_channels
        self.out_channels = out_channels


class ShuffledDepthwiseSeparableConv(Module):
    """Depthwise 3x3, grouped 1x1 pointwise, then a channel shuffle over the same groups."""

    def __init__(self, in_channels: int, out_channels: int, kernels_per_layer: int,
                 groups: int, rng: np.random.Generator):
        super().__init__()
        mid = in_channels * kernels_per_layer
        if groups < 1 or mid % groups or out_channels % groups:
            raise ConfigurationError(
                f"shuffled separable conv: {mid} intermediate and {out_channels} output channels "
                f"must both be divisible by {groups} groups")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = groups
        self.depthwise = self.add_module("depthwise", Conv2d(in_channels, mid, 3, rng, groups=in_channels))
        self.pointwise = self.add_module("pointwise", Conv2d(mid, out_channels, 1, rng, groups=groups))

    def forward(self, x, mode, tape):
        h = self.depthwise(x, mode, tape)
        h = self.pointwise(h, mode, tape)
        out, ctx = ops.channel_shuffle(h, self.groups)
        if tape is not None:
            tape.push(self, ctx)
        return out

    def backward(self, grad_out, tape):
        (grad,) = ops.channel_shuffle_backward(tape.pop(self), grad_out)
        grad = self.pointwise.backprop(grad, tape)
        return self.depthwise.backprop(grad, tape)


class DoubleConvBlock(Sequential):
    """(separable conv -> batch norm -> ReLU) twice.

    The shuffled variant swaps only the first convolution for its shuffled form.
    """

    def __init__(self, in_channels: int, out_channels: int, kernels_per_layer: int,
                 rng: np.random.Generator, shuffle_groups: Optional[int] = None,
                 mid_channels: Optional[int] = None):
        mid = out_channels if mid_channels is None else mid_channels
        if shuffle_groups is None:
            conv1 = DepthwiseSeparableConv(in_channels, mid, kernels_per_layer, rng)
        else:
            conv1 = ShuffledDepthwiseSeparableConv(in_channels, mid, kernels_per_layer, shuffle_groups, rng)
        super().__init__(
            conv1=conv1,
            bn1=BatchNorm2d(mid),
            relu1=ReLU(),
            conv2=DepthwiseSeparableConv(mid, out_channels, kernels_per_layer, rng),
            bn2=BatchNorm2d(out_channels),
            relu2=ReLU(),
        )
        self.conv1 = self._children["conv1"]
        self.conv2 = self._children["conv2"]
        self.shuffled = shuffle_groups is not None
        self.out_channels = out_channels


class ShuffleAttention(Module):
    """Grouped parallel channel/spatial gating followed by a channel shuffle.

    Branch parameters have length c / (2G) and are shared by all G groups.
    """

    def __init__(self, channels: int, groups: int):
        super().__init__()
        if groups < 1 or channels % (2 * groups):
            raise ConfigurationError(
                f"Shuffle Attention: {channels} channels not divisible by 2*G = {2 * groups}")
        self.channels = channels
        self.groups = groups
        half = channels // (2 * groups)
        self.channel_weight = self.add_parameter("channel_weight", np.zeros(half, dtype=np.float32))
        self.channel_bias = self.add_parameter("channel_bias", np.ones(half, dtype=np.float32))
        self.spatial_weight = self.add_parameter("spatial_weight", np.zeros(half, dtype=np.float32))
        self.spatial_bias = self.add_parameter("spatial_bias", np.ones(half, dtype=np.float32))
        self.norm_gamma = self.add_parameter("norm_gamma", np.ones(half, dtype=np.float32))
        self.norm_beta = self.add_parameter("norm_beta", np.zeros(half, dtype=np.float32))

    def forward(self, x, mode, tape):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ConfigurationError(f"Shuffle Attention built for {self.channels} channels, got {c}")
        g = self.groups
        half = c // (2 * g)
        xg = x.reshape(n * g, c // g, h, w)
        a, b = xg[:, :half], xg[:, half:]

        pooled, k_gap = ops.global_avg_pool(a)
        za, k_ca = ops.scale_shift(pooled, self.channel_weight.value, self.channel_bias.value)
        gate_a, k_sa = ops.sigmoid(za)
        ya, k_ma = ops.multiply(a, gate_a)

        normed, k_gn = ops.group_norm_per_channel(b, self.norm_gamma.value, self.norm_beta.value)
        zb, k_cb = ops.scale_shift(normed, self.spatial_weight.value, self.spatial_bias.value)
        gate_b, k_sb = ops.sigmoid(zb)
        yb, k_mb = ops.multiply(b, gate_b)

        merged, k_cat = ops.concat_channels(ya, yb)
        out, k_shuf = ops.channel_shuffle(merged.reshape(n, c, h, w), g)
        if tape is not None:
            tape.push(self, (k_gap, k_ca, k_sa, k_ma, k_gn, k_cb, k_sb, k_mb, k_cat, k_shuf))
        return out

    def backward(self, grad_out, tape):
        k_gap, k_ca, k_sa, k_ma, k_gn, k_cb, k_sb, k_mb, k_cat, k_shuf = tape.pop(self)
        n, c, h, w = grad_out.shape
        g = self.groups
        (grad,) = ops.channel_shuffle_backward(k_shuf, grad_out)
        grad_ya, grad_yb = ops.concat_channels_backward(k_cat, grad.reshape(n * g, c // g, h, w))

        grad_b, grad_gate_b = ops.multiply_backward(k_mb, grad_yb)
        (grad_zb,) = ops.sigmoid_backward(k_sb, grad_gate_b)
        grad_normed, grad_sw, grad_sb = ops.scale_shift_backward(k_cb, grad_zb)
        grad_b_norm, grad_gamma, grad_beta = ops.group_norm_per_channel_backward(k_gn, grad_normed)
        grad_b = grad_b + grad_b_norm

        grad_a, grad_gate_a = ops.multiply_backward(k_ma, grad_ya)
        (grad_za,) = ops.sigmoid_backward(k_sa, grad_gate_a)
        grad_pooled, grad_cw, grad_cb = ops.scale_shift_backward(k_ca, grad_za)
        (grad_a_pool,) = ops.global_avg_pool_backward(k_gap, grad_pooled)
        grad_a = grad_a + grad_a_pool

        self._accumulate(tape, self.channel_weight, grad_cw)
        self._accumulate(tape, self.channel_bias, grad_cb)
        self._accumulate(tape, self.spatial_weight, grad_sw)
        self._accumulate(tape, self.spatial_bias, grad_sb)
        self._accumulate(tape, self.norm_gamma, grad_gamma)
        self._accumulate(tape, self.norm_beta, grad_beta)
        return np.concatenate([grad_a, grad_b], axis=1).reshape(n, c, h, w)


class CBAM(Module):
    """Sequential channel then spatial attention (parameter-parity baseline)."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, spatial_kernel: int = 7):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(f"CBAM: {channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.channels = channels
        self.reduce = self.add_module("reduce", Conv2d(channels, hidden, 1, rng))
        self.expand = self.add_module("expand", Conv2d(hidden, channels, 1, rng))
        self.spatial = self.add_module("spatial", Conv2d(2, 1, spatial_kernel, rng))

    def _mlp(self, x, mode, tape):
        h = self.reduce(x, mode, tape)
        h, k_relu = ops.relu(h)
        return self.expand(h, mode, tape), k_relu

    def forward(self, x, mode, tape):
        avg, k_avg = ops.global_avg_pool(x)
        mx, k_max = ops.global_max_pool(x)
        out_avg, k_relu_avg = self._mlp(avg, mode, tape)
        out_max, k_relu_max = self._mlp(mx, mode, tape)
        logits, k_add = ops.add(out_avg, out_max)
        gate_c, k_sig_c = ops.sigmoid(logits)
        x1, k_mul_c = ops.multiply(x, gate_c)

        mean_map, k_mean = ops.channel_mean_pool(x1)
        max_map, k_cmax = ops.channel_max_pool(x1)
        stacked, k_cat = ops.concat_channels(mean_map, max_map)
        s = self.spatial(stacked, mode, tape)
        gate_s, k_sig_s = ops.sigmoid(s)
        out, k_mul_s = ops.multiply(x1, gate_s)
        if tape is not None:
            tape.push(self, (k_avg, k_max, k_relu_avg, k_relu_max, k_add, k_sig_c, k_mul_c,
                             k_mean, k_cmax, k_cat, k_sig_s, k_mul_s))
        return out

    def backward(self, grad_out, tape):
        (k_avg, k_max, k_relu_avg, k_relu_max, k_add, k_sig_c, k_mul_c,
         k_mean, k_cmax, k_cat, k_sig_s, k_mul_s) = tape.pop(self)
        grad_x1, grad_gate_s = ops.multiply_backward(k_mul_s, grad_out)
        (grad_s,) = ops.sigmoid_backward(k_sig_s, grad_gate_s)
        grad_stacked = self.spatial.backprop(grad_s, tape)
        grad_mean, grad_cmax = ops.concat_channels_backward(k_cat, grad_stacked)
        grad_x1 = (grad_x1
                   + ops.channel_mean_pool_backward(k_mean, grad_mean)[0]
                   + ops.channel_max_pool_backward(k_cmax, grad_cmax)[0])

        grad_x, grad_gate_c = ops.multiply_backward(k_mul_c, grad_x1)
        (grad_logits,) = ops.sigmoid_backward(k_sig_c, grad_gate_c)
        grad_out_avg, grad_out_max = ops.add_backward(k_add, grad_logits)
        # the max path ran last, so its contexts sit on top of the tape
        grad_h = self.expand.backprop(grad_out_max, tape)
        grad_mx = self.reduce.backprop(ops.relu_backward(k_relu_max, grad_h)[0], tape)
        grad_h = self.expand.backprop(grad_out_avg, tape)
        grad_avg = self.reduce.backprop(ops.relu_backward(k_relu_avg, grad_h)[0], tape)
        return (grad_x
                + ops.global_avg_pool_backward(k_avg, grad_avg)[0]
                + ops.global_max_pool_backward(k_max, grad_mx)[0])
