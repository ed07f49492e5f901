"""SSA-UNet: five-level separable-conv encoder with per-level attention and a bilinear decoder."""
import logging
from typing import List, Optional, Tuple

import numpy as np

from ..errors import DimensionError
from ..models import AttentionKind, Mode, ModelConfig, Precision, SampleWindow
from ..tensor import ops
from ..tensor.tensor import Tensor, check_tensor
from .blocks import CBAM, DoubleConvBlock, ShuffleAttention
from .module import Conv2d, Module, Tape

logger = logging.getLogger(__name__)

SPATIAL_MULTIPLE = 16


class EncoderLevel(Module):
    """Double-conv block followed by its attention module."""

    def __init__(self, block: Module, attention: Module):
        super().__init__()
        self.block = self.add_module("block", block)
        self.attention = self.add_module("attention", attention)


class DecoderLevel(Module):

    def __init__(self, block: Module):
        super().__init__()
        self.block = self.add_module("block", block)


class _Stage(Module):
    """Named container for the levels of the encoder or decoder."""

    def __init__(self, levels: List[Module]):
        super().__init__()
        self.levels = [self.add_module(f"level{i}", level) for i, level in enumerate(levels, start=1)]


class SSAUNet(Module):
    """Encoder levels 1..5 with attention, decoder levels 1..4, and a linear 1x1 head.

    Skip connections carry the attention output of levels 1..4; max-pooling
    follows the attention of those levels only.
    """

    def __init__(self, config: ModelConfig, precision: Precision = Precision.STANDARD):
        super().__init__()
        config.validate()
        self.config = config
        self.precision = precision
        rng = np.random.default_rng(config.seed)

        enc = config.encoder_widths
        levels = []
        c_in = config.in_channels
        for level, width in enumerate(enc, start=1):
            groups = None
            if config.shuffle_groups is not None and level > 1:
                groups = config.shuffle_groups[level - 2]
            block = DoubleConvBlock(c_in, width, config.kernels_per_layer, rng, shuffle_groups=groups)
            if config.attention is AttentionKind.SHUFFLE:
                attention = ShuffleAttention(width, config.sa_groups[level - 1])
            else:
                attention = CBAM(width, config.cbam_reduction, rng)
            levels.append(EncoderLevel(block, attention))
            c_in = width
        self.encoder = self.add_module("encoder", _Stage(levels))

        self.decoder = self.add_module("decoder", _Stage([
            DecoderLevel(DoubleConvBlock(c_in, c_out, config.decoder_kernels_per_layer, rng, mid_channels=mid))
            for c_in, mid, c_out in config.decoder_layout
        ]))
        self.head = self.add_module("head", Conv2d(config.decoder_layout[-1][2], config.out_channels, 1, rng))
        self.assign_paths()
        if precision is not Precision.STANDARD:
            self.astype(precision.dtype)
        logger.debug("built %s model with %d parameters", config.attention.value, self.param_count())

    @property
    def dtype(self):
        return self.precision.dtype

    def explainable_layers(self) -> List[str]:
        """Module paths Grad-CAM can target: blocks, their convolutions, attention and decoder blocks."""
        names = []
        for level in range(1, 6):
            prefix = f"encoder.level{level}"
            names += [f"{prefix}.block", f"{prefix}.block.conv1", f"{prefix}.block.conv2", f"{prefix}.attention"]
        names += [f"decoder.level{level}.block" for level in range(1, 5)]
        return names

    def forward(self, x: Tensor, mode: Mode = Mode.EVAL, tape: Optional[Tape] = None) -> Tensor:
        n, c, h, w = check_tensor(x)
        if c != self.config.in_channels:
            raise DimensionError(f"model expects {self.config.in_channels} input channels, got {c}")
        if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
            raise DimensionError(f"spatial size {h}x{w} is not divisible by {SPATIAL_MULTIPLE}")
        x = np.asarray(x, dtype=self.dtype)

        skips, pool_ctxs = [], []
        for index, level in enumerate(self.encoder.levels):
            x = level.block(x, mode, tape)
            x = level.attention(x, mode, tape)
            if index < 4:
                skips.append(x)
                x, ctx = ops.max_pool_2x2(x)
                pool_ctxs.append(ctx)

        up_ctxs, cat_ctxs = [], []
        for index, level in enumerate(self.decoder.levels):
            up, ctx_up = ops.bilinear_upsample_x2(x)
            merged, ctx_cat = ops.concat_channels(skips[3 - index], up)
            x = level.block(merged, mode, tape)
            up_ctxs.append(ctx_up)
            cat_ctxs.append(ctx_cat)

        out = self.head(x, mode, tape)
        if tape is not None:
            tape.push(self, (pool_ctxs, up_ctxs, cat_ctxs))
        return out

    def backward(self, grad_out: Tensor, tape: Tape) -> Tensor:
        pool_ctxs, up_ctxs, cat_ctxs = tape.pop(self)
        grad = self.head.backprop(grad_out, tape)

        skip_grads = [None] * 4
        for index in reversed(range(4)):
            grad = self.decoder.levels[index].block.backprop(grad, tape)
            grad_skip, grad_up = ops.concat_channels_backward(cat_ctxs[index], grad)
            skip_grads[3 - index] = grad_skip
            (grad,) = ops.bilinear_upsample_x2_backward(up_ctxs[index], grad_up)

        for index in reversed(range(5)):
            level = self.encoder.levels[index]
            if index < 4:
                (grad,) = ops.max_pool_2x2_backward(pool_ctxs[index], grad)
                grad = grad + skip_grads[index]
            grad = level.attention.backprop(grad, tape)
            grad = level.block.backprop(grad, tape)
        return grad


def build(config: ModelConfig, precision: Precision = Precision.STANDARD) -> SSAUNet:
    return SSAUNet(config, precision)


def persistence_predict(window: SampleWindow) -> Tensor:
    """Repeat the last input frame once per target frame."""
    last = window.inputs[:, -1:]
    return np.repeat(last, window.targets.shape[1], axis=1).astype(window.targets.dtype, copy=False)


def compare_param_counts(in_channels: int = 12, out_channels: int = 12) -> List[Tuple[str, int, float]]:
    """(name, parameter count, reduction vs. the CBAM baseline in percent) for the three model sizes."""
    baseline = build(ModelConfig.baseline(in_channels, out_channels)).param_count()
    rows = [("baseline-cbam", baseline, 0.0)]
    for name, config in (("ssa-unet", ModelConfig.ssa_unet(in_channels, out_channels)),
                         ("ssa-unet-reduced", ModelConfig.reduced(in_channels, out_channels))):
        count = build(config).param_count()
        rows.append((name, count, 100.0 * (baseline - count) / baseline))
    return rows
