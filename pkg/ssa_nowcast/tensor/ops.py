"""Differentiable numerical kernels.

Every forward kernel returns ``(output, ctx)``; the matching ``*_backward``
consumes that context exactly once and returns the gradients of its
differentiable inputs in argument order.
"""
import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from ..errors import ConfigurationError, DimensionError, UsageError
from ..models import Mode
from .parallel import map_batch
from .tensor import Tensor, check_tensor

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
GN_EPSILON = 1e-5


@dataclass
class OpContext:
    """Forward state saved for one backward call."""
    op: str
    saved: Dict[str, Any] = field(default_factory=dict)
    consumed: bool = False


@dataclass
class RunningStats:
    """Batch-norm running mean/variance, updated in place in train mode."""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


@dataclass
class DifferentiableOp:
    """A forward kernel paired with its backward, as consumed by the gradient checker."""
    name: str
    forward: Callable[..., Tuple[Tensor, OpContext]]
    backward: Callable[[OpContext, Tensor], Tuple[Optional[Tensor], ...]]

    def bind(self, **kwargs) -> "DifferentiableOp":
        return DifferentiableOp(self.name, functools.partial(self.forward, **kwargs), self.backward)


def _consume(ctx: Optional[OpContext], op: str) -> Dict[str, Any]:
    if ctx is None:
        raise UsageError(f"{op} backward called without a forward context")
    if ctx.op != op:
        raise UsageError(f"{op} backward received a '{ctx.op}' context")
    if ctx.consumed:
        raise UsageError(f"{op} context was already consumed by a backward call")
    ctx.consumed = True
    return ctx.saved


def _check_grad(grad_out: Tensor, shape, op: str):
    if grad_out.shape != tuple(shape):
        raise DimensionError(f"{op}: grad_out shape {grad_out.shape} != forward output shape {tuple(shape)}")


def _unbroadcast(grad: Tensor, shape) -> Tensor:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tuple[Tensor, OpContext]:
    """Grouped 2-D cross-correlation."""
    n, c_in, h, w = check_tensor(x)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D, got shape {weight.shape}")
    c_out, cg, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"conv2d: channels in={c_in}, out={c_out} not divisible by groups={groups}")
    if cg != c_in // groups:
        raise DimensionError(
            f"conv2d: weight axis 1 is {cg} but input channels / groups = {c_in // groups}")
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    k = kh
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    og = c_out // groups
    wg = weight.reshape(groups, og, cg, k, k)
    dtype = np.result_type(x.dtype, weight.dtype)

    def run(batch: slice) -> Tensor:
        xb = xp[batch]
        nb = xb.shape[0]
        acc = np.zeros((nb, groups, og, oh * ow), dtype=dtype)
        for i in range(k):
            for j in range(k):
                xs = xb[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
                acc += np.matmul(wg[:, :, :, i, j], xs.reshape(nb, groups, cg, oh * ow))
        return acc

    out = np.concatenate(map_batch(run, n), axis=0).reshape(n, c_out, oh, ow)
    if bias is not None:
        out += bias.reshape(1, c_out, 1, 1)
    ctx = OpContext("conv2d", dict(xp=xp, wg=wg, x_shape=x.shape, w_shape=weight.shape,
                                   stride=stride, padding=padding, groups=groups,
                                   has_bias=bias is not None, out_shape=out.shape))
    return out, ctx


def conv2d_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "conv2d")
    _check_grad(grad_out, s["out_shape"], "conv2d")
    xp, wg = s["xp"], s["wg"]
    stride, padding, groups = s["stride"], s["padding"], s["groups"]
    n, c_in, h, w = s["x_shape"]
    _, og, cg, k, _ = wg.shape
    _, _, oh, ow = grad_out.shape
    gout = grad_out.reshape(n, groups, og, oh * ow)

    grad_wg = np.zeros_like(wg)
    for i in range(k):
        for j in range(k):
            xs = xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            xs = xs.reshape(n, groups, cg, oh * ow)
            grad_wg[:, :, :, i, j] = np.matmul(gout, xs.swapaxes(-1, -2)).sum(axis=0)

    def run(batch: slice) -> Tensor:
        gb = gout[batch]
        nb = gb.shape[0]
        gxp = np.zeros((nb,) + xp.shape[1:], dtype=np.result_type(xp.dtype, grad_out.dtype))
        for i in range(k):
            for j in range(k):
                gx = np.matmul(wg[:, :, :, i, j].swapaxes(-1, -2), gb)
                gxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                    j:j + stride * (ow - 1) + 1:stride] += gx.reshape(nb, c_in, oh, ow)
        return gxp

    grad_xp = np.concatenate(map_batch(run, n), axis=0)
    grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w] if padding else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3)) if s["has_bias"] else None
    return np.ascontiguousarray(grad_x), grad_wg.reshape(s["w_shape"]), grad_b


# -------------------------------------------------------------------- shuffle

def channel_shuffle(x: Tensor, groups: int) -> Tuple[Tensor, OpContext]:
    """Reshape channels to (groups, c/groups), transpose, flatten."""
    n, c, h, w = check_tensor(x)
    if groups < 1 or c % groups:
        raise ConfigurationError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    out = x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)
    return out, OpContext("channel_shuffle", dict(groups=groups, shape=x.shape))


def channel_shuffle_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "channel_shuffle")
    _check_grad(grad_out, s["shape"], "channel_shuffle")
    n, c, h, w = s["shape"]
    g = s["groups"]
    grad = grad_out.reshape(n, c // g, g, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)
    return (grad,)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source channel index for every output channel."""
    j = np.arange(channels)
    return (j % groups) * (channels // groups) + j // groups


# -------------------------------------------------------------- normalisation

def _check_affine(x: Tensor, gamma: Tensor, beta: Tensor, op: str):
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"{op}: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
               mode: Mode = Mode.TRAIN, momentum: float = BN_MOMENTUM,
               epsilon: float = BN_EPSILON) -> Tuple[Tensor, OpContext]:
    n, c, h, w = check_tensor(x)
    _check_affine(x, gamma, beta, "batch_norm")
    if epsilon <= 0:
        raise ConfigurationError("batch_norm: epsilon must be positive")
    if mode is Mode.TRAIN:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = n * h * w
        unbiased = var * count / (count - 1) if count > 1 else var
        running.mean[...] = (1 - momentum) * running.mean + momentum * mean
        running.var[...] = (1 - momentum) * running.var + momentum * unbiased
    else:
        mean, var = running.mean, running.var
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return out, OpContext("batch_norm", dict(xhat=xhat, inv_std=inv_std, gamma=gamma, mode=mode))


def batch_norm_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "batch_norm")
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    _check_grad(grad_out, xhat.shape, "batch_norm")
    n, c, h, w = xhat.shape
    axes = (0, 2, 3)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma.reshape(1, c, 1, 1)
    if s["mode"] is Mode.EVAL:
        return dxhat * inv_std.reshape(1, c, 1, 1), grad_gamma, grad_beta
    count = n * h * w
    grad_x = (inv_std.reshape(1, c, 1, 1) / count) * (
        count * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


def group_norm_per_channel(x: Tensor, gamma: Tensor, beta: Tensor,
                           epsilon: float = GN_EPSILON) -> Tuple[Tensor, OpContext]:
    """Normalise every (sample, channel) plane over its own (h, w) then apply the affine."""
    n, c, h, w = check_tensor(x)
    _check_affine(x, gamma, beta, "group_norm_per_channel")
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean) * inv_std
    out = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return out, OpContext("group_norm", dict(xhat=xhat, inv_std=inv_std, gamma=gamma))


def group_norm_per_channel_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "group_norm")
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    _check_grad(grad_out, xhat.shape, "group_norm_per_channel")
    n, c, h, w = xhat.shape
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma.reshape(1, c, 1, 1)
    count = h * w
    grad_x = (inv_std / count) * (
        count * dxhat
        - dxhat.sum(axis=(2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tuple[Tensor, OpContext]:
    return np.maximum(x, 0), OpContext("relu", dict(mask=x > 0))


def relu_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "relu")
    _check_grad(grad_out, s["mask"].shape, "relu")
    return (grad_out * s["mask"],)


def sigmoid(x: Tensor) -> Tuple[Tensor, OpContext]:
    out = expit(x)
    return out, OpContext("sigmoid", dict(out=out))


def sigmoid_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "sigmoid")
    out = s["out"]
    _check_grad(grad_out, out.shape, "sigmoid")
    return (grad_out * out * (1 - out),)


# -------------------------------------------------------------------- pooling

def max_pool_2x2(x: Tensor) -> Tuple[Tensor, OpContext]:
    n, c, h, w = check_tensor(x)
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool_2x2 needs even spatial dims, got h={h}, w={w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax picks the first maximum in row-major window order
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, OpContext("max_pool_2x2", dict(idx=idx, shape=x.shape))


def max_pool_2x2_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "max_pool_2x2")
    idx = s["idx"]
    n, c, h, w = s["shape"]
    _check_grad(grad_out, idx.shape, "max_pool_2x2")
    windows = np.zeros(idx.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(windows, idx[..., None], grad_out[..., None], axis=-1)
    grad = windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (grad,)


def global_avg_pool(x: Tensor) -> Tuple[Tensor, OpContext]:
    check_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True), OpContext("global_avg_pool", dict(shape=x.shape))


def global_avg_pool_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "global_avg_pool")
    n, c, h, w = s["shape"]
    _check_grad(grad_out, (n, c, 1, 1), "global_avg_pool")
    return (np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy(),)


def global_max_pool(x: Tensor) -> Tuple[Tensor, OpContext]:
    n, c, h, w = check_tensor(x)
    flat = x.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)
    return out, OpContext("global_max_pool", dict(idx=idx, shape=x.shape))


def global_max_pool_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "global_max_pool")
    n, c, h, w = s["shape"]
    _check_grad(grad_out, (n, c, 1, 1), "global_max_pool")
    grad = np.zeros((n, c, h * w), dtype=grad_out.dtype)
    np.put_along_axis(grad, s["idx"][..., None], grad_out.reshape(n, c, 1), axis=-1)
    return (grad.reshape(n, c, h, w),)


def channel_mean_pool(x: Tensor) -> Tuple[Tensor, OpContext]:
    check_tensor(x)
    return x.mean(axis=1, keepdims=True), OpContext("channel_mean_pool", dict(shape=x.shape))


def channel_mean_pool_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "channel_mean_pool")
    n, c, h, w = s["shape"]
    _check_grad(grad_out, (n, 1, h, w), "channel_mean_pool")
    return (np.broadcast_to(grad_out / c, (n, c, h, w)).copy(),)


def channel_max_pool(x: Tensor) -> Tuple[Tensor, OpContext]:
    check_tensor(x)
    idx = x.argmax(axis=1)[:, None]
    out = np.take_along_axis(x, idx, axis=1)
    return out, OpContext("channel_max_pool", dict(idx=idx, shape=x.shape))


def channel_max_pool_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "channel_max_pool")
    n, c, h, w = s["shape"]
    _check_grad(grad_out, (n, 1, h, w), "channel_max_pool")
    grad = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    np.put_along_axis(grad, s["idx"], grad_out, axis=1)
    return (grad,)


# ------------------------------------------------------------------ resampling

def interpolation_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights with half-pixel sampling centres, shape (out, in)."""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, None)
    lo = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tuple[Tensor, OpContext]:
    n, c, h, w = check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target size must be positive, got {out_h}x{out_w}")
    rows = interpolation_matrix(h, out_h, x.dtype)
    cols = interpolation_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(rows, x), cols.T)
    return out, OpContext("bilinear_resize", dict(rows=rows, cols=cols, out_shape=out.shape))


def bilinear_resize_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "bilinear_resize")
    _check_grad(grad_out, s["out_shape"], "bilinear_resize")
    return (np.matmul(np.matmul(s["rows"].T, grad_out), s["cols"]),)


def bilinear_upsample_x2(x: Tensor) -> Tuple[Tensor, OpContext]:
    _, _, h, w = check_tensor(x)
    return bilinear_resize(x, 2 * h, 2 * w)


bilinear_upsample_x2_backward = bilinear_resize_backward


# ------------------------------------------------------------ channel algebra

def concat_channels(a: Tensor, b: Tensor) -> Tuple[Tensor, OpContext]:
    na, ca, ha, wa = check_tensor(a, "first operand")
    nb, cb, hb, wb = check_tensor(b, "second operand")
    if (na, ha, wa) != (nb, hb, wb):
        raise DimensionError(
            f"concat_channels: operands disagree on (n, h, w): {(na, ha, wa)} vs {(nb, hb, wb)}")
    return np.concatenate([a, b], axis=1), OpContext("concat_channels", dict(split=ca, shape=(na, ca + cb, ha, wa)))


def concat_channels_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "concat_channels")
    _check_grad(grad_out, s["shape"], "concat_channels")
    split = s["split"]
    return grad_out[:, :split], grad_out[:, split:]


def multiply(a: Tensor, b: Tensor) -> Tuple[Tensor, OpContext]:
    """Elementwise product; b may broadcast over singleton axes of a."""
    try:
        out = a * b
    except ValueError as ex:
        raise DimensionError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast") from ex
    return out, OpContext("multiply", dict(a=a, b=b))


def multiply_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "multiply")
    a, b = s["a"], s["b"]
    return _unbroadcast(grad_out * b, a.shape), _unbroadcast(grad_out * a, b.shape)


def add(a: Tensor, b: Tensor) -> Tuple[Tensor, OpContext]:
    try:
        out = a + b
    except ValueError as ex:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from ex
    return out, OpContext("add", dict(a_shape=a.shape, b_shape=b.shape))


def add_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "add")
    return _unbroadcast(grad_out, s["a_shape"]), _unbroadcast(grad_out, s["b_shape"])


def scale_shift(x: Tensor, weight: Tensor, bias: Tensor) -> Tuple[Tensor, OpContext]:
    """Per-channel affine x * weight[c] + bias[c]."""
    _, c, _, _ = check_tensor(x)
    _check_affine(x, weight, bias, "scale_shift")
    out = x * weight.reshape(1, c, 1, 1) + bias.reshape(1, c, 1, 1)
    return out, OpContext("scale_shift", dict(x=x, weight=weight))


def scale_shift_backward(ctx: OpContext, grad_out: Tensor):
    s = _consume(ctx, "scale_shift")
    x, weight = s["x"], s["weight"]
    _check_grad(grad_out, x.shape, "scale_shift")
    c = x.shape[1]
    return (grad_out * weight.reshape(1, c, 1, 1),
            (grad_out * x).sum(axis=(0, 2, 3)),
            grad_out.sum(axis=(0, 2, 3)))


# ------------------------------------------------------------------- registry

CONV2D = DifferentiableOp("conv2d", conv2d, conv2d_backward)
CHANNEL_SHUFFLE = DifferentiableOp("channel_shuffle", channel_shuffle, channel_shuffle_backward)
BATCH_NORM = DifferentiableOp("batch_norm", batch_norm, batch_norm_backward)
GROUP_NORM = DifferentiableOp("group_norm_per_channel", group_norm_per_channel,
                              group_norm_per_channel_backward)
RELU = DifferentiableOp("relu", relu, relu_backward)
SIGMOID = DifferentiableOp("sigmoid", sigmoid, sigmoid_backward)
MAX_POOL = DifferentiableOp("max_pool_2x2", max_pool_2x2, max_pool_2x2_backward)
GLOBAL_AVG_POOL = DifferentiableOp("global_avg_pool", global_avg_pool, global_avg_pool_backward)
GLOBAL_MAX_POOL = DifferentiableOp("global_max_pool", global_max_pool, global_max_pool_backward)
CHANNEL_MEAN_POOL = DifferentiableOp("channel_mean_pool", channel_mean_pool, channel_mean_pool_backward)
CHANNEL_MAX_POOL = DifferentiableOp("channel_max_pool", channel_max_pool, channel_max_pool_backward)
UPSAMPLE = DifferentiableOp("bilinear_upsample_x2", bilinear_upsample_x2, bilinear_upsample_x2_backward)
RESIZE = DifferentiableOp("bilinear_resize", bilinear_resize, bilinear_resize_backward)
CONCAT = DifferentiableOp("concat_channels", concat_channels, concat_channels_backward)
MULTIPLY = DifferentiableOp("multiply", multiply, multiply_backward)
ADD = DifferentiableOp("add", add, add_backward)
SCALE_SHIFT = DifferentiableOp("scale_shift", scale_shift, scale_shift_backward)
