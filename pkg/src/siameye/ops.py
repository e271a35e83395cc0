"""Dense-tensor layer math for the detector backbone.

Every layer the network needs is implemented as an explicit forward /
backward pair on numpy arrays in NCHW layout, plus a plain SGD update and
a central-finite-difference gradient checker.  Ops preserve the dtype of
their inputs: float32 is the working precision for training and inference,
float64 is used when checking gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ConvParams",
    "BatchNormParams",
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu_forward",
    "relu_backward",
    "residual_add_forward",
    "residual_add_backward",
    "sgd_step",
    "grad_check",
    "he_conv_init",
]


class ConvParams:
    """Square-kernel convolution weights (3x3, or 1x1 for projection
    shortcuts), stride 1 or 2, no bias: batch normalization follows every
    convolution and supplies the affine term."""

    def __init__(self, weights, stride=1):
        weights = np.asarray(weights)
        if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
            raise ValueError(
                f"conv weights must be (out_c, in_c, k, k), got {weights.shape}"
            )
        if weights.shape[2] not in (1, 3):
            raise ValueError(f"kernel must be 1x1 or 3x3, got {weights.shape[2]}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.weights = weights
        self.stride = stride

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]


class BatchNormParams:
    """Per-channel scale/shift plus running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)

    @property
    def channels(self):
        return self.gamma.shape[0]


def he_conv_init(rng, out_channels, in_channels, kernel, dtype=np.float32):
    """He fan-in normal initialization for a conv kernel."""
    fan_in = in_channels * kernel * kernel
    std = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel))
    return w.astype(dtype)


def _same_padding(kernel):
    # 1 px for 3x3, 0 for 1x1: with stride s in {1, 2} the output extent is
    # exactly ceil(in / s), which keeps the backbone's total stride at 8.
    return (kernel - 1) // 2


def _out_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def _im2col(x, kernel, stride, padding):
    """Unfold (N, C, H, W) into a (C*k*k, N*oh*ow) patch matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = _out_extent(h, kernel, stride, padding)
    ow = _out_extent(w, kernel, stride, padding)
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(c, kernel, kernel, n, oh, ow),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
    )
    return windows.reshape(c * kernel * kernel, n * oh * ow), oh, ow


def _col2im(cols, x_shape, kernel, stride, padding):
    """Fold a patch-gradient matrix back onto the (padded) input grid."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = _out_extent(h, kernel, stride, padding)
    ow = _out_extent(w, kernel, stride, padding)
    grid = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    windows = cols.reshape(c, kernel, kernel, n, oh, ow)
    for ki in range(kernel):
        for kj in range(kernel):
            grid[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                windows[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if padding:
        grid = grid[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(grid)


def conv2d_forward(x, params, padding=None, bias=None, save_cols=False):
    """2-D convolution with zero padding sized so out = ceil(in / stride).

    `bias` is only used by the batchnorm-folded inference path; training
    convolutions carry no bias.  With save_cols=True the unfolded patch
    matrix is returned alongside the output so a backward pass can skip
    rebuilding it.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ValueError(
            f"conv input has {x.shape[1]} channels, kernel expects {params.in_channels}"
        )
    if padding is None:
        padding = _same_padding(params.kernel)
    cols, oh, ow = _im2col(x, params.kernel, params.stride, padding)
    w2 = params.weights.reshape(params.out_channels, -1)
    out = (w2 @ cols).reshape(params.out_channels, x.shape[0], oh, ow)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out += np.asarray(bias).reshape(1, -1, 1, 1)
    if save_cols:
        return out, cols
    return out


def conv2d_backward(grad_out, x, params, padding=None, cols=None):
    """Gradients of a conv w.r.t. its saved input and its weights.

    `cols` may carry the patch matrix saved by the forward pass; when
    omitted it is recomputed from the saved input.
    """
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    if padding is None:
        padding = _same_padding(params.kernel)
    oh = _out_extent(x.shape[2], params.kernel, params.stride, padding)
    ow = _out_extent(x.shape[3], params.kernel, params.stride, padding)
    expect = (x.shape[0], params.out_channels, oh, ow)
    if grad_out.shape != expect:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match saved forward "
            f"context (expected {expect})"
        )
    if cols is None:
        cols, _, _ = _im2col(x, params.kernel, params.stride, padding)
    g2 = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(
        params.out_channels, -1
    )
    grad_w = (g2 @ cols.T).reshape(params.weights.shape)
    grad_cols = params.weights.reshape(params.out_channels, -1).T @ g2
    grad_x = _col2im(grad_cols, x.shape, params.kernel, params.stride, padding)
    return grad_x, grad_w


def batchnorm_forward(x, params, mode="train", update_running=True):
    """Normalize per channel; returns (out, ctx) with ctx for the backward.

    Train mode normalizes by batch statistics (biased variance) and, unless
    `update_running` is False, folds them into the running statistics with
    the configured momentum.  Eval mode normalizes by the running
    statistics.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ValueError(
            f"batchnorm input shape {x.shape} does not match {params.channels} channels"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            m = params.momentum
            params.running_mean += (m * (mean - params.running_mean)).astype(
                params.running_mean.dtype
            )
            params.running_var += (m * (var - params.running_var)).astype(
                params.running_var.dtype
            )
    else:
        mean = params.running_mean
        var = params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = params.gamma.reshape(1, -1, 1, 1) * xhat + params.beta.reshape(1, -1, 1, 1)
    ctx = (mode, xhat, inv_std.astype(x.dtype), params.gamma)
    return out, ctx


def batchnorm_backward(grad_out, ctx):
    """Gradients w.r.t. input, gamma and beta from a saved forward ctx."""
    if ctx is None:
        raise ValueError("batchnorm backward requires the saved forward context")
    mode, xhat, inv_std, gamma = ctx
    grad_out = np.asarray(grad_out)
    if grad_out.shape != xhat.shape:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward shape {xhat.shape}"
        )
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * gamma.reshape(1, -1, 1, 1)
    if mode == "eval":
        grad_x = g * inv_std.reshape(1, -1, 1, 1)
        return grad_x, grad_gamma, grad_beta
    n_red = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    sum_g = g.sum(axis=(0, 2, 3), keepdims=True)
    sum_gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_x = (inv_std.reshape(1, -1, 1, 1) / n_red) * (
        n_red * g - sum_g - xhat * sum_gx
    )
    return grad_x, grad_gamma, grad_beta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    """Gradient is passed only where the forward input was positive."""
    return grad_out * (x > 0)


def residual_add_forward(a, b):
    if a.shape != b.shape:
        raise ValueError(f"residual add shapes differ: {a.shape} vs {b.shape}")
    return a + b


def residual_add_backward(grad_out):
    return grad_out, grad_out


def sgd_step(params, grads, lr, weight_decay=0.0):
    """In-place p <- p - lr * (g + weight_decay * p) over aligned lists."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"missing gradient for parameter {i}")
        if p.shape != np.shape(g):
            raise ValueError(
                f"parameter {i}: grad shape {np.shape(g)} != param shape {p.shape}"
            )
        p -= (lr * (g + weight_decay * p)).astype(p.dtype)


def grad_check(loss_fn, params, h=1e-5, max_checks_per_param=5, seed=0):
    """Compare analytic gradients against central finite differences.

    `loss_fn()` must return `(loss, grads)` where `grads` aligns with
    `params`; it is re-evaluated with individual coordinates of the
    (float64) parameter arrays perturbed by +-h.  Returns the max over all
    sampled coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-12).
    """
    params = list(params)
    if not params or all(p.size == 0 for p in params):
        raise ValueError("no parameters to check")
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("gradient checking requires float64 parameters")
    loss0, grads = loss_fn()
    if not np.isfinite(loss0):
        raise ValueError(f"loss is not finite: {loss0}")
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} grads for {len(params)} params")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        if p.size == 0:
            continue
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        if p.size <= max_checks_per_param:
            coords = np.arange(p.size)
        else:
            coords = rng.choice(p.size, size=max_checks_per_param, replace=False)
        for idx in coords:
            orig = flat_p[idx]
            flat_p[idx] = orig + h
            up = loss_fn()[0]
            flat_p[idx] = orig - h
            down = loss_fn()[0]
            flat_p[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("loss is not finite during finite differencing")
            fd = (up - down) / (2.0 * h)
            analytic = flat_g[idx]
            err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12)
            worst = max(worst, err)
    return worst
