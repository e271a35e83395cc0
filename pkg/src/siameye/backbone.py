"""Shared convolutional feature extractor.

Topology: a strided 3x3 stem followed by four stages of two residual
blocks each, with channel widths (w, w, 2w, 4w, 4w) and stage strides
(2, 2, 1, 2, 1).  The stride product is 8, so feature maps are
ceil(H/8) x ceil(W/8) with 4w output channels (128 at the default width).

Blocks are conv-bn-relu / conv-bn plus a shortcut; the first block of a
stage gets a projecting 1x1 shortcut when it changes stride or width.
"""

from __future__ import annotations

import numpy as np

from .container import read_container, write_container
from .ops import (
    BatchNormParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    he_conv_init,
    relu_backward,
    relu_forward,
    residual_add_forward,
)

STRIDE_TOTAL = 8
STAGE_STRIDES = (2, 1, 2, 1)
MIN_INPUT = 24


class ResidualBlock:
    def __init__(self, rng, in_channels, out_channels, stride, eps, momentum, dtype):
        self.conv1 = ConvParams(he_conv_init(rng, out_channels, in_channels, 3, dtype), stride)
        self.bn1 = BatchNormParams(out_channels, eps, momentum, dtype)
        self.conv2 = ConvParams(he_conv_init(rng, out_channels, out_channels, 3, dtype), 1)
        self.bn2 = BatchNormParams(out_channels, eps, momentum, dtype)
        if stride != 1 or in_channels != out_channels:
            self.proj = ConvParams(he_conv_init(rng, out_channels, in_channels, 1, dtype), stride)
            self.proj_bn = BatchNormParams(out_channels, eps, momentum, dtype)
        else:
            self.proj = None
            self.proj_bn = None


class Backbone:
    """Feature extractor parameters; built via `build_backbone`."""

    def __init__(self, seed=0, base_width=32, bn_eps=1e-5, bn_momentum=0.1, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.base_width = int(base_width)
        self.bn_eps = float(bn_eps)
        self.bn_momentum = float(bn_momentum)
        self.dtype = np.dtype(dtype)
        widths = self.stage_widths()
        self.stem_conv = ConvParams(he_conv_init(rng, widths[0], 1, 3, dtype), 2)
        self.stem_bn = BatchNormParams(widths[0], bn_eps, bn_momentum, dtype)
        self.stages = []
        in_c = widths[0]
        for width, stride in zip(widths[1:], STAGE_STRIDES):
            blocks = [
                ResidualBlock(rng, in_c, width, stride, bn_eps, bn_momentum, dtype),
                ResidualBlock(rng, width, width, 1, bn_eps, bn_momentum, dtype),
            ]
            self.stages.append(blocks)
            in_c = width
        self.stats = {"forward_calls": 0}

    def stage_widths(self):
        w = self.base_width
        return [w, w, 2 * w, 4 * w, 4 * w]

    @property
    def out_channels(self):
        return 4 * self.base_width

    def _named_blocks(self):
        yield "stem", None
        for si, blocks in enumerate(self.stages, start=1):
            for bi, blk in enumerate(blocks):
                yield f"stage{si}.block{bi}", blk

    def param_items(self):
        """Trainable (name, array) pairs in declaration order."""
        items = [
            ("stem.conv.weight", self.stem_conv.weights),
            ("stem.bn.gamma", self.stem_bn.gamma),
            ("stem.bn.beta", self.stem_bn.beta),
        ]
        for prefix, blk in self._named_blocks():
            if blk is None:
                continue
            items += [
                (f"{prefix}.conv1.weight", blk.conv1.weights),
                (f"{prefix}.bn1.gamma", blk.bn1.gamma),
                (f"{prefix}.bn1.beta", blk.bn1.beta),
                (f"{prefix}.conv2.weight", blk.conv2.weights),
                (f"{prefix}.bn2.gamma", blk.bn2.gamma),
                (f"{prefix}.bn2.beta", blk.bn2.beta),
            ]
            if blk.proj is not None:
                items += [
                    (f"{prefix}.proj.weight", blk.proj.weights),
                    (f"{prefix}.proj_bn.gamma", blk.proj_bn.gamma),
                    (f"{prefix}.proj_bn.beta", blk.proj_bn.beta),
                ]
        return items

    def state_items(self):
        """Running statistics (serialized, not updated by SGD)."""
        items = [
            ("stem.bn.running_mean", self.stem_bn.running_mean),
            ("stem.bn.running_var", self.stem_bn.running_var),
        ]
        for prefix, blk in self._named_blocks():
            if blk is None:
                continue
            for bn_name, bn in (("bn1", blk.bn1), ("bn2", blk.bn2), ("proj_bn", blk.proj_bn)):
                if bn is None:
                    continue
                items += [
                    (f"{prefix}.{bn_name}.running_mean", bn.running_mean),
                    (f"{prefix}.{bn_name}.running_var", bn.running_var),
                ]
        return items


def build_backbone(init_seed=0, base_width=32, dtype=np.float32):
    return Backbone(seed=init_seed, base_width=base_width, dtype=dtype)


def to_network_input(image):
    """Grayscale image -> float in [0, 1]; uint8 inputs are scaled by 255."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / np.float32(255.0)
    return image


def _check_input(x):
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected Nx1xHxW input, got shape {tuple(x.shape)}")
    if x.shape[2] < MIN_INPUT or x.shape[3] < MIN_INPUT:
        raise ValueError(
            f"input {x.shape[2]}x{x.shape[3]} is below the minimum "
            f"{MIN_INPUT}x{MIN_INPUT}"
        )


def _block_forward(blk, x, mode, update_running):
    out, cols1 = conv2d_forward(x, blk.conv1, save_cols=True)
    bn1, bn1_ctx = batchnorm_forward(out, blk.bn1, mode, update_running)
    r1 = relu_forward(bn1)
    out, cols2 = conv2d_forward(r1, blk.conv2, save_cols=True)
    bn2, bn2_ctx = batchnorm_forward(out, blk.bn2, mode, update_running)
    if blk.proj is not None:
        sc, cols_p = conv2d_forward(x, blk.proj, save_cols=True)
        sc, proj_ctx = batchnorm_forward(sc, blk.proj_bn, mode, update_running)
    else:
        sc, proj_ctx, cols_p = x, None, None
    pre = residual_add_forward(bn2, sc)
    y = relu_forward(pre)
    ctx = {
        "x": x,
        "bn1": bn1,
        "r1": r1,
        "pre": pre,
        "bn1_ctx": bn1_ctx,
        "bn2_ctx": bn2_ctx,
        "proj_ctx": proj_ctx,
        "cols": (cols1, cols2, cols_p),
    }
    return y, ctx


def _block_backward(blk, ctx, grad, grads, prefix):
    cols1, cols2, cols_p = ctx["cols"]
    g = relu_backward(grad, ctx["pre"])
    # residual: the same gradient feeds the main path and the shortcut
    g_bn2, g_sc = g, g
    g_conv2, gg2, gb2 = batchnorm_backward(g_bn2, ctx["bn2_ctx"])
    grads[f"{prefix}.bn2.gamma"] += gg2
    grads[f"{prefix}.bn2.beta"] += gb2
    g_r1, gw2 = conv2d_backward(g_conv2, ctx["r1"], blk.conv2, cols=cols2)
    grads[f"{prefix}.conv2.weight"] += gw2
    g_bn1 = relu_backward(g_r1, ctx["bn1"])
    g_conv1, gg1, gb1 = batchnorm_backward(g_bn1, ctx["bn1_ctx"])
    grads[f"{prefix}.bn1.gamma"] += gg1
    grads[f"{prefix}.bn1.beta"] += gb1
    g_x, gw1 = conv2d_backward(g_conv1, ctx["x"], blk.conv1, cols=cols1)
    grads[f"{prefix}.conv1.weight"] += gw1
    if blk.proj is not None:
        g_projbn, ggp, gbp = batchnorm_backward(g_sc, ctx["proj_ctx"])
        grads[f"{prefix}.proj_bn.gamma"] += ggp
        grads[f"{prefix}.proj_bn.beta"] += gbp
        g_x_sc, gwp = conv2d_backward(g_projbn, ctx["x"], blk.proj, cols=cols_p)
        grads[f"{prefix}.proj.weight"] += gwp
    else:
        g_x_sc = g_sc
    return g_x + g_x_sc


def backbone_forward(backbone, x, mode="eval", update_running=True):
    """Run the extractor, returning (features, tape) for a later backward."""
    x = np.asarray(x)
    _check_input(x)
    backbone.stats["forward_calls"] += 1
    out, stem_cols = conv2d_forward(x, backbone.stem_conv, save_cols=True)
    out, stem_ctx = batchnorm_forward(out, backbone.stem_bn, mode, update_running)
    pre_stem = out
    out = relu_forward(out)
    tape = [("stem", {"x": x, "pre": pre_stem, "bn_ctx": stem_ctx, "cols": stem_cols})]
    for si, blocks in enumerate(backbone.stages, start=1):
        for bi, blk in enumerate(blocks):
            out, ctx = _block_forward(blk, out, mode, update_running)
            tape.append((f"stage{si}.block{bi}", ctx))
    return out, tape


def backbone_backward(backbone, tape, grad_features):
    """Backpropagate a feature gradient through a recorded forward pass.

    Returns (grad_input, grads) with grads keyed like `param_items`.
    """
    grads = {name: np.zeros_like(arr) for name, arr in backbone.param_items()}
    blocks = {name: blk for name, blk in backbone._named_blocks() if blk is not None}
    grad = grad_features
    for name, ctx in reversed(tape[1:]):
        grad = _block_backward(blocks[name], ctx, grad, grads, name)
    _, stem_ctx = tape[0]
    g = relu_backward(grad, stem_ctx["pre"])
    g, gg, gb = batchnorm_backward(g, stem_ctx["bn_ctx"])
    grads["stem.bn.gamma"] += gg
    grads["stem.bn.beta"] += gb
    grad_input, gw = conv2d_backward(
        g, stem_ctx["x"], backbone.stem_conv, cols=stem_ctx["cols"]
    )
    grads["stem.conv.weight"] += gw
    return grad_input, grads


def extract_features(backbone, image, mode="eval"):
    """Feature map for an Nx1xHxW batch: Nx(4w)xceil(H/8)xceil(W/8)."""
    features, _ = backbone_forward(backbone, image, mode)
    return features


class FoldedConv:
    def __init__(self, weights, bias, stride):
        self.params = ConvParams(weights, stride)
        self.bias = bias


class FoldedBackbone:
    """Same topology with batchnorm absorbed into conv weights and biases;
    the forward pass does no normalization work."""

    def __init__(self, stem, stages, base_width):
        self.stem = stem
        self.stages = stages
        self.base_width = base_width
        self.stats = {"forward_calls": 0}

    @property
    def out_channels(self):
        return 4 * self.base_width


def _fold_pair(conv, bn):
    if np.any(bn.running_var <= 0):
        raise ValueError("cannot fold batchnorm with non-positive running variance")
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    weights = conv.weights * scale.reshape(-1, 1, 1, 1).astype(conv.weights.dtype)
    bias = (bn.beta - bn.running_mean * scale).astype(conv.weights.dtype)
    return FoldedConv(weights, bias, conv.stride)


def fold_batchnorm(backbone):
    """Fold every bn into its preceding conv for the fast inference path."""
    stem = _fold_pair(backbone.stem_conv, backbone.stem_bn)
    stages = []
    for blocks in backbone.stages:
        folded_blocks = []
        for blk in blocks:
            folded_blocks.append(
                {
                    "conv1": _fold_pair(blk.conv1, blk.bn1),
                    "conv2": _fold_pair(blk.conv2, blk.bn2),
                    "proj": _fold_pair(blk.proj, blk.proj_bn) if blk.proj else None,
                }
            )
        stages.append(folded_blocks)
    return FoldedBackbone(stem, stages, backbone.base_width)


def folded_forward(folded, x):
    x = np.asarray(x)
    _check_input(x)
    folded.stats["forward_calls"] += 1
    out = relu_forward(conv2d_forward(x, folded.stem.params, bias=folded.stem.bias))
    for blocks in folded.stages:
        for blk in blocks:
            main = relu_forward(conv2d_forward(out, blk["conv1"].params, bias=blk["conv1"].bias))
            main = conv2d_forward(main, blk["conv2"].params, bias=blk["conv2"].bias)
            if blk["proj"] is not None:
                sc = conv2d_forward(out, blk["proj"].params, bias=blk["proj"].bias)
            else:
                sc = out
            out = relu_forward(residual_add_forward(main, sc))
    return out


def features(extractor, image_batch, mode="eval"):
    """Dispatch to the trainable or the folded forward."""
    if isinstance(extractor, FoldedBackbone):
        return folded_forward(extractor, image_batch)
    return extract_features(extractor, image_batch, mode)


def _meta(backbone):
    return {
        "kind": "backbone",
        "base_width": backbone.base_width,
        "bn_eps": backbone.bn_eps,
        "bn_momentum": backbone.bn_momentum,
        "format_version": 1,
    }


def backbone_tensors(backbone):
    return backbone.param_items() + backbone.state_items()


def save_backbone(path, backbone):
    write_container(path, backbone_tensors(backbone), _meta(backbone))


def load_backbone_tensors(backbone, tensors):
    for name, arr in backbone_tensors(backbone):
        if name not in tensors:
            raise ValueError(f"missing tensor {name!r}")
        stored = tensors[name]
        if stored.shape != arr.shape:
            raise ValueError(
                f"tensor {name!r} has shape {stored.shape}, expected {arr.shape}"
            )
        arr[...] = stored.astype(arr.dtype)


def load_backbone(path):
    meta, tensors = read_container(path)
    if meta.get("kind") != "backbone":
        raise ValueError(f"{path}: not a backbone container")
    backbone = Backbone(
        seed=0,
        base_width=meta["base_width"],
        bn_eps=meta["bn_eps"],
        bn_momentum=meta["bn_momentum"],
    )
    load_backbone_tensors(backbone, tensors)
    return backbone
