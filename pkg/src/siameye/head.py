"""Similarity head: cosine heat map, coarse argmax, fine offset regression.

Coordinates are (x, y) = (column, row) with the origin at the top-left.
Heat-map cells relate to input pixels through the scale `alpha` (8 for the
stride-8 backbone): a coarse cell x' plus a regressed offset dx compose to
the final center alpha * (x' + dx) in input pixels.

A reference feature acts as the matching kernel.  The search feature map
is edge-replicated before the kernel-wise cosine similarity so the heat
map keeps the search feature's spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .backbone import features, to_network_input
from .losses import CosFaceParams

ALPHA = 8


@dataclass
class ReferenceFeature:
    side: str
    feature: np.ndarray  # (c, m, n)

    def __post_init__(self):
        if self.side not in ("right", "left"):
            raise ValueError(f"side must be 'right' or 'left', got {self.side!r}")
        if not np.isfinite(self.feature).all():
            raise ValueError("reference feature contains non-finite values")


@dataclass(frozen=True)
class Detection:
    """One per eye side: coarse cell, fine offset, final pixel center."""

    side: str
    cell: tuple  # (x', y') heat-map cell of the similarity peak
    offset: tuple  # (dx, dy) in heat-map cell units
    x: float  # final center, clamped to the image
    y: float
    x_raw: float  # unclamped center, used by losses
    y_raw: float
    score: float  # peak cosine similarity


def _unfold(padded, m, n):
    """(B, c, Hp, Wp) -> patch matrix (c*m*n, B*M*N) for stride-1 windows."""
    b, c, hp, wp = padded.shape
    mm, nn = hp - m + 1, wp - n + 1
    sb, sc, sh, sw = padded.strides
    windows = as_strided(
        padded, shape=(c, m, n, b, mm, nn), strides=(sc, sh, sw, sb, sh, sw)
    )
    return windows.reshape(c * m * n, b * mm * nn), mm, nn


def _similarity_forward(search, ref):
    """Batched cosine heat maps; returns (q (B, M, N), ctx)."""
    search = np.asarray(search)
    ref = np.asarray(ref)
    if search.ndim != 4 or ref.ndim != 3:
        raise ValueError(
            f"expected (B,c,M,N) search and (c,m,n) reference, got "
            f"{search.shape} and {ref.shape}"
        )
    if search.shape[1] != ref.shape[0]:
        raise ValueError(
            f"channel mismatch: search has {search.shape[1]}, reference {ref.shape[0]}"
        )
    c, m, n = ref.shape
    if m % 2 == 0 or n % 2 == 0:
        raise ValueError(f"reference kernel must have odd spatial dims, got {m}x{n}")
    pm, pn = m // 2, n // 2
    padded = np.pad(search, ((0, 0), (0, 0), (pm, pm), (pn, pn)), mode="edge")
    cols, mm, nn = _unfold(padded, m, n)
    fvec = ref.reshape(-1)
    fnorm = float(np.sqrt(fvec @ fvec))
    nums = fvec @ cols
    pnorm = np.sqrt(np.einsum("ij,ij->j", cols, cols))
    denom = fnorm * pnorm
    ok = denom > 0
    q = np.where(ok, nums / np.where(ok, denom, 1), 0)
    q = np.clip(q, -1.0, 1.0)
    b = search.shape[0]
    ctx = {
        "cols": cols,
        "fvec": fvec,
        "fnorm": fnorm,
        "pnorm": pnorm,
        "q_flat": q,
        "ok": ok,
        "shape": (b, c, search.shape[2], search.shape[3], m, n),
    }
    return q.reshape(b, mm, nn).astype(search.dtype), ctx


def _fold_edge_padding(grad_padded, pm, pn):
    """Accumulate replicate-padding gradients back onto the interior."""
    g = grad_padded
    if pm:
        core = g[:, :, pm:-pm, :].copy()
        core[:, :, 0, :] += g[:, :, :pm, :].sum(axis=2)
        core[:, :, -1, :] += g[:, :, -pm:, :].sum(axis=2)
        g = core
    if pn:
        core = g[:, :, :, pn:-pn].copy()
        core[:, :, :, 0] += g[:, :, :, :pn].sum(axis=3)
        core[:, :, :, -1] += g[:, :, :, -pn:].sum(axis=3)
        g = core
    return g


def _similarity_backward(ctx, grad_q):
    """Gradients w.r.t. the search feature map and the reference feature."""
    b, c, h, w, m, n = ctx["shape"]
    grad_flat = np.asarray(grad_q).reshape(-1)
    cols, fvec = ctx["cols"], ctx["fvec"]
    fnorm, pnorm, q, ok = ctx["fnorm"], ctx["pnorm"], ctx["q_flat"], ctx["ok"]
    safe_p = np.where(ok, pnorm, 1)
    a = np.where(ok, grad_flat / (fnorm * safe_p if fnorm > 0 else 1), 0)
    if fnorm == 0:
        a = np.zeros_like(a)
    s = np.where(ok, grad_flat * q / (safe_p * safe_p), 0)
    grad_cols = np.outer(fvec, a) - cols * s
    if fnorm > 0:
        grad_f = cols @ a - fvec * (float(grad_flat @ q) / (fnorm * fnorm))
    else:
        grad_f = np.zeros_like(fvec)
    pm, pn = m // 2, n // 2
    grad_padded = np.zeros((b, c, h + 2 * pm, w + 2 * pn), dtype=grad_cols.dtype)
    windows = grad_cols.reshape(c, m, n, b, h, w)
    for ki in range(m):
        for kj in range(n):
            grad_padded[:, :, ki : ki + h, kj : kj + w] += windows[:, ki, kj].transpose(
                1, 0, 2, 3
            )
    grad_search = _fold_edge_padding(grad_padded, pm, pn)
    return grad_search, grad_f.reshape(c, m, n)


def similarity_map(search_feature, ref_feature):
    """Cosine similarity heat map between one (c, M, N) search feature and
    a (c, m, n) reference kernel; values lie in [-1, 1], zero-norm patches
    score 0."""
    q, _ = _similarity_forward(search_feature[None], ref_feature)
    return q[0]


def argmax_heatmap(q):
    """Cell (x', y') of the first maximal value in row-major scan order."""
    q = np.asarray(q)
    if q.size == 0:
        raise ValueError("empty heat map")
    row, col = divmod(int(np.argmax(q)), q.shape[1])
    return (col, row)


def extract_eye_feature(search_feature, cell):
    """The 1x1xc fiber at a heat-map cell (not the m x n patch)."""
    x, y = cell
    c, h, w = search_feature.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"cell {cell} outside {w}x{h} map")
    return search_feature[:, y, x].copy()


def regress_offset(weight, eye_feature):
    """dx = W @ f, a 2-vector (dx, dy) in heat-map cell units, unbounded."""
    weight = np.asarray(weight)
    eye_feature = np.asarray(eye_feature)
    if weight.ndim != 2 or weight.shape[0] != 2 or weight.shape[1] != eye_feature.shape[0]:
        raise ValueError(
            f"regression weight {weight.shape} incompatible with feature "
            f"{eye_feature.shape}"
        )
    return weight @ eye_feature


def compose_position(cell, offset, alpha=ALPHA):
    """Final center in input pixels: alpha * (x' + dx)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return (alpha * (cell[0] + offset[0]), alpha * (cell[1] + offset[1]))


def clamp_to_image(pos, width, height):
    return (
        float(min(max(pos[0], 0.0), width - 1)),
        float(min(max(pos[1], 0.0), height - 1)),
    )


@dataclass
class DetectorModel:
    """Backbone plus regression weights and precomputed reference features."""

    backbone: object
    head_weight: np.ndarray  # (2, c)
    ref_right: ReferenceFeature
    ref_left: ReferenceFeature
    reference_image: np.ndarray  # the 24x24 averaged eye chip
    alpha: int = ALPHA
    cosface: CosFaceParams = field(default_factory=CosFaceParams)

    def __post_init__(self):
        c = self.backbone.out_channels
        if self.head_weight.shape != (2, c):
            raise ValueError(
                f"head weight must be (2, {c}), got {self.head_weight.shape}"
            )


def build_reference_feature(extractor, reference_image, side):
    """Feature of the canonical eye chip; the left side uses its mirror."""
    image = np.asarray(reference_image)
    if image.ndim != 2:
        raise ValueError(f"reference image must be 2-D, got shape {image.shape}")
    if side == "left":
        image = image[:, ::-1]
    elif side != "right":
        raise ValueError(f"side must be 'right' or 'left', got {side!r}")
    x = to_network_input(image)[None, None]
    feat = features(extractor, x)[0]
    if feat.shape[1] % 2 == 0 or feat.shape[2] % 2 == 0:
        raise ValueError(
            f"reference image {image.shape} yields an even {feat.shape[1]}x"
            f"{feat.shape[2]} feature; use a size like 24x24 that maps to odd dims"
        )
    return ReferenceFeature(side=side, feature=feat)


def _detect_side(feature, ref, weight, alpha, width, height, side):
    q = similarity_map(feature, ref.feature)
    cell = argmax_heatmap(q)
    eye = extract_eye_feature(feature, cell)
    offset = regress_offset(weight, eye)
    raw = compose_position(cell, (float(offset[0]), float(offset[1])), alpha)
    x, y = clamp_to_image(raw, width, height)
    return Detection(
        side=side,
        cell=cell,
        offset=(float(offset[0]), float(offset[1])),
        x=x,
        y=y,
        x_raw=float(raw[0]),
        y_raw=float(raw[1]),
        score=float(q[cell[1], cell[0]]),
    )


def detect(model, image):
    """Detect both eye centers with a single backbone forward pass.

    Returns (right, left) detections; exactly one per side.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    height, width = image.shape
    x = to_network_input(image)[None, None]
    feature = features(model.backbone, x)[0]
    right = _detect_side(
        feature, model.ref_right, model.head_weight, model.alpha, width, height, "right"
    )
    left = _detect_side(
        feature, model.ref_left, model.head_weight, model.alpha, width, height, "left"
    )
    return right, left


def detection_record(image_id, right, left):
    """One JSON-ready output record per image."""
    return {
        "image": image_id,
        "right_x": right.x,
        "right_y": right.y,
        "left_x": left.x,
        "left_y": left.y,
        "right_score": right.score,
        "left_score": left.score,
    }
