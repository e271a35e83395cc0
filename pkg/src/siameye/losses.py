"""Training objectives over the similarity heat map and the offset head.

The heat-map loss is a cosine-margin cross entropy: each cell's logit is
its similarity scaled by `s`, the margin `m` is subtracted from a cell's
own logit inside its normalizing sum, and a binary label map marks the
eye-center cell plus its four neighbours as positives.

Two variants are provided, selected by ``CosFaceParams.strict``:

* strict (default): every cell u contributes
  -log(num_u / (exp(s*(Q_u - m)) + sum_{t != u} exp(s*Q_t))) where num_u is
  exp(s*(Q_u - m)) at positive cells and exp(s*Q_u) at negative cells.  The
  margin sits in every denominator regardless of the label.
* one-vs-rest (strict=False): positives keep the margined term; negatives
  contribute -log(1 - p_u) with the plain softmax p_u = exp(s*Q_u) / sum_t
  exp(s*Q_t).  Only this variant pushes negatives down, so it is the form
  used for training.

The position loss is a masked L1 in heat-map cell units: the mask drops
samples whose similarity peak landed more than two cells from the truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CosFaceParams:
    s: float = 30.0
    margin: float = 0.1
    strict: bool = True

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"scale must be positive, got {self.s}")
        if not 0 <= self.margin < 1:
            raise ValueError(f"margin must be in [0, 1), got {self.margin}")


@dataclass
class LossWeights:
    heatmap: float = 1.0  # weight on the similarity loss
    position: float = 1.0  # weight on the offset loss

    def __post_init__(self):
        if self.heatmap < 0 or self.position < 0:
            raise ValueError("loss weights must be non-negative")


def round_half_up(v):
    return int(np.floor(v + 0.5))


def gt_heatmap(gt_center_px, alpha, rows, cols):
    """Binary target map: the eye-center cell and its 4-neighbours.

    The center cell is round(gt / alpha) (half away from zero), clamped to
    the grid; neighbours falling off the grid are clipped away.
    """
    gx, gy = gt_center_px
    cx = min(max(round_half_up(gx / alpha), 0), cols - 1)
    cy = min(max(round_half_up(gy / alpha), 0), rows - 1)
    target = np.zeros((rows, cols), dtype=np.uint8)
    for dx, dy in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
        x, y = cx + dx, cy + dy
        if 0 <= x < cols and 0 <= y < rows:
            target[y, x] = 1
    return target


def _stable_parts(z, sm):
    """Shared pieces of both loss forms, shifted by the max logit.

    Returns (zs, ez, total, rest, own_margined) where zs = z - max(z) and,
    in units of exp(-max z): ez[u] = exp(z_u), total = sum ez, rest[u] =
    total - ez[u] recomputed exactly where cancellation would bite,
    own_margined[u] = exp(z_u - sm).
    """
    zs = z - float(z.max())
    ez = np.exp(zs)
    total = float(ez.sum())
    rest = total - ez
    tiny = np.flatnonzero(rest <= total * 1e-12)
    for idx in tiny:
        rest[idx] = float(np.delete(ez, idx).sum())
    own_margined = np.exp(zs - sm)
    return zs, ez, total, rest, own_margined


def cosface_bce(q, y, params):
    """Margin cross entropy of a heat map against its binary target.

    Evaluated with log-sum-exp stabilization in float64; finite for any
    q in [-1, 1] at practical scales.
    """
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y)
    if q.shape != y.shape:
        raise ValueError(f"heat map {q.shape} and target {y.shape} differ")
    z = params.s * q.reshape(-1)
    pos = y.reshape(-1).astype(bool)
    sm = params.s * params.margin
    zs, ez, total, rest, own_margined = _stable_parts(z, sm)
    log_denom = np.log(rest + own_margined)
    if params.strict:
        terms = log_denom - np.where(pos, zs - sm, zs)
    else:
        terms = np.where(
            pos,
            log_denom - (zs - sm),
            np.log(total) - np.log(np.maximum(rest, 1e-300)),
        )
    return float(terms.mean())


def cosface_bce_backward(q, y, params):
    """dL/dQ for `cosface_bce`, same shape as the heat map."""
    q64 = np.asarray(q, dtype=np.float64)
    y = np.asarray(y)
    if q64.shape != y.shape:
        raise ValueError(f"heat map {q64.shape} and target {y.shape} differ")
    z = params.s * q64.reshape(-1)
    pos = y.reshape(-1).astype(bool)
    sm = params.s * params.margin
    _, ez, total, rest, own_margined = _stable_parts(z, sm)
    denom = rest + own_margined
    count = z.size
    if params.strict:
        # d/dz_v of sum_u [log denom_u - z_u + sm*y_u]:
        # every row's softmax puts weight ez_v / denom_u on cell v, except
        # its own row where the margined term applies.
        colsum = ez * float((1.0 / denom).sum()) - (ez - own_margined) / denom
        grad = (params.s / count) * (colsum - 1.0)
    else:
        inv_denom_pos = float((1.0 / denom[pos]).sum())
        inv_rest_neg = float((1.0 / np.maximum(rest[~pos], 1e-300)).sum())
        n_neg = int((~pos).sum())
        grad = ez * inv_denom_pos
        grad[pos] -= (ez[pos] - own_margined[pos]) / denom[pos]
        grad[pos] -= 1.0
        grad += n_neg * ez / total
        grad -= ez * inv_rest_neg
        grad[~pos] += ez[~pos] / np.maximum(rest[~pos], 1e-300)
        grad *= params.s / count
    return grad.reshape(q64.shape).astype(np.asarray(q).dtype)


def position_mask(cell, gt_cell):
    """1.0 when the similarity peak is within two cells of the truth."""
    dx = cell[0] - gt_cell[0]
    dy = cell[1] - gt_cell[1]
    return 1.0 if np.hypot(dx, dy) < 2.0 else 0.0


def regression_loss(pred_px, gt_px, mask, alpha):
    """Masked L1 between predicted and true centers, in cell units."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not mask:
        return 0.0
    return float(
        mask * (abs(pred_px[0] - gt_px[0]) + abs(pred_px[1] - gt_px[1])) / alpha
    )


def total_loss(ls_right, ls_left, lp_right, lp_left, weights):
    """Combined objective, summed over both eyes."""
    parts = (ls_right, ls_left, lp_right, lp_left)
    if not all(np.isfinite(parts)):
        raise ValueError(f"loss components must be finite, got {parts}")
    return weights.heatmap * (ls_right + ls_left) + weights.position * (
        lp_right + lp_left
    )
