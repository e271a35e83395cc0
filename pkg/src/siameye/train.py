"""End-to-end training of the detector.

Each step runs the shared extractor over the search batch and over the
reference chip plus its mirror (both in train mode, so gradients flow
through both branches), builds right/left similarity maps, applies the
heat-map loss and the masked offset loss per eye, and takes one SGD step.

The learning rate is 0.1 during the first epoch (one full pass over the
corpus) and 0.01 afterwards.  Batches are drawn from per-epoch shuffles
derived statelessly from (seed, epoch), so a run can resume from a
checkpoint and reproduce the uninterrupted trajectory exactly.

At the end of training the reference features are recomputed in eval mode
and frozen into the model, which is what inference and checkpoints use.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import (
    backbone_backward,
    backbone_forward,
    backbone_tensors,
    build_backbone,
    extract_features,
    load_backbone_tensors,
    to_network_input,
)
from .container import read_container, write_container
from .head import (
    ALPHA,
    DetectorModel,
    ReferenceFeature,
    _similarity_backward,
    _similarity_forward,
    argmax_heatmap,
    build_reference_feature,
    compose_position,
    similarity_map,
)
from .losses import (
    CosFaceParams,
    LossWeights,
    cosface_bce,
    cosface_bce_backward,
    gt_heatmap,
    position_mask,
    regression_loss,
    round_half_up,
    total_loss,
)
from .ops import sgd_step
from .synth import build_average_reference, crop_eye


@dataclass
class TrainConfig:
    lr_first_epoch: float = 0.1
    lr_rest: float = 0.01
    weight_decay: float = 1e-4
    batch_size: int = 16
    total_iterations: int = 2000  # desk scale; full-scale runs use 60000
    cosface: CosFaceParams = field(
        # the strict loss form has a label-blind gradient, so training
        # always runs the one-vs-rest variant
        default_factory=lambda: CosFaceParams(s=30.0, margin=0.1, strict=False)
    )
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_interval: int = 500
    base_width: int = 32
    reference_size: int = 24
    log_every: int = 25
    eval_every: int = 250
    eval_slice: int = 16

    def __post_init__(self):
        if min(self.lr_first_epoch, self.lr_rest) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.total_iterations < 1:
            raise ValueError("batch size and iteration count must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


@dataclass
class TrainResult:
    model: DetectorModel
    config: TrainConfig
    iterations: int
    history: list


def _model_params(model):
    items = model.backbone.param_items()
    items.append(("head.weight", model.head_weight))
    return items


def init_detector(config, corpus):
    """Fresh model: seeded backbone, zero regression weights, and the
    averaged reference chip built from the corpus' right-eye crops."""
    if not corpus:
        raise ValueError("corpus is empty")
    backbone = build_backbone(config.seed, base_width=config.base_width)
    chips = [
        crop_eye(image, ann.right, config.reference_size)
        for image, ann in corpus[:128]
    ]
    reference = build_average_reference(chips)
    # prime the running statistics with one calibration pass so eval-mode
    # reference features are sane from the first training step
    warmup = np.stack(
        [to_network_input(img) for img, _ in corpus[: min(16, len(corpus))]]
    )[:, None]
    backbone_forward(backbone, warmup, mode="train", update_running=True)
    head_weight = np.zeros((2, backbone.out_channels), dtype=np.float32)
    return DetectorModel(
        backbone=backbone,
        head_weight=head_weight,
        ref_right=build_reference_feature(backbone, reference, "right"),
        ref_left=build_reference_feature(backbone, reference, "left"),
        reference_image=reference,
        alpha=ALPHA,
        cosface=config.cosface,
    )


def _side_losses_and_grads(model, feats, anns, side, config, grad_feats, head_grad):
    """Heat-map and offset losses for one eye side over the batch.

    Accumulates dL/dF into grad_feats and dL/dW into head_grad; returns
    (mean heatmap loss, mean position loss, dQ batch array).
    """
    batch = feats.shape[0]
    rows, cols = feats.shape[2], feats.shape[3]
    ref = model.ref_right if side == "right" else model.ref_left
    q, sim_ctx = _similarity_forward(feats, ref.feature)
    dq = np.zeros_like(q)
    beta = config.loss_weights.heatmap
    gamma = config.loss_weights.position
    ls_sum = 0.0
    lp_sum = 0.0
    for i in range(batch):
        gt = anns[i].right if side == "right" else anns[i].left
        target = gt_heatmap(gt, ALPHA, rows, cols)
        ls_sum += cosface_bce(q[i], target, config.cosface)
        if beta:
            dq[i] = (beta / batch) * cosface_bce_backward(q[i], target, config.cosface)
        cell = argmax_heatmap(q[i])
        eye_feat = feats[i, :, cell[1], cell[0]]
        offset = model.head_weight @ eye_feat
        pred = compose_position(cell, (float(offset[0]), float(offset[1])), ALPHA)
        gt_cell = (
            round_half_up(gt[0] / ALPHA),
            round_half_up(gt[1] / ALPHA),
        )
        mask = position_mask(cell, gt_cell)
        lp_sum += regression_loss(pred, gt, mask, ALPHA)
        if mask and gamma:
            # dLp/d(offset) = sign(pred - gt) per coordinate (cell units)
            d_off = (gamma / batch) * np.sign(
                np.array([pred[0] - gt[0], pred[1] - gt[1]], dtype=np.float64)
            )
            head_grad += np.outer(d_off, eye_feat)
            grad_feats[i, :, cell[1], cell[0]] += (
                model.head_weight.astype(np.float64).T @ d_off
            ).astype(feats.dtype)
    grad_sim, grad_ref = _similarity_backward(sim_ctx, dq)
    grad_feats += grad_sim.astype(grad_feats.dtype)
    return ls_sum / batch, lp_sum / batch, grad_ref


def train_step(model, batch, config, lr=None, apply_update=True):
    """One forward/backward/SGD pass over a batch of (image, annotation).

    Returns (loss components, gradients).  With apply_update=False the
    model is left untouched (used by gradient checking); otherwise one SGD
    step at `lr` (default config.lr_rest) updates every parameter in place.
    """
    if not batch:
        raise ValueError("empty batch")
    images = np.stack([to_network_input(img) for img, _ in batch])[:, None]
    anns = [ann for _, ann in batch]
    ref_in = to_network_input(model.reference_image)
    ref_batch = np.stack([ref_in, ref_in[:, ::-1]])[:, None]

    # the reference branch runs in eval mode: its features then match the
    # eval-mode recomputation frozen into the model at export, and the tiny
    # bright eye chips never pollute the running statistics that eval-mode
    # search features depend on.  Gradients still flow through the branch.
    feats_ref, tape_ref = backbone_forward(model.backbone, ref_batch, mode="eval")
    model.ref_right.feature = feats_ref[0]
    model.ref_left.feature = feats_ref[1]
    feats, tape = backbone_forward(
        model.backbone, images, mode="train", update_running=apply_update
    )

    grad_feats = np.zeros_like(feats)
    head_grad = np.zeros_like(model.head_weight, dtype=np.float64)
    ls_r, lp_r, grad_ref_r = _side_losses_and_grads(
        model, feats, anns, "right", config, grad_feats, head_grad
    )
    ls_l, lp_l, grad_ref_l = _side_losses_and_grads(
        model, feats, anns, "left", config, grad_feats, head_grad
    )
    loss = total_loss(ls_r, ls_l, lp_r, lp_l, config.loss_weights)

    _, grads = backbone_backward(model.backbone, tape, grad_feats)
    grad_ref_stack = np.stack([grad_ref_r, grad_ref_l]).astype(feats_ref.dtype)
    _, grads_ref = backbone_backward(model.backbone, tape_ref, grad_ref_stack)
    for name in grads:
        grads[name] += grads_ref[name]
    grads["head.weight"] = head_grad.astype(model.head_weight.dtype)

    components = {
        "L": float(loss),
        "Ls_R": float(ls_r),
        "Ls_L": float(ls_l),
        "Lp_R": float(lp_r),
        "Lp_L": float(lp_l),
    }
    if apply_update:
        names = [name for name, _ in _model_params(model)]
        params = [arr for _, arr in _model_params(model)]
        sgd_step(
            params,
            [grads[name] for name in names],
            config.lr_rest if lr is None else lr,
            config.weight_decay,
        )
    return components, grads


def iterations_per_epoch(corpus_size, batch_size):
    return -(-corpus_size // batch_size)


def learning_rate(config, iteration, corpus_size):
    """0.1 inside the first full pass over the corpus, 0.01 after."""
    if iteration < iterations_per_epoch(corpus_size, config.batch_size):
        return config.lr_first_epoch
    return config.lr_rest


def _epoch_permutation(seed, epoch, n):
    return np.random.default_rng((seed, 1000003, epoch)).permutation(n)


def batch_indices(seed, iteration, batch_size, n):
    """Deterministic batch for a given iteration; wraps across epochs with
    per-epoch reshuffles."""
    start = iteration * batch_size
    perms = {}
    out = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = _epoch_permutation(seed, epoch, n)
        out.append(int(perms[epoch][offset]))
    return out


def heatmap_hit_rate(model, samples):
    """Fraction of eyes whose similarity peak lands within 2 cells of the
    truth, using eval-mode features (training diagnostics only)."""
    hits = 0
    total = 0
    ref_r = build_reference_feature(model.backbone, model.reference_image, "right")
    ref_l = build_reference_feature(model.backbone, model.reference_image, "left")
    for image, ann in samples:
        x = to_network_input(image)[None, None]
        feats = extract_features(model.backbone, x, mode="eval")[0]
        for side, ref in (("right", ref_r), ("left", ref_l)):
            gt = ann.right if side == "right" else ann.left
            cell = argmax_heatmap(similarity_map(feats, ref.feature))
            gt_cell = (round_half_up(gt[0] / ALPHA), round_half_up(gt[1] / ALPHA))
            hits += position_mask(cell, gt_cell) > 0
            total += 1
    return hits / total


def freeze_reference_features(model):
    """Recompute and cache eval-mode reference features (the exported
    form used by detection)."""
    model.ref_right = build_reference_feature(
        model.backbone, model.reference_image, "right"
    )
    model.ref_left = build_reference_feature(
        model.backbone, model.reference_image, "left"
    )


def save_checkpoint(path, model, config, iteration):
    tensors = backbone_tensors(model.backbone)
    tensors += [
        ("head.weight", model.head_weight),
        ("ref.right", model.ref_right.feature),
        ("ref.left", model.ref_left.feature),
        ("ref.image", model.reference_image),
    ]
    meta = {
        "kind": "checkpoint",
        "iteration": iteration,
        "alpha": model.alpha,
        "base_width": model.backbone.base_width,
        "bn_eps": model.backbone.bn_eps,
        "bn_momentum": model.backbone.bn_momentum,
        "config": asdict(config),
        "format_version": 1,
    }
    write_container(path, tensors, meta)


def config_from_dict(d):
    d = dict(d)
    d["cosface"] = CosFaceParams(**d["cosface"])
    d["loss_weights"] = LossWeights(**d["loss_weights"])
    return TrainConfig(**d)


def load_checkpoint(path):
    """Returns (model, config, iteration) with bit-exact tensors."""
    meta, tensors = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint container")
    config = config_from_dict(meta["config"])
    backbone = build_backbone(config.seed, base_width=meta["base_width"])
    backbone.bn_eps = meta["bn_eps"]
    backbone.bn_momentum = meta["bn_momentum"]
    load_backbone_tensors(backbone, tensors)
    model = DetectorModel(
        backbone=backbone,
        head_weight=tensors["head.weight"].astype(np.float32),
        ref_right=ReferenceFeature("right", tensors["ref.right"].astype(np.float32)),
        ref_left=ReferenceFeature("left", tensors["ref.left"].astype(np.float32)),
        reference_image=tensors["ref.image"].astype(np.uint8),
        alpha=meta["alpha"],
        cosface=config.cosface,
    )
    return model, config, meta["iteration"]


def train(
    config,
    corpus,
    val=None,
    log_path=None,
    checkpoint_path=None,
    resume_from=None,
):
    """Run the full schedule; returns a TrainResult with the frozen model.

    `corpus` is a list of (image, Annotation); `val`, when given, is a
    held-out list used only for the logged hit-rate diagnostic.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if resume_from is not None:
        model, saved_config, start_iter = load_checkpoint(resume_from)
        config = saved_config
    else:
        model = init_detector(config, corpus)
        start_iter = 0
    n = len(corpus)
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    eval_pool = val if val is not None else corpus[: config.eval_slice]
    try:
        for iteration in range(start_iter, config.total_iterations):
            lr = learning_rate(config, iteration, n)
            batch = [
                corpus[i]
                for i in batch_indices(config.seed, iteration, config.batch_size, n)
            ]
            components, _ = train_step(model, batch, config, lr=lr)
            record = {"iter": iteration + 1, **components, "lr": lr}
            if (iteration + 1) % config.eval_every == 0 and eval_pool:
                record["eval_hit_rate"] = heatmap_hit_rate(
                    model, eval_pool[: config.eval_slice]
                )
                record["eval_on"] = "val" if val is not None else "train_slice"
            history.append(record)
            if log_fh and (
                (iteration + 1) % config.log_every == 0
                or iteration + 1 == config.total_iterations
            ):
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if checkpoint_path and (iteration + 1) % config.checkpoint_interval == 0:
                freeze_reference_features(model)
                save_checkpoint(checkpoint_path, model, config, iteration + 1)
    finally:
        if log_fh:
            log_fh.close()
    freeze_reference_features(model)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, config, config.total_iterations)
    return TrainResult(
        model=model,
        config=config,
        iterations=config.total_iterations,
        history=history,
    )
