"""Accuracy metrics and the CPU latency benchmark.

The headline metric is the relative eye error: the larger of the two
per-eye localization distances divided by the true inter-eye distance.
Distance-threshold curves ("RMSE" curves: with one point per eye per image
the root-mean-square error reduces to the plain Euclidean distance) and F1
curves complete the report.

The detector always emits exactly one detection per side, so a miss is
simultaneously a false positive and a false negative; under FP = FN the F1
score collapses to the hit fraction, which is what `f1_vs_rmse` computes.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .head import detect

REL_ERROR_THRESHOLDS = (0.05, 0.1, 0.15, 0.2, 0.25, 0.5)
RMSE_THRESHOLDS_PX = (5.0, 10.0, 15.0, 20.0)


def relative_eye_error(pred_right, pred_left, gt_right, gt_left):
    """max(d_left, d_right) / inter-eye distance."""
    d = float(np.hypot(gt_left[0] - gt_right[0], gt_left[1] - gt_right[1]))
    if d <= 0:
        raise ValueError("ground-truth eyes coincide; relative error undefined")
    d_r = float(np.hypot(pred_right[0] - gt_right[0], pred_right[1] - gt_right[1]))
    d_l = float(np.hypot(pred_left[0] - gt_left[0], pred_left[1] - gt_left[1]))
    return max(d_l, d_r) / d


def accuracy_curve(errors, thresholds):
    """Fraction of errors at or below each threshold; monotone by
    construction for sorted thresholds."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no errors to aggregate")
    thresholds = list(thresholds)
    if sorted(thresholds) != thresholds:
        raise ValueError(f"thresholds must be sorted ascending, got {thresholds}")
    return [float((errors <= t).mean()) for t in thresholds]


def f1_vs_rmse(distances, thresholds=RMSE_THRESHOLDS_PX):
    """F1 per distance threshold for a fixed-cardinality detector.

    TP at threshold t counts eyes with distance <= t; the detector emits
    one detection per eye, so each miss is one FP and one FN and
    F1 = 2*TP / (2*TP + FP + FN) = TP / (TP + misses) = hit fraction.
    """
    return accuracy_curve(distances, list(thresholds))


def swap_rate(pred_pairs, gt_pairs):
    """Fraction of eyes whose prediction lands nearer the opposite eye."""
    swapped = 0
    total = 0
    for (pr, pl), (gr, gl) in zip(pred_pairs, gt_pairs):
        for pred, own, other in ((pr, gr, gl), (pl, gl, gr)):
            d_own = np.hypot(pred[0] - own[0], pred[1] - own[1])
            d_other = np.hypot(pred[0] - other[0], pred[1] - other[1])
            swapped += d_other < d_own
            total += 1
    return swapped / total if total else 0.0


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    runs: int
    workers: int


@dataclass
class EvalReport:
    n_images: int
    rel_thresholds: list
    rel_accuracy: list
    rmse_thresholds: list
    rmse_accuracy: list
    f1: list
    swap_rate: float
    per_image_errors: list = field(default_factory=list)
    latency: LatencyStats | None = None

    def to_json(self):
        payload = {
            "n_images": self.n_images,
            "relative_error": dict(
                zip([f"e<={t}" for t in self.rel_thresholds], self.rel_accuracy)
            ),
            "rmse": dict(
                zip([f"<={t:g}px" for t in self.rmse_thresholds], self.rmse_accuracy)
            ),
            "f1": dict(zip([f"<={t:g}px" for t in self.rmse_thresholds], self.f1)),
            "swap_rate": self.swap_rate,
        }
        if self.latency is not None:
            payload["latency_ms"] = {
                "mean": self.latency.mean_ms,
                "p50": self.latency.p50_ms,
                "p95": self.latency.p95_ms,
                "runs": self.latency.runs,
                "workers": self.latency.workers,
            }
        return json.dumps(payload, indent=2)

    def to_text(self):
        lines = [f"images evaluated: {self.n_images}"]
        header = "  ".join(f"e<={t:<5g}" for t in self.rel_thresholds)
        values = "  ".join(f"{v:<7.4f}" for v in self.rel_accuracy)
        lines += ["relative eye error accuracy:", "  " + header, "  " + values]
        header = "  ".join(f"<={t:g}px " for t in self.rmse_thresholds)
        values = "  ".join(f"{v:<7.4f}" for v in self.rmse_accuracy)
        lines += ["per-eye distance accuracy:", "  " + header, "  " + values]
        values = "  ".join(f"{v:<7.4f}" for v in self.f1)
        lines += ["F1 per distance threshold:", "  " + header, "  " + values]
        lines.append(f"left/right swap rate: {self.swap_rate:.4f}")
        if self.latency is not None:
            lines.append(
                f"latency: mean {self.latency.mean_ms:.2f} ms, "
                f"p50 {self.latency.p50_ms:.2f} ms, p95 {self.latency.p95_ms:.2f} ms "
                f"({self.latency.runs} runs, {self.latency.workers} worker)"
            )
        return "\n".join(lines)

    def per_image_csv(self):
        lines = ["image,relative_error"]
        lines += [f"{name},{err:.6f}" for name, err in self.per_image_errors]
        return "\n".join(lines) + "\n"


def evaluate_pairs(pred_pairs, gt_pairs, image_ids=None):
    """Build an EvalReport from aligned (right, left) center pairs."""
    if len(pred_pairs) != len(gt_pairs) or not gt_pairs:
        raise ValueError("prediction/ground-truth counts differ or are empty")
    errors = []
    distances = []
    for (pr, pl), (gr, gl) in zip(pred_pairs, gt_pairs):
        errors.append(relative_eye_error(pr, pl, gr, gl))
        distances.append(float(np.hypot(pr[0] - gr[0], pr[1] - gr[1])))
        distances.append(float(np.hypot(pl[0] - gl[0], pl[1] - gl[1])))
    ids = image_ids if image_ids is not None else [str(i) for i in range(len(errors))]
    return EvalReport(
        n_images=len(gt_pairs),
        rel_thresholds=list(REL_ERROR_THRESHOLDS),
        rel_accuracy=accuracy_curve(errors, list(REL_ERROR_THRESHOLDS)),
        rmse_thresholds=list(RMSE_THRESHOLDS_PX),
        rmse_accuracy=accuracy_curve(distances, list(RMSE_THRESHOLDS_PX)),
        f1=f1_vs_rmse(distances),
        swap_rate=swap_rate(pred_pairs, gt_pairs),
        per_image_errors=list(zip(ids, errors)),
    )


def _worker_count():
    try:
        from threadpoolctl import threadpool_info

        counts = [
            info["num_threads"]
            for info in threadpool_info()
            if info.get("user_api") == "blas"
        ]
        if counts:
            return max(counts)
    except ImportError:
        pass
    return int(os.environ.get("OPENBLAS_NUM_THREADS", "1"))


def benchmark_latency(model, image_size=(123, 96), runs=100, warmup=10, image=None):
    """Wall-clock per full detect call on an (H, W) image, warmup excluded."""
    if image is None:
        rng = np.random.default_rng(0)
        image = rng.integers(0, 255, size=image_size, dtype=np.uint8)
    for _ in range(warmup):
        detect(model, image)
    samples = []
    for _ in range(runs):
        start = time.perf_counter()
        detect(model, image)
        samples.append((time.perf_counter() - start) * 1000.0)
    samples = np.asarray(samples)
    return LatencyStats(
        mean_ms=float(samples.mean()),
        p50_ms=float(np.percentile(samples, 50)),
        p95_ms=float(np.percentile(samples, 95)),
        runs=runs,
        workers=_worker_count(),
    )
