import json

import numpy as np
import pytest

from siameye.metrics import (
    RMSE_THRESHOLDS_PX,
    accuracy_curve,
    benchmark_latency,
    evaluate_pairs,
    f1_vs_rmse,
    relative_eye_error,
    swap_rate,
)


class TestRelativeError:
    def test_perfect_prediction(self):
        assert relative_eye_error((10, 10), (20, 10), (10, 10), (20, 10)) == 0.0

    def test_direct_formula(self):
        # d_r = 2, d_l = 1, inter-eye distance 10
        err = relative_eye_error((10, 12), (20, 11), (10, 10), (20, 10))
        assert err == pytest.approx(0.2)

    def test_swapped_predictions(self):
        gt_r, gt_l = (10.0, 10.0), (20.0, 10.0)
        err = relative_eye_error(gt_l, gt_r, gt_r, gt_l)
        assert err == pytest.approx(1.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pts = rng.uniform(0, 100, (4, 2))
            base = relative_eye_error(*map(tuple, pts))
            for scale in (0.25, 3.0, 1234.5):
                scaled = relative_eye_error(*map(tuple, pts * scale))
                assert scaled == pytest.approx(base, abs=1e-9)

    def test_coincident_gt_rejected(self):
        with pytest.raises(ValueError, match="coincide"):
            relative_eye_error((0, 0), (1, 1), (5, 5), (5, 5))


class TestAccuracyCurve:
    def test_hand_case(self):
        assert accuracy_curve([0.01, 0.2], [0.05, 0.25]) == [0.5, 1.0]

    def test_all_zero_errors(self):
        assert accuracy_curve([0.0] * 5, [0.05, 0.1]) == [1.0, 1.0]

    def test_hand_counted_table(self):
        errors = [0.01, 0.04, 0.06, 0.09, 0.11, 0.14, 0.19, 0.26, 0.3, 0.9]
        curve = accuracy_curve(errors, [0.05, 0.1, 0.15, 0.2, 0.25, 0.5])
        assert curve == [0.2, 0.4, 0.6, 0.7, 0.7, 0.9]

    def test_monotone(self):
        rng = np.random.default_rng(1)
        errors = rng.uniform(0, 1, 50)
        curve = accuracy_curve(errors, sorted(rng.uniform(0, 1, 6)))
        assert all(a <= b for a, b in zip(curve, curve[1:]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no errors"):
            accuracy_curve([], [0.1])

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            accuracy_curve([0.1], [0.2, 0.1])


class TestF1:
    def test_all_within(self):
        assert f1_vs_rmse([1.0, 2.0, 3.0], [5.0]) == [1.0]

    def test_none_within(self):
        assert f1_vs_rmse([50.0, 60.0], [5.0, 10.0]) == [0.0, 0.0]

    def test_half_within_equals_hit_fraction(self):
        # with FP = FN, F1 = 2*(n/2) / (2*(n/2) + n/2 + n/2) = 0.5
        distances = [1.0] * 4 + [99.0] * 4
        assert f1_vs_rmse(distances, [5.0]) == [0.5]

    def test_default_thresholds_monotone(self):
        rng = np.random.default_rng(2)
        curve = f1_vs_rmse(rng.uniform(0, 30, 40))
        assert list(RMSE_THRESHOLDS_PX) == sorted(RMSE_THRESHOLDS_PX)
        assert all(a <= b for a, b in zip(curve, curve[1:]))


class TestSwapRate:
    def test_no_swaps(self):
        preds = [((10, 10), (20, 10))]
        gts = [((10, 10), (20, 10))]
        assert swap_rate(preds, gts) == 0.0

    def test_full_swap(self):
        gts = [((10, 10), (20, 10))]
        preds = [((20, 10), (10, 10))]
        assert swap_rate(preds, gts) == 1.0

    def test_one_sided_swap(self):
        gts = [((10, 10), (20, 10))]
        preds = [((19, 10), (20.5, 10))]  # right prediction near left eye
        assert swap_rate(preds, gts) == 0.5


class TestEvalReport:
    def make_report(self):
        gts = [((10.0, 10.0), (60.0, 10.0)), ((12.0, 40.0), (61.0, 41.0))]
        preds = [((11.0, 10.0), (60.0, 12.0)), ((40.0, 40.0), (61.0, 41.0))]
        return evaluate_pairs(preds, gts, ["a.pgm", "b.pgm"])

    def test_fields_and_ranges(self):
        report = self.make_report()
        assert report.n_images == 2
        assert all(0 <= v <= 1 for v in report.rel_accuracy + report.rmse_accuracy)
        assert all(
            a <= b for a, b in zip(report.rel_accuracy, report.rel_accuracy[1:])
        )

    def test_json_round_trip(self):
        payload = json.loads(self.make_report().to_json())
        assert payload["n_images"] == 2
        assert "relative_error" in payload and "f1" in payload

    def test_text_table(self):
        text = self.make_report().to_text()
        assert "relative eye error" in text
        assert "swap rate" in text

    def test_csv(self):
        csv = self.make_report().per_image_csv()
        lines = csv.strip().splitlines()
        assert lines[0] == "image,relative_error"
        assert len(lines) == 3

    def test_mismatched_counts_rejected(self):
        with pytest.raises(ValueError, match="counts"):
            evaluate_pairs([], [])


class TestLatency:
    def test_smoke_stats(self):
        from siameye.backbone import fold_batchnorm
        from tests.test_head import tiny_model

        model = tiny_model()
        model.backbone = fold_batchnorm(model.backbone)
        stats = benchmark_latency(model, image_size=(48, 64), runs=8, warmup=2)
        assert stats.runs == 8
        assert 0 < stats.p50_ms <= stats.p95_ms
        assert stats.mean_ms > 0
        assert stats.workers >= 1

    @pytest.fixture(scope="class")
    def folded_full_width(self):
        from siameye.backbone import build_backbone, fold_batchnorm
        from siameye.head import DetectorModel, build_reference_feature
        from tests.test_backbone import random_trained_stats

        bb = build_backbone(0, base_width=32)
        random_trained_stats(bb, seed=2)
        folded = fold_batchnorm(bb)
        chip = np.random.default_rng(1).integers(0, 255, (24, 24), dtype=np.uint8)
        return DetectorModel(
            backbone=folded,
            head_weight=np.zeros((2, 128), dtype=np.float32),
            ref_right=build_reference_feature(folded, chip, "right"),
            ref_left=build_reference_feature(folded, chip, "left"),
            reference_image=chip,
        )

    def test_scales_roughly_linearly_with_pixels(self, folded_full_width):
        # 4x the pixels should land in a 2.5x-5x time band
        small = benchmark_latency(folded_full_width, (96, 96), runs=30, warmup=6)
        large = benchmark_latency(folded_full_width, (192, 192), runs=30, warmup=6)
        ratio = large.p50_ms / small.p50_ms
        assert 2.5 <= ratio <= 5.0, f"scaling ratio {ratio:.2f}"

    def test_run_to_run_stability(self, folded_full_width):
        stats = benchmark_latency(folded_full_width, (96, 96), runs=60, warmup=10)
        assert stats.p95_ms / stats.p50_ms < 1.5, (
            f"p95/p50 = {stats.p95_ms / stats.p50_ms:.2f}"
        )
