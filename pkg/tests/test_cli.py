import json
import os
import subprocess
import sys

import pytest

from siameye.cli import main, resolve_config

CORPUS_ARGS = [
    "--set", "synth.width=64",
    "--set", "synth.height=48",
    "--set", "synth.iris_min=3",
    "--set", "synth.iris_max=4",
    "--set", "synth.distance_min=24",
    "--set", "synth.distance_max=29",
]

TRAIN_ARGS = [
    "--set", "train.batch_size=2",
    "--set", "train.base_width=8",
    "--set", "train.val_fraction=0",
    "--set", "train.checkpoint_interval=2",
]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(["synth", "--out", str(out), "--n", "6", "--seed", "4", *CORPUS_ARGS])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("run")
    code = main(
        [
            "train",
            "--corpus", str(corpus_dir),
            "--out", str(out),
            "--iterations", "2",
            *TRAIN_ARGS,
        ]
    )
    assert code == 0
    return out


class TestSynthCommand:
    def test_writes_corpus(self, corpus_dir):
        images = sorted((corpus_dir / "images").glob("*.pgm"))
        assert len(images) == 6
        assert (corpus_dir / "annotations.jsonl").exists()
        assert (corpus_dir / "run_config.json").exists()

    def test_rerun_identical_bytes(self, corpus_dir, tmp_path):
        out2 = tmp_path / "again"
        assert (
            main(["synth", "--out", str(out2), "--n", "6", "--seed", "4", *CORPUS_ARGS])
            == 0
        )
        for name in ["annotations.jsonl"] + [f"images/im_{i:05d}.pgm" for i in range(6)]:
            assert (corpus_dir / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_zero_images_rejected(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path / "x"), "--n", "0", *CORPUS_ARGS])
        assert code == 1
        assert ">= 1" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        code = main(
            ["synth", "--out", str(tmp_path / "x"), "--set", "synth.bogus=1"]
        )
        assert code == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_config_file_applies(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"synth.n": 2, "synth.noise_sigma": 1.0}))
        values = resolve_config("synth", str(cfg_file), ["synth.n=3"])
        assert values["synth.n"] == 3  # --set beats the file
        assert values["synth.noise_sigma"] == 1.0

    def test_effective_config_echoed(self, corpus_dir):
        run_config = json.loads((corpus_dir / "run_config.json").read_text())
        assert run_config["command"] == "synth"
        assert run_config["synth.width"] == 64


class TestTrainCommand:
    def test_artifacts(self, run_dir):
        assert (run_dir / "checkpoint.siamw").exists()
        log = [
            json.loads(line)
            for line in (run_dir / "train_log.jsonl").read_text().splitlines()
        ]
        assert log and {"iter", "L", "Ls_R", "Ls_L", "Lp_R", "Lp_L", "lr"} <= set(log[0])

    def test_missing_corpus_path(self, tmp_path, capsys):
        code = main(
            ["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
        )
        assert code == 1
        assert "nope" in capsys.readouterr().err


class TestDetectCommand:
    def test_detect_writes_records(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "det.jsonl"
        code = main(
            [
                "detect",
                "--checkpoint", str(run_dir / "checkpoint.siamw"),
                str(corpus_dir / "images"),
                "--out", str(out),
            ]
        )
        assert code == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(records) == 6
        expected = {
            "image", "right_x", "right_y", "left_x", "left_y",
            "right_score", "left_score",
        }
        assert set(records[0]) == expected

    def test_fold_agreement(self, corpus_dir, run_dir, tmp_path):
        folded, unfolded = tmp_path / "f.jsonl", tmp_path / "u.jsonl"
        ckpt = str(run_dir / "checkpoint.siamw")
        image = str(corpus_dir / "images" / "im_00000.pgm")
        assert main(["detect", "--checkpoint", ckpt, image, "--out", str(folded)]) == 0
        assert (
            main(
                ["detect", "--checkpoint", ckpt, image, "--out", str(unfolded), "--no-fold"]
            )
            == 0
        )
        a = json.loads(folded.read_text())
        b = json.loads(unfolded.read_text())
        for key in ("right_x", "right_y", "left_x", "left_y"):
            assert abs(a[key] - b[key]) <= 0.5

    def test_bad_file_nonzero_when_all_fail(self, run_dir, tmp_path, capsys):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"not an image")
        code = main(
            ["detect", "--checkpoint", str(run_dir / "checkpoint.siamw"), str(bad)]
        )
        assert code == 1
        assert "bad.pgm" in capsys.readouterr().err

    def test_partial_failure_still_succeeds(self, corpus_dir, run_dir, tmp_path):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"nope")
        out = tmp_path / "out.jsonl"
        code = main(
            [
                "detect",
                "--checkpoint", str(run_dir / "checkpoint.siamw"),
                str(bad),
                str(corpus_dir / "images" / "im_00001.pgm"),
                "--out", str(out),
            ]
        )
        assert code == 0
        assert len(out.read_text().splitlines()) == 1


class TestEvalCommand:
    def test_report(self, corpus_dir, run_dir, tmp_path, capsys):
        det = tmp_path / "det.jsonl"
        main(
            [
                "detect",
                "--checkpoint", str(run_dir / "checkpoint.siamw"),
                str(corpus_dir / "images"),
                "--out", str(det),
            ]
        )
        report_path = tmp_path / "report.json"
        csv_path = tmp_path / "errors.csv"
        code = main(
            [
                "eval",
                "--detections", str(det),
                "--annotations", str(corpus_dir / "annotations.jsonl"),
                "--out", str(report_path),
                "--csv", str(csv_path),
            ]
        )
        assert code == 0
        payload = json.loads(report_path.read_text())
        assert payload["n_images"] == 6
        assert "relative eye error" in capsys.readouterr().out
        assert csv_path.read_text().startswith("image,relative_error")


class TestBenchCommand:
    def test_bench_smoke(self, run_dir, capsys):
        code = main(
            [
                "bench",
                "--checkpoint", str(run_dir / "checkpoint.siamw"),
                "--size", "48x64",
                "--runs", "3",
            ]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out.split("}\n")[-2] + "}")
        assert payload["runs"] == 3
        assert payload["mean_ms"] > 0

    def test_bad_size_rejected(self, run_dir, capsys):
        code = main(
            ["bench", "--checkpoint", str(run_dir / "checkpoint.siamw"), "--size", "big"]
        )
        assert code == 1


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        env = dict(os.environ, SIAMEYE_WORKERS="1")
        proc = subprocess.run(
            [sys.executable, "-m", "siameye.cli", "--help"],
            capture_output=True,
            text=True,
            env=env,
        )
        assert proc.returncode == 0
        assert "synth" in proc.stdout and "bench" in proc.stdout
