"""Command-line pipeline: synth, train, detect, eval, bench.

Configuration is a flat dotted-key namespace.  Values resolve in order:
built-in defaults, then a JSON config file (--config), then repeated
--set key=value overrides, then dedicated flags.  Unknown keys are
rejected and the effective configuration is echoed to the run log.

The SIAMEYE_WORKERS environment variable pins the BLAS worker count
(default 1); it must be applied before numpy loads, which is why the heavy
imports live inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

WORKERS_ENV = "SIAMEYE_WORKERS"


def _configure_threads():
    workers = os.environ.get(WORKERS_ENV, "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, workers)


def _parse_bool(text):
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMAS = {
    "synth": {
        "synth.n": (int, 100),
        "synth.seed": (int, 0),
        "synth.width": (int, 128),
        "synth.height": (int, 96),
        "synth.iris_min": (float, 4.0),
        "synth.iris_max": (float, 7.0),
        "synth.distance_min": (float, 40.0),
        "synth.distance_max": (float, 56.0),
        "synth.noise_sigma": (float, 2.5),
    },
    "train": {
        "train.iterations": (int, 2000),
        "train.batch_size": (int, 16),
        "train.seed": (int, 0),
        "train.lr_first_epoch": (float, 0.1),
        "train.lr_rest": (float, 0.01),
        "train.weight_decay": (float, 1e-4),
        "train.base_width": (int, 32),
        "train.checkpoint_interval": (int, 500),
        "train.val_fraction": (float, 0.05),
        "cosface.s": (float, 30.0),
        "cosface.margin": (float, 0.1),
        "cosface.strict": (_parse_bool, False),
        "loss.beta": (float, 1.0),
        "loss.gamma": (float, 1.0),
    },
    "detect": {
        "detect.folded": (_parse_bool, True),
    },
    "eval": {},
    "bench": {
        "bench.size": (str, "123x96"),
        "bench.runs": (int, 100),
        "bench.folded": (_parse_bool, True),
    },
}


def resolve_config(command, config_path=None, overrides=()):
    schema = SCHEMAS[command]
    values = {key: default for key, (_, default) in schema.items()}

    def apply(key, raw, source):
        if key not in schema:
            raise ValueError(f"unknown config key {key!r} (from {source})")
        parse = schema[key][0]
        try:
            values[key] = parse(raw) if isinstance(raw, str) else type(values[key])(raw)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"bad value for {key!r}: {raw!r} ({exc})") from None

    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
        for key, raw in loaded.items():
            apply(key, raw, config_path)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key.strip(), raw.strip(), "--set")
    return values


def _echo_config(command, values, out_dir=None):
    effective = {"command": command, **values}
    print(json.dumps(effective, indent=2))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.json").write_text(
            json.dumps(effective, indent=2) + "\n", encoding="utf-8"
        )


def cmd_synth(args):
    from .pgm import write_pgm
    from .synth import SynthConfig, synth_generate, write_annotations

    cfg_values = resolve_config("synth", args.config, args.set or [])
    if args.n is not None:
        cfg_values["synth.n"] = args.n
    if args.seed is not None:
        cfg_values["synth.seed"] = args.seed
    out = Path(args.out)
    _echo_config("synth", cfg_values, out)
    config = SynthConfig(
        seed=cfg_values["synth.seed"],
        width=cfg_values["synth.width"],
        height=cfg_values["synth.height"],
        iris_radius=(cfg_values["synth.iris_min"], cfg_values["synth.iris_max"]),
        eye_distance=(
            cfg_values["synth.distance_min"],
            cfg_values["synth.distance_max"],
        ),
        noise_sigma=cfg_values["synth.noise_sigma"],
    )
    samples = synth_generate(config, cfg_values["synth.n"])
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for image, ann in samples:
        write_pgm(images_dir / ann.image, image)
    write_annotations(
        out / "annotations.jsonl", config.width, config.height, [a for _, a in samples]
    )
    print(
        f"wrote {len(samples)} images ({config.width}x{config.height}) to {images_dir}"
    )
    return 0


def _load_corpus(corpus_dir):
    from .pgm import read_pgm
    from .synth import load_annotations

    corpus_dir = Path(corpus_dir)
    ann_path = corpus_dir / "annotations.jsonl"
    if not ann_path.exists():
        raise FileNotFoundError(f"no annotation file at {ann_path}")
    _, annotations = load_annotations(ann_path)
    corpus = []
    for ann in annotations:
        corpus.append((read_pgm(corpus_dir / "images" / ann.image), ann))
    return corpus


def cmd_train(args):
    import numpy as np

    from .losses import CosFaceParams, LossWeights
    from .train import TrainConfig, train

    cfg_values = resolve_config("train", args.config, args.set or [])
    if args.iterations is not None:
        cfg_values["train.iterations"] = args.iterations
    if args.seed is not None:
        cfg_values["train.seed"] = args.seed
    out = Path(args.out)
    _echo_config("train", cfg_values, out)
    corpus = _load_corpus(args.corpus)
    config = TrainConfig(
        lr_first_epoch=cfg_values["train.lr_first_epoch"],
        lr_rest=cfg_values["train.lr_rest"],
        weight_decay=cfg_values["train.weight_decay"],
        batch_size=cfg_values["train.batch_size"],
        total_iterations=cfg_values["train.iterations"],
        cosface=CosFaceParams(
            s=cfg_values["cosface.s"],
            margin=cfg_values["cosface.margin"],
            strict=cfg_values["cosface.strict"],
        ),
        loss_weights=LossWeights(
            heatmap=cfg_values["loss.beta"], position=cfg_values["loss.gamma"]
        ),
        seed=cfg_values["train.seed"],
        checkpoint_interval=cfg_values["train.checkpoint_interval"],
        base_width=cfg_values["train.base_width"],
    )
    val_fraction = cfg_values["train.val_fraction"]
    val = None
    if 0 < val_fraction < 1 and len(corpus) >= 2 / val_fraction:
        rng = np.random.default_rng((config.seed, 555))
        order = rng.permutation(len(corpus))
        n_val = max(1, int(round(val_fraction * len(corpus))))
        val = [corpus[i] for i in order[:n_val]]
        corpus = [corpus[i] for i in order[n_val:]]
    result = train(
        config,
        corpus,
        val=val,
        log_path=out / "train_log.jsonl",
        checkpoint_path=out / "checkpoint.siamw",
        resume_from=args.resume,
    )
    print(
        f"trained {result.iterations} iterations on {len(corpus)} images; "
        f"checkpoint at {out / 'checkpoint.siamw'}"
    )
    return 0


def _load_model(checkpoint_path, folded):
    from .backbone import fold_batchnorm
    from .train import load_checkpoint

    model, _, _ = load_checkpoint(checkpoint_path)
    if folded:
        model.backbone = fold_batchnorm(model.backbone)
    return model


def cmd_detect(args):
    from .head import detect, detection_record
    from .pgm import read_pgm

    cfg_values = resolve_config("detect", args.config, args.set or [])
    if args.no_fold:
        cfg_values["detect.folded"] = False
    _echo_config("detect", cfg_values)
    model = _load_model(args.checkpoint, cfg_values["detect.folded"])
    inputs = []
    for item in args.images:
        path = Path(item)
        if path.is_dir():
            inputs.extend(sorted(path.glob("*.pgm")))
        else:
            inputs.append(path)
    if not inputs:
        print("no input images", file=sys.stderr)
        return 1
    out_fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    failures = 0
    try:
        for path in inputs:
            try:
                image = read_pgm(path)
                right, left = detect(model, image)
            except (ValueError, OSError) as exc:
                failures += 1
                print(f"error: {path}: {exc}", file=sys.stderr)
                continue
            out_fh.write(json.dumps(detection_record(path.name, right, left)) + "\n")
    finally:
        if args.out:
            out_fh.close()
    if failures == len(inputs):
        return 1
    return 0


def cmd_eval(args):
    from .metrics import evaluate_pairs
    from .synth import load_annotations

    cfg_values = resolve_config("eval", args.config, args.set or [])
    _echo_config("eval", cfg_values)
    detections = {}
    with open(args.detections, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            detections[rec["image"]] = rec
    _, annotations = load_annotations(args.annotations)
    pred_pairs, gt_pairs, ids = [], [], []
    missing = []
    for ann in annotations:
        rec = detections.get(ann.image)
        if rec is None:
            missing.append(ann.image)
            continue
        pred_pairs.append(
            ((rec["right_x"], rec["right_y"]), (rec["left_x"], rec["left_y"]))
        )
        gt_pairs.append((ann.right, ann.left))
        ids.append(ann.image)
    if missing:
        print(f"warning: {len(missing)} annotated images lack detections", file=sys.stderr)
    if not gt_pairs:
        print("no overlapping images between detections and annotations", file=sys.stderr)
        return 1
    report = evaluate_pairs(pred_pairs, gt_pairs, ids)
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(report.per_image_csv(), encoding="utf-8")
    return 0


def cmd_bench(args):
    from .metrics import benchmark_latency

    cfg_values = resolve_config("bench", args.config, args.set or [])
    if args.runs is not None:
        cfg_values["bench.runs"] = args.runs
    if args.size is not None:
        cfg_values["bench.size"] = args.size
    if args.no_fold:
        cfg_values["bench.folded"] = False
    _echo_config("bench", cfg_values)
    try:
        h, w = (int(part) for part in cfg_values["bench.size"].lower().split("x"))
    except ValueError:
        print(f"bad --size {cfg_values['bench.size']!r}, want HxW", file=sys.stderr)
        return 1
    model = _load_model(args.checkpoint, cfg_values["bench.folded"])
    stats = benchmark_latency(model, image_size=(h, w), runs=cfg_values["bench.runs"])
    print(
        json.dumps(
            {
                "size": f"{h}x{w}",
                "mean_ms": round(stats.mean_ms, 3),
                "p50_ms": round(stats.p50_ms, 3),
                "p95_ms": round(stats.p95_ms, 3),
                "runs": stats.runs,
                "workers": stats.workers,
                "folded": cfg_values["bench.folded"],
            },
            indent=2,
        )
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="siameye",
        description="Siamese eye-center detector: synthesize, train, detect, "
        "evaluate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with flat dotted config keys")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--corpus", required=True, help="corpus directory from synth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="resume from an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="detect eye centers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+", help="PGM files or directories")
    p.add_argument("--out", help="detections JSONL (default stdout)")
    p.add_argument("--no-fold", action="store_true", help="skip batchnorm folding")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="score detections")
    p.add_argument("--detections", required=True, help="JSONL from detect")
    p.add_argument("--annotations", required=True, help="ground-truth JSONL")
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--csv", help="write per-image errors as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="measure detect latency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", help="input size as HxW (default 123x96)")
    p.add_argument("--runs", type=int)
    p.add_argument("--no-fold", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
