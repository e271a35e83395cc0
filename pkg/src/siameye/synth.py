"""Synthetic NIR-style partial-face corpus.

Each sample is a grayscale frame with exactly two rendered eyes (bright
sclera ellipse, dark iris disc, darker pupil, one specular glint) over a
low-frequency background with additive Gaussian noise.  Ground truth is
the pair of pupil centers.  Generation is a pure function of
(config, sample index): per-sample RNG streams are seeded by (seed, index)
so results never depend on worker count or ordering.

Side convention: "right"/"left" are the subject's anatomical sides, so the
right eye sits at the smaller x coordinate.  The annotation file header
records this.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .losses import round_half_up

SIDE_CONVENTION = "subject"
ANNOTATION_VERSION = 1


@dataclass
class SynthConfig:
    seed: int = 0
    width: int = 128
    height: int = 96
    iris_radius: tuple = (4.0, 7.0)
    eye_distance: tuple = (40.0, 56.0)
    tilt_jitter: float = 4.0  # max vertical offset of either eye from the pair line
    background_amplitude: float = 12.0
    noise_sigma: float = 2.5

    def margin(self):
        # keep the sclera, canthus and their soft edges inside the frame
        return int(np.ceil(3.2 * self.iris_radius[1])) + 4

    def __post_init__(self):
        if self.iris_radius[0] > self.iris_radius[1] or self.iris_radius[0] <= 0:
            raise ValueError(f"bad iris radius range {self.iris_radius}")
        if self.eye_distance[0] > self.eye_distance[1] or self.eye_distance[0] <= 0:
            raise ValueError(f"bad eye distance range {self.eye_distance}")
        m = self.margin()
        if self.width - 2 * m < self.eye_distance[1]:
            raise ValueError(
                f"cannot fit two eyes: width {self.width} with margin {m} "
                f"cannot hold distance {self.eye_distance[1]}"
            )
        if self.height <= 2 * m + 2 * self.tilt_jitter:
            raise ValueError(
                f"cannot fit two eyes: height {self.height} too small for margin {m}"
            )


@dataclass
class Annotation:
    image: str
    right: tuple  # (x, y) pixel center of the subject's right eye
    left: tuple


def _background(cfg, rng):
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(105.0, 150.0)
    img = np.full((h, w), base)
    for _ in range(3):
        fx = rng.uniform(0.3, 2.0) / w
        fy = rng.uniform(0.3, 2.0) / h
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.4, 1.0) * cfg.background_amplitude
        img += amp * np.cos(2 * np.pi * (fx * xs + fy * ys) + phase)
    img += rng.uniform(-0.15, 0.15) * (ys - h / 2)
    return img


def _blend_ellipse(img, cx, cy, ax, ay, value, edge=1.3):
    h, w = img.shape
    x0 = max(int(np.floor(cx - ax - 2 * edge)), 0)
    x1 = min(int(np.ceil(cx + ax + 2 * edge)) + 1, w)
    y0 = max(int(np.floor(cy - ay - 2 * edge)), 0)
    y1 = min(int(np.ceil(cy + ay + 2 * edge)) + 1, h)
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    d = np.sqrt(((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2)
    alpha = np.clip((1.0 - d) * min(ax, ay) / edge, 0.0, 1.0)
    patch = img[y0:y1, x0:x1]
    patch += alpha * (value - patch)


def render_eye(img, cx, cy, radius, nose_dx=1.0, glint_offset=(0.0, 0.0)):
    """Draw one eye; the annotated center is the pupil center.

    Eyes are chiral, as real ones are: the sclera reaches further toward
    the nose, where a darker canthus sits, and the lid shadow is biased
    the same way.  `nose_dx` is the sign of +x toward the subject's nose,
    so a left eye is exactly the mirror image of a right eye.
    """
    _blend_ellipse(img, cx + nose_dx * 0.9 * radius, cy - 1.4 * radius,
                   2.2 * radius, 0.5 * radius, 80.0)
    _blend_ellipse(img, cx - nose_dx * 0.2 * radius, cy, 2.0 * radius,
                   1.5 * radius, 165.0)
    _blend_ellipse(img, cx + nose_dx * 0.9 * radius, cy + 0.1 * radius,
                   1.5 * radius, 1.2 * radius, 215.0)
    _blend_ellipse(img, cx + nose_dx * 2.0 * radius, cy + 0.25 * radius,
                   1.0 * radius, 0.7 * radius, 50.0)
    _blend_ellipse(img, cx, cy, radius, radius, 55.0)
    _blend_ellipse(img, cx, cy, 0.45 * radius, 0.45 * radius, 22.0)
    gx, gy = glint_offset
    _blend_ellipse(
        img, cx + gx, cy + gy, max(0.18 * radius, 0.9), max(0.18 * radius, 0.9), 235.0
    )


def eye_template(cfg, size=24, side="right", radius=None):
    """Canonical eye chip on a flat background, used as a matching target."""
    img = np.full((size, size), 128.0)
    r = radius if radius is not None else 0.5 * sum(cfg.iris_radius)
    center = size // 2
    render_eye(img, center, center, r, nose_dx=1.0 if side == "right" else -1.0)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_sample(cfg, index):
    """One (image, Annotation) pair, deterministic in (cfg.seed, index)."""
    rng = np.random.default_rng((cfg.seed, index))
    img = _background(cfg, rng)
    m = cfg.margin()
    distance = rng.uniform(*cfg.eye_distance)
    pair_cx = rng.uniform(m + distance / 2, cfg.width - 1 - m - distance / 2)
    pair_cy = rng.uniform(m + cfg.tilt_jitter, cfg.height - 1 - m - cfg.tilt_jitter)
    right = (
        pair_cx - distance / 2,
        pair_cy + rng.uniform(-cfg.tilt_jitter, cfg.tilt_jitter),
    )
    left = (
        pair_cx + distance / 2,
        pair_cy + rng.uniform(-cfg.tilt_jitter, cfg.tilt_jitter),
    )
    # subtle nose bridge between and below the eyes: facial context that
    # helps disambiguate the two (mirror image) eye classes
    ridge_brightness = min(float(img.mean()) + 22.0, 185.0)
    _blend_ellipse(
        img,
        pair_cx,
        pair_cy + 0.4 * distance,
        0.12 * distance,
        0.7 * distance,
        ridge_brightness,
        edge=3.0,
    )
    # illumination falloff of a face-centered NIR flash: brightness drops
    # away from the point between the eyes, so each eye's temple side is
    # darker than its nose side
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    falloff = (
        1.0
        - 0.85 * ((xs - pair_cx) / (0.45 * cfg.width)) ** 2
        - 0.25 * ((ys - pair_cy) / cfg.height) ** 2
    )
    img *= np.maximum(falloff, 0.25)
    for (cx, cy), nose_dx in ((right, 1.0), (left, -1.0)):
        radius = rng.uniform(*cfg.iris_radius)
        glint = rng.uniform(-0.25 * radius, 0.25 * radius, size=2)
        render_eye(img, cx, cy, radius, nose_dx, tuple(glint))
    img += rng.normal(0.0, cfg.noise_sigma, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    ann = Annotation(
        image=f"im_{index:05d}.pgm",
        right=(round(right[0], 3), round(right[1], 3)),
        left=(round(left[0], 3), round(left[1], 3)),
    )
    return img, ann


def synth_generate(cfg, n):
    """Generate n samples; bitwise-identical for a fixed (cfg, n)."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    return [generate_sample(cfg, i) for i in range(n)]


def flip_horizontal(image):
    return np.asarray(image)[:, ::-1].copy()


def crop_eye(image, center, size=24):
    """A size x size chip centered on the given point; pixels outside the
    frame are filled by edge replication."""
    image = np.asarray(image)
    h, w = image.shape
    tx = round_half_up(center[0]) - size // 2
    ty = round_half_up(center[1]) - size // 2
    xs = np.clip(np.arange(tx, tx + size), 0, w - 1)
    ys = np.clip(np.arange(ty, ty + size), 0, h - 1)
    return image[np.ix_(ys, xs)].copy()


def histogram_stretch(image):
    """Linear stretch mapping the 1st/99th percentiles onto 0/255.

    A constant image (degenerate range) maps to all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, (1.0, 99.0))
    if hi - lo < 1e-9:
        return np.zeros(image.shape, dtype=np.uint8)
    out = (image - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def build_average_reference(chips, cap=128):
    """Histogram-stretched pixel-wise mean of up to `cap` eye chips."""
    if len(chips) == 0:
        raise ValueError("need at least one chip to build a reference")
    chips = [np.asarray(c) for c in chips[:cap]]
    shape = chips[0].shape
    if any(c.shape != shape for c in chips):
        raise ValueError("all chips must share one shape")
    mean = np.mean(np.stack([c.astype(np.float64) for c in chips]), axis=0)
    return histogram_stretch(mean)


def annotation_header(width, height):
    return {
        "version": ANNOTATION_VERSION,
        "width": width,
        "height": height,
        "side_convention": SIDE_CONVENTION,
    }


def write_annotations(path, width, height, annotations):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(annotation_header(width, height)) + "\n")
        for ann in annotations:
            record = {
                "image": ann.image,
                "rx": ann.right[0],
                "ry": ann.right[1],
                "lx": ann.left[0],
                "ly": ann.left[1],
            }
            fh.write(json.dumps(record) + "\n")


def load_annotations(path):
    """Parse an annotation file; returns (header, [Annotation]).

    Malformed records are rejected with their line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise ValueError(f"{path}: empty annotation file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line 1: invalid header: {exc}") from None
    for key in ("version", "width", "height", "side_convention"):
        if key not in header:
            raise ValueError(f"{path}: line 1: header missing {key!r}")
    width, height = header["width"], header["height"]
    annotations = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from None
        missing = [k for k in ("image", "rx", "ry", "lx", "ly") if k not in rec]
        if missing:
            raise ValueError(f"{path}: line {lineno}: missing fields {missing}")
        for key in ("rx", "lx"):
            if not 0 <= rec[key] <= width - 1:
                raise ValueError(
                    f"{path}: line {lineno}: {key}={rec[key]} outside [0, {width - 1}]"
                )
        for key in ("ry", "ly"):
            if not 0 <= rec[key] <= height - 1:
                raise ValueError(
                    f"{path}: line {lineno}: {key}={rec[key]} outside [0, {height - 1}]"
                )
        annotations.append(
            Annotation(
                image=rec["image"],
                right=(rec["rx"], rec["ry"]),
                left=(rec["lx"], rec["ly"]),
            )
        )
    return header, annotations
