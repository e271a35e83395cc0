"""Binary PGM (P5) image files, 8-bit grayscale."""

from __future__ import annotations

import numpy as np


def write_pgm(path, image):
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 image, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _tokens(data):
    """Header tokens, skipping whitespace and # comments; yields (token,
    offset-after-token)."""
    i = 0
    while i < len(data):
        ch = data[i : i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            yield data[i:j], j
            i = j


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    end = 0
    for token, offset in _tokens(data):
        fields.append(token)
        end = offset
        if len(fields) == 4:
            break
    if len(fields) < 4 or fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    start = end + 1  # single whitespace byte after maxval
    raw = data[start : start + w * h]
    if len(raw) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
