"""Binary PPM (P6) images and PGM (P5) semantic masks.

Images live in [-1, 1] and are linearly mapped to bytes; masks store one
continual class id per byte.
"""

import numpy as np

from .labels import SemanticMap, ValidationError


def write_ppm(path, image):
    """Write a [1,3,H,W] or [3,H,W] image in [-1,1] as binary PPM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValidationError(f"expected a single image, got batch shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValidationError(f"expected a [3,H,W] image, got shape {arr.shape}")
    h, w = arr.shape[1], arr.shape[2]
    bytes_ = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Read a binary PPM into a [1,3,H,W] float64 image in [-1,1]."""
    w, h, data = _read_netpbm(path, b"P6", 3)
    arr = data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64)
    return (arr / 127.5 - 1.0)[None]


def write_pgm(path, smap):
    """Write a semantic map as binary PGM, one class id per byte."""
    labels = smap.labels
    if labels.max() > 255 or labels.min() < 0:
        raise ValidationError(f"class ids must fit in a byte, got max {labels.max()}")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def read_pgm(path):
    w, h, data = _read_netpbm(path, b"P5", 1)
    return SemanticMap(labels=data.reshape(h, w).astype(np.int64))


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        tokens.append(raw[start:i])
    if tokens[0] != magic:
        raise ValidationError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 is supported, got {maxval}")
    i += 1
    data = np.frombuffer(raw[i:i + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels:
        raise ValidationError(f"{path}: truncated pixel data")
    return w, h, data
