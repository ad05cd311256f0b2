"""Binary netpbm readers/writers (PGM P5, PPM P6), maxval 255 only."""

import numpy as np

from .errors import BadImageShape


def _read_header_tokens(data: bytes, count: int):
    """First `count` whitespace-separated tokens after the magic, skipping # comments."""
    tokens = []
    i = 2  # past magic
    while len(tokens) < count:
        if i >= len(data):
            raise BadImageShape("truncated netpbm header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # header ends with exactly one whitespace byte


def read_image(path) -> np.ndarray:
    """Read a P5 (gray) or P6 (rgb) file into an (H, W, C) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise BadImageShape(f"{path}: expected P5 or P6 magic, got {magic!r}")
    (w, h, maxval), start = _read_header_tokens(data, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise BadImageShape(f"{path}: only maxval 255 supported, got {maxval}")
    n = w * h * channels
    raster = data[start : start + n]
    if len(raster) != n:
        raise BadImageShape(f"{path}: raster has {len(raster)} bytes, expected {n}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary P5."""
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim != 2:
        raise BadImageShape(f"PGM writer needs (H, W), got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadImageShape(f"PPM writer needs (H, W, 3), got shape {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())
