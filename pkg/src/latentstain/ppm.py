"""Binary PPM (P6, maxval 255) image I/O for RGB patches."""
from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    pass


def write_ppm(path, pixels: np.ndarray):
    """Write an (H, W, 3) uint8 array as canonical P6."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise PpmError(f"expected (H,W,3) uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P6":
        raise PpmError(f"{path}: not a P6 file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise PpmError(f"{path}: bad header field") from e
    if maxval != 255:
        raise PpmError(f"{path}: unsupported maxval {maxval}")
    if w <= 0 or h <= 0:
        raise PpmError(f"{path}: bad dimensions {w}x{h}")
    data = raw[pos:pos + 3 * w * h]
    if len(data) != 3 * w * h:
        raise PpmError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()
