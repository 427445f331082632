"""Binary PPM (P6, maxval 255) images stored as float arrays in [0, 1]."""

from pathlib import Path

import numpy as np

from lacrange.errors import FormatError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray):
    """Write ``img`` ([H, W, 3] floats in [0, 1] or uint8)."""
    img = np.asarray(img)
    data = img if img.dtype == np.uint8 else to_uint8(img)
    h, w, c = data.shape
    if c != 3:
        raise FormatError("PPM images need exactly 3 channels")
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: pixel payload truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0
