"""Range-image rendering to PPM for visual inspection."""

from __future__ import annotations

import numpy as np

from lacrange.dataset_io.ppm import write_ppm
from lacrange.errors import ClassRangeError, DimensionError


def colorize_labels(labels: np.ndarray, mask: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """``[H, W, 3]`` uint8 image: palette colour per masked pixel, black elsewhere."""
    labels = np.asarray(labels)
    palette = np.asarray(palette, dtype=np.uint8)
    if labels.shape != mask.shape:
        raise DimensionError(f"labels {labels.shape} do not match mask {mask.shape}")
    shown = labels[mask]
    if shown.size and (shown.min() < 0 or shown.max() >= len(palette)):
        raise ClassRangeError(f"label ids outside the {len(palette)}-colour palette")
    img = np.zeros(labels.shape + (3,), dtype=np.uint8)
    img[mask] = palette[shown]
    return img


def colorize_channel(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grey ramp over the masked min..max of a real-valued channel."""
    values = np.asarray(values, dtype=np.float64)
    img = np.zeros(values.shape + (3,), dtype=np.uint8)
    if mask.any():
        v = values[mask]
        lo, hi = v.min(), v.max()
        g = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
        img[mask] = np.round(g * 255.0).astype(np.uint8)[:, None]
    return img


def render_rv(data: np.ndarray, mask: np.ndarray, path, palette: np.ndarray | None = None):
    """Write labels (with ``palette``) or a real channel (without) as a PPM."""
    img = colorize_labels(data, mask, palette) if palette is not None else colorize_channel(data, mask)
    write_ppm(path, img)
    return img
