"""Spherical range-view projection, RV-RGB painting, back-projection and kNN voting."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lacrange.dataset_io.synthetic import paint_cloud
from lacrange.dataset_io.types import CameraModel, PointCloud
from lacrange.errors import ConfigError, DimensionError, FormatError, InvalidInputError

GEOM_CHANNELS = ("x", "y", "z", "remission", "range")
RGB_CHANNELS = ("r", "g", "b")
SENTINEL = -1


@dataclass(frozen=True)
class RVConfig:
    height: int = 32
    width: int = 1024
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(-25.0)
    collision_rule: str = "keep-nearest-range"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError("range image dimensions must be >= 1")
        if not self.fov_up > self.fov_down:
            raise ConfigError("fov_up must exceed fov_down")
        if self.collision_rule != "keep-nearest-range":
            raise ConfigError(f"unsupported collision rule {self.collision_rule!r}")


KITTI_RV = RVConfig(64, 2048)


@dataclass
class RangeImage:
    """H x W projection of a cloud.

    ``channels`` is ``[C, H, W]`` with names in ``channel_names``; unmasked
    pixels hold zeros.  ``index_map`` stores the surviving point per pixel or
    ``SENTINEL``.  ``proj_row``/``proj_col`` give every point's pixel, including
    points that lost a collision.
    """

    channels: np.ndarray
    channel_names: tuple
    mask: np.ndarray
    index_map: np.ndarray
    proj_row: np.ndarray
    proj_col: np.ndarray
    point_range: np.ndarray
    rgb_mask: np.ndarray | None = None
    n_dropped: int = 0
    dropped: np.ndarray | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def pixel(self) -> np.ndarray:
        return np.stack([self.proj_row, self.proj_col], axis=1)

    def channel(self, name: str) -> np.ndarray:
        return self.channels[self.channel_names.index(name)]

    @property
    def range(self) -> np.ndarray:
        return self.channel("range")

    @property
    def survivors(self) -> np.ndarray:
        """Indices of points that own a pixel."""
        return self.index_map[self.mask]

    def is_survivor(self) -> np.ndarray:
        flag = np.zeros(len(self.proj_row), dtype=bool)
        flag[self.survivors] = True
        return flag


def pixel_coords(xyz: np.ndarray, cfg: RVConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of each point under the spherical projection."""
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.linalg.norm(xyz, axis=1)
    safe = np.where(r > 0, r, 1.0)
    yaw = np.arctan2(y, x)
    pitch = np.arcsin(np.clip(z / safe, -1.0, 1.0))
    fov = cfg.fov_up - cfg.fov_down
    u = cfg.width * (0.5 * (1.0 - yaw / np.pi))
    v = cfg.height * (1.0 - (pitch - cfg.fov_down) / fov)
    col = np.floor(np.clip(u, 0, cfg.width - 1)).astype(np.int64)
    row = np.floor(np.clip(v, 0, cfg.height - 1)).astype(np.int64)
    return row, col


def _resolve_collisions(row, col, rng_, valid, cfg: RVConfig) -> np.ndarray:
    idx = np.nonzero(valid)[0]
    order = idx[np.lexsort((idx, rng_[idx]))]        # nearest first, ties by index
    lin = row[order] * cfg.width + col[order]
    _, first = np.unique(lin, return_index=True)
    winners = order[first]
    index_map = np.full((cfg.height, cfg.width), SENTINEL, dtype=np.int64)
    index_map[row[winners], col[winners]] = winners
    return index_map


def spherical_project(cloud: PointCloud, cfg: RVConfig) -> RangeImage:
    """Project ``cloud`` onto an H x W range image (nearest range wins a pixel).

    Points exactly at the origin are kept out of the image and counted in
    ``n_dropped``; they still receive an in-bounds pixel coordinate.
    """
    if len(cloud) == 0:
        raise InvalidInputError("cannot project an empty cloud")
    xyz = cloud.xyz
    rng_ = np.linalg.norm(xyz, axis=1)
    valid = rng_ > 0
    row, col = pixel_coords(xyz, cfg)
    index_map = _resolve_collisions(row, col, rng_, valid, cfg)
    mask = index_map != SENTINEL
    src = index_map[mask]
    channels = np.zeros((len(GEOM_CHANNELS), cfg.height, cfg.width))
    channels[0:3, mask] = xyz[src].T
    channels[3, mask] = cloud.remission[src]
    channels[4, mask] = rng_[src]
    return RangeImage(channels, GEOM_CHANNELS, mask, index_map, row, col, rng_,
                      n_dropped=int((~valid).sum()), dropped=~valid)


def paint_points(cloud: PointCloud, image: np.ndarray, cam: CameraModel) -> PointCloud:
    """Give points inside the camera frustum the RGB of their nearest pixel."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[:2] != (cam.height, cam.width) or image.shape[2] != 3:
        raise DimensionError(f"image {image.shape} does not match camera {cam.height}x{cam.width}x3")
    return paint_cloud(cloud, image, cam)


def build_rv_rgb(painted: PointCloud, cfg: RVConfig, ri: RangeImage | None = None) -> RangeImage:
    """Range image with r, g, b channels taken from each pixel's survivor."""
    if painted.color_mask is None or painted.rgb is None:
        raise InvalidInputError("build_rv_rgb needs a painted cloud (rgb + color_mask)")
    ri = ri if ri is not None else spherical_project(painted, cfg)
    surv = np.where(ri.mask, ri.index_map, 0)
    rgb_mask = ri.mask & painted.color_mask[surv]
    rgb = np.zeros((3,) + ri.mask.shape)
    rgb[:, rgb_mask] = painted.rgb[surv[rgb_mask]].T
    return RangeImage(np.concatenate([ri.channels[:len(GEOM_CHANNELS)], rgb]),
                      GEOM_CHANNELS + RGB_CHANNELS, ri.mask, ri.index_map, ri.proj_row,
                      ri.proj_col, ri.point_range, rgb_mask, ri.n_dropped, ri.dropped)


def back_project(pixel_labels: np.ndarray, ri: RangeImage) -> np.ndarray:
    """Label every point with the class stored at its own pixel."""
    pixel_labels = np.asarray(pixel_labels)
    if pixel_labels.shape != ri.mask.shape:
        raise DimensionError(f"label map {pixel_labels.shape} != range image {ri.mask.shape}")
    return pixel_labels[ri.proj_row, ri.proj_col]


def window_offsets(window: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (dy, dx) offsets of a square window."""
    h = window // 2
    dy, dx = np.meshgrid(np.arange(-h, h + 1), np.arange(-h, h + 1), indexing="ij")
    return dy.ravel(), dx.ravel()


def gather_window(rows, cols, mask, window):
    """Candidate pixel coordinates around each (row, col) and their validity.

    Windows are truncated at the image border (no azimuth wraparound).
    Returns clipped rows, clipped cols, and a flag that is true for in-bounds,
    masked candidates, each of shape [N, window**2].
    """
    dy, dx = window_offsets(window)
    cr = rows[:, None] + dy[None]
    cc = cols[:, None] + dx[None]
    h, w = mask.shape
    inb = (cr >= 0) & (cr < h) & (cc >= 0) & (cc < w)
    cr = np.clip(cr, 0, h - 1)
    cc = np.clip(cc, 0, w - 1)
    return cr, cc, inb & mask[cr, cc]


def gaussian_penalty(window: int, sigma: float) -> np.ndarray:
    """``1 - G`` for a normalised 2-D Gaussian G over the window (row-major)."""
    dy, dx = window_offsets(window)
    g = np.exp(-(dy ** 2 + dx ** 2) / (2.0 * sigma ** 2))
    return 1.0 - g / g.sum()


def knn_post_process(ri: RangeImage, cloud: PointCloud, pixel_probs: np.ndarray, k: int = 5,
                     window: int = 5, cutoff_m: float = 1.0, gaussian_sigma: float = 1.0) -> np.ndarray:
    """Range-based kNN voting that transfers RV predictions to every point.

    ``pixel_probs`` is ``[H, W, C]``.  For each point the masked pixels of the
    window are ranked by ``|candidate range - point range| * (1 - G)``; the
    ``k`` best that fall within ``cutoff_m`` vote with their argmax class
    (ties go to the smaller class id).  Points without a qualifying candidate
    keep their back-projected label.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd and positive, got {window}")
    if not 1 <= k <= window * window:
        raise ConfigError(f"k must lie in [1, window^2], got {k}")
    pixel_probs = np.asarray(pixel_probs)
    if pixel_probs.shape[:2] != ri.mask.shape:
        raise DimensionError("pixel_probs must be [H, W, C] matching the range image")
    n_cls = pixel_probs.shape[2]
    pix_label = pixel_probs.argmax(axis=2)
    fallback = back_project(pix_label, ri)

    cr, cc, ok = gather_window(ri.proj_row, ri.proj_col, ri.mask, window)
    penalty = gaussian_penalty(window, gaussian_sigma)
    dist = np.abs(ri.range[cr, cc] - ri.point_range[:, None]) * penalty[None]
    dist = np.where(ok, dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    kdist = np.take_along_axis(dist, order, axis=1)
    klab = pix_label[np.take_along_axis(cr, order, axis=1), np.take_along_axis(cc, order, axis=1)]
    vote = np.isfinite(kdist) & (kdist <= cutoff_m)
    counts = np.zeros((len(kdist), n_cls), dtype=np.int64)
    rows = np.repeat(np.arange(len(kdist)), k).reshape(len(kdist), k)
    np.add.at(counts, (rows[vote], klab[vote]), 1)
    has_vote = vote.any(axis=1)
    return np.where(has_vote, counts.argmax(axis=1), fallback)


# ---------------------------------------------------------------- RVI1 container

RVI_MAGIC = b"RVI1"


def save_range_image(path, ri: RangeImage, extra: dict | None = None):
    """Write ``ri`` (plus optional extra ``[H, W]`` channels) as an RVI1 file.

    Layout (little-endian): magic ``RVI1`` | u32 H | u32 W | u32 C |
    C x (u32 name_len, UTF-8 name) | f32 payload [C, H, W] | mask bitset |
    rgb-mask bitset | i32 index_map [H, W] | u32 N | i32 proj_row [N] |
    i32 proj_col [N] | f32 point_range [N].  Bitsets are ``ceil(H*W/8)``
    bytes, row-major, least-significant bit first.
    """
    names = list(ri.channel_names)
    chans = [ri.channels]
    for key, arr in (extra or {}).items():
        arr = np.asarray(arr, dtype=np.float64)
        arr = arr.reshape((-1,) + ri.mask.shape)
        names += [key] if arr.shape[0] == 1 else [f"{key}{i}" for i in range(arr.shape[0])]
        chans.append(arr)
    data = np.concatenate(chans).astype("<f4")
    h, w = ri.mask.shape
    buf = bytearray(RVI_MAGIC)
    buf += struct.pack("<III", h, w, len(names))
    for name in names:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
    buf += data.tobytes()
    rgb_mask = ri.rgb_mask if ri.rgb_mask is not None else np.zeros_like(ri.mask)
    buf += np.packbits(ri.mask.ravel(), bitorder="little").tobytes()
    buf += np.packbits(rgb_mask.ravel(), bitorder="little").tobytes()
    buf += ri.index_map.astype("<i4").tobytes()
    buf += struct.pack("<I", len(ri.proj_row))
    buf += ri.proj_row.astype("<i4").tobytes() + ri.proj_col.astype("<i4").tobytes()
    buf += ri.point_range.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_range_image(path) -> tuple[RangeImage, dict]:
    """Read an RVI1 file; returns the RangeImage and any non-standard channels."""
    raw = Path(path).read_bytes()
    if raw[:4] != RVI_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        h, w, c = struct.unpack_from("<III", raw, 4)
        pos = 16
        names = []
        for _ in range(c):
            (n,) = struct.unpack_from("<I", raw, pos)
            names.append(raw[pos + 4:pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        data = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=pos).reshape(c, h, w)
        pos += 4 * c * h * w
        nb = (h * w + 7) // 8
        mask = np.unpackbits(np.frombuffer(raw, np.uint8, nb, pos), bitorder="little")[:h * w]
        pos += nb
        rgb_mask = np.unpackbits(np.frombuffer(raw, np.uint8, nb, pos), bitorder="little")[:h * w]
        pos += nb
        index_map = np.frombuffer(raw, "<i4", h * w, pos).reshape(h, w).astype(np.int64)
        pos += 4 * h * w
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        row = np.frombuffer(raw, "<i4", n, pos).astype(np.int64)
        col = np.frombuffer(raw, "<i4", n, pos + 4 * n).astype(np.int64)
        prange = np.frombuffer(raw, "<f4", n, pos + 8 * n).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated RVI1 file") from exc
    std = [i for i, nm in enumerate(names) if nm in GEOM_CHANNELS + RGB_CHANNELS]
    extra = {names[i]: data[i].astype(np.float64) for i in range(c) if i not in std}
    has_rgb = "r" in names
    ri = RangeImage(data[std].astype(np.float64), tuple(names[i] for i in std),
                    mask.reshape(h, w).astype(bool), index_map, row, col, prange,
                    rgb_mask.reshape(h, w).astype(bool) if has_rgb else None)
    return ri, extra
