"""Point cloud, camera and label-map containers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from lacrange.errors import ClassRangeError, ConfigError, DimensionError, InvalidInputError


@dataclass
class PointCloud:
    """N LiDAR returns; range is derived from ``xyz`` and never stored."""

    xyz: np.ndarray
    remission: np.ndarray
    rgb: np.ndarray | None = None
    label: np.ndarray | None = None
    color_mask: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.remission = np.asarray(self.remission, dtype=np.float64).reshape(-1)
        if len(self.remission) != n:
            raise DimensionError(f"remission has {len(self.remission)} entries for {n} points")
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(n, 3)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.int64).reshape(n)
        if self.color_mask is not None:
            self.color_mask = np.asarray(self.color_mask, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.xyz)

    @property
    def range(self) -> np.ndarray:
        return np.linalg.norm(self.xyz, axis=1)

    def subset(self, idx) -> "PointCloud":
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.xyz[idx], self.remission[idx], pick(self.rgb), pick(self.label),
                          pick(self.color_mask))

    def with_(self, **kw) -> "PointCloud":
        return replace(self, **kw)

    def validate(self, num_classes: int | None = None):
        if not np.all(np.isfinite(self.xyz)):
            raise InvalidInputError("point coordinates must be finite")
        if np.any(self.remission < 0) or np.any(self.remission > 1):
            raise InvalidInputError("remission must lie in [0, 1]")
        if num_classes is not None and self.label is not None and len(self.label):
            if self.label.min() < 0 or self.label.max() >= num_classes:
                raise ClassRangeError(f"labels outside [0, {num_classes})")
        return self


@dataclass
class CameraModel:
    """Pinhole camera.  ``extrinsics`` maps LiDAR-frame points to the camera frame.

    Camera frame: z forward, x right, y down.  Pixel centres sit at integer
    coordinates, so the nearest pixel to a projection (u, v) is
    ``(floor(u + 0.5), floor(v + 0.5))``.
    """

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ConfigError("camera intrinsics must be invertible")

    def check_rigid(self, tol: float = 1e-9) -> bool:
        r = self.extrinsics[:3, :3]
        return bool(np.max(np.abs(r @ r.T - np.eye(3))) <= tol
                    and np.allclose(self.extrinsics[3], [0, 0, 0, 1]))

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return xyz @ self.extrinsics[:3, :3].T + self.extrinsics[:3, 3]

    def project(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return continuous pixel coordinates (N, 2) as (u, v) and camera depth (N,)."""
        cam = self.to_camera(xyz)
        depth = cam[:, 2]
        safe = np.where(depth > 0, depth, 1.0)
        hom = cam @ self.intrinsics.T
        uv = hom[:, :2] / safe[:, None]
        return uv, depth

    def pixel_of(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest integer pixel (col, row) per point and an in-frustum flag."""
        uv, depth = self.project(xyz)
        px = np.floor(uv + 0.5).astype(np.int64)
        ok = (depth > 0) & (px[:, 0] >= 0) & (px[:, 0] < self.width) \
            & (px[:, 1] >= 0) & (px[:, 1] < self.height)
        return px, ok


@dataclass
class LabelMap:
    name: str
    num_classes: int
    ignore_id: int | None
    class_names: list
    palette: np.ndarray
    learning_map: dict = field(default_factory=dict)

    def lut(self) -> np.ndarray:
        """Dense lookup table over raw ids; unmapped entries hold -1."""
        size = max(self.learning_map) + 1 if self.learning_map else 1
        lut = np.full(max(size, 1), -1, dtype=np.int64)
        for raw, cls in self.learning_map.items():
            lut[raw] = cls
        return lut


def load_label_map(name_or_path) -> LabelMap:
    """Load a label map by preset name (``semantickitti``, ``synthetic8``) or file path."""
    p = Path(str(name_or_path))
    if p.suffix in (".yaml", ".yml") and p.exists():
        text = p.read_text(encoding="utf-8")
    else:
        text = resources.files("lacrange.dataset_io").joinpath(
            "labelmaps", f"{name_or_path}.yaml").read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    try:
        lm = LabelMap(
            name=raw["name"],
            num_classes=int(raw["num_classes"]),
            ignore_id=raw.get("ignore_id"),
            class_names=list(raw["class_names"]),
            palette=np.asarray(raw["palette"], dtype=np.uint8),
            learning_map={int(k): int(v) for k, v in raw["learning_map"].items()},
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed label map {name_or_path}: {exc}") from exc
    if len(lm.class_names) != lm.num_classes or len(lm.palette) != lm.num_classes:
        raise ConfigError(f"label map {lm.name}: names/palette must cover {lm.num_classes} classes")
    return lm
