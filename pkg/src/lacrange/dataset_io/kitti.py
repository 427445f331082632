"""SemanticKITTI on-disk formats: .bin scans, .label files and calib.txt."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from lacrange.dataset_io.types import CameraModel, LabelMap, PointCloud, load_label_map
from lacrange.errors import ConsistencyError, FormatError, MappingError

KITTI_IMAGE_SIZE = (1241, 376)


def read_scan(path) -> PointCloud:
    """Decode little-endian float32 records (x, y, z, remission)."""
    size = os.path.getsize(path)
    if size % 16:
        raise FormatError(f"{path}: size {size} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(raw[:, :3], np.clip(raw[:, 3], 0.0, 1.0))


def write_scan(path, cloud: PointCloud):
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.remission
    rec.tofile(path)


def read_labels(path, n: int, label_map: LabelMap | str = "semantickitti") -> np.ndarray:
    """Read u32 records, keep the low 16 bits and remap them to train ids."""
    size = os.path.getsize(path)
    if size != 4 * n:
        raise ConsistencyError(f"{path}: {size} bytes for a {n}-point scan (expected {4 * n})")
    if isinstance(label_map, str):
        label_map = load_label_map(label_map)
    sem = np.fromfile(path, dtype="<u4") & 0xFFFF
    lut = label_map.lut()
    out = np.full(len(sem), -1, dtype=np.int64)
    inside = sem < len(lut)
    out[inside] = lut[sem[inside]]
    bad = out < 0
    if np.any(bad):
        raise MappingError(np.unique(sem[bad]))
    return out


def write_labels(path, labels: np.ndarray, instance: np.ndarray | None = None):
    sem = np.asarray(labels, dtype=np.uint32) & 0xFFFF
    inst = np.zeros_like(sem) if instance is None else np.asarray(instance, dtype=np.uint32)
    (sem | (inst << 16)).astype("<u4").tofile(path)


def _parse_calib_lines(text: str, path) -> dict:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key: values', got {line!r}")
        key, vals = line.split(":", 1)
        try:
            entries[key.strip()] = np.array([float(v) for v in vals.split()])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed float in {line.strip()!r}") from exc
    return entries


def read_calib(path, camera: str = "P2", image_size: tuple[int, int] = KITTI_IMAGE_SIZE) -> CameraModel:
    """Assemble a CameraModel from a KITTI calib file.

    ``P_i = K [I | t]`` is split into intrinsics ``K`` and a translation that is
    folded, together with the optional ``R0_rect`` rectification, into the
    LiDAR-to-camera extrinsics: ``E = [I t] @ R0 @ Tr``.
    """
    entries = _parse_calib_lines(Path(path).read_text(encoding="utf-8"), path)
    tr_key = next((k for k in ("Tr", "Tr_velo_to_cam") if k in entries), None)
    missing = [k for k, ok in ((camera, camera in entries), ("Tr", tr_key is not None)) if not ok]
    if missing:
        raise FormatError(f"{path}: missing calibration keys {missing}")
    p = entries[camera]
    tr = entries[tr_key]
    if p.size != 12 or tr.size != 12:
        raise FormatError(f"{path}: {camera} and {tr_key} need 12 values each")
    p = p.reshape(3, 4)
    k = p[:, :3]
    t = np.linalg.solve(k, p[:, 3])
    tr4 = np.vstack([tr.reshape(3, 4), [0, 0, 0, 1]])
    r0 = np.eye(4)
    for key in ("R0_rect", "R_rect"):
        if key in entries:
            if entries[key].size != 9:
                raise FormatError(f"{path}: {key} needs 9 values")
            r0[:3, :3] = entries[key].reshape(3, 3)
    shift = np.eye(4)
    shift[:3, 3] = t
    return CameraModel(k, shift @ r0 @ tr4, image_size[0], image_size[1])


def write_calib(path, cam: CameraModel, camera: str = "P2"):
    """KITTI-style calib with ``P = K [I | 0]`` and ``Tr`` = the LiDAR-to-camera extrinsics."""
    p = np.hstack([cam.intrinsics, np.zeros((3, 1))])
    fmt = lambda a: " ".join(repr(float(v)) for v in np.asarray(a).ravel())
    Path(path).write_text(f"{camera}: {fmt(p)}\nTr: {fmt(cam.extrinsics[:3, :4])}\n", encoding="utf-8")
