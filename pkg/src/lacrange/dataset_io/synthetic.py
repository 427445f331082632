"""Deterministic synthetic street scenes: ring LiDAR plus a pinhole camera.

Both sensors ray-cast the same set of analytic primitives (ground plane,
oriented boxes, vertical cylinders, spheres).  Every LiDAR return carries the
class of the primitive it hit; the camera image is flat-shaded with one colour
per primitive.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from lacrange.dataset_io.types import CameraModel, PointCloud
from lacrange.errors import ConfigError

ROAD, SIDEWALK, BUILDING, CAR, PERSON, POLE, VEGETATION, TRUNK = range(8)

SKY_RGB = (0.55, 0.70, 0.95)
GROUND_Z = -1.73
CAMERA_OFFSET = (0.27, 0.0, -0.08)
# lidar (x fwd, y left, z up) -> camera (x right, y down, z fwd)
LIDAR_TO_CAM_ROT = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

_BASE_RGB = {
    ROAD: (0.33, 0.33, 0.35),
    SIDEWALK: (0.74, 0.70, 0.62),
    BUILDING: (0.72, 0.46, 0.30),
    PERSON: (0.80, 0.30, 0.32),
    POLE: (0.62, 0.62, 0.58),
    VEGETATION: (0.20, 0.55, 0.20),
    TRUNK: (0.42, 0.28, 0.15),
}
_CAR_RGB = ((0.15, 0.25, 0.75), (0.80, 0.10, 0.10), (0.90, 0.90, 0.92), (0.10, 0.10, 0.12),
            (0.55, 0.58, 0.60))
_ALBEDO = {ROAD: 0.22, SIDEWALK: 0.26, BUILDING: 0.48, CAR: 0.70, PERSON: 0.35, POLE: 0.60,
           VEGETATION: 0.40, TRUNK: 0.30}


@dataclass
class SceneSpec:
    """Generator settings.  Identical specs produce bit-identical scenes."""

    seed: int = 0
    n_ground: int = 1
    n_sidewalks: int = 2
    n_walls: int = 4
    n_boxes: int = 6
    n_persons: int = 3
    n_poles: int = 5
    n_vegetation: int = 5
    beams: int = 32
    azimuth_steps: int = 2048
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0
    max_range: float = 60.0
    noise_sigma: float = 0.01
    remission_noise: float = 0.02
    image_width: int = 320
    image_height: int = 96
    camera_hfov_deg: float = 90.0
    label_map: str = "synthetic8"

    def validate(self):
        if self.beams < 2:
            raise ConfigError(f"beam count must be >= 2, got {self.beams}")
        if self.azimuth_steps < 1:
            raise ConfigError("azimuth_steps must be >= 1")
        if not self.fov_up_deg > self.fov_down_deg:
            raise ConfigError("fov_up must exceed fov_down")
        if self.image_width < 1 or self.image_height < 1:
            raise ConfigError("image dimensions must be positive")
        counts = [self.n_ground, self.n_sidewalks, self.n_walls, self.n_boxes, self.n_persons,
                  self.n_poles, self.n_vegetation]
        if min(counts) < 0 or self.n_ground > 1:
            raise ConfigError("primitive counts must be non-negative (n_ground is 0 or 1)")
        return self

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown SceneSpec keys: {sorted(unknown)}")
        return cls(**raw).validate()

    def to_file(self, path):
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=False), encoding="utf-8")


@dataclass
class Primitive:
    kind: str          # plane | box | cylinder | sphere
    cls: int
    rgb: tuple
    albedo: float
    params: dict = field(default_factory=dict)


@dataclass
class SyntheticScene:
    cloud: PointCloud
    image: np.ndarray          # [H, W, 3] floats, multiples of 1/255
    camera: CameraModel
    image_labels: np.ndarray   # [H, W] class per pixel, -1 for sky
    primitives: list


# ---------------------------------------------------------------- ray casting

def _hit_plane(o, d, p):
    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p["z"] - o[:, 2]) / dz
    return np.where((dz < 0) & (t > 0), t, np.inf)


def _hit_box(o, d, p):
    c, hs, yaw = np.asarray(p["center"]), np.asarray(p["half"]), p["yaw"]
    cs, sn = math.cos(yaw), math.sin(yaw)
    rot = np.array([[cs, sn, 0.0], [-sn, cs, 0.0], [0.0, 0.0, 1.0]])   # world -> local
    lo = (o - c) @ rot.T
    ld = d @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-hs - lo) * inv
        t2 = (hs - lo) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = ld == 0
    inside = np.abs(lo) <= hs
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    ok = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(ok, tmin, np.inf)


def _hit_cylinder(o, d, p):
    cx, cy, r, z0, z1 = p["cx"], p["cy"], p["r"], p["z0"], p["z1"]
    ox, oy = o[:, 0] - cx, o[:, 1] - cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox ** 2 + oy ** 2 - r * r
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    z = o[:, 2] + t * d[:, 2]
    side = np.where((disc >= 0) & (a > 0) & (t > 1e-9) & (z >= z0) & (z <= z1), t, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = (z1 - o[:, 2]) / d[:, 2]
    hx, hy = ox + tc * d[:, 0], oy + tc * d[:, 1]
    cap = np.where((d[:, 2] < 0) & (tc > 1e-9) & (hx * hx + hy * hy <= r * r), tc, np.inf)
    return np.minimum(side, cap)


def _hit_sphere(o, d, p):
    oc = o - np.asarray(p["center"])
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - p["r"] ** 2
    disc = b * b - 4 * a * c
    t = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    return np.where((disc >= 0) & (t > 1e-9), t, np.inf)


_HIT = {"plane": _hit_plane, "box": _hit_box, "cylinder": _hit_cylinder, "sphere": _hit_sphere}


def cast_rays(origin: np.ndarray, dirs: np.ndarray, prims: list) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and primitive index per ray (inf / -1 on a miss)."""
    o = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    best_i = np.full(len(dirs), -1, dtype=np.int64)
    for i, prim in enumerate(prims):
        t = _HIT[prim.kind](o, dirs, prim.params)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i
    return best_t, best_i


# ---------------------------------------------------------------- layout

def _jitter(rng, rgb, amount=0.05):
    return tuple(float(np.clip(c + rng.uniform(-amount, amount), 0, 1)) for c in rgb)


def _layout(spec: SceneSpec, rng: np.random.Generator) -> list:
    prims = []
    road_half = rng.uniform(4.0, 6.0)
    walk_w = rng.uniform(2.5, 3.5)
    zg = GROUND_Z

    def add(kind, cls, rgb=None, **params):
        rgb = rgb if rgb is not None else _BASE_RGB[cls]
        prims.append(Primitive(kind, cls, _jitter(rng, rgb), _ALBEDO[cls] * rng.uniform(0.9, 1.1), params))

    if spec.n_ground:
        add("plane", ROAD, z=zg)
    for i in range(spec.n_sidewalks):
        side = 1.0 if i % 2 == 0 else -1.0
        yc = side * (road_half + walk_w / 2)
        add("box", SIDEWALK, center=(0.0, yc, zg + 0.075), half=(80.0, walk_w / 2, 0.075), yaw=0.0)
    for _ in range(spec.n_walls):
        side = rng.choice([-1.0, 1.0])
        depth = rng.uniform(4, 8)
        yc = side * (road_half + walk_w + rng.uniform(1.0, 4.0) + depth / 2)
        height = rng.uniform(3, 10)
        add("box", BUILDING, center=(rng.uniform(-35, 35), yc, zg + height / 2),
            half=(rng.uniform(3, 10), depth / 2, height / 2), yaw=rng.uniform(-0.1, 0.1))
    for _ in range(spec.n_boxes):
        yc = rng.uniform(-road_half + 1.2, road_half - 1.2)
        x = rng.uniform(-30, 30)
        if abs(x) < 4 and abs(yc) < 2.5:
            x += 8 * np.sign(x if x != 0 else 1)
        add("box", CAR, rgb=_CAR_RGB[int(rng.integers(len(_CAR_RGB)))],
            center=(x, yc, zg + 0.75), half=(2.1, 0.9, 0.75), yaw=rng.uniform(-0.25, 0.25))
    for _ in range(spec.n_persons):
        side = rng.choice([-1.0, 1.0])
        yc = side * (road_half + rng.uniform(0.4, walk_w - 0.4))
        add("box", PERSON, center=(rng.uniform(-25, 25), yc, zg + 0.15 + 0.875),
            half=(0.25, 0.25, 0.875), yaw=rng.uniform(-math.pi, math.pi))
    for _ in range(spec.n_poles):
        side = rng.choice([-1.0, 1.0])
        add("cylinder", POLE, cx=rng.uniform(-35, 35), cy=side * (road_half + 0.4),
            r=rng.uniform(0.08, 0.15), z0=zg, z1=zg + rng.uniform(4, 7))
    for _ in range(spec.n_vegetation):
        side = rng.choice([-1.0, 1.0])
        cx, cy = rng.uniform(-35, 35), side * (road_half + walk_w - rng.uniform(0.6, 1.0))
        trunk_h = rng.uniform(1.8, 3.0)
        crown = rng.uniform(1.3, 2.3)
        add("cylinder", TRUNK, cx=cx, cy=cy, r=rng.uniform(0.15, 0.3), z0=zg, z1=zg + trunk_h)
        add("sphere", VEGETATION, center=(cx, cy, zg + trunk_h + 0.7 * crown), r=crown)
    return prims


def default_camera(spec: SceneSpec) -> CameraModel:
    w, h = spec.image_width, spec.image_height
    f = (w / 2.0) / math.tan(math.radians(spec.camera_hfov_deg) / 2.0)
    k = np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    ext = np.eye(4)
    ext[:3, :3] = LIDAR_TO_CAM_ROT
    ext[:3, 3] = -LIDAR_TO_CAM_ROT @ np.asarray(CAMERA_OFFSET)
    return CameraModel(k, ext, w, h)


def lidar_directions(spec: SceneSpec) -> np.ndarray:
    """Unit ray directions, beam-major (row 0 is the top beam)."""
    up, down = math.radians(spec.fov_up_deg), math.radians(spec.fov_down_deg)
    pitch = up - (np.arange(spec.beams) + 0.5) * (up - down) / spec.beams
    yaw = math.pi - (np.arange(spec.azimuth_steps) + 0.5) * 2 * math.pi / spec.azimuth_steps
    pp, yy = np.meshgrid(pitch, yaw, indexing="ij")
    d = np.stack([np.cos(pp) * np.cos(yy), np.cos(pp) * np.sin(yy), np.sin(pp)], axis=-1)
    return d.reshape(-1, 3)


def paint_cloud(cloud: PointCloud, image: np.ndarray, cam: CameraModel) -> PointCloud:
    """Attach nearest-pixel RGB to points inside the camera frustum."""
    px, ok = cam.pixel_of(cloud.xyz)
    rgb = np.zeros((len(cloud), 3))
    rgb[ok] = image[px[ok, 1], px[ok, 0]]
    return cloud.with_(rgb=rgb, color_mask=ok)


def render_camera(prims: list, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Flat-shaded RGB image and per-pixel class map seen by ``cam``."""
    vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1).astype(np.float64)
    d_cam = pix @ np.linalg.inv(cam.intrinsics).T
    rot = cam.extrinsics[:3, :3]
    d = d_cam @ rot          # R^T applied row-wise
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origin = -rot.T @ cam.extrinsics[:3, 3]
    _, idx = cast_rays(origin, d, prims)
    colors = np.array([p.rgb for p in prims] + [SKY_RGB])
    classes = np.array([p.cls for p in prims] + [-1])
    img = colors[idx].reshape(cam.height, cam.width, 3)
    img = np.round(img * 255.0) / 255.0
    return img, classes[idx].reshape(cam.height, cam.width)


def gen_synthetic_scene(spec: SceneSpec) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    prims = _layout(spec, rng)
    dirs = lidar_directions(spec)
    t, idx = cast_rays(np.zeros(3), dirs, prims)
    hit = np.isfinite(t) & (t <= spec.max_range)
    t, idx, dirs = t[hit], idx[hit], dirs[hit]
    t = t + rng.normal(0.0, spec.noise_sigma, size=t.shape)
    xyz = dirs * t[:, None]
    albedo = np.array([p.albedo for p in prims])[idx]
    remission = albedo * (1.0 - 0.4 * t / spec.max_range) + rng.normal(0, spec.remission_noise, t.shape)
    labels = np.array([p.cls for p in prims])[idx]
    cloud = PointCloud(xyz, np.clip(remission, 0.0, 1.0), label=labels)
    cam = default_camera(spec)
    image, image_labels = render_camera(prims, cam)
    return SyntheticScene(paint_cloud(cloud, image, cam), image, cam, image_labels, prims)


def scene_specs(base: SceneSpec, count: int, first_seed: int) -> list:
    """``count`` specs that differ from ``base`` only in their seed."""
    return [SceneSpec(**{**asdict(base), "seed": first_seed + i}) for i in range(count)]
