"""Per-scan network inputs derived once from a synthetic scene or a dumped range image."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from lacrange.dataset_io.synthetic import SceneSpec, SyntheticScene, gen_synthetic_scene, scene_specs
from lacrange.dataset_io.types import CameraModel, PointCloud
from lacrange.dckd import PixelMap, build_pixel_map, rv_rgb_input
from lacrange.rv_projection import RangeImage, RVConfig, build_rv_rgb

IGNORE = -1

# fixed standardisation of the five geometric channels (x, y, z, remission, range)
GEOM_MEAN = np.array([0.0, 0.0, -1.0, 0.35, 12.0])
GEOM_STD = np.array([15.0, 15.0, 1.5, 0.2, 12.0])


@dataclass
class Sample:
    """Everything the network and the losses need for one scan."""

    cloud: PointCloud
    ri: RangeImage
    lidar_in: np.ndarray          # [5, H, W]
    camera_in: np.ndarray         # [4, H, W]  r, g, b, rgb mask
    rv_labels: np.ndarray         # [H, W], IGNORE off the mask
    image: np.ndarray | None = None
    camera: CameraModel | None = None
    image_labels: np.ndarray | None = None
    pixel_map: PixelMap | None = None
    cache: dict = field(default_factory=dict)    # geometry-only refinement lookups

    @property
    def point_labels(self) -> np.ndarray | None:
        return self.cloud.label

    @property
    def low_feats(self) -> np.ndarray:
        return np.concatenate([self.lidar_in, self.camera_in])


def lidar_input(ri: RangeImage) -> np.ndarray:
    geom = np.stack([ri.channel(c) for c in ("x", "y", "z", "remission", "range")])
    out = (geom - GEOM_MEAN[:, None, None]) / GEOM_STD[:, None, None]
    return np.where(ri.mask[None], out, 0.0)


def rv_label_map(ri: RangeImage, labels: np.ndarray | None) -> np.ndarray:
    out = np.full(ri.mask.shape, IGNORE, dtype=np.int64)
    if labels is not None:
        out[ri.mask] = labels[ri.index_map[ri.mask]]
    return out


def sample_from_painted(cloud: PointCloud, rv_cfg: RVConfig, image=None, camera=None,
                        image_labels=None) -> Sample:
    """Project a painted cloud and build all inputs."""
    ri = build_rv_rgb(cloud, rv_cfg)
    pm = build_pixel_map(cloud, camera, ri) if camera is not None else None
    return Sample(cloud, ri, lidar_input(ri), rv_rgb_input(ri), rv_label_map(ri, cloud.label),
                  image, camera, image_labels, pm)


def sample_from_scene(scene: SyntheticScene, rv_cfg: RVConfig) -> Sample:
    return sample_from_painted(scene.cloud, rv_cfg, scene.image, scene.camera, scene.image_labels)


_SCENES: dict = {}


def synthetic_scenes(base: SceneSpec, count: int, first_seed: int) -> list:
    """Generated scenes, memoised per process (generation is deterministic)."""
    key = (tuple(sorted(asdict(base).items())), count, first_seed)
    if key not in _SCENES:
        _SCENES[key] = [gen_synthetic_scene(s) for s in scene_specs(base, count, first_seed)]
    return _SCENES[key]


def build_samples(cfg, split: str) -> list:
    """Samples of the ``train`` or ``eval`` split described by a PipelineConfig."""
    base = cfg.data.scene_spec()
    if split == "train":
        n, seed = cfg.data.n_train, cfg.data.train_seed
    elif split == "eval":
        n, seed = cfg.data.n_eval, cfg.data.eval_seed
    else:
        raise ValueError(f"unknown split {split!r}")
    rv_cfg = cfg.rv.rv_config()
    return [sample_from_scene(s, rv_cfg) for s in synthetic_scenes(base, n, seed)]
