from lacrange.dataset_io.types import CameraModel, LabelMap, PointCloud, load_label_map
from lacrange.dataset_io.kitti import (
    read_calib,
    read_labels,
    read_scan,
    write_calib,
    write_labels,
    write_scan,
)
from lacrange.dataset_io.ppm import read_ppm, write_ppm
from lacrange.dataset_io.synthetic import SceneSpec, SyntheticScene, gen_synthetic_scene, paint_cloud

__all__ = [
    "CameraModel",
    "LabelMap",
    "PointCloud",
    "SceneSpec",
    "SyntheticScene",
    "gen_synthetic_scene",
    "load_label_map",
    "paint_cloud",
    "read_calib",
    "read_labels",
    "read_ppm",
    "read_scan",
    "write_calib",
    "write_labels",
    "write_ppm",
    "write_scan",
]
