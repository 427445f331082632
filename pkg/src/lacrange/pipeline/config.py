"""Pipeline configuration: nested dataclasses loaded from YAML presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path

import yaml

from lacrange.cff import STRATEGY_TOKENS, MLUStrategy
from lacrange.dataset_io.synthetic import SceneSpec
from lacrange.dckd import EncoderSpec, check_pair
from lacrange.errors import ConfigError
from lacrange.point_refine.head import RefineConfig
from lacrange.rv_projection import RVConfig


@dataclass
class RVSection:
    height: int = 16
    width: int = 256
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0

    def rv_config(self) -> RVConfig:
        return RVConfig(self.height, self.width, math.radians(self.fov_up_deg),
                        math.radians(self.fov_down_deg))


@dataclass
class DataSection:
    n_train: int = 200
    n_eval: int = 50
    train_seed: int = 1000
    eval_seed: int = 5000
    scene: dict = field(default_factory=dict)    # SceneSpec overrides (seed excluded)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(**{**self.scene, "seed": 0}).validate()


@dataclass
class ModelSection:
    lidar_channels: tuple = (16, 32, 32, 64)
    teacher_channels: tuple = (16, 32, 32, 64)
    mlu: str = "combined"
    use_camera: bool = True
    use_cff: bool = True
    use_refine: bool = True

    def teacher_spec(self) -> EncoderSpec:
        return EncoderSpec(tuple(self.teacher_channels), "teacher", 3)

    def student_spec(self) -> EncoderSpec:
        return self.teacher_spec().student(4)

    def strategy(self) -> MLUStrategy:
        return MLUStrategy.from_token(self.mlu, len(self.lidar_channels))


@dataclass
class LossSection:
    ce_weight: float = 1.0
    distill_weight: float = 1.0
    refine_weight: float = 1.0
    class_weighting: str = "inverse_sqrt"     # inverse_sqrt | none


@dataclass
class OptimSection:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps: int = 200
    head_steps: int = 0            # head-only steps on the frozen backbone after joint training
    head_lr: float = 0.05
    schedule: str = "constant"     # joint phase: constant | cosine (decays towards zero)


@dataclass
class TeacherSection:
    mode: str = "pretrained"      # pretrained | random
    pretrain_steps: int = 100
    lr: float = 0.05


@dataclass
class EvalSection:
    colored_only: bool = True
    knn_k: int = 5
    knn_window: int = 5
    knn_cutoff: float = 1.0
    knn_sigma: float = 1.0


@dataclass
class PipelineConfig:
    rv: RVSection = field(default_factory=RVSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    refine: RefineConfig = field(default_factory=RefineConfig)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    eval: EvalSection = field(default_factory=EvalSection)
    label_map: str = "synthetic8"
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> "PipelineConfig":
        self.rv.rv_config()
        self.data.scene_spec()
        m = self.model
        if m.mlu not in STRATEGY_TOKENS:
            raise ConfigError(f"mlu must be one of {STRATEGY_TOKENS}, got {m.mlu!r}")
        if len(m.lidar_channels) != len(m.teacher_channels):
            raise ConfigError("LiDAR branch and teacher need the same number of stages")
        check_pair(m.teacher_spec(), m.student_spec())
        m.strategy()
        k = len(m.lidar_channels)
        if self.rv.height % 2 ** (k - 1) or self.rv.width % 2 ** (k - 1):
            raise ConfigError(f"RV size must be divisible by {2 ** (k - 1)}")
        for name in ("ce_weight", "distill_weight", "refine_weight"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.loss.class_weighting not in ("inverse_sqrt", "none"):
            raise ConfigError(f"unknown class weighting {self.loss.class_weighting!r}")
        o = self.optim
        if min(o.lr, o.steps, o.head_lr, o.head_steps) < 0:
            raise ConfigError("optimizer needs non-negative lr, steps, head_lr and head_steps")
        if o.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {o.schedule!r}")
        if self.teacher.mode not in ("pretrained", "random"):
            raise ConfigError(f"unknown teacher mode {self.teacher.mode!r}")
        if self.deterministic and not isinstance(self.seed, int):
            raise ConfigError("deterministic mode needs an integer seed")
        self.refine.cyl_grids()
        return self

    @property
    def num_stages(self) -> int:
        return len(self.model.lidar_channels)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        return _build(cls, raw or {}, "").validate()

    def updated(self, overrides: dict) -> "PipelineConfig":
        """Copy with dotted-key overrides, e.g. ``{"optim.lr": 0.01}``."""
        raw = self.to_dict()
        for key, val in overrides.items():
            node = raw
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config section in {key!r}")
                node = node[p]
            if parts[-1] not in node and parts[:-1] != ["data", "scene"]:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return PipelineConfig.from_dict(raw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where or 'root'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'root'}: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for name, val in raw.items():
        cur = getattr(defaults, name)
        if is_dataclass(cur):
            kw[name] = _build(type(cur), val, f"{where}{name}.")
        elif isinstance(cur, tuple):
            kw[name] = tuple(val)
        else:
            kw[name] = val
    return cls(**kw)


PRESETS = ("desk", "full", "tiny")


def load_config(path_or_preset: str | None = None) -> PipelineConfig:
    """Load a YAML file, or a named preset shipped with the package (default ``desk``)."""
    name = path_or_preset or "desk"
    if name in PRESETS:
        text = resources.files("lacrange.pipeline").joinpath(f"presets/{name}.yaml").read_text("utf-8")
    else:
        p = Path(name)
        if not p.is_file():
            raise ConfigError(f"config {name!r} is neither a preset {PRESETS} nor a file")
        text = p.read_text(encoding="utf-8")
    return PipelineConfig.from_dict(yaml.safe_load(text) or {})
