"""Masked multi-scale feature distillation from an image teacher to an RV-RGB student.

The teacher sees the undistorted camera image, the student sees the sparse
RV-RGB image.  Teacher features are upsampled to image resolution and then
scattered onto the range image through the colored survivors; student
features pass through a per-scale adapter.  The loss compares both at the
RV-RGB mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lacrange.autodiff import layers as L
from lacrange.autodiff import tensor as T
from lacrange.autodiff.layers import Block
from lacrange.autodiff.optim import SGD
from lacrange.autodiff.tensor import Tensor
from lacrange.dataset_io.types import CameraModel, PointCloud
from lacrange.errors import ConfigError, ContractError, DimensionError
from lacrange.rv_projection import RangeImage

ROLES = ("teacher", "student")


@dataclass(frozen=True)
class EncoderSpec:
    """Per-stage channel counts; every stage after the first halves H and W."""

    channels: tuple
    role: str = "teacher"
    in_channels: int = 3

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"encoder role must be one of {ROLES}")
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise ConfigError("encoder needs at least one stage with positive channels")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def student(self, in_channels: int = 4) -> "EncoderSpec":
        """Matching student: same depth, channels halved (rounded up)."""
        return EncoderSpec(tuple(math.ceil(c / 2) for c in self.channels), "student", in_channels)


def check_pair(teacher: EncoderSpec, student: EncoderSpec):
    if teacher.num_stages != student.num_stages:
        raise ConfigError("teacher and student need the same number of stages")
    if tuple(math.ceil(c / 2) for c in teacher.channels) != tuple(student.channels):
        raise ConfigError("student channels must be the teacher's halved (rounded up)")


class ImageEncoder(Block):
    """Stack of conv3x3-bn-leaky stages with 2x average-pool downsampling between them."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        self.spec = spec
        cin = spec.in_channels
        self.stages = []
        for c in spec.channels:
            self.stages.append({"conv": L.conv_params(cin, c, 3, rng), "bn": L.batchnorm_params(c)})
            cin = c

    def __call__(self, x) -> list:
        x = T.as_tensor(x)
        k = self.spec.num_stages
        if x.shape[0] != self.spec.in_channels:
            raise DimensionError(f"encoder expects {self.spec.in_channels} input channels, got {x.shape[0]}")
        if x.shape[1] % 2 ** (k - 1) or x.shape[2] % 2 ** (k - 1):
            raise DimensionError(f"input {x.shape[1:]} not divisible by {2 ** (k - 1)}")
        feats = []
        for i, st in enumerate(self.stages):
            if i:
                x = T.avg_pool2(x)
            x = T.leaky_relu(L.bn(st["bn"], L.apply_conv2d(st["conv"], x), self))
            feats.append(x)
        return feats


@dataclass
class PixelMap:
    """Image pixel of the colored survivor at each RV-RGB pixel."""

    rv_rows: np.ndarray
    rv_cols: np.ndarray
    img_rows: np.ndarray
    img_cols: np.ndarray
    rv_dims: tuple
    img_dims: tuple

    def __len__(self):
        return len(self.rv_rows)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.rv_dims, dtype=bool)
        m[self.rv_rows, self.rv_cols] = True
        return m


def build_pixel_map(painted: PointCloud, cam: CameraModel, ri: RangeImage) -> PixelMap:
    """Pair every RV-RGB pixel with the image pixel its survivor was colored from."""
    if ri.rgb_mask is None:
        raise ContractError("range image has no RV-RGB mask; build it with build_rv_rgb")
    rr, cc = np.nonzero(ri.rgb_mask)
    surv = ri.index_map[rr, cc]
    px, ok = cam.pixel_of(painted.xyz[surv])
    if not np.all(ok):
        raise ContractError("RV-RGB mask marks a point that lies outside the camera frustum")
    return PixelMap(rr, cc, px[:, 1], px[:, 0], ri.mask.shape, (cam.height, cam.width))


def teacher_to_rv(feat, img_dims: tuple, pixel_map: PixelMap) -> tuple[Tensor, np.ndarray]:
    """Upsample a teacher feature map to image size, then scatter it onto the range image.

    Returns the ``[C, H, W]`` RV map (zeros off the mask) and the mask.  The
    teacher is frozen, so the result carries no gradient.
    """
    feat = T.as_tensor(feat)
    if tuple(img_dims) != tuple(pixel_map.img_dims):
        raise ContractError(f"pixel map built for image {pixel_map.img_dims}, got {img_dims}")
    h, w = pixel_map.rv_dims
    mask = pixel_map.mask()
    if int(mask.sum()) != len(pixel_map):
        raise ContractError("pixel map assigns two image pixels to one RV pixel")
    ih, iw = img_dims
    if len(pixel_map) and (pixel_map.img_rows.min() < 0 or pixel_map.img_rows.max() >= ih
                           or pixel_map.img_cols.min() < 0 or pixel_map.img_cols.max() >= iw):
        raise ContractError("pixel map references pixels outside the image")
    with T.no_grad():
        up = T.upsample_bilinear(feat, ih, iw).data
    out = np.zeros((feat.shape[0], h, w), dtype=up.dtype)
    out[:, pixel_map.rv_rows, pixel_map.rv_cols] = up[:, pixel_map.img_rows, pixel_map.img_cols]
    return Tensor(out), mask


class Adapter(Block):
    """conv1x1 -> leaky-ReLU -> batchnorm, then bilinear upsampling."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = L.conv_params(cin, cout, 1, rng)
        self.bn = L.batchnorm_params(cout)

    def __call__(self, feat, target_dims: tuple) -> Tensor:
        return adapt_student(feat, self.conv.fan_out, target_dims, self)


def adapt_student(feat, target_channels: int, target_dims: tuple, params: Adapter) -> Tensor:
    feat = T.as_tensor(feat)
    w = params.conv.weights[0]
    if feat.shape[0] != w.shape[1] or w.shape[0] != target_channels:
        raise DimensionError(f"adapter maps {w.shape[1]}->{w.shape[0]}, "
                             f"got {feat.shape[0]} channels and target {target_channels}")
    x = T.leaky_relu(L.apply_conv2d(params.conv, feat))
    x = L.bn(params.bn, x, params)
    return T.upsample_bilinear(x, *target_dims)


@dataclass
class DistillBatch:
    """Teacher maps (image space) and adapted student maps (RV space) for one scan.

    ``teacher_rv`` may hold teacher maps already scattered to RV space; it is
    filled lazily from ``teacher_feats`` otherwise.
    """

    teacher_feats: list
    student_feats: list
    pixel_map: PixelMap | None
    rv_rgb_mask: np.ndarray
    teacher_rv: list | None = field(default=None)

    def __post_init__(self):
        n_t = len(self.teacher_rv if self.teacher_rv is not None else self.teacher_feats)
        if n_t != len(self.student_feats):
            raise ConfigError("teacher and student need the same number of scales")
        for s in self.student_feats:
            if tuple(s.shape[1:]) != tuple(self.rv_rgb_mask.shape):
                raise DimensionError(f"student map {s.shape} does not match mask {self.rv_rgb_mask.shape}")

    def teacher_in_rv(self) -> list:
        if self.teacher_rv is None:
            self.teacher_rv = [teacher_to_rv(t, self.pixel_map.img_dims, self.pixel_map)[0]
                               for t in self.teacher_feats]
        return self.teacher_rv


def distill_loss(batch: DistillBatch) -> Tensor:
    """Mean over scales of the masked-pixel mean of the channel-wise L2 distance."""
    k = len(batch.student_feats)
    if k == 0:
        raise ConfigError("distillation needs at least one scale")
    rr, cc = np.nonzero(batch.rv_rgb_mask)
    if rr.size == 0:
        return Tensor(0.0)
    total = None
    for t, s in zip(batch.teacher_in_rv(), batch.student_feats):
        if t.shape != s.shape:
            raise DimensionError(f"teacher {t.shape} vs student {s.shape}")
        idx = (slice(None), rr, cc)
        d = T.norm(T.index(s, idx) - T.index(t, idx), axis=0)
        term = T.mean(d)
        total = term if total is None else total + term
    return total * (1.0 / k)


# ---------------------------------------------------------------------------
# per-scan inputs and a stand-alone student fitting loop
# ---------------------------------------------------------------------------

def rv_rgb_input(ri: RangeImage) -> np.ndarray:
    """Student input: r, g, b and the RV-RGB mask as a fourth channel."""
    rgb = np.stack([ri.channel(c) for c in "rgb"])
    return np.concatenate([rgb, ri.rgb_mask[None].astype(rgb.dtype)])


def image_input(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1))


def teacher_rv_features(teacher: ImageEncoder, image: np.ndarray, pixel_map: PixelMap) -> list:
    """Frozen teacher pass followed by the RV scatter, one map per scale."""
    was = teacher.training
    teacher.eval()
    with T.no_grad():
        feats = teacher(image_input(image))
    teacher.train(was)
    return [teacher_to_rv(f, pixel_map.img_dims, pixel_map)[0] for f in feats]


class Student(Block):
    """Student encoder plus one adapter per scale."""

    def __init__(self, teacher_spec: EncoderSpec, rng: np.random.Generator):
        self.spec = teacher_spec.student()
        self.encoder = ImageEncoder(self.spec, rng)
        self.adapters = [Adapter(cs, ct, rng) for cs, ct in zip(self.spec.channels, teacher_spec.channels)]

    def adapted(self, x, rv_dims: tuple) -> tuple[list, list]:
        feats = self.encoder(x)
        return feats, [a(f, rv_dims) for a, f in zip(self.adapters, feats)]


def fit_student(student: Student, samples: list, steps: int, lr: float = 0.05,
                momentum: float = 0.9) -> list:
    """Minimise the distillation loss alone; returns the per-step loss values.

    ``samples`` holds (student_input, teacher_rv_maps, rv_rgb_mask) triples,
    visited cyclically in order.
    """
    opt = SGD(student.parameters(), lr=lr, momentum=momentum)
    student.train()
    history = []
    for step in range(steps):
        x, t_rv, mask = samples[step % len(samples)]
        _, s = student.adapted(x, mask.shape)
        loss = distill_loss(DistillBatch([], s, None, mask, teacher_rv=t_rv))
        opt.zero_grad()
        if loss.requires_grad:
            T.backward(loss)
            opt.step()
        history.append(loss.item())
    return history
