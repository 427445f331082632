"""The assembled network: LiDAR branch, RV-RGB student, fusion encoder, decoder, refinement."""

from __future__ import annotations

import contextlib
import time

import numpy as np

from lacrange.autodiff import layers as L
from lacrange.autodiff import tensor as T
from lacrange.autodiff.layers import Block
from lacrange.autodiff.tensor import Tensor
from lacrange.cff import CFFStage
from lacrange.dckd import EncoderSpec, ImageEncoder, Student, image_input, teacher_to_rv
from lacrange.errors import ConfigError
from lacrange.point_refine.head import RefineParams, logits_to_probs, refine_point_logits
from lacrange.rv_projection import knn_post_process

LIDAR_IN = 5
CAMERA_IN = 4


def conv_bn_params(cin: int, cout: int, rng: np.random.Generator) -> dict:
    return {"conv": L.conv_params(cin, cout, 3, rng), "bn": L.batchnorm_params(cout)}


def conv_bn(blk: dict, x, owner: Block) -> Tensor:
    return T.leaky_relu(L.bn(blk["bn"], L.apply_conv2d(blk["conv"], x), owner))


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.seconds: dict = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0


def _stage(timer, name):
    return timer.stage(name) if timer is not None else contextlib.nullcontext()


class Teacher(Block):
    """Frozen image encoder with a segmentation head used only for its own pre-training.

    ``calls`` counts encoder evaluations so tests can assert the teacher
    never runs at inference.
    """

    def __init__(self, spec: EncoderSpec, num_classes: int, rng: np.random.Generator):
        self.encoder = ImageEncoder(spec, rng)
        self.head = L.conv_params(spec.channels[0] + spec.channels[-1], num_classes, 1, rng)
        self.calls = 0

    def features(self, image: np.ndarray) -> list:
        self.calls += 1
        return self.encoder(image_input(image))

    def segment(self, image: np.ndarray) -> Tensor:
        feats = self.features(image)
        h, w = feats[0].shape[1:]
        top = T.upsample_bilinear(feats[-1], h, w)
        return L.apply_conv2d(self.head, T.concat([feats[0], top], axis=0))

    def rv_targets(self, sample) -> list:
        """Teacher maps scattered to the range image (no gradient)."""
        was = self.training
        self.eval()
        with T.no_grad():
            feats = self.features(sample.image)
        self.train(was)
        pm = sample.pixel_map
        return [teacher_to_rv(f, pm.img_dims, pm)[0] for f in feats]


class LaCRangeNet(Block):
    """Range-view segmenter with optional camera branch, context fusion and refinement head.

    Stage ``k`` of the LiDAR branch consumes the (pooled) fused output of
    stage ``k-1``; the camera branch is the RV-RGB student encoder, whose
    adapters exist only for distillation.
    """

    def __init__(self, cfg, num_classes: int, rng: np.random.Generator):
        m = cfg.model
        self.cfg = cfg
        self.num_classes = num_classes
        chans = tuple(m.lidar_channels)
        self.use_camera, self.use_cff, self.use_refine = m.use_camera, m.use_cff, m.use_refine
        self.kinds = m.strategy().stages
        cin = LIDAR_IN
        self.lidar = []
        for c in chans:
            self.lidar.append(conv_bn_params(cin, c, rng))
            cin = c
        if self.use_camera:
            self.student = Student(m.teacher_spec(), rng)
            cs = self.student.spec.channels
            self.fusion = [CFFStage(cs[k], chans[k], chans[k], self.kinds[k], rng, use_mlu=self.use_cff)
                           for k in range(len(chans))]
        self.decoder = [conv_bn_params(chans[k + 1] + chans[k], chans[k], rng)
                        for k in range(len(chans) - 2, -1, -1)]
        self.head = L.conv_params(chans[0], num_classes, 1, rng)
        if self.use_refine:
            c_low = LIDAR_IN + (CAMERA_IN if self.use_camera else 0)
            self.refine = RefineParams(c_low, chans[0], num_classes, cfg.refine, rng)

    def encode(self, sample, timer=None) -> tuple[list, list]:
        """Fused per-stage features and the raw student features."""
        student_feats = []
        if self.use_camera:
            with _stage(timer, "camera_encoder"):
                student_feats = self.student.encoder(sample.camera_in)
        fused = []
        x = Tensor(sample.lidar_in)
        for k, blk in enumerate(self.lidar):
            with _stage(timer, "lidar_encoder"):
                if k:
                    x = T.avg_pool2(x)
                lid = conv_bn(blk, x, self)
            if self.use_camera:
                with _stage(timer, "fusion"):
                    x = self.fusion[k](student_feats[k], lid, timer)
            else:
                x = lid
            fused.append(x)
        return fused, student_feats

    def decode(self, fused: list) -> Tensor:
        x = fused[-1]
        for blk, skip in zip(self.decoder, reversed(fused[:-1])):
            x = T.upsample_bilinear(x, *skip.shape[1:])
            x = conv_bn(blk, T.concat([x, skip], axis=0), self)
        return x

    def forward(self, sample, timer=None) -> dict:
        fused, student_feats = self.encode(sample, timer)
        with _stage(timer, "decoder"):
            dec = self.decode(fused)
            logits = L.apply_conv2d(self.head, dec)
        return {"rv_logits": logits, "dec": dec, "student_feats": student_feats}

    def low_feats(self, sample) -> np.ndarray:
        return sample.low_feats if self.use_camera else sample.lidar_in

    def point_logits(self, out: dict, sample) -> Tensor:
        if not self.use_refine:
            raise ConfigError("model was built without the refinement head")
        return refine_point_logits(out["rv_logits"], self.low_feats(sample), out["dec"], sample.ri,
                                   sample.cloud, self.refine, sample.cache)

    def adapted(self, out: dict, rv_dims: tuple) -> list:
        return [a(f, rv_dims) for a, f in zip(self.student.adapters, out["student_feats"])]


def knn_labels(out: dict, sample, eval_cfg) -> np.ndarray:
    probs = logits_to_probs(out["rv_logits"])
    return knn_post_process(sample.ri, sample.cloud, probs, eval_cfg.knn_k, eval_cfg.knn_window,
                            eval_cfg.knn_cutoff, eval_cfg.knn_sigma)


def label_points(out: dict, sample, model: LaCRangeNet, method: str) -> np.ndarray:
    """Per-point labels from a forward pass via ``refine`` (head) or ``knn`` (voting)."""
    if method == "refine":
        with T.no_grad():
            return np.argmax(model.point_logits(out, sample).data, axis=1)
    if method == "knn":
        return knn_labels(out, sample, model.cfg.eval)
    raise ConfigError(f"unknown point labelling method {method!r}")


def infer(sample, model: LaCRangeNet, methods: tuple, timer=None) -> tuple[dict, dict]:
    """Eval-mode forward pass plus labels for each method; the teacher is never run."""
    was = model.training
    model.eval()
    try:
        with T.no_grad():
            out = model.forward(sample, timer)
            labels = {m: label_points(out, sample, model, m) for m in methods}
    finally:
        model.train(was)
    return out, labels


def forward_pipeline(sample, model: LaCRangeNet, method: str | None = None,
                     timer=None) -> tuple[Tensor, np.ndarray]:
    """Inference: RV logits and one label per point.

    ``method`` is ``refine`` or ``knn``; by default the refinement head is
    used when the model has one.
    """
    method = method or ("refine" if model.use_refine else "knn")
    out, labels = infer(sample, model, (method,), timer)
    return out["rv_logits"], labels[method]
