"""Training, teacher pre-training and evaluation loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lacrange.autodiff import tensor as T
from lacrange.autodiff.optim import SGD
from lacrange.autodiff.tensor import Tensor
from lacrange.dataset_io.types import load_label_map
from lacrange.dckd import DistillBatch, distill_loss
from lacrange.errors import NumericalError
from lacrange.pipeline.data import IGNORE
from lacrange.pipeline.metrics import ConfusionMatrix, compute_confusion, miou
from lacrange.pipeline.model import LaCRangeNet, Teacher, infer


def cross_entropy(logits, labels: np.ndarray, axis: int = 0, class_weights=None) -> Tensor:
    """Weighted mean negative log-likelihood over entries whose label is not IGNORE.

    ``logits`` holds classes along ``axis`` ([C, H, W] maps or [N, C] rows);
    each entry counts with the weight of its class (1 without weights).
    """
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    keep = labels != IGNORE
    if not keep.any():
        return Tensor(0.0)
    c = logits.shape[axis]
    cw = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    w = np.where(keep, cw[np.where(keep, labels, 0)], 0.0)
    onehot = (np.arange(c).reshape([-1 if i == axis % logits.ndim else 1 for i in range(logits.ndim)])
              == np.expand_dims(np.where(keep, labels, -2), axis))
    target = onehot * np.expand_dims(w / w.sum(), axis)
    return -T.sum_(T.log_softmax(logits, axis=axis) * target.astype(logits.dtype))


def class_weights(samples: list, num_classes: int, mode: str) -> np.ndarray | None:
    """``inverse_sqrt``: ``1/sqrt(freq)`` over training points, scaled to mean 1."""
    if mode == "none":
        return None
    labels = np.concatenate([s.point_labels[s.point_labels != IGNORE] for s in samples])
    freq = np.bincount(labels, minlength=num_classes) / max(len(labels), 1)
    w = 1.0 / np.sqrt(np.maximum(freq, 1e-4))
    return w / w.mean()


def new_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# stream ids for independent seeded generators
INIT_STREAM, ORDER_STREAM, TEACHER_STREAM, HEAD_ORDER_STREAM = 1, 2, 3, 4


def scheduled_lr(base: float, step: int, steps: int, schedule: str) -> float:
    """Learning rate at ``step`` of ``steps``; ``cosine`` decays from ``base`` towards zero."""
    if schedule == "cosine" and steps > 0:
        return 0.5 * base * (1.0 + math.cos(math.pi * step / steps))
    return base


def pretrain_teacher(teacher: Teacher, samples: list, steps: int, lr: float, seed: int) -> list:
    """Image segmentation pre-training on the synthetic camera images (sky ignored)."""
    opt = SGD(teacher.parameters(), lr=lr, momentum=0.9)
    order = new_rng(seed, TEACHER_STREAM).permutation(len(samples))
    teacher.train()
    hist = []
    for step in range(steps):
        s = samples[order[step % len(order)]]
        loss = cross_entropy(teacher.segment(s.image), s.image_labels, 0)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        hist.append(loss.item())
    teacher.eval()
    return hist


def build_teacher(cfg, num_classes: int, train_samples: list) -> Teacher:
    teacher = Teacher(cfg.model.teacher_spec(), num_classes, new_rng(cfg.seed, TEACHER_STREAM))
    if cfg.teacher.mode == "pretrained" and cfg.teacher.pretrain_steps > 0:
        pretrain_teacher(teacher, train_samples, cfg.teacher.pretrain_steps, cfg.teacher.lr, cfg.seed)
    teacher.eval()
    return teacher


@dataclass
class TrainResult:
    model: LaCRangeNet
    teacher: Teacher | None
    log: list = field(default_factory=list)       # one dict per step


def step_losses(model: LaCRangeNet, sample, cfg, teacher_rv: list | None, cw=None) -> dict:
    """Forward pass in training mode and every weighted loss term."""
    out = model.forward(sample)
    terms = {"ce": cross_entropy(out["rv_logits"], sample.rv_labels, 0, cw)}
    w = cfg.loss
    if model.use_refine and w.refine_weight > 0:
        terms["point_ce"] = cross_entropy(model.point_logits(out, sample), sample.point_labels, 1, cw)
    if teacher_rv is not None and w.distill_weight > 0:
        s = model.adapted(out, sample.ri.mask.shape)
        terms["distill"] = distill_loss(DistillBatch([], s, None, sample.ri.rgb_mask, teacher_rv=teacher_rv))
    weights = {"ce": w.ce_weight, "point_ce": w.refine_weight, "distill": w.distill_weight}
    total = None
    for k, v in terms.items():
        part = v * weights[k]
        total = part if total is None else total + part
    terms["total"] = total
    return terms


def train(cfg, train_samples: list, teacher: Teacher | None = None, model: LaCRangeNet | None = None,
          params=None, log_fn=None) -> TrainResult:
    """Momentum SGD on ``ce + refine_weight * point_ce + distill_weight * L_d``.

    One scan per step, visiting a seeded permutation of the training set
    epoch by epoch.  ``params`` restricts the optimised weights (e.g. the
    refinement head only).  With ``optim.head_steps > 0`` a head-only phase
    on the frozen backbone follows (see :func:`finetune_head`).  A
    non-finite loss aborts with a NumericalError.
    """
    lm = load_label_map(cfg.label_map)
    if model is None:
        model = LaCRangeNet(cfg, lm.num_classes, new_rng(cfg.seed, INIT_STREAM))
    use_distill = model.use_camera and cfg.loss.distill_weight > 0 and teacher is not None
    opt = SGD(params if params is not None else model.parameters(), lr=cfg.optim.lr,
              momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay)
    rng = new_rng(cfg.seed, ORDER_STREAM)
    order = np.array([], dtype=np.int64)
    teacher_cache: dict = {}
    cw = class_weights(train_samples, lm.num_classes, cfg.loss.class_weighting)
    model.train()
    result = TrainResult(model, teacher)
    for step in range(cfg.optim.steps):
        if order.size == 0:
            order = rng.permutation(len(train_samples))
        idx, order = int(order[0]), order[1:]
        sample = train_samples[idx]
        t_rv = None
        if use_distill:
            if idx not in teacher_cache:
                teacher_cache[idx] = teacher.rv_targets(sample)
            t_rv = teacher_cache[idx]
        terms = step_losses(model, sample, cfg, t_rv, cw)
        vals = {k: v.item() for k, v in terms.items()}
        if not all(math.isfinite(v) for v in vals.values()):
            raise NumericalError(f"non-finite loss at step {step} (scene {idx}): {vals}")
        opt.zero_grad()
        opt.lr = scheduled_lr(cfg.optim.lr, step, cfg.optim.steps, cfg.optim.schedule)
        if terms["total"].requires_grad:
            T.backward(terms["total"])
            opt.step()
        entry = {"step": step, "scene": idx, **vals}
        result.log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    if model.use_refine and params is None and cfg.optim.head_steps > 0:
        def head_log(entry):
            entry = {**entry, "step": cfg.optim.steps + entry["step"], "total": entry["point_ce"]}
            result.log.append(entry)
            if log_fn is not None:
                log_fn(entry)
        finetune_head(model, train_samples, cfg, cfg.optim.head_steps, cfg.optim.head_lr, head_log)
    model.eval()
    return result


def attach_head(baseline: LaCRangeNet, cfg) -> LaCRangeNet:
    """Copy of ``baseline`` with a freshly initialised refinement head (``cfg`` must enable it)."""
    lm = load_label_map(cfg.label_map)
    model = LaCRangeNet(cfg, lm.num_classes, new_rng(cfg.seed, INIT_STREAM))
    state = model.state_dict()
    state.update({k: v for k, v in baseline.state_dict().items() if not k.startswith("refine.")})
    return model.load_state_dict(state)


def finetune_head(model: LaCRangeNet, samples: list, cfg, steps: int, lr: float, log_fn=None) -> list:
    """Train only the refinement head on top of a frozen backbone (weights and BN statistics).

    The backbone runs in inference mode without a tape; the loss is the
    class-weighted point cross-entropy.  Backbone outputs are computed once
    per scene.  Returns the per-step losses.
    """
    lm = load_label_map(cfg.label_map)
    opt = SGD(model.refine.parameters(), lr=lr, momentum=cfg.optim.momentum,
              weight_decay=cfg.optim.weight_decay)
    cw = class_weights(samples, lm.num_classes, cfg.loss.class_weighting)
    rng = new_rng(cfg.seed, HEAD_ORDER_STREAM)
    order = np.array([], dtype=np.int64)
    model.eval()
    model.refine.train()
    frozen: dict = {}
    losses = []
    for step in range(steps):
        if order.size == 0:
            order = rng.permutation(len(samples))
        idx, order = int(order[0]), order[1:]
        s = samples[idx]
        if idx not in frozen:
            with T.no_grad():
                frozen[idx] = model.forward(s)
        out = frozen[idx]
        loss = cross_entropy(model.point_logits(out, s), s.point_labels, 1, cw)
        if not math.isfinite(loss.item()):
            raise NumericalError(f"non-finite head loss at step {step} (scene {idx})")
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
        if log_fn is not None:
            log_fn({"step": step, "scene": idx, "point_ce": loss.item()})
    model.eval()
    return losses


def evaluate(model: LaCRangeNet, samples: list, cfg, methods=("knn", "refine")) -> dict:
    """Point-level mIoU per labelling method (colored points only when configured)."""
    lm = load_label_map(cfg.label_map)
    c = lm.num_classes
    methods = [m for m in methods if m != "refine" or model.use_refine]
    cms = {m: ConfusionMatrix.zeros(c) for m in methods}
    for s in samples:
        gt = s.point_labels.copy()
        if cfg.eval.colored_only and s.cloud.color_mask is not None:
            gt[~s.cloud.color_mask] = IGNORE
        _, labels = infer(s, model, tuple(methods))
        for m in methods:
            cms[m] = cms[m] + compute_confusion(labels[m], gt, c, IGNORE)
    out = {}
    for m, cm in cms.items():
        iou, mean = miou(cm)
        out[m] = {"miou": mean, "iou": iou, "confusion": cm}
    return out
