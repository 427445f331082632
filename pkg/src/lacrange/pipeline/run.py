"""File-level workflows shared by the CLI and the acceptance tests."""

from __future__ import annotations

import contextlib
import json
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from lacrange.autodiff.checkpoint import load_weights, save_weights
from lacrange.dataset_io.types import load_label_map
from lacrange.pipeline.config import PipelineConfig
from lacrange.pipeline.data import build_samples
from lacrange.dataset_io.kitti import write_scan
from lacrange.pipeline.model import LaCRangeNet, infer
from lacrange.rv_projection import save_range_image
from lacrange.pipeline.train import INIT_STREAM, build_teacher, evaluate, new_rng, train

CHECKPOINT = "model.rfw"
CONFIG = "config.yaml"
SUMMARY = "summary.json"
TRAIN_LOG = "train_log.txt"
EVAL_LOG = "eval_log.txt"


def deterministic_context(cfg: PipelineConfig):
    """Single-threaded BLAS when the config asks for bit-reproducible runs."""
    return threadpool_limits(limits=1) if cfg.deterministic else contextlib.nullcontext()


def kv_line(entry: dict) -> str:
    """``key=value`` pairs; floats use repr so the text is exact."""
    parts = []
    for k, v in entry.items():
        if isinstance(v, float):
            v = repr(v)
        parts.append(f"{k}={v}")
    return " ".join(parts)


def save_model(model: LaCRangeNet, cfg: PipelineConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(out / CHECKPOINT, model.state_dict())
    (out / CONFIG).write_text(cfg.to_yaml(), encoding="utf-8")


def load_model(ckpt_dir, cfg: PipelineConfig | None = None) -> tuple[LaCRangeNet, PipelineConfig]:
    d = Path(ckpt_dir)
    if cfg is None:
        cfg = PipelineConfig.from_dict(yaml.safe_load((d / CONFIG).read_text(encoding="utf-8")))
    lm = load_label_map(cfg.label_map)
    model = LaCRangeNet(cfg, lm.num_classes, new_rng(cfg.seed, INIT_STREAM))
    model.load_state_dict(load_weights(d / CHECKPOINT))
    return model.eval(), cfg


def update_summary(out_dir, key: str, payload: dict):
    path = Path(out_dir) / SUMMARY
    data = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    data[key] = payload
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return data


def run_train(cfg: PipelineConfig, out_dir, echo=None) -> dict:
    """Train (teacher included), write checkpoint, config, key=value log and summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with deterministic_context(cfg):
        lm = load_label_map(cfg.label_map)
        samples = build_samples(cfg, "train")
        teacher = None
        if cfg.model.use_camera and cfg.loss.distill_weight > 0:
            teacher = build_teacher(cfg, lm.num_classes, samples)
        with open(out / TRAIN_LOG, "w", encoding="utf-8") as log:
            def log_fn(entry):
                line = kv_line(entry)
                log.write(line + "\n")
                if echo:
                    echo(line)
            res = train(cfg, samples, teacher, log_fn=log_fn)
    save_model(res.model, cfg, out)
    last = res.log[-1] if res.log else {}
    payload = {"steps": len(res.log), "config": cfg.to_dict(),
               "first_total": res.log[0]["total"] if res.log else None,
               "final": {k: v for k, v in last.items() if k not in ("step", "scene")}}
    update_summary(out, "train", payload)
    return payload


def dump_predictions(model: LaCRangeNet, samples: list, out_dir):
    """Per scan: the .bin cloud and an RVI1 file with logits, decoder features and RV labels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        o, _ = infer(s, model, ())
        logits = o["rv_logits"].data
        extra = {"logits": logits, "dec": o["dec"].data, "labels": np.argmax(logits, axis=0)[None]}
        save_range_image(out / f"{i:06d}.rvi", s.ri, extra)
        write_scan(out / f"{i:06d}.bin", s.cloud)


def run_eval(ckpt_dir, out_dir=None, cfg: PipelineConfig | None = None, echo=None,
             dump_dir=None) -> dict:
    """Evaluate a checkpoint on the eval split; kNN and (if present) refinement labels."""
    model, cfg = load_model(ckpt_dir, cfg)
    out = Path(out_dir or ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    with deterministic_context(cfg):
        samples = build_samples(cfg, "eval")
        res = evaluate(model, samples, cfg)
        if dump_dir is not None:
            dump_predictions(model, samples, dump_dir)
    lm = load_label_map(cfg.label_map)
    payload = {}
    lines = []
    for method, r in res.items():
        iou = {name: (None if np.isnan(v) else float(v)) for name, v in zip(lm.class_names, r["iou"])}
        payload[method] = {"miou": r["miou"], "iou": iou, "points": r["confusion"].total}
        lines.append(kv_line({"method": method, "miou": r["miou"], "points": r["confusion"].total}))
    (out / EVAL_LOG).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if echo:
        for line in lines:
            echo(line)
    update_summary(out, "eval", payload)
    return payload
