"""Per-stage latency measurements."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from lacrange.autodiff import tensor as T
from lacrange.pipeline.data import Sample, sample_from_painted
from lacrange.pipeline.model import LaCRangeNet, StageTimer
from lacrange.point_refine.head import logits_to_probs
from lacrange.point_refine.nafa import nafa_logits
from lacrange.point_refine.sr2fa import sr2fa_forward

STAGES = ("projection", "camera_encoder", "lidar_encoder", "fusion", "decoder", "sr2fa", "nafa")


def _as32(sample: Sample) -> Sample:
    return replace(sample, lidar_in=sample.lidar_in.astype(np.float32),
                   camera_in=sample.camera_in.astype(np.float32), cache={})


def timed_inference(model: LaCRangeNet, cloud, rv_cfg, dtype=np.float32) -> dict:
    """One full inference from a painted cloud, returning seconds per stage and ``total``.

    Nothing is cached between calls: projection and every neighbor lookup
    are part of the measured work.
    """
    timer = StageTimer()
    t0 = time.perf_counter()
    with timer.stage("projection"):
        sample = sample_from_painted(cloud, rv_cfg, camera=None)
        if dtype == np.float32:
            sample = _as32(sample)
    with T.no_grad():
        out = model.forward(sample, timer)
        if model.use_refine:
            r = model.refine
            with timer.stage("sr2fa"):
                probs = logits_to_probs(out["rv_logits"])
                feats = sr2fa_forward(model.low_feats(sample).astype(dtype), out["dec"], probs, sample.ri,
                                      r.sr2fa, aggregate=r.cfg.use_sr2fa)
            with timer.stage("nafa"):
                logits = nafa_logits(sample.cloud, feats, probs, sample.ri, r.nafa.grids, r.nafa)
                np.argmax(logits.data, axis=1)
    timer.seconds["total"] = time.perf_counter() - t0
    return timer.seconds


def benchmark(model: LaCRangeNet, cloud, rv_cfg, trials: int = 5, warmup: int = 1,
              dtype=np.float32) -> dict:
    """Median milliseconds per stage over ``trials`` runs after ``warmup`` discarded runs."""
    model.eval()
    if dtype == np.float32:
        model.astype(np.float32)
    runs = []
    for i in range(warmup + trials):
        secs = timed_inference(model, cloud, rv_cfg, dtype=dtype)
        if i >= warmup:
            runs.append(secs)
    keys = [k for k in STAGES + ("mlu", "total") if any(k in r for r in runs)]
    report = {k: 1000.0 * float(np.median([r.get(k, 0.0) for r in runs])) for k in keys}
    report["stage_sum"] = sum(report[k] for k in STAGES if k in report)
    return report


def mlu_staging_benchmark(cfg_by_name: dict, sample: Sample, trials: int = 20, warmup: int = 2,
                          num_classes: int = 8, seed: int = 0) -> dict:
    """Interleaved encoder timings for several MLU strategies on one input.

    ``cfg_by_name`` maps a label (e.g. ``combined``) to a PipelineConfig.
    Returns, per label, the medians (ms) of the summed look-up time over all
    stages (``mlu``), of the whole fusion stage (``fusion``) and of the
    encoder (``encoder``).
    """
    models = {}
    for name, cfg in cfg_by_name.items():
        m = LaCRangeNet(cfg, num_classes, np.random.default_rng(seed))
        models[name] = m.eval().astype(np.float32)
    s32 = _as32(sample)
    times = {name: {"mlu": [], "fusion": [], "encoder": []} for name in models}
    for i in range(warmup + trials):
        for name, m in models.items():
            timer = StageTimer()
            t0 = time.perf_counter()
            with T.no_grad():
                m.encode(s32, timer)
            total = time.perf_counter() - t0
            if i >= warmup:
                times[name]["mlu"].append(timer.seconds.get("mlu", 0.0))
                times[name]["fusion"].append(timer.seconds.get("fusion", 0.0))
                times[name]["encoder"].append(total)
    return {name: {k: 1000.0 * float(np.median(v)) for k, v in d.items()} for name, d in times.items()}
