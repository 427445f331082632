"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py).  Criteria 7
to 9 train or time the full desk-scale pipeline and are marked ``slow``.
Brute-force oracles are shared with the unit-test modules next to this file.
"""

import json
import math
import time

import numpy as np
import pytest

from lacrange.autodiff import layers as L
from lacrange.autodiff import tensor as T
from lacrange.autodiff.gradcheck import check_gradients
from lacrange.autodiff.tensor import Tensor
from lacrange.cff import CbamMLU, FusedContext, ModalityFeatures, ResBlock, XattnMLU, mlu_cbam, mlu_xattn
from lacrange.dataset_io import SceneSpec, gen_synthetic_scene
from lacrange.dckd import (
    Adapter,
    DistillBatch,
    EncoderSpec,
    ImageEncoder,
    Student,
    build_pixel_map,
    distill_loss,
    fit_student,
    rv_rgb_input,
    teacher_rv_features,
)
from lacrange.pipeline.bench import mlu_staging_benchmark
from lacrange.pipeline.cli import main
from lacrange.pipeline.config import load_config
from lacrange.pipeline.data import build_samples
from lacrange.pipeline.metrics import compute_confusion, miou
from lacrange.pipeline.train import attach_head, build_teacher, evaluate, finetune_head, train
from lacrange.point_refine import (
    BranchParams,
    CylGrid,
    NAFAParams,
    VoxelMLPs,
    aggregate_branch,
    cylindrical_voxelize,
    fusion_weights,
    nafa_logits,
    pfe_apply,
    pixel_confidence,
    range_knn,
    select_neighbors,
    voxel_scatter_gather,
)
from lacrange.rv_projection import RVConfig, back_project, build_rv_rgb, knn_post_process, spherical_project
from test_pipeline import brute_confusion, brute_miou
from test_point_refine import brute_neighbors, brute_range_knn, brute_voxel, random_maps
from test_rv_projection import knn_brute, random_instance


def _scene(seed, beams=16, steps=512, width=128, height=48):
    return gen_synthetic_scene(SceneSpec(seed=seed, beams=beams, azimuth_steps=steps,
                                         image_width=width, image_height=height))


# ---------------------------------------------------------------------------
# 1. semantic confidence
# ---------------------------------------------------------------------------

def test_c1_confidence_bounds(report):
    t0 = time.perf_counter()
    err = 0.0
    for c in range(2, 30):
        err = max(err, abs(pixel_confidence(np.full(c, 1.0 / c))))
        for k in range(c):
            err = max(err, abs(pixel_confidence(np.eye(c)[k]) - 1.0))
    rng = np.random.default_rng(1)
    phis = []
    for _ in range(10_000):
        c = int(rng.integers(2, 25))
        alpha = float(rng.choice([0.05, 1.0, 50.0]))
        phis.append(pixel_confidence(rng.dirichlet(np.full(c, alpha))))
    phis = np.array(phis)
    secs = time.perf_counter() - t0
    ok = err <= 1e-12 and phis.min() >= 0.0 and phis.max() <= 1.0 and secs < 5
    report(1, ok, f"endpoint error {err:.1e}, range [{phis.min():.3g}, {phis.max():.3g}], {secs:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. fusion weights
# ---------------------------------------------------------------------------

def test_c2_fusion_weights(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    phi, lam = rng.random(10_000), rng.uniform(0, 10, 10_000)
    w_r, w_s = fusion_weights(phi, 0.0)
    worst = float(np.abs(w_r + w_s - 1).max())
    for p, l in zip(phi, lam):
        w_r, w_s = fusion_weights(p, l)
        worst = max(worst, abs(float(w_r + w_s) - 1.0))
    grid = np.linspace(0, 1, 100)
    monotone = all(np.all(np.diff(fusion_weights(grid, l)[1]) >= 0) for l in (0.0, 0.1, 1.0, 5.0, 50.0))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and monotone and secs < 5
    report(2, ok, f"max |sum-1| {worst:.1e}, semantic weight monotone {monotone}, {secs:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. finite-difference gradients
# ---------------------------------------------------------------------------

def _away(rng, shape):
    return Tensor(rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape))


def _sq(out, tgt):
    return T.sum_((out - tgt) ** 2)


def grad_adapter(rng):
    a = Adapter(3, 4, rng)
    x, tgt = _away(rng, (3, 3, 4)), rng.normal(size=(4, 6, 8))
    return check_gradients(lambda x_, *p: _sq(a(x_, (6, 8)), tgt), [x] + a.parameters())


def grad_resblock(rng):
    blk = ResBlock(3, 4, rng)
    x, tgt = _away(rng, (3, 4, 5)), rng.normal(size=(4, 4, 5))
    return check_gradients(lambda x_, *p: _sq(blk(x_), tgt), [x] + blk.parameters())


def _grad_mlu(rng, cls, fn):
    p = cls(4, 3, rng)
    fused, pre, tgt = _away(rng, (4, 5, 6)), _away(rng, (3, 5, 6)), rng.normal(size=(3, 5, 6))

    def loss(f_, m_, *w):
        return _sq(fn(FusedContext.from_fused(f_), ModalityFeatures.from_pre(m_), p), tgt)

    return check_gradients(loss, [fused, pre] + p.parameters())


def grad_pfe(rng):
    p = L.mlp_params(3, 4, rng)
    x, valid, tgt = _away(rng, (5, 4, 3)), rng.random((5, 4)) < 0.7, rng.normal(size=(5, 4, 12))
    return check_gradients(lambda x_, *w: _sq(pfe_apply(x_, p, valid), tgt), [x] + p.weights)


def _grad_branch(rng, d_in):
    params = BranchParams(d_in, 5, rng)
    valid = rng.random((6, 4)) < 0.8
    valid[:, 0] = True
    dist, vals, tgt = Tensor(rng.random((6, 4, d_in)) + 0.05), _away(rng, (6, 4, 3)), rng.normal(size=(6, 3))

    def loss(d_, v_, *w):
        return _sq(aggregate_branch(valid, d_, v_, params)[0], tgt)

    return check_gradients(loss, [dist, vals] + params.parameters())


def grad_voxel_mlps(rng):
    mlps = VoxelMLPs(4, rng)
    rows, tgt = _away(rng, (12, 4)), rng.normal(size=(12, 4))
    vox, valid = rng.integers(0, 4, 12), rng.random(12) < 0.8
    return check_gradients(lambda r_, *w: _sq(voxel_scatter_gather(r_, vox, mlps, valid), tgt),
                           [rows] + mlps.parameters())


def grad_classifier(rng):
    p = NAFAParams(3, 4, rng, hidden=4)
    pooled, onehot = _away(rng, (7, 12)), np.eye(4)[rng.integers(0, 4, 7)]

    def loss(x_, *w):
        logits = L.apply_mlp(p.cls2, L.apply_mlp(p.cls1, x_))
        return -T.sum_(T.log_softmax(logits, axis=-1) * onehot)

    return check_gradients(loss, [pooled] + p.cls1.weights + p.cls2.weights)


def grad_nafa_end_to_end(rng):
    sc = _scene(7, beams=8, steps=128, width=64, height=24)
    ri = spherical_project(sc.cloud, RVConfig(8, 32))
    params = NAFAParams(3, 4, rng, hidden=4, K=3, window=3, grids=(CylGrid((3, 4, 2)), CylGrid((6, 8, 2))))
    feats, probs = Tensor(rng.normal(size=(3, 8, 32))), rng.dirichlet(np.ones(4), size=(8, 32))
    onehot = np.eye(4)[rng.integers(0, 4, len(sc.cloud))]

    def loss(f_, *w):
        logits = nafa_logits(sc.cloud, f_, probs, ri, params.grids, params)
        return -T.sum_(T.log_softmax(logits, axis=-1) * onehot) / len(sc.cloud)

    return check_gradients(loss, [feats] + params.parameters())


GRAD_BLOCKS = {
    "adapter": grad_adapter,
    "resblock": grad_resblock,
    "mlu_cbam": lambda rng: _grad_mlu(rng, CbamMLU, mlu_cbam),
    "mlu_xattn": lambda rng: _grad_mlu(rng, XattnMLU, mlu_xattn),
    "pfe": grad_pfe,
    "branch_semantic": lambda rng: _grad_branch(rng, 6),
    "branch_range_remission": lambda rng: _grad_branch(rng, 8),
    "nafa_voxel_mlps": grad_voxel_mlps,
    "classifier": grad_classifier,
    "nafa_end_to_end": grad_nafa_end_to_end,
}


def test_c3_gradient_checks(report):
    t0 = time.perf_counter()
    errs = {name: fn(np.random.default_rng(30 + i)) for i, (name, fn) in enumerate(GRAD_BLOCKS.items())}
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and secs < 120
    report(3, ok, f"{len(errs)} blocks, worst {worst} {errs[worst]:.1e}, {secs:.1f}s")
    assert ok, errs


# ---------------------------------------------------------------------------
# 4. brute-force oracles
# ---------------------------------------------------------------------------

def _check_knn(rng):
    ri, cloud, probs = random_instance(rng, n=int(rng.integers(5, 60)))
    k, window, cutoff = int(rng.integers(1, 8)), int(rng.choice([3, 5])), float(rng.uniform(0.2, 3.0))
    return np.array_equal(knn_post_process(ri, cloud, probs, k=k, window=window, cutoff_m=cutoff),
                          knn_brute(ri, probs, k, window, cutoff, 1.0))


def _check_neighbors(rng, metric):
    mask, probs, rng_ch, rem_ch = random_maps(rng)
    rows, cols = np.nonzero(mask)
    i = int(rng.integers(rows.size))
    window, k = int(rng.choice([1, 3, 5, 7])), int(rng.integers(1, 10))
    got = select_neighbors((rows[i], cols[i]), probs, rng_ch, rem_ch, mask, window, k, metric)
    want = brute_neighbors((rows[i], cols[i]), probs, rng_ch, rem_ch, mask, window, k, metric)
    return [tuple(map(int, p)) for p in got.pixels(0)] == want


def _check_range_knn(rng, scenes):
    cloud, ri = scenes[int(rng.integers(len(scenes)))]
    i, K, window = int(rng.integers(len(cloud))), int(rng.integers(1, 9)), int(rng.choice([3, 5, 7]))
    return range_knn(i, ri, K, window) == brute_range_knn(i, ri, K, window)


def _check_voxel(rng):
    grid = CylGrid(tuple(int(v) for v in rng.integers(1, 12, 3)), float(rng.uniform(5, 80)),
                   float(rng.uniform(-4, -1)), float(rng.uniform(0.5, 4)))
    pts = rng.uniform(-90, 90, size=(30, 3)) * np.array([1, 1, 0.06])
    return cylindrical_voxelize(pts, grid).tolist() == [brute_voxel(p, grid) for p in pts]


def _check_miou(rng):
    c = int(rng.integers(2, 7))
    gt, pr = rng.integers(-1, c, 200), rng.integers(0, c, 200)
    cm = compute_confusion(pr, gt, c, -1)
    want = brute_confusion(pr, gt, c, -1)
    if not np.array_equal(cm.counts, want):
        return False
    if want.sum() == 0:
        return True
    return abs(miou(cm)[1] - brute_miou(want)) <= 1e-12


def test_c4_brute_force_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    scenes = []
    for s in range(5):
        sc = _scene(40 + s, beams=8, steps=128, width=64, height=24)
        scenes.append((sc.cloud, spherical_project(sc.cloud, RVConfig(8, 64))))
    checks = {
        "knn": lambda: _check_knn(rng),
        "neighbors_semantic": lambda: _check_neighbors(rng, "semantic"),
        "neighbors_range_remission": lambda: _check_neighbors(rng, "range_remission"),
        "range_knn": lambda: _check_range_knn(rng, scenes),
        "voxelize": lambda: _check_voxel(rng),
        "miou": lambda: _check_miou(rng),
    }
    fails = {name: sum(not fn() for _ in range(120)) for name, fn in checks.items()}
    secs = time.perf_counter() - t0
    ok = not any(fails.values()) and secs < 120
    report(4, ok, f"120 instances x {len(checks)} routines, mismatches {fails}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. projection round trip and azimuth covariance
# ---------------------------------------------------------------------------

def test_c5_round_trip_and_azimuth_shift(report):
    t0 = time.perf_counter()
    cfg = RVConfig(16, 256)
    a = 2 * math.pi / cfg.width
    rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    bad_trip = bad_shift = checked = 0
    for seed in range(50):
        cloud = _scene(500 + seed).cloud
        ri = spherical_project(cloud, cfg)
        surv = ri.survivors
        img = np.full(ri.mask.shape, -1, dtype=np.int64)
        img[ri.mask] = cloud.label[surv]
        bad_trip += int(np.any(back_project(img, ri)[surv] != cloud.label[surv]))
        bad_trip += int(np.any(ri.index_map[ri.proj_row[surv], ri.proj_col[surv]] != surv))
        moved = cloud.__class__(cloud.xyz @ rot.T, cloud.remission)
        ri2 = spherical_project(moved, cfg)
        yaw = np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0])
        u = cfg.width * 0.5 * (1 - yaw / np.pi)
        frac = u - np.floor(u)
        pitch = np.arcsin(cloud.xyz[:, 2] / ri.point_range)
        v = cfg.height * (1 - (pitch - cfg.fov_down) / (cfg.fov_up - cfg.fov_down))
        safe = ((frac > 1e-6) & (frac < 1 - 1e-6) & (u > 1) & (u < cfg.width - 1)
                & (v >= 0) & (v < cfg.height))
        checked += int(safe.sum())
        bad_shift += int(np.any(ri2.proj_row[safe] != ri.proj_row[safe]))
        bad_shift += int(np.any(ri2.proj_col[safe] != ri.proj_col[safe] - 1))
    secs = time.perf_counter() - t0
    ok = bad_trip == 0 and bad_shift == 0 and checked > 0 and secs < 60
    report(5, ok, f"50 scans, round-trip failures {bad_trip}, shift failures {bad_shift} "
                  f"over {checked} points, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. distillation
# ---------------------------------------------------------------------------

def _student_loss(student, samples):
    vals = []
    with T.no_grad():
        for x, t_rv, mask in samples:
            _, s = student.adapted(x, mask.shape)
            vals.append(distill_loss(DistillBatch([], s, None, mask, teacher_rv=t_rv)).item())
    return float(np.mean(vals))


def test_c6_distillation(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    t = [rng.normal(size=(16, 16, 256)), rng.normal(size=(32, 16, 256))]
    mask = rng.random((16, 256)) < 0.3
    as_batch = lambda tv, sv: DistillBatch([], [Tensor(v) for v in sv], None, mask,
                                           teacher_rv=[Tensor(v) for v in tv])
    self_loss = distill_loss(as_batch(t, t)).item()
    s = [v + rng.normal(size=v.shape) for v in t]
    base = distill_loss(as_batch(t, s)).item()
    drift = 0.0
    for _ in range(20):
        s2 = [np.where(mask, v, rng.normal(size=v.shape) * 1e3) for v in s]
        t2 = [np.where(mask, v, rng.normal(size=v.shape) * 1e3) for v in t]
        drift = max(drift, abs(distill_loss(as_batch(t2, s2)).item() - base))

    spec = EncoderSpec((16, 32, 32, 64), "teacher", 3)
    teacher = ImageEncoder(spec, np.random.default_rng(60))
    teacher.eval()
    rv = RVConfig(16, 256)
    samples = []
    for seed in range(8):
        sc = _scene(600 + seed)
        ri = build_rv_rgb(sc.cloud, rv)
        pm = build_pixel_map(sc.cloud, sc.camera, ri)
        with T.no_grad():
            t_rv = teacher_rv_features(teacher, sc.image, pm)
        samples.append((rv_rgb_input(ri), t_rv, ri.rgb_mask))
    student = Student(spec, np.random.default_rng(61))
    before = _student_loss(student, samples)
    fit_student(student, samples, steps=200)
    after = _student_loss(student, samples)
    drop = 1.0 - after / before
    secs = time.perf_counter() - t0
    ok = self_loss == 0.0 and drift < 1e-12 and drop >= 0.5 and secs < 300
    report(6, ok, f"L(T,T)={self_loss}, unmasked drift {drift:.1e}, "
                  f"student loss {before:.4f} -> {after:.4f} ({100 * drop:.1f}% drop), {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7. ablation on the desk benchmark
# ---------------------------------------------------------------------------

ABLATION = {
    "base": {"model.use_cff": False, "model.use_refine": False, "loss.distill_weight": 0.0},
    "dckd": {"model.use_cff": False, "model.use_refine": False},
    "cff": {"model.use_refine": False},
    "nafa": {"refine.use_sr2fa": False},
    "full": {},
}


def run_ablation(seed: int) -> dict:
    """mIoU (points, percent) per variant; refinement variants report both label methods."""
    cfg0 = load_config("desk").updated({"seed": seed})
    train_set, eval_set = build_samples(cfg0, "train"), build_samples(cfg0, "eval")
    teacher = build_teacher(cfg0, 8, train_set)
    out = {}
    for name, over in ABLATION.items():
        cfg = cfg0.updated(over)
        res = evaluate(train(cfg, train_set, teacher).model, eval_set, cfg)
        out[name] = {m: 100 * r["miou"] for m, r in res.items()}
    return out


@pytest.mark.slow
def test_c7_ablation(report):
    t0 = time.perf_counter()
    runs = [run_ablation(seed) for seed in range(3)]
    mean = lambda name, m: float(np.mean([r[name][m] for r in runs]))
    ladder = [mean("base", "knn"), mean("dckd", "knn"), mean("cff", "knn"),
              mean("nafa", "refine"), mean("full", "refine")]
    steps = np.diff(ladder)
    gain = mean("full", "refine") - mean("full", "knn")
    secs = time.perf_counter() - t0
    ok = gain >= 2.0 and steps.min() >= -0.5 and secs < 1800
    report(7, ok, f"ladder base/dckd/cff/nafa/full {[round(v, 2) for v in ladder]}, "
                  f"refine - knn {gain:.2f}, {secs / 60:.1f} min")
    print(json.dumps(runs, indent=1))
    assert ok


# ---------------------------------------------------------------------------
# 8. plug-and-play head on a second baseline
# ---------------------------------------------------------------------------

PNP_SEED = 7
PNP_HEAD_STEPS = 600


@pytest.mark.slow
def test_c8_plug_and_play(report):
    t0 = time.perf_counter()
    cfg = load_config("desk").updated({"seed": PNP_SEED})
    train_set, eval_set = build_samples(cfg, "train"), build_samples(cfg, "eval")
    base_cfg = cfg.updated({"model.use_camera": False, "model.use_refine": False, "loss.distill_weight": 0.0})
    baseline = train(base_cfg, train_set, None).model
    knn = 100 * evaluate(baseline, eval_set, base_cfg)["knn"]["miou"]
    head_cfg = base_cfg.updated({"model.use_refine": True})
    model = attach_head(baseline, head_cfg)
    finetune_head(model, train_set, head_cfg, PNP_HEAD_STEPS, head_cfg.optim.head_lr)
    refined = 100 * evaluate(model, eval_set, head_cfg, methods=("refine",))["refine"]["miou"]
    secs = time.perf_counter() - t0
    ok = refined >= knn and secs < 900
    report(8, ok, f"LiDAR-only baseline kNN {knn:.2f} -> attached head {refined:.2f} "
                  f"after {PNP_HEAD_STEPS} head steps, {secs / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 9. MLU staging cost
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c9_mlu_staging_cost(report):
    cfg = load_config("full").updated({"data.n_train": 1, "data.n_eval": 1})
    sample = build_samples(cfg, "eval")[0]
    cfgs = {tok: cfg.updated({"model.mlu": tok}) for tok in ("combined", "xattn")}
    res = mlu_staging_benchmark(cfgs, sample, trials=20)
    comb, xattn = res["combined"]["mlu"], res["xattn"]["mlu"]
    ok = comb <= xattn
    report(9, ok, f"median MLU time at 64x2048: combined {comb:.1f} ms, xattn-only {xattn:.1f} ms; "
                  f"encoder {res['combined']['encoder']:.0f} vs {res['xattn']['encoder']:.0f} ms")
    assert ok


# ---------------------------------------------------------------------------
# 10. deterministic CLI runs
# ---------------------------------------------------------------------------

def test_c10_deterministic_cli(tmp_path, report):
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", "tiny", "--seed", "3", "--deterministic", "--out", str(out)]) == 0
        assert main(["eval", "--checkpoint", str(out), "--deterministic"]) == 0
        digests.append((out / "summary.json").read_bytes())
    ok = digests[0] == digests[1]
    report(10, ok, f"summary.json byte-identical across two seeded runs: {ok} ({len(digests[0])} bytes)")
    assert ok
