"""``lacrange`` command line: project, paint, train, eval, refine, bench, render, gen-scenes."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from lacrange.cff import STRATEGY_TOKENS
from lacrange.dataset_io import (
    gen_synthetic_scene,
    load_label_map,
    read_calib,
    read_ppm,
    read_scan,
    write_calib,
    write_labels,
    write_ppm,
    write_scan,
)
from lacrange.dataset_io.synthetic import scene_specs
from lacrange.errors import LaCRangeError
from lacrange.pipeline.config import load_config
from lacrange.rv_projection import build_rv_rgb, load_range_image, paint_points, save_range_image, spherical_project


def _config(args):
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "deterministic", False):
        over["deterministic"] = True
    if getattr(args, "distill_weight", None) is not None:
        over["loss.distill_weight"] = args.distill_weight
    if getattr(args, "mlu", None) is not None:
        over["model.mlu"] = args.mlu
    if getattr(args, "steps", None) is not None:
        over["optim.steps"] = args.steps
    for item in getattr(args, "set", None) or []:
        key, _, val = item.partition("=")
        over[key] = yaml.safe_load(val)
    return cfg.updated(over) if over else cfg


def cmd_gen_scenes(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in scene_specs(cfg.data.scene_spec(), args.count, args.first_seed):
        sc = gen_synthetic_scene(spec)
        stem = out / f"{spec.seed:06d}"
        write_scan(f"{stem}.bin", sc.cloud)
        write_labels(f"{stem}.label", sc.cloud.label)
        write_ppm(f"{stem}.ppm", sc.image)
        write_calib(f"{stem}_calib.txt", sc.camera)
        print(f"scene={spec.seed} points={len(sc.cloud)} path={stem}.bin")


def cmd_project(args):
    cfg = _config(args)
    ri = spherical_project(read_scan(args.scan), cfg.rv.rv_config())
    save_range_image(args.out, ri)
    print(f"pixels={int(ri.mask.sum())} points={len(ri.proj_row)} path={args.out}")


def cmd_paint(args):
    cfg = _config(args)
    image = read_ppm(args.image)
    cam = read_calib(args.calib, image_size=(image.shape[1], image.shape[0]))
    painted = paint_points(read_scan(args.scan), image, cam)
    ri = build_rv_rgb(painted, cfg.rv.rv_config())
    save_range_image(args.out, ri)
    print(f"colored_points={int(painted.color_mask.sum())} rgb_pixels={int(ri.rgb_mask.sum())} path={args.out}")


def cmd_train(args):
    from lacrange.pipeline.run import run_train
    cfg = _config(args)
    run_train(cfg, args.out, echo=print if args.verbose else None)
    print(f"checkpoint={Path(args.out) / 'model.rfw'}")


def cmd_eval(args):
    from lacrange.pipeline.run import run_eval
    cfg = _config(args) if args.config else None
    run_eval(args.checkpoint, args.out, cfg, echo=print, dump_dir=args.dump)


def cmd_refine(args):
    """Refine dumped RV logits (``logits*`` channels, optional ``dec*`` channels) of one scan."""
    from lacrange.pipeline.data import Sample, lidar_input, rv_label_map
    from lacrange.pipeline.run import load_model
    from lacrange.dckd import rv_rgb_input
    from lacrange.autodiff import tensor as T

    model, cfg = load_model(args.checkpoint)
    if not model.use_refine:
        raise LaCRangeError("checkpoint has no refinement head")
    ri, extra = load_range_image(args.rvi)
    cloud = read_scan(args.scan)
    logits = np.stack([extra[k] for k in sorted((k for k in extra if k.startswith("logits")),
                                                    key=lambda s: int(s[6:]))])
    dec_keys = sorted((k for k in extra if k.startswith("dec")), key=lambda s: int(s[3:]))
    dec = np.stack([extra[k] for k in dec_keys]) if dec_keys else np.zeros((model.refine.c_dec,) + ri.mask.shape)
    cam_in = rv_rgb_input(ri) if ri.rgb_mask is not None and "r" in ri.channel_names else np.zeros((4,) + ri.mask.shape)
    sample = Sample(cloud, ri, lidar_input(ri), cam_in, rv_label_map(ri, None))
    with T.no_grad():
        from lacrange.point_refine.head import refine_points
        labels = refine_points(logits, model.low_feats(sample), dec, ri, cloud, model.refine)
    write_labels(args.out, labels)
    print(f"points={len(labels)} path={args.out}")


def cmd_bench(args):
    from lacrange.pipeline.bench import benchmark, mlu_staging_benchmark
    from lacrange.pipeline.data import build_samples
    from lacrange.pipeline.model import LaCRangeNet

    cfg = _config(args).updated({"data.n_train": 1, "data.n_eval": 1})
    sample = build_samples(cfg, "eval")[0]
    lm = load_label_map(cfg.label_map)
    model = LaCRangeNet(cfg, lm.num_classes, np.random.default_rng(cfg.seed))
    rep = benchmark(model, sample.cloud, cfg.rv.rv_config(), trials=args.trials, warmup=1)
    for k, v in rep.items():
        print(f"stage={k} ms={v:.2f}")
    if args.mlu_compare:
        cfgs = {tok: cfg.updated({"model.mlu": tok}) for tok in ("combined", "xattn", "cbam")}
        for name, d in mlu_staging_benchmark(cfgs, sample, trials=args.trials).items():
            print(f"strategy={name} " + " ".join(f"{k}_ms={v:.2f}" for k, v in d.items()))


def cmd_render(args):
    from lacrange.pipeline.render import render_rv
    ri, extra = load_range_image(args.rvi)
    if args.channel == "labels":
        if "labels" not in extra:
            raise LaCRangeError(f"{args.rvi} has no 'labels' channel")
        data = np.rint(extra["labels"]).astype(np.int64)
        render_rv(data, ri.mask, args.out, load_label_map(args.label_map).palette)
    else:
        data = ri.channel(args.channel) if args.channel in ri.channel_names else extra.get(args.channel)
        if data is None:
            raise LaCRangeError(f"{args.rvi} has no channel {args.channel!r}")
        render_rv(data, ri.mask, args.out)
    print(f"path={args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lacrange", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="preset name (desk, full, tiny) or YAML path")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-scenes", cmd_gen_scenes, "write synthetic scans, labels, images and calibs")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--first-seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("project", cmd_project, "spherical projection of a .bin scan to an RVI1 file")
    sp.add_argument("--scan", required=True)
    sp.add_argument("--out", required=True)

    sp = add("paint", cmd_paint, "color a scan from an image and build the RV-RGB image")
    sp.add_argument("--scan", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train on the synthetic training split")
    sp.add_argument("--distill-weight", type=float, default=None)
    sp.add_argument("--mlu", choices=STRATEGY_TOKENS, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--verbose", action="store_true")

    sp = add("eval", cmd_eval, "evaluate a checkpoint directory on the synthetic eval split")
    sp.add_argument("--checkpoint", required=True, help="directory written by train")
    sp.add_argument("--out", default=None)
    sp.add_argument("--dump", default=None, help="write per-scan RVI1 files with logits and labels here")

    sp = add("refine", cmd_refine, "plug-and-play refinement of dumped RV logits")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--rvi", required=True, help="RVI1 file with logits0..C-1 channels")
    sp.add_argument("--scan", required=True)
    sp.add_argument("--out", required=True, help="output .label file")

    sp = add("bench", cmd_bench, "per-stage latency report")
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--mlu-compare", action="store_true")

    sp = add("render", cmd_render, "render an RVI1 channel or label map to PPM")
    sp.add_argument("--rvi", required=True)
    sp.add_argument("--channel", default="range")
    sp.add_argument("--label-map", default="synthetic8")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (LaCRangeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
