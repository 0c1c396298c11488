"""Command-line surface.

Subcommands: phantom-gen, mask-gen, undersample, train, reconstruct,
evaluate, macs, inspect. Report-producing commands write the delimited
or key=value files named on the command line and render companion
figures next to them.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import figures, kspace, phantom
from .engine import load_array, precision, save_array
from .explain import (HeatmapRequest, attention_heatmap, capture_deformation,
                      deformed_points_on_map, offset_field)
from .fileio import atomic_write_text, write_pgm
from .macs import macs_estimate
from .model import (PRESET_NAMES, load_checkpoint, model_config_from_mapping,
                    parse_kv_text, preset_config, save_checkpoint)
from .trainer import (TrainConfig, evaluate, format_log, init_state,
                      reconstruct, train_loop)


def _load_image(path) -> np.ndarray:
    arr = np.asarray(load_array(path), dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise SystemExit(f"{path}: expected a 2-D image, found shape {arr.shape}")
    return arr


def _sibling(path, suffix: str) -> str:
    base, _ = os.path.splitext(str(path))
    return base + suffix


def cmd_phantom_gen(args) -> int:
    phantoms = phantom.phantom_gen(args.seed, args.n, args.size)
    paths = phantom.save_dataset(args.out, phantoms)
    print(f"wrote {len(paths)} phantoms of {args.size}x{args.size} to {args.out}")
    return 0


def cmd_mask_gen(args) -> int:
    if args.kind == "gaussian1d":
        mask = kspace.gaussian1d_mask(args.size, args.size, args.ratio,
                                      center_fraction=args.center_fraction,
                                      seed=args.seed)
    else:
        mask = kspace.radial_mask(args.size, args.size, args.ratio, seed=args.seed)
    mask.save(args.out)
    mask.save_pgm(_sibling(args.out, ".pgm"))
    print(f"{args.kind} mask {args.size}x{args.size}: target {args.ratio:.4f}, "
          f"achieved {mask.achieved_ratio:.4f} -> {args.out}")
    return 0


def cmd_undersample(args) -> int:
    img = _load_image(args.image)
    mask = kspace.Mask.load(args.mask)
    xu = kspace.undersample(img[None], mask)
    save_array(args.out, xu.data[0].astype(np.float32))
    write_pgm(_sibling(args.out, ".pgm"), np.clip(xu.data[0], 0, 1))
    print(f"zero-filled input -> {args.out}")
    return 0


def _mask_from_mapping(m: dict, extent: int) -> kspace.Mask:
    kind = m.get("mask_kind", "gaussian1d")
    ratio = float(m.get("mask_ratio", 0.3))
    seed = int(m.get("mask_seed", 0))
    if kind == "gaussian1d":
        cf = float(m.get("mask_center_fraction", 0.08))
        return kspace.gaussian1d_mask(extent, extent, ratio, center_fraction=cf, seed=seed)
    if kind == "radial":
        return kspace.radial_mask(extent, extent, ratio, seed=seed)
    raise SystemExit(f"unknown mask_kind {kind!r}")


def _train_config_from_mapping(m: dict) -> TrainConfig:
    cfg = TrainConfig()
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for key, val in m.items():
        if key not in fields:
            continue
        current = getattr(cfg, key)
        setattr(cfg, key, type(current)(float(val)) if isinstance(current, float) else int(val))
    return cfg


def cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as f:
        mapping = parse_kv_text(f.read())
    model_cfg = model_config_from_mapping(mapping)
    train_cfg = _train_config_from_mapping(mapping)
    images = phantom.load_dataset(args.data)
    extent = images[0].shape[0]
    if (extent, images[0].shape[1]) != tuple(model_cfg.input_extent):
        raise SystemExit(f"dataset extent {images[0].shape} does not match config "
                         f"input extent {model_cfg.input_extent}")
    mask = _mask_from_mapping(mapping, extent)
    os.makedirs(args.out, exist_ok=True)

    dtype = mapping.get("precision", "float32")
    with precision(np.float32 if dtype == "float32" else np.float64):
        state = init_state(model_cfg, train_cfg)
        train_loop(state, images, mask,
                   progress=lambda s, lr, loss: print(f"step {s}  lr {lr:.2e}  loss {loss:.5f}"))
        ckpt = os.path.join(args.out, "model.ckpt")
        save_checkpoint(ckpt, model_cfg, state.params)
        report = evaluate(model_cfg, state.params, images, mask)

    atomic_write_text(os.path.join(args.out, "train_log.txt"), format_log(state.log))
    atomic_write_text(os.path.join(args.out, "train_metrics.csv"), report.as_csv())
    if state.log:
        figures.save_loss_curve(state.log, os.path.join(args.out, "loss_curve.png"))
    figures.save_metrics_figure(report, os.path.join(args.out, "train_metrics.png"))
    zp, zs, mp, ms = report.means()
    print(f"done: checkpoint {ckpt}")
    print(f"train-set means: ZF {zp:.2f} dB / {zs:.4f}  model {mp:.2f} dB / {ms:.4f}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg, params = load_checkpoint(args.ckpt)
    img = _load_image(args.image)
    mask = kspace.Mask.load(args.mask)
    xu = kspace.undersample(img[None], mask)
    with precision(np.float32):
        xhat = reconstruct(cfg, params, xu.data)
    save_array(args.out, xhat[0].astype(np.float32))
    write_pgm(_sibling(args.out, ".pgm"), np.clip(xhat[0], 0, 1))
    figures.save_image_figure(
        [img, np.clip(xu.data[0], 0, 1), np.clip(xhat[0], 0, 1)],
        ["reference", "zero-filled", "reconstruction"],
        _sibling(args.out, ".png"))
    print(f"reconstruction -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, params = load_checkpoint(args.ckpt)
    images = phantom.load_dataset(args.data)
    mask = kspace.Mask.load(args.mask)
    with precision(np.float32):
        report = evaluate(cfg, params, images, mask)
    atomic_write_text(args.report, report.as_csv())
    figures.save_metrics_figure(report, _sibling(args.report, ".png"))
    zp, zs, mp, ms = report.means()
    print(report.as_csv())
    print(f"means: ZF {zp:.2f} dB / {zs:.4f}   model {mp:.2f} dB / {ms:.4f}")
    return 0


def cmd_macs(args) -> int:
    cfg = preset_config(args.preset, size=args.size)
    report = macs_estimate(cfg, name=args.preset)
    print(report.as_table())
    if args.report:
        report.save(args.report)
        figures.save_macs_figure(report, _sibling(args.report, ".png"))
        print(f"report -> {args.report}")
    return 0


def cmd_inspect(args) -> int:
    cfg, params = load_checkpoint(args.ckpt)
    xu = _load_image(args.image)
    try:
        qr, qc = (int(t) for t in args.query.split(","))
    except ValueError:
        raise SystemExit(f"--query wants R,C integers, got {args.query!r}")
    os.makedirs(args.out, exist_ok=True)

    with precision(np.float32):
        cap, _ = capture_deformation(cfg, params, xu, args.block, layer=args.layer,
                                     out_dir=args.out)
        req = HeatmapRequest(block=args.block, layer=args.layer, head=args.head,
                             query=(qr, qc))
        canvas = attention_heatmap(cfg, params, xu, req,
                                   out_path=os.path.join(args.out, "attention_heatmap.pgm"))

    scale = xu.shape[0] // cap.map_extent[0]
    field_img = np.repeat(np.repeat(offset_field(cap), scale, 0), scale, 1)
    pts = deformed_points_on_map(cap) * scale
    figures.save_deformation_figure(xu, field_img, pts,
                                    os.path.join(args.out, "deformation.png"))
    figures.save_heatmap_figure(xu, canvas, (qr, qc), scale,
                                os.path.join(args.out, "attention_heatmap.png"))
    print(f"explainability exports -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformunet",
                                description="Deformable window-attention U-Net for "
                                            "undersampled MRI reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_phantom_gen)

    g = sub.add_parser("mask-gen", help="generate a sampling mask")
    g.add_argument("--kind", choices=("gaussian1d", "radial"), required=True)
    g.add_argument("--ratio", type=float, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--center-fraction", type=float, default=0.08)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_mask_gen)

    g = sub.add_parser("undersample", help="zero-filled input from image and mask")
    g.add_argument("--image", required=True)
    g.add_argument("--mask", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_undersample)

    g = sub.add_parser("train", help="train from a key=value config file")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("reconstruct", help="reconstruct one image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--mask", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_reconstruct)

    g = sub.add_parser("evaluate", help="PSNR/SSIM report vs the zero-filled baseline")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--mask", required=True)
    g.add_argument("--report", required=True)
    g.set_defaults(fn=cmd_evaluate)

    g = sub.add_parser("macs", help="analytical complexity report")
    g.add_argument("--preset", choices=PRESET_NAMES, required=True)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--report", default=None)
    g.set_defaults(fn=cmd_macs)

    g = sub.add_parser("inspect", help="explainability exports for one input")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--block", required=True)
    g.add_argument("--layer", type=int, default=0)
    g.add_argument("--head", type=int, default=0)
    g.add_argument("--query", required=True, help="R,C on the block's feature map")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
