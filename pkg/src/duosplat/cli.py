"""Command-line surface for the reconstruction pipeline.

Subcommands: gen-data, train-stage1, train-stage2, infer, render, eval,
export-ply. Each reads an optional JSON config file plus flag overrides and
is deterministic given (config, seed).

Exit codes: 0 success, 2 config/schema violation, 3 missing or unreadable
input, 4 checkpoint/config fingerprint mismatch, 1 other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import torch
from PIL import Image

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_FINGERPRINT = 4

DATA_ROOT_ENV = "DUOSPLAT_DATA_ROOT"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", EXIT_MISSING_INPUT)
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(f"config is not valid JSON: {e}", EXIT_CONFIG)
    if not isinstance(cfg, dict):
        raise CliError("config root must be a JSON object", EXIT_CONFIG)
    return cfg


def _data_root(args, cfg):
    root = args.data or cfg.get("data_root") or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise CliError("no dataset root (use --data, config data_root, or "
                       f"${DATA_ROOT_ENV})", EXIT_CONFIG)
    if not os.path.isdir(root):
        raise CliError(f"dataset root not found: {root}", EXIT_MISSING_INPUT)
    return root


def _load_image(path, expect_mask=False):
    if not os.path.exists(path):
        raise CliError(f"input not found: {path}", EXIT_MISSING_INPUT)
    try:
        img = Image.open(path)
        if expect_mask:
            return np.asarray(img) > 0
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise CliError(f"unreadable image {path}: {e}", EXIT_MISSING_INPUT)


def _save_png(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _net_config_from(cfg: dict, resolution: int):
    from .pointnet import NetConfig
    fields = dict(cfg.get("net", {}))
    fields.setdefault("image_size", resolution)
    try:
        return NetConfig(**fields)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad net config: {e}", EXIT_CONFIG)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args):
    from . import synth
    cfg = _load_config(args.config)
    out = args.out or cfg.get("out") or "data"
    n = args.subjects if args.subjects is not None else int(cfg.get("subjects", 2))
    novel = args.novel_views if args.novel_views is not None else int(cfg.get("novel_views", 4))
    res = args.resolution or int(cfg.get("resolution", 64))
    data_cfg = synth.DataConfig(resolution=res)
    if "height_range" in cfg:
        data_cfg.subject.height_range = tuple(cfg["height_range"])
    manifest = synth.make_dataset(n, novel, res, out, config=data_cfg, seed_base=args.seed)
    print(f"wrote {len(manifest['subjects'])} subjects to {out}")
    return EXIT_OK


def cmd_train_stage1(args):
    from .training import Stage1Config, train_stage1
    cfg = _load_config(args.config)
    root = _data_root(args, cfg)
    from . import synth
    res = args.resolution or synth.load_manifest(root)["resolution"]
    net_cfg = _net_config_from(cfg, res)
    try:
        tc = Stage1Config(iterations=args.iterations or int(cfg.get("iterations", 2000)),
                          lr=float(cfg.get("lr", 1e-4)),
                          final_lr=float(cfg.get("final_lr", 1e-7)),
                          weight_decay=float(cfg.get("weight_decay", 5e-2)),
                          seed=args.seed, net=net_cfg)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad training config: {e}", EXIT_CONFIG)
    out = args.out or cfg.get("out") or "stage1.ckpt"
    log = os.path.splitext(out)[0] + ".log"
    train_stage1(root, tc, out_path=out, log_file=log)
    print(f"stage-1 checkpoint written to {out}")
    return EXIT_OK


def cmd_train_stage2(args):
    from .training import Stage2Config, load_checkpoint, train_stage2
    cfg = _load_config(args.config)
    root = _data_root(args, cfg)
    if not os.path.exists(args.stage1):
        raise CliError(f"stage-1 checkpoint not found: {args.stage1}", EXIT_MISSING_INPUT)
    ckpt = load_checkpoint(args.stage1)
    try:
        tc = Stage2Config(iterations=args.iterations or int(cfg.get("iterations", 2000)),
                          beta=float(cfg.get("beta", 0.8)),
                          lr=float(cfg.get("lr", 1e-4)),
                          final_lr=float(cfg.get("final_lr", 1e-7)),
                          weight_decay=float(cfg.get("weight_decay", 5e-2)),
                          novel_views_per_step=int(cfg.get("novel_views_per_step", 2)),
                          include_canonical=bool(cfg.get("include_canonical", True)),
                          seed=args.seed)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad training config: {e}", EXIT_CONFIG)
    out = args.out or cfg.get("out") or "stage2.ckpt"
    log = os.path.splitext(out)[0] + ".log"
    train_stage2(root, ckpt, tc, out_path=out, log_file=log)
    print(f"stage-2 checkpoint written to {out}")
    return EXIT_OK


def _load_stage2(args, cfg):
    from .pointnet import config_fingerprint
    from .training import load_checkpoint, load_pointnet, load_regressor
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_MISSING_INPUT)
    ckpt = load_checkpoint(args.checkpoint)
    if "net" in cfg:
        requested = _net_config_from(cfg, ckpt["net_config"]["image_size"])
        if config_fingerprint(requested) != ckpt["fingerprint"]:
            raise CliError("config fingerprint does not match the checkpoint",
                           EXIT_FINGERPRINT)
    if ckpt.get("stage") != 2:
        raise CliError("a stage-2 checkpoint is required here", EXIT_CONFIG)
    return ckpt, load_pointnet(ckpt), load_regressor(ckpt)


def cmd_infer(args):
    from .pipeline import run_inference
    from .ply import write_gaussian_ply, write_point_cloud_ply
    cfg = _load_config(args.config)
    ckpt, net, reg = _load_stage2(args, cfg)

    front = _load_image(args.front)
    back = _load_image(args.back)
    front_mask = _load_image(args.front_mask, expect_mask=True)
    back_mask = _load_image(args.back_mask, expect_mask=True)
    shapes = {front.shape[:2], back.shape[:2], front_mask.shape, back_mask.shape}
    if len(shapes) != 1:
        raise CliError(f"input resolutions disagree: {sorted(shapes)}", EXIT_CONFIG)
    res = ckpt["net_config"]["image_size"]
    if front.shape[:2] != (res, res):
        raise CliError(f"checkpoint expects {res}x{res} inputs, got {front.shape[:2]}",
                       EXIT_CONFIG)

    out_dir = args.out or "infer_out"
    os.makedirs(out_dir, exist_ok=True)
    with torch.no_grad():
        result = run_inference(net, reg, front, back, front_mask, back_mask)
    g = result.gaussians
    write_gaussian_ply(os.path.join(out_dir, "gaussians.ply"),
                       g.mu.numpy(), g.color.numpy(), g.opacity.numpy(),
                       g.scale.numpy(), g.quat.numpy())
    write_point_cloud_ply(os.path.join(out_dir, "cloud.ply"),
                          result.cloud.positions, result.cloud.colors)
    for view in ("front", "back", "left", "right"):
        _save_png(os.path.join(out_dir, f"debug_{view}.png"), result.view_images[view])
        pm = result.pointmaps[view]
        span = result.delta * (np.abs(pm.points[pm.valid]).max() if pm.valid.any() else 1.0)
        depth_vis = np.where(pm.valid, np.clip(pm.points[..., 2] * result.delta / max(span, 1e-6), 0, 1), 0.0)
        _save_png(os.path.join(out_dir, f"pointmap_{view}.png"),
                  np.stack([depth_vis] * 3, axis=-1))
    print(f"wrote {g.count} Gaussians to {out_dir}/gaussians.ply")
    return EXIT_OK


def _gaussians_from_ply(path):
    from .ply import read_ply, GAUSSIAN_PLY_FIELDS, _SH_C0
    from .regress import GaussianSet
    if not os.path.exists(path):
        raise CliError(f"PLY not found: {path}", EXIT_MISSING_INPUT)
    fields, data = read_ply(path)
    if fields != list(GAUSSIAN_PLY_FIELDS):
        raise CliError(f"{path} is not a Gaussian PLY", EXIT_CONFIG)
    col = {name: data[:, i] for i, name in enumerate(fields)}
    mu = np.stack([col["x"], col["y"], col["z"]], axis=1)
    color = np.clip(np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1) * _SH_C0 + 0.5, 0, 1)
    opacity = 1.0 / (1.0 + np.exp(-col["opacity"]))
    scale = np.exp(np.stack([col[f"scale_{i}"] for i in range(3)], axis=1))
    quat = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1)
    quat = quat / np.linalg.norm(quat, axis=1, keepdims=True).clip(1e-12)
    return GaussianSet(mu=torch.as_tensor(mu, dtype=torch.float32),
                       color=torch.as_tensor(color, dtype=torch.float32),
                       opacity=torch.as_tensor(opacity, dtype=torch.float32),
                       scale=torch.as_tensor(scale, dtype=torch.float32),
                       quat=torch.as_tensor(quat, dtype=torch.float32))


def cmd_render(args):
    from .geometry import CameraModel, camera_in_reference_frame
    from .render import render
    gaussians = _gaussians_from_ply(args.ply)
    if not os.path.exists(args.camera):
        raise CliError(f"camera spec not found: {args.camera}", EXIT_MISSING_INPUT)
    with open(args.camera) as f:
        spec = json.load(f)
    cams = spec if isinstance(spec, list) else [spec]
    reference = None
    if args.relative_to:
        if not os.path.exists(args.relative_to):
            raise CliError(f"reference camera not found: {args.relative_to}",
                           EXIT_MISSING_INPUT)
        with open(args.relative_to) as f:
            reference = CameraModel.from_dict(json.load(f))
    out_dir = args.out or "renders"
    os.makedirs(out_dir, exist_ok=True)
    for i, d in enumerate(cams):
        try:
            cam = CameraModel.from_dict(d)
        except (KeyError, ValueError) as e:
            raise CliError(f"bad camera spec #{i}: {e}", EXIT_CONFIG)
        if reference is not None:
            cam = camera_in_reference_frame(cam, reference)
        with torch.no_grad():
            out = render(gaussians, cam, background=tuple(d.get("background", (1, 1, 1))),
                         tile_size=16)
        _save_png(os.path.join(out_dir, f"render_{i:03d}.png"), out.image.numpy())
    print(f"wrote {len(cams)} renders to {out_dir}")
    return EXIT_OK


def cmd_eval(args):
    from .metrics import evaluate
    cfg = _load_config(args.config)
    root = _data_root(args, cfg)
    ckpt, _, _ = _load_stage2(args, cfg)
    out = args.out or cfg.get("out") or "eval_report.csv"
    views = cfg.get("eval_views")
    report = evaluate(args.checkpoint, root, view_tags=views, out_path=out)
    print(f"mean PSNR {report['mean_psnr']:.2f} dB, mean SSIM {report['mean_ssim']:.4f} "
          f"({len(report['rows'])} rows) -> {out}")
    return EXIT_OK


def cmd_export_ply(args):
    from .pipeline import predict_cloud
    from .ply import write_point_cloud_ply
    from .training import load_checkpoint, load_pointnet
    cfg = _load_config(args.config)
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_MISSING_INPUT)
    ckpt = load_checkpoint(args.checkpoint)
    net = load_pointnet(ckpt)
    front = _load_image(args.front)
    back = _load_image(args.back)
    front_mask = _load_image(args.front_mask, expect_mask=True)
    back_mask = _load_image(args.back_mask, expect_mask=True)
    _, _, cloud = predict_cloud(net, front, back, front_mask, back_mask)
    out = args.out or "cloud.ply"
    write_point_cloud_ply(out, cloud.positions, cloud.colors, binary=not args.ascii)
    print(f"wrote {cloud.count} points to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="duosplat",
                                description="Two-image human Gaussian reconstruction")
    p.add_argument("--device", choices=("cpu", "gpu-if-available"), default="cpu")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None)
        sp.add_argument("--resolution", type=int, default=None)
        sp.add_argument("--data", default=None, help=f"dataset root (or ${DATA_ROOT_ENV})")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--subjects", type=int, default=None)
    sp.add_argument("--novel-views", type=int, default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-stage1", help="train the pointmap model")
    common(sp)
    sp.add_argument("--iterations", type=int, default=None)
    sp.set_defaults(func=cmd_train_stage1)

    sp = sub.add_parser("train-stage2", help="train the Gaussian regressor")
    common(sp)
    sp.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    sp.add_argument("--iterations", type=int, default=None)
    sp.set_defaults(func=cmd_train_stage2)

    sp = sub.add_parser("infer", help="front+back images -> Gaussian PLY")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--front", required=True)
    sp.add_argument("--back", required=True)
    sp.add_argument("--front-mask", required=True)
    sp.add_argument("--back-mask", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("render", help="render a Gaussian PLY from camera specs")
    common(sp)
    sp.add_argument("--ply", required=True)
    sp.add_argument("--camera", required=True, help="camera spec JSON (one or a list)")
    sp.add_argument("--relative-to", default=None,
                    help="camera spec whose frame the PLY coordinates live in "
                         "(use the front camera for inference outputs)")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR/SSIM report over a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-ply", help="export the colored point cloud")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--front", required=True)
    sp.add_argument("--back", required=True)
    sp.add_argument("--front-mask", required=True)
    sp.add_argument("--back-mask", required=True)
    sp.add_argument("--ascii", action="store_true")
    sp.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
