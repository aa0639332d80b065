"""PSNR/SSIM evaluation over human-region crops.

Crops come from the ground-truth mask bounding box with a 5-pixel margin.
Identical images report an infinite PSNR sentinel; report rows with it are
excluded from the mean. The report schema reserves an LPIPS column (empty;
an external perceptual model can fill it in).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import synth
from .geometry import camera_in_reference_frame
from .pipeline import run_inference
from .render import render
from .training import load_checkpoint, load_pointnet, load_regressor, ssim as _ssim

PSNR_INF = math.inf
CROP_MARGIN = 5

REPORT_COLUMNS = ("subject", "view", "psnr_db", "ssim", "lpips")


def mask_bbox(mask: np.ndarray, margin: int = CROP_MARGIN):
    """(row0, row1, col0, col1) inclusive-exclusive crop around the mask."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    H, W = mask.shape
    return (max(int(rows.min()) - margin, 0), min(int(rows.max()) + margin + 1, H),
            max(int(cols.min()) - margin, 0), min(int(cols.max()) + margin + 1, W))


def psnr(a: np.ndarray, b: np.ndarray, crop=None) -> float:
    """10*log10(1 / MSE) over the crop; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if crop is not None:
        r0, r1, c0, c1 = crop
        if r1 <= r0 or c1 <= c0:
            raise ValueError("empty crop")
        a = a[r0:r1, c0:c1]
        b = b[r0:r1, c0:c1]
    if a.size == 0:
        raise ValueError("empty crop")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def ssim_crop(a, b, crop=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if crop is not None:
        r0, r1, c0, c1 = crop
        a = a[r0:r1, c0:c1]
        b = b[r0:r1, c0:c1]
    return float(_ssim(a, b))


@dataclass
class EvalRow:
    subject: str
    view: str
    psnr_db: float
    ssim: float


def evaluate(checkpoint, dataset_root, view_tags=None, out_path=None,
             use_side_heads=True, use_nns=True) -> dict:
    """Render every requested view of every subject and score against GT.

    Returns {"rows": [EvalRow...], "mean_psnr": .., "mean_ssim": ..,
    "skipped": [...]}; rows with infinite PSNR are excluded from the mean.
    """
    if isinstance(checkpoint, (str, os.PathLike)):
        checkpoint = load_checkpoint(checkpoint)
    if checkpoint.get("stage") != 2:
        raise ValueError("evaluation needs a stage-2 checkpoint")
    net = load_pointnet(checkpoint)
    reg = load_regressor(checkpoint)

    manifest = synth.load_manifest(dataset_root)
    bg = tuple(manifest["background"])
    rows, skipped = [], []
    for entry in manifest["subjects"]:
        available = {v["tag"] for v in entry["views"]}
        tags = list(view_tags) if view_tags else sorted(available)
        missing = [t for t in tags if t not in available]
        if missing:
            skipped.append({"subject": entry["id"], "missing": missing})
            continue
        views = synth.load_subject_views(dataset_root, entry)
        f, b = views["front"], views["back"]
        with torch.no_grad():
            result = run_inference(net, reg, f.image, b.image, f.mask, b.mask,
                                   use_side_heads=use_side_heads, use_nns=use_nns)
            for tag in tags:
                gt = views[tag]
                # predictions live in the front camera frame
                cam = camera_in_reference_frame(gt.camera, f.camera)
                out = render(result.gaussians, cam, background=bg, tile_size=16)
                img = out.image.numpy().astype(np.float64)
                crop = mask_bbox(gt.mask)
                rows.append(EvalRow(subject=entry["id"], view=tag,
                                    psnr_db=psnr(img, gt.image, crop),
                                    ssim=ssim_crop(img, gt.image, crop)))
    finite = [r for r in rows if math.isfinite(r.psnr_db)]
    report = {
        "rows": rows,
        "mean_psnr": float(np.mean([r.psnr_db for r in finite])) if finite else PSNR_INF,
        "mean_ssim": float(np.mean([r.ssim for r in rows])) if rows else float("nan"),
        "skipped": skipped,
    }
    if out_path:
        write_report(out_path, report)
    return report


def write_report(path, report: dict):
    """CSV table followed by a structured summary block."""
    with open(path, "w") as f:
        f.write(",".join(REPORT_COLUMNS) + "\n")
        for r in report["rows"]:
            p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.4f}"
            f.write(f"{r.subject},{r.view},{p},{r.ssim:.6f},\n")
        f.write("# summary\n")
        f.write(f"# mean_psnr_db={report['mean_psnr']:.4f}\n")
        f.write(f"# mean_ssim={report['mean_ssim']:.6f}\n")
        f.write(f"# rows={len(report['rows'])} skipped={len(report['skipped'])}\n")
        for s in report["skipped"]:
            f.write(f"# skipped subject={s['subject']} missing={'|'.join(s['missing'])}\n")
