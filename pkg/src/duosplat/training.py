"""Two-stage trainer.

Stage 1 fits the pointmap model with point regression + confidence loss.
Stage 2 freezes it and fits the Gaussian regressor through the
differentiable renderer with beta * L1 + (1 - beta) * (1 - SSIM).
Both stages use AdamW (weight decay 5e-2) with a cosine schedule from the
base to the final learning rate, batch size 1, fully seeded.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F

from . import synth
from .geometry import camera_in_reference_frame
from .pointnet import NetConfig, PointMapNet, config_fingerprint, stage1_loss
from .pipeline import run_inference
from .regress import GaussianRegressor
from .render import render

CHECKPOINT_VERSION = 1


@dataclass
class Stage1Config:
    iterations: int = 2000
    lr: float = 1e-4
    final_lr: float = 1e-7
    weight_decay: float = 5e-2
    seed: int = 0
    log_every: int = 50
    net: NetConfig = field(default_factory=NetConfig)


@dataclass
class Stage2Config:
    iterations: int = 2000
    beta: float = 0.8
    lr: float = 1e-4
    final_lr: float = 1e-7
    weight_decay: float = 5e-2
    novel_views_per_step: int = 2
    include_canonical: bool = True  # each canonical view with probability 0.5
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


# ---------------------------------------------------------------------------
# Image losses


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(a, b, window_size: int = 11, sigma: float = 1.5):
    """Mean structural similarity over an (H, W, 3) pair, values in [0, 1].

    11x11 Gaussian window, C1 = 0.01^2, C2 = 0.03^2, computed per channel on
    valid (unpadded) windows and averaged. For images smaller than the window
    the window shrinks to the image size.
    """
    ta = a if torch.is_tensor(a) else torch.as_tensor(np.asarray(a))
    tb = b if torch.is_tensor(b) else torch.as_tensor(np.asarray(b), dtype=ta.dtype)
    tb = tb.to(ta.dtype)
    if ta.shape != tb.shape:
        raise ValueError(f"image shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ta.ndim == 2:
        ta, tb = ta[..., None], tb[..., None]
    window_size = min(window_size, ta.shape[0], ta.shape[1])
    C = ta.shape[-1]
    win = _gaussian_window(window_size, sigma, dtype=ta.dtype)
    kernel = win[None, None].expand(C, 1, window_size, window_size)
    x = ta.permute(2, 0, 1)[None]
    y = tb.permute(2, 0, 1)[None]

    mu_x = F.conv2d(x, kernel, groups=C)
    mu_y = F.conv2d(y, kernel, groups=C)
    xx = F.conv2d(x * x, kernel, groups=C) - mu_x**2
    yy = F.conv2d(y * y, kernel, groups=C) - mu_y**2
    xy = F.conv2d(x * y, kernel, groups=C) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (xx + yy + c2))
    return s.mean()


def stage2_loss(render_img, gt_img, beta: float):
    """beta * L1 + (1 - beta) * (1 - SSIM)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    ta = render_img if torch.is_tensor(render_img) else torch.as_tensor(np.asarray(render_img))
    tb = gt_img if torch.is_tensor(gt_img) else torch.as_tensor(np.asarray(gt_img), dtype=ta.dtype)
    tb = tb.to(ta.dtype)
    l1 = (ta - tb).abs().mean()
    return beta * l1 + (1.0 - beta) * (1.0 - ssim(ta, tb))


def cosine_lr(step: int, total: int, base: float, final: float) -> float:
    """Cosine anneal from `base` at step 0 to exactly `final` at the last step."""
    if total <= 1:
        return final
    t = min(max(step, 0), total - 1) / (total - 1)
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, payload: dict):
    payload = dict(payload)
    payload["version"] = CHECKPOINT_VERSION
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_pointnet(ckpt: dict) -> PointMapNet:
    net = PointMapNet(NetConfig(**ckpt["net_config"]))
    net.load_state_dict(ckpt["pointnet_state"])
    net.eval()
    return net


def load_regressor(ckpt: dict) -> GaussianRegressor:
    reg = GaussianRegressor()
    reg.load_state_dict(ckpt["regressor_state"])
    reg.eval()
    return reg


# ---------------------------------------------------------------------------
# Data plumbing


class SubjectData:
    """Canonical bundles + ground-truth pointmaps for one dataset subject."""

    def __init__(self, root, entry, background):
        self.entry = entry
        self.views = synth.load_subject_views(root, entry)
        self.gt_pointmaps = synth.ground_truth_pointmaps(self.views)
        self.background = background

    @property
    def masks(self):
        return {v: self.views[v].mask for v in synth.CANONICAL_AZIMUTHS}


def load_training_subjects(dataset_root) -> tuple:
    manifest = synth.load_manifest(dataset_root)
    bg = tuple(manifest["background"])
    subjects = [SubjectData(dataset_root, e, bg) for e in manifest["subjects"]]
    return manifest, subjects


# ---------------------------------------------------------------------------
# Stage 1


def train_stage1(dataset_root, config: Stage1Config, out_path=None, log_file=None):
    manifest, subjects = load_training_subjects(dataset_root)
    res = manifest["resolution"]
    if config.net.image_size != res:
        raise ValueError(f"net image_size {config.net.image_size} != dataset resolution {res}")

    torch.manual_seed(config.seed)
    net = PointMapNet(config.net)
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    log = _Logger(log_file)

    inputs = []
    for sd in subjects:
        f, b = sd.views["front"], sd.views["back"]
        from .pipeline import mask_to_gray
        inputs.append((mask_to_gray(f.image, f.mask), mask_to_gray(b.image, b.mask)))

    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.lr, config.final_lr)
        for group in opt.param_groups:
            group["lr"] = lr
        si = int(rng.integers(len(subjects)))
        sd = subjects[si]
        pred = net.predict(*inputs[si])
        total, parts = stage1_loss(pred, sd.gt_pointmaps, sd.masks)
        if not torch.isfinite(total):
            raise RuntimeError(f"stage-1 loss diverged at iteration {it}")
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if it % config.log_every == 0 or it == config.iterations - 1:
            log.write(iteration=it, loss=float(total.detach()),
                      reg=float(parts["reg"].detach()),
                      conf=float(parts["conf"].detach()), lr=lr)

    ckpt = {
        "stage": 1,
        "net_config": asdict(config.net),
        "fingerprint": config_fingerprint(config.net),
        "pointnet_state": net.state_dict(),
        "train_config": _plain(asdict(config)),
        "loss_history": history,
        "final_lr": cosine_lr(config.iterations - 1, config.iterations, config.lr, config.final_lr),
    }
    if out_path:
        save_checkpoint(out_path, ckpt)
    return ckpt


# ---------------------------------------------------------------------------
# Stage 2


def _gt_novel_view(entry, azimuth, elevation, data_config):
    scene = synth.make_subject(entry["seed"], data_config.subject)
    cam = synth.ring_camera(azimuth, data_config, elevation_deg=elevation)
    return synth.render_view(scene, cam, background=data_config.background)


def train_stage2(dataset_root, stage1_ckpt, config: Stage2Config,
                 out_path=None, log_file=None):
    if isinstance(stage1_ckpt, (str, os.PathLike)):
        stage1_ckpt = load_checkpoint(stage1_ckpt)
    manifest, subjects = load_training_subjects(dataset_root)
    data_config = synth.DataConfig(resolution=manifest["resolution"],
                                   ring_radius=manifest["ring_radius"],
                                   focal_factor=manifest["focal_factor"],
                                   background=tuple(manifest["background"]))

    net = load_pointnet(stage1_ckpt)
    for p in net.parameters():
        p.requires_grad_(False)
    frozen_before = {k: v.clone() for k, v in net.state_dict().items()}

    torch.manual_seed(config.seed + 1)
    reg = GaussianRegressor()
    opt = torch.optim.AdamW(reg.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    log = _Logger(log_file)
    bg = data_config.background

    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.lr, config.final_lr)
        for group in opt.param_groups:
            group["lr"] = lr
        sd = subjects[int(rng.integers(len(subjects)))]
        f, b = sd.views["front"], sd.views["back"]
        result = run_inference(net, reg, f.image, b.image, f.mask, b.mask)

        # predictions live in the front camera's frame; render cameras must too
        front_cam = f.camera
        targets = []  # (camera, gt_image)
        for _ in range(config.novel_views_per_step):
            az = float(rng.uniform(0.0, 360.0))
            el = float(rng.uniform(-10.0, 10.0))
            gt = _gt_novel_view(sd.entry, az, el, data_config)
            targets.append((gt.camera, gt.image))
        if config.include_canonical:
            for tag in synth.CANONICAL_AZIMUTHS:
                if rng.random() < 0.5:
                    v = sd.views[tag]
                    targets.append((v.camera, v.image))
        if not targets:
            v = sd.views["front"]
            targets.append((v.camera, v.image))

        losses = []
        for cam, gt_img in targets:
            cam = camera_in_reference_frame(cam, front_cam)
            out = render(result.gaussians, cam, background=bg, tile_size=16)
            losses.append(stage2_loss(out.image, gt_img, config.beta))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"stage-2 loss diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if it % config.log_every == 0 or it == config.iterations - 1:
            log.write(iteration=it, loss=float(loss.detach()), lr=lr, views=len(targets))

    frozen_after = net.state_dict()
    for k, v in frozen_before.items():
        if not torch.equal(v, frozen_after[k]):
            raise RuntimeError(f"frozen stage-1 weights changed: {k}")

    ckpt = {
        "stage": 2,
        "net_config": stage1_ckpt["net_config"],
        "fingerprint": stage1_ckpt["fingerprint"],
        "pointnet_state": net.state_dict(),
        "regressor_state": reg.state_dict(),
        "train_config": _plain(asdict(config)),
        "loss_history": history,
    }
    if out_path:
        save_checkpoint(out_path, ckpt)
    return ckpt


# ---------------------------------------------------------------------------


def _plain(d):
    """Make nested dataclass dicts JSON-friendly."""
    return json.loads(json.dumps(d, default=str))


class _Logger:
    """Line-delimited structured training log."""

    def __init__(self, path=None):
        self.path = path
        self.t0 = time.time()

    def write(self, **fields):
        fields["wall_clock_s"] = round(time.time() - self.t0, 3)
        line = json.dumps(fields, sort_keys=True)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
