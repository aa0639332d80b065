"""Per-pixel Gaussian attribute regression.

A small UNet of ResNet blocks (3 downsampling and 3 upsampling stages, 16
channels throughout) maps a (pointmap, color image) pair to 14 raw channels
per pixel: position offset (3), color (3), opacity (1), scale (3), rotation
quaternion (4). One shared network processes all four views. Activation turns
raw channels into a well-formed Gaussian set anchored on the point cloud
prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import PointMap

RAW_CHANNELS = 14
UNET_DIMS = (16, 16, 16)

# caps relative to the subject bounding-box diagonal
DEFAULT_OFFSET_FRAC = 0.02
DEFAULT_SCALE_FRAC = 0.05


@dataclass
class RawGaussianOutput:
    """Unconstrained per-pixel attributes, (H, W, 14)."""

    raw: torch.Tensor

    def __post_init__(self):
        if self.raw.ndim != 3 or self.raw.shape[-1] != RAW_CHANNELS:
            raise ValueError(f"raw output must be (H, W, {RAW_CHANNELS})")


@dataclass
class GaussianSet:
    mu: torch.Tensor  # (N, 3)
    color: torch.Tensor  # (N, 3) in [0, 1]
    opacity: torch.Tensor  # (N,) in [0, 1]
    scale: torch.Tensor  # (N, 3) positive
    quat: torch.Tensor  # (N, 4) unit
    source_view: np.ndarray | None = None  # per-point provenance for debugging
    source_pixel: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def validate(self):
        if self.count:
            qn = torch.linalg.norm(self.quat, dim=1)
            if not torch.all((qn - 1.0).abs() < 1e-6):
                raise ValueError("quaternions must be unit norm")
            if not torch.all(self.scale > 0):
                raise ValueError("scales must be positive")
            for t in (self.color, self.opacity):
                if not torch.all((t >= 0) & (t <= 1)):
                    raise ValueError("color/opacity must lie in [0, 1]")
        return self

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(t.detach() for t in (self.mu, self.color, self.opacity,
                                                  self.scale, self.quat)),
                           source_view=self.source_view, source_pixel=self.source_pixel)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.conv2(h)
        return self.act(x + h)


class GaussianRegressor(nn.Module):
    """UNet over 6 input channels (xyz + rgb), 14 raw output channels."""

    def __init__(self, dims=UNET_DIMS):
        super().__init__()
        self.dims = tuple(dims)
        c0 = self.dims[0]
        self.stem = nn.Conv2d(6, c0, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_samplers = nn.ModuleList()
        prev = c0
        for c in self.dims:
            self.down_blocks.append(ResBlock(prev))
            self.down_samplers.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            prev = c
        self.mid = ResBlock(prev)
        self.up_samplers = nn.ModuleList()
        self.up_merges = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        skips = [c0] + list(self.dims[:-1])
        for c, skip in zip(reversed(self.dims), reversed(skips)):
            self.up_samplers.append(nn.ConvTranspose2d(prev, c, 2, stride=2))
            self.up_merges.append(nn.Conv2d(c + skip, c, 3, padding=1))
            self.up_blocks.append(ResBlock(c))
            prev = c
        self.head = nn.Conv2d(prev, RAW_CHANNELS, 1)
        # start near identity rotation, small splats, fairly opaque
        with torch.no_grad():
            self.head.weight.mul_(0.01)
            self.head.bias.zero_()
            self.head.bias[6] = 2.0  # opacity logit
            self.head.bias[7:10] = -3.9  # log scale, ~2 cm
            self.head.bias[10] = 1.0  # quaternion w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 6, H, W) -> (B, 14, H, W); H and W must be divisible by 8."""
        if x.shape[1] != 6:
            raise ValueError(f"expected 6 input channels, got {x.shape[1]}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError("spatial size must be divisible by 2^3")
        h = self.stem(x)
        skips = []
        for blk, down in zip(self.down_blocks, self.down_samplers):
            h = blk(h)
            skips.append(h)
            h = down(h)
        h = self.mid(h)
        for up, merge, blk in zip(self.up_samplers, self.up_merges, self.up_blocks):
            h = up(h)
            h = merge(torch.cat([h, skips.pop()], dim=1))
            h = blk(h)
        return self.head(h)


def _as_float_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    if isinstance(x, PointMap):
        x = x.points
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def regress_views(model: GaussianRegressor, pointmaps, images, delta=1.0):
    """Batched shared-weight forward over several (pointmap, image) pairs."""
    feats = []
    for pm, img in zip(pointmaps, images):
        pts = _as_float_tensor(pm)
        img_t = _as_float_tensor(img)
        if pts.shape[:2] != img_t.shape[:2]:
            raise ValueError("pointmap and image resolutions differ")
        scaled = pts * (delta if torch.is_tensor(delta) else float(delta))
        feats.append(torch.cat([scaled, img_t], dim=-1).permute(2, 0, 1))
    out = model(torch.stack(feats, dim=0))
    return [RawGaussianOutput(raw=o.permute(1, 2, 0)) for o in out]


def regress_view(model: GaussianRegressor, pointmap, image, delta=1.0) -> RawGaussianOutput:
    return regress_views(model, [pointmap], [image], delta=delta)[0]


def activate(raw: RawGaussianOutput, pointmap, valid, delta=1.0,
             offset_cap: float = 0.02, scale_cap: float = 0.10,
             view_tag: str | None = None) -> GaussianSet:
    """Turn raw channels into a valid Gaussian set anchored on the prior points.

    mu = delta * point + offset_cap * tanh(raw offset); color/opacity sigmoid;
    scale exp-clamped to [1e-6, scale_cap]; quaternion normalized with an
    identity fallback for near-zero raw vectors.
    """
    r = raw.raw
    if not torch.isfinite(r).all():
        raise ValueError("raw output must be finite")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != r.shape[:2]:
        raise ValueError("valid mask shape must match raw output")
    pts = pointmap.points if isinstance(pointmap, PointMap) else pointmap
    pts_t = pts if torch.is_tensor(pts) else torch.as_tensor(np.asarray(pts), dtype=r.dtype)
    vmask = torch.as_tensor(valid)

    sel = r[vmask]
    prior = pts_t[vmask] * (delta if torch.is_tensor(delta) else float(delta))
    mu = prior + offset_cap * torch.tanh(sel[:, 0:3])
    color = torch.sigmoid(sel[:, 3:6])
    opacity = torch.sigmoid(sel[:, 6])
    scale = torch.exp(sel[:, 7:10]).clamp(1e-6, scale_cap)
    q_raw = sel[:, 10:14]
    norm = torch.linalg.norm(q_raw, dim=1, keepdim=True)
    identity = torch.zeros_like(q_raw)
    identity[:, 0] = 1.0
    quat = torch.where(norm < 1e-8, identity, q_raw / norm.clamp_min(1e-12))

    rows, cols = np.nonzero(valid)
    src_view = np.full(len(rows), view_tag if view_tag else "", dtype=object)
    return GaussianSet(mu=mu, color=color, opacity=opacity, scale=scale, quat=quat,
                       source_view=src_view, source_pixel=np.stack([rows, cols], axis=1))


def assemble(per_view) -> GaussianSet:
    """Concatenate per-view sets in the given (front, back, left, right) order."""
    sets = list(per_view)
    if not sets:
        raise ValueError("nothing to assemble")
    cat = lambda xs: torch.cat(xs, dim=0)
    return GaussianSet(
        mu=cat([s.mu for s in sets]),
        color=cat([s.color for s in sets]),
        opacity=cat([s.opacity for s in sets]),
        scale=cat([s.scale for s in sets]),
        quat=cat([s.quat for s in sets]),
        source_view=np.concatenate([s.source_view if s.source_view is not None
                                    else np.full(s.count, "", dtype=object) for s in sets]),
        source_pixel=np.concatenate([s.source_pixel if s.source_pixel is not None
                                     else np.zeros((s.count, 2), dtype=np.int64) for s in sets]),
    )
