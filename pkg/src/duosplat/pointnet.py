"""Two-stream pointmap prediction model.

A shared ViT encoder processes the front and back images; a decoder exchanges
information between the two token streams (cross-attention then
self-attention per block). Four heads emit pixel-aligned pointmaps with
confidence: front/back heads read their own stream, side heads read the
per-block fusion of both streams. A single learnable log-scale maps the
predicted canonical coordinates to metric size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VIEWS = ("front", "back", "left", "right")


@dataclass
class NetConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    n_heads: int = 4
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 4
    head_type: str = "linear"  # linear | multiscale
    fusion: str = "average"  # average | concat

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.n_decoder_blocks < 2:
            raise ValueError("decoder needs at least 2 blocks")
        if self.fusion not in ("average", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.head_type not in ("linear", "multiscale"):
            raise ValueError(f"unknown head_type {self.head_type!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (T, C)
    block_index: int


@dataclass
class PointMapPrediction:
    """Four pointmaps + confidences in the front-view frame, plus the scale."""

    maps: dict  # view -> (H, W, 3) tensor
    confidences: dict  # view -> (H, W) tensor in (0, 1)
    delta: torch.Tensor  # positive scalar


def sincos_pos_embed(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine positional embedding, (grid*grid, dim)."""
    if dim % 4 != 0:
        raise ValueError("embed_dim must be divisible by 4")
    half = dim // 2
    omega = 1.0 / (10000 ** (torch.arange(half // 2, dtype=torch.float32) / (half // 2)))
    pos = torch.arange(grid, dtype=torch.float32)
    out = pos[:, None] * omega[None, :]
    emb_1d = torch.cat([torch.sin(out), torch.cos(out)], dim=1)  # (grid, half)
    ey = emb_1d[:, None, :].expand(grid, grid, half)
    ex = emb_1d[None, :, :].expand(grid, grid, half)
    return torch.cat([ey, ex], dim=2).reshape(grid * grid, dim)


class SelfAttnBlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class DecoderBlock(nn.Module):
    """Cross-attention to the other stream, then self-attention, then MLP."""

    def __init__(self, dim, n_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, other):
        kv = self.norm_kv(other)
        x = x + self.cross(self.norm_q(x), kv, kv, need_weights=False)[0]
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class LinearHead(nn.Module):
    """Per-token linear map to patch_size^2 x 4 channels (xyz + confidence logit)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.embed_dim, cfg.patch_size * cfg.patch_size * 4)

    def forward(self, blocks):
        x = blocks[-1]  # (1, T, C)
        out = self.proj(x)  # (1, T, p*p*4)
        g, p = self.cfg.grid, self.cfg.patch_size
        out = out.reshape(1, g, g, p, p, 4).permute(0, 5, 1, 3, 2, 4)
        return out.reshape(1, 4, g * p, g * p)


class MultiScaleHead(nn.Module):
    """Fuses the last two decoder blocks and refines with small convolutions."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        self.merge = nn.Linear(2 * c, c)
        self.conv = nn.Sequential(
            nn.Conv2d(c, c // 2, 3, padding=1), nn.GELU(),
            nn.Conv2d(c // 2, cfg.patch_size * cfg.patch_size * 4, 1),
        )

    def forward(self, blocks):
        x = self.merge(torch.cat([blocks[-2], blocks[-1]], dim=-1))  # (1, T, C)
        g, p = self.cfg.grid, self.cfg.patch_size
        x = x.transpose(1, 2).reshape(1, -1, g, g)
        out = self.conv(x)  # (1, p*p*4, g, g)
        out = out.reshape(1, 4, p, p, g, g).permute(0, 1, 4, 2, 5, 3)
        return out.reshape(1, 4, g * p, g * p)


def _make_head(cfg: NetConfig) -> nn.Module:
    return LinearHead(cfg) if cfg.head_type == "linear" else MultiScaleHead(cfg)


class PointMapNet(nn.Module):
    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()
        cfg = self.config
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        self.register_buffer("pos_embed", sincos_pos_embed(cfg.grid, cfg.embed_dim))
        self.encoder = nn.ModuleList(
            SelfAttnBlock(cfg.embed_dim, cfg.n_heads) for _ in range(cfg.n_encoder_blocks))
        self.enc_norm = nn.LayerNorm(cfg.embed_dim)
        self.decoder = nn.ModuleList(
            DecoderBlock(cfg.embed_dim, cfg.n_heads) for _ in range(cfg.n_decoder_blocks))
        if cfg.fusion == "concat":
            self.fusion_proj = nn.Linear(2 * cfg.embed_dim, cfg.embed_dim)
        self.heads = nn.ModuleDict({v: _make_head(cfg) for v in VIEWS})
        self.log_delta = nn.Parameter(torch.zeros(()))

    @property
    def delta(self) -> torch.Tensor:
        return torch.exp(self.log_delta)

    # -- stages ------------------------------------------------------------

    def _to_tensor(self, img) -> torch.Tensor:
        dtype = self.patch_embed.weight.dtype
        if torch.is_tensor(img):
            t = img.to(dtype)
        else:
            t = torch.as_tensor(np.asarray(img), dtype=dtype)
        if t.shape != (self.config.image_size, self.config.image_size, 3):
            raise ValueError(
                f"expected {self.config.image_size}^2 RGB image, got {tuple(t.shape)}")
        return t.permute(2, 0, 1)[None]  # (1, 3, H, W)

    def _encode_one(self, img: torch.Tensor):
        x = self.patch_embed(img).flatten(2).transpose(1, 2)  # (1, T, C)
        x = x + self.pos_embed[None]
        grids = []
        for i, blk in enumerate(self.encoder):
            x = blk(x)
            grids.append(TokenGrid(tokens=x[0], block_index=i))
        x = self.enc_norm(x)
        grids[-1] = TokenGrid(tokens=x[0], block_index=len(self.encoder) - 1)
        return grids, x

    def encode_pair(self, front_img, back_img):
        """Shared-weight encoding of both images; no cross-talk here."""
        f_grids, _ = self._encode_one(self._to_tensor(front_img))
        b_grids, _ = self._encode_one(self._to_tensor(back_img))
        return f_grids, b_grids

    def _decode_tokens(self, f_tok: torch.Tensor, b_tok: torch.Tensor):
        f, b = f_tok, b_tok
        f_blocks, b_blocks = [], []
        for i, blk in enumerate(self.decoder):
            f_new = blk(f, b)
            b_new = blk(b, f)
            f, b = f_new, b_new
            f_blocks.append(TokenGrid(tokens=f[0], block_index=i))
            b_blocks.append(TokenGrid(tokens=b[0], block_index=i))
        return f_blocks, b_blocks

    def decode_pair(self, front_tokens, back_tokens):
        """Run the B decoder blocks; returns all intermediate grids per stream."""
        f = front_tokens[-1].tokens[None] if isinstance(front_tokens, list) else front_tokens
        b = back_tokens[-1].tokens[None] if isinstance(back_tokens, list) else back_tokens
        return self._decode_tokens(f, b)

    def side_tokens(self, front_blocks, back_blocks, fusion: str | None = None):
        """Per-block fusion of the two streams for the side-view heads."""
        fusion = fusion or self.config.fusion
        if len(front_blocks) != len(back_blocks):
            raise ValueError("streams must have the same number of blocks")
        out = []
        for fg, bg in zip(front_blocks, back_blocks):
            if fusion == "average":
                tok = (fg.tokens + bg.tokens) / 2.0
            elif fusion == "concat":
                tok = self.fusion_proj(torch.cat([fg.tokens, bg.tokens], dim=-1))
            else:
                raise ValueError(f"unknown fusion {fusion!r}")
            out.append(TokenGrid(tokens=tok, block_index=fg.block_index))
        return out

    def predict(self, front_img, back_img) -> PointMapPrediction:
        f_grids, b_grids = self.encode_pair(front_img, back_img)
        f_blocks, b_blocks = self.decode_pair(f_grids, b_grids)
        v_blocks = self.side_tokens(f_blocks, b_blocks)

        def run_head(view, blocks):
            seq = [g.tokens[None] for g in blocks]
            out = self.heads[view](seq)[0]  # (4, H, W)
            return out[:3].permute(1, 2, 0), torch.sigmoid(out[3])

        maps, confs = {}, {}
        maps["front"], confs["front"] = run_head("front", f_blocks)
        maps["back"], confs["back"] = run_head("back", b_blocks)
        maps["left"], confs["left"] = run_head("left", v_blocks)
        maps["right"], confs["right"] = run_head("right", v_blocks)
        return PointMapPrediction(maps=maps, confidences=confs, delta=self.delta)

    forward = predict


def stage1_loss(pred: PointMapPrediction, gt_points: dict, gt_masks: dict):
    """Pointmap regression + confidence loss.

    L_reg: mean squared error between delta-scaled predictions and ground-truth
    points over valid pixels of all four views. L_conf: binary cross-entropy
    between confidence and the ground-truth mask over all pixels of all views.
    Returns (total, {"reg": .., "conf": ..}).
    """
    reg_terms, n_valid = [], 0
    conf_terms = []
    for view in VIEWS:
        gt = gt_points[view]
        gt_pts = torch.as_tensor(np.asarray(gt.points if hasattr(gt, "points") else gt),
                                 dtype=pred.maps[view].dtype)
        mask = torch.as_tensor(np.asarray(gt_masks[view]), dtype=torch.bool)
        pm = pred.maps[view]
        if pm.shape != gt_pts.shape:
            raise ValueError(f"{view}: prediction {tuple(pm.shape)} vs gt {tuple(gt_pts.shape)}")
        if mask.any():
            diff = pred.delta * pm[mask] - gt_pts[mask]
            reg_terms.append((diff ** 2).sum())
            n_valid += int(mask.sum()) * 3
        conf = pred.confidences[view].clamp(1e-6, 1 - 1e-6)
        conf_terms.append(F.binary_cross_entropy(conf, mask.to(conf.dtype), reduction="sum"))
    if n_valid == 0:
        raise ValueError("no valid ground-truth pixels in the batch")
    l_reg = torch.stack(reg_terms).sum() / n_valid
    n_pix = 4 * pred.confidences["front"].numel()
    l_conf = torch.stack(conf_terms).sum() / n_pix
    total = l_reg + l_conf
    return total, {"reg": l_reg, "conf": l_conf}


def config_fingerprint(cfg: NetConfig) -> str:
    import hashlib
    import json
    payload = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
