"""Differentiable 3D Gaussian splatting on the CPU.

Forward: project each Gaussian to a 2D mean/covariance, depth-sort, and
alpha-composite front to back. Every Gaussian contributes only inside its
3-sigma bounding rectangle; outside it the contribution is exactly zero, so
the optional tile binning path is bit-identical to the dense path. Gradients
come from autograd over this forward, so they are exact analytic derivatives
of the composited image (clamped/terminated regions get zero gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CameraModel

COV_BLUR = 0.3  # px^2 anti-aliasing floor on the 2D covariance
ALPHA_MAX = 0.999
NEAR_PLANE = 0.01
TERMINATE_T = 1e-4


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)


def quat_to_rotmat(quat: torch.Tensor) -> torch.Tensor:
    """Unit-normalized quaternion (w, x, y, z) to rotation matrices, (N, 3, 3)."""
    q = quat / torch.linalg.norm(quat, dim=-1, keepdim=True).clamp_min(1e-12)
    w, x, y, z = q.unbind(-1)
    R = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return R.reshape(quat.shape[:-1] + (3, 3))


def project_gaussian(mu: torch.Tensor, scale: torch.Tensor, quat: torch.Tensor,
                     camera: CameraModel, blur: float = COV_BLUR,
                     near: float = NEAR_PLANE):
    """Project 3D Gaussians to the image plane.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), in_front (N,) bool);
    Gaussians at or behind the near plane are flagged, not dropped.
    """
    dtype = mu.dtype
    Rw = torch.as_tensor(camera.rotation, dtype=dtype)
    tw = torch.as_tensor(camera.translation, dtype=dtype)
    p_cam = mu @ Rw.T + tw
    z = p_cam[:, 2]
    in_front = z > near

    zs = torch.where(in_front, z, torch.ones_like(z))
    fx, fy = camera.fx, camera.fy
    u = fx * p_cam[:, 0] / zs + camera.cx
    v = fy * p_cam[:, 1] / zs + camera.cy
    mean2d = torch.stack([u, v], dim=1)

    Rq = quat_to_rotmat(quat)
    S2 = torch.diag_embed(scale ** 2)
    sigma = Rq @ S2 @ Rq.transpose(1, 2)

    zero = torch.zeros_like(zs)
    J = torch.stack([
        torch.stack([fx / zs, zero, -fx * p_cam[:, 0] / zs**2], dim=1),
        torch.stack([zero, fy / zs, -fy * p_cam[:, 1] / zs**2], dim=1),
    ], dim=1)  # (N, 2, 3)
    JW = J @ Rw
    cov2d = JW @ sigma @ JW.transpose(1, 2)
    cov2d = cov2d + blur * torch.eye(2, dtype=dtype)
    return mean2d, cov2d, z, in_front


def _splat_rect(mean2d, cov2d, width, height):
    """Integer pixel bounds [u0, u1] x [v0, v1] of the 3-sigma footprint."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c)) ** 2 + b**2)
    r = 3.0 * torch.sqrt(lam_max)
    # clamp so a fully off-screen footprint yields an empty range (u0 > u1)
    u0 = torch.ceil(mean2d[:, 0] - r).clamp(0, width)
    u1 = torch.floor(mean2d[:, 0] + r).clamp(-1, width - 1)
    v0 = torch.ceil(mean2d[:, 1] - r).clamp(0, height)
    v1 = torch.floor(mean2d[:, 1] + r).clamp(-1, height - 1)
    return u0.detach(), u1.detach(), v0.detach(), v1.detach()


def _composite(alpha: torch.Tensor, colors: torch.Tensor, background: torch.Tensor):
    """Front-to-back compositing over dim 0 of alpha (N, P)."""
    one_m = 1.0 - alpha
    T = torch.cumprod(one_m, dim=0)
    T_excl = torch.cat([torch.ones_like(T[:1]), T[:-1]], dim=0)
    live = (T_excl >= TERMINATE_T).to(alpha.dtype)
    w = alpha * T_excl * live  # (N, P)
    acc = w.sum(dim=0)
    img = w.T @ colors + (1.0 - acc)[:, None] * background[None, :]
    return img, acc


def render(gaussians, camera: CameraModel, background=(0.0, 0.0, 0.0),
           tile_size: int | None = None) -> RenderOutput:
    """Rasterize a Gaussian set. `gaussians` needs mu/color/opacity/scale/quat tensors."""
    mu, color, opacity = gaussians.mu, gaussians.color, gaussians.opacity
    scale, quat = gaussians.scale, gaussians.quat
    dtype = mu.dtype
    H, W = camera.height, camera.width
    bg = torch.as_tensor(background, dtype=dtype)

    for name, t in (("mu", mu), ("color", color), ("opacity", opacity),
                    ("scale", scale), ("quat", quat)):
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite Gaussian parameter: {name}")

    if mu.shape[0] == 0:
        image = bg[None, None, :].expand(H, W, 3).clone()
        return RenderOutput(image=image, alpha=torch.zeros(H, W, dtype=dtype))

    mean2d, cov2d, depth, in_front = project_gaussian(mu, scale, quat, camera)

    keep = in_front
    order = torch.argsort(depth.detach(), stable=True)  # ties keep input index order
    order = order[keep[order]]
    if order.numel() == 0:
        image = bg[None, None, :].expand(H, W, 3).clone()
        return RenderOutput(image=image, alpha=torch.zeros(H, W, dtype=dtype))

    mean2d, cov2d, color_s, op_s = mean2d[order], cov2d[order], color[order], opacity[order]
    u0, u1, v0, v1 = _splat_rect(mean2d, cov2d, W, H)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    inv_a = cov2d[:, 1, 1] / det
    inv_b = -cov2d[:, 0, 1] / det
    inv_c = cov2d[:, 0, 0] / det

    us = torch.arange(W, dtype=dtype)
    vs = torch.arange(H, dtype=dtype)
    grid_v, grid_u = torch.meshgrid(vs, us, indexing="ij")

    def alphas_for(idx_pix_u, idx_pix_v, sel=slice(None)):
        """(K, P) alpha values of selected Gaussians at the given pixels."""
        du = idx_pix_u[None, :] - mean2d[sel, 0][:, None]
        dv = idx_pix_v[None, :] - mean2d[sel, 1][:, None]
        power = -0.5 * (inv_a[sel][:, None] * du**2
                        + 2.0 * inv_b[sel][:, None] * du * dv
                        + inv_c[sel][:, None] * dv**2)
        alpha = (op_s[sel][:, None] * torch.exp(power)).clamp(max=ALPHA_MAX)
        inside = ((idx_pix_u[None, :] >= u0[sel][:, None]) & (idx_pix_u[None, :] <= u1[sel][:, None])
                  & (idx_pix_v[None, :] >= v0[sel][:, None]) & (idx_pix_v[None, :] <= v1[sel][:, None]))
        return alpha * inside.to(dtype)

    if tile_size is None:
        pix_u = grid_u.reshape(-1)
        pix_v = grid_v.reshape(-1)
        alpha = alphas_for(pix_u, pix_v)
        img, acc = _composite(alpha, color_s, bg)
        return RenderOutput(image=img.reshape(H, W, 3), alpha=acc.reshape(H, W))

    image = torch.empty(H, W, 3, dtype=dtype)
    acc_map = torch.empty(H, W, dtype=dtype)
    img_rows, acc_rows = [], []
    for ty in range(0, H, tile_size):
        img_cols, acc_cols = [], []
        for tx in range(0, W, tile_size):
            h = min(tile_size, H - ty)
            w_ = min(tile_size, W - tx)
            overlap = ((u0 <= tx + w_ - 1) & (u1 >= tx) & (v0 <= ty + h - 1) & (v1 >= ty)
                       & (u0 <= u1) & (v0 <= v1))
            sel = torch.nonzero(overlap, as_tuple=False).squeeze(1)
            pix_u = grid_u[ty:ty + h, tx:tx + w_].reshape(-1)
            pix_v = grid_v[ty:ty + h, tx:tx + w_].reshape(-1)
            if sel.numel() == 0:
                img_cols.append(bg[None, :].expand(h * w_, 3).reshape(h, w_, 3))
                acc_cols.append(torch.zeros(h, w_, dtype=dtype))
                continue
            alpha = alphas_for(pix_u, pix_v, sel)
            img, acc = _composite(alpha, color_s[sel], bg)
            img_cols.append(img.reshape(h, w_, 3))
            acc_cols.append(acc.reshape(h, w_))
        img_rows.append(torch.cat(img_cols, dim=1))
        acc_rows.append(torch.cat(acc_cols, dim=1))
    image = torch.cat(img_rows, dim=0)
    acc_map = torch.cat(acc_rows, dim=0)
    return RenderOutput(image=image, alpha=acc_map)


def render_backward(gaussians, camera: CameraModel, upstream_grad,
                    background=(0.0, 0.0, 0.0), tile_size: int | None = None) -> dict:
    """Gradients of sum(image * upstream_grad) w.r.t. every Gaussian parameter."""
    upstream = torch.as_tensor(upstream_grad, dtype=gaussians.mu.dtype)
    if upstream.shape != (camera.height, camera.width, 3):
        raise ValueError("upstream gradient must be (H, W, 3) for this camera")
    leaves = {name: getattr(gaussians, name).detach().clone().requires_grad_(True)
              for name in ("mu", "color", "opacity", "scale", "quat")}

    class _Leaves:
        pass

    g = _Leaves()
    for name, t in leaves.items():
        setattr(g, name, t)
    out = render(g, camera, background=background, tile_size=tile_size)
    (out.image * upstream).sum().backward()
    return {name: t.grad if t.grad is not None else torch.zeros_like(t)
            for name, t in leaves.items()}


def camera_from_spec(d: dict) -> CameraModel:
    return CameraModel.from_dict(d)


def to_numpy_image(image: torch.Tensor) -> np.ndarray:
    return image.detach().cpu().numpy()
