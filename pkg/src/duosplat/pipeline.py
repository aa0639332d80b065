"""Full inference path: images -> pointmaps -> pseudo-views -> Gaussians.

Camera-free: the only inputs are the front/back images and their masks.
The nearest-neighbor color transfer is a stop-gradient boundary; during
stage-2 training gradients flow through the Gaussian regressor only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .enhance import build_pseudo_view, nns_color_transfer
from .geometry import PointMap, FusedPointCloud, fuse_pointmaps, gather_pixel_colors
from .pointnet import PointMapNet, PointMapPrediction
from .regress import (DEFAULT_OFFSET_FRAC, DEFAULT_SCALE_FRAC, GaussianRegressor,
                      GaussianSet, activate, assemble, regress_views)

GRAY = 0.5
CONF_THRESHOLD = 0.5


@dataclass
class InferenceResult:
    prediction: PointMapPrediction
    pointmaps: dict  # view -> PointMap (unscaled, front-view frame)
    delta: float
    cloud: FusedPointCloud  # delta-scaled, with colors
    pseudo_views: dict  # "left"/"right" -> (H, W, 3) image
    view_images: dict  # all four per-view color inputs fed to the regressor
    gaussians: GaussianSet
    offset_cap: float
    scale_cap: float


def mask_to_gray(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace background pixels by mid-gray before encoding."""
    image = np.asarray(image, dtype=np.float64)
    out = np.full_like(image, GRAY)
    out[mask] = image[mask]
    return out


def predict_cloud(pointnet: PointMapNet, front_img, back_img, front_mask, back_mask,
                  use_side_heads: bool = True, use_nns: bool = True,
                  conf_threshold: float = CONF_THRESHOLD):
    """Images + masks -> (prediction, per-view pointmaps, colored fused cloud)."""
    front_img = np.asarray(front_img, dtype=np.float64)
    back_img = np.asarray(back_img, dtype=np.float64)
    front_mask = np.asarray(front_mask, dtype=bool)
    back_mask = np.asarray(back_mask, dtype=bool)
    if front_img.shape != back_img.shape:
        raise ValueError("front and back images must share a resolution")
    if front_mask.shape != front_img.shape[:2] or back_mask.shape != back_img.shape[:2]:
        raise ValueError("mask resolution must match the images")

    with torch.no_grad():
        pred = pointnet.predict(mask_to_gray(front_img, front_mask),
                                mask_to_gray(back_img, back_mask))
    delta = float(pred.delta)

    # validity: input masks for front/back, thresholded confidence for the sides
    valid = {
        "front": front_mask,
        "back": back_mask,
        "left": pred.confidences["left"].detach().numpy() > conf_threshold,
        "right": pred.confidences["right"].detach().numpy() > conf_threshold,
    }
    if not use_side_heads:
        valid["left"] = np.zeros_like(valid["left"])
        valid["right"] = np.zeros_like(valid["right"])
    pointmaps = {v: PointMap(points=pred.maps[v].detach().numpy().astype(np.float64),
                             valid=valid[v]) for v in valid}

    cloud = fuse_pointmaps(pointmaps["front"], pointmaps["back"],
                           pointmaps["left"], pointmaps["right"], delta)

    # colors: front/back are pixel-wise from the inputs; sides by NNS transfer
    colors = np.full((cloud.count, 3), GRAY)
    f_idx, b_idx = cloud.view_slice("front"), cloud.view_slice("back")
    colors[f_idx] = gather_pixel_colors(pointmaps["front"], front_img)
    colors[b_idx] = gather_pixel_colors(pointmaps["back"], back_img)
    ref_idx = np.concatenate([f_idx, b_idx])
    side_idx = np.concatenate([cloud.view_slice("left"), cloud.view_slice("right")])
    if use_nns and len(side_idx) and len(ref_idx):
        colors[side_idx] = nns_color_transfer(cloud.positions[side_idx],
                                              cloud.positions[ref_idx],
                                              colors[ref_idx])
    cloud.colors = colors
    return pred, pointmaps, cloud


def run_inference(pointnet: PointMapNet, regressor: GaussianRegressor,
                  front_img, back_img, front_mask, back_mask,
                  use_side_heads: bool = True, use_nns: bool = True,
                  conf_threshold: float = CONF_THRESHOLD,
                  offset_frac: float = DEFAULT_OFFSET_FRAC,
                  scale_frac: float = DEFAULT_SCALE_FRAC) -> InferenceResult:
    front_img = np.asarray(front_img, dtype=np.float64)
    back_img = np.asarray(back_img, dtype=np.float64)
    front_mask = np.asarray(front_mask, dtype=bool)
    back_mask = np.asarray(back_mask, dtype=bool)
    pred, pointmaps, cloud = predict_cloud(
        pointnet, front_img, back_img, front_mask, back_mask,
        use_side_heads=use_side_heads, use_nns=use_nns, conf_threshold=conf_threshold)
    delta = float(pred.delta)
    valid = {v: pointmaps[v].valid for v in pointmaps}
    colors = cloud.colors

    pseudo_views = {}
    for side in ("left", "right"):
        idx = cloud.view_slice(side)
        img, _ = build_pseudo_view(pointmaps[side], colors[idx], background=(GRAY,) * 3)
        pseudo_views[side] = img

    if cloud.count:
        lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
        diag = float(np.linalg.norm(hi - lo))
    else:
        diag = 1.0
    offset_cap = offset_frac * max(diag, 1e-6)
    scale_cap = scale_frac * max(diag, 1e-6)

    view_images = {
        "front": mask_to_gray(front_img, front_mask),
        "back": mask_to_gray(back_img, back_mask),
        "left": pseudo_views["left"],
        "right": pseudo_views["right"],
    }
    order = ("front", "back", "left", "right")
    raws = regress_views(regressor, [pointmaps[v] for v in order],
                         [view_images[v] for v in order], delta=delta)
    per_view = [activate(raw, pointmaps[v], valid[v], delta=delta,
                         offset_cap=offset_cap, scale_cap=scale_cap, view_tag=v)
                for raw, v in zip(raws, order)]
    gaussians = assemble(per_view)
    return InferenceResult(prediction=pred, pointmaps=pointmaps, delta=delta,
                           cloud=cloud, pseudo_views=pseudo_views,
                           view_images=view_images, gaussians=gaussians,
                           offset_cap=offset_cap, scale_cap=scale_cap)


def prior_baseline_gaussians(cloud: FusedPointCloud, point_scale: float = 0.02,
                             opacity: float = 0.95) -> GaussianSet:
    """No-learning baseline: fixed-size isotropic splats at the prior points."""
    n = cloud.count
    colors = cloud.colors if cloud.colors is not None else np.full((n, 3), GRAY)
    quat = torch.zeros(n, 4)
    quat[:, 0] = 1.0
    return GaussianSet(
        mu=torch.as_tensor(cloud.positions, dtype=torch.float32),
        color=torch.as_tensor(colors, dtype=torch.float32),
        opacity=torch.full((n,), opacity),
        scale=torch.full((n, 3), point_scale),
        quat=quat,
        source_view=np.array([("front", "back", "left", "right")[v] for v in cloud.source_view],
                             dtype=object),
        source_pixel=cloud.source_pixel,
    )
