"""Two-image feed-forward human Gaussian reconstruction at desk scale."""

__version__ = "0.1.0"

from .geometry import CameraModel, FusedPointCloud, PointMap, fuse_pointmaps
from .pointnet import NetConfig, PointMapNet, stage1_loss
from .regress import GaussianRegressor, GaussianSet
from .render import render, render_backward
from .pipeline import run_inference, predict_cloud

__all__ = [
    "CameraModel", "FusedPointCloud", "PointMap", "fuse_pointmaps",
    "NetConfig", "PointMapNet", "stage1_loss",
    "GaussianRegressor", "GaussianSet",
    "render", "render_backward",
    "run_inference", "predict_cloud",
]
