"""Pinhole camera math, pixel-aligned pointmaps, and four-view fusion.

All predicted geometry lives in the front-view camera frame (right-handed,
+z into the scene, image origin top-left). Cameras only exist for synthetic
data generation and evaluation rendering; inference itself is camera-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VIEW_ORDER = ("front", "back", "left", "right")


@dataclass(frozen=True)
class CameraModel:
    """Calibrated pinhole camera with a world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        R = self.rotation
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=d["width"], height=d["height"],
        )


def look_at_camera(position, target, width, height, focal, up=(0.0, 1.0, 0.0)) -> CameraModel:
    """Build a camera at `position` looking at `target` (world y assumed up)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("camera position coincides with target")
    z = forward / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x = x / xn
    y = np.cross(z, x)  # image y points world-down
    R = np.stack([x, y, z], axis=0)
    t = -R @ position
    return CameraModel(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                       rotation=R, translation=t, width=width, height=height)


@dataclass
class PointMap:
    """Pixel-aligned grid of 3D points with a validity mask."""

    points: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must be (H, W, 3), got {self.points.shape}")
        if self.valid.shape != self.points.shape[:2]:
            raise ValueError("valid mask shape must match the point grid")
        if not np.all(np.isfinite(self.points[self.valid])):
            raise ValueError("valid points must be finite")

    @property
    def shape(self):
        return self.valid.shape

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def valid_pixels(self) -> np.ndarray:
        """(N, 2) array of (row, col) indices of valid pixels, row-major order."""
        rows, cols = np.nonzero(self.valid)
        return np.stack([rows, cols], axis=1)


@dataclass
class FusedPointCloud:
    """Flat concatenation of the four per-view pointmaps, scaled to metric size."""

    positions: np.ndarray  # (N, 3)
    source_view: np.ndarray  # (N,) int index into VIEW_ORDER
    source_pixel: np.ndarray  # (N, 2) (row, col)
    colors: np.ndarray | None = None  # (N, 3) in [0, 1], filled after side enhancement

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def view_slice(self, view: str) -> np.ndarray:
        return np.nonzero(self.source_view == VIEW_ORDER.index(view))[0]


def unproject_depth(depth: np.ndarray, mask: np.ndarray, camera: CameraModel) -> PointMap:
    """Lift a depth map to world-frame 3D points on masked pixels.

    Pixel (row v, col u) at depth d maps to camera-frame
    ((u - cx) d / fx, (v - cy) d / fy, d), then through the inverse pose.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape:
        raise ValueError(f"depth {depth.shape} and mask {mask.shape} shapes differ")
    if depth.shape != (camera.height, camera.width):
        raise ValueError("depth shape does not match the camera resolution")
    if np.any(depth[mask] <= 0):
        raise ValueError("masked pixels must carry positive depth")

    H, W = depth.shape
    u = np.arange(W, dtype=np.float64)[None, :]
    v = np.arange(H, dtype=np.float64)[:, None]
    x = (u - camera.cx) * depth / camera.fx
    y = (v - camera.cy) * depth / camera.fy
    pts_cam = np.stack([x, y, depth], axis=-1)
    pts_world = camera.cam_to_world(pts_cam.reshape(-1, 3)).reshape(H, W, 3)
    pts_world[~mask] = 0.0
    return PointMap(points=pts_world, valid=mask)


def project_points(points: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Project world points to (u, v, depth). Behind-camera points get depth <= 0."""
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    pts_cam = camera.world_to_cam(points.reshape(-1, 3))
    z = pts_cam[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = camera.fx * pts_cam[:, 0] / safe_z + camera.cx
    v = camera.fy * pts_cam[:, 1] / safe_z + camera.cy
    out = np.stack([u, v, z], axis=1)
    return out.reshape(points.shape[:-1] + (3,))


def camera_in_reference_frame(camera: CameraModel, reference: CameraModel) -> CameraModel:
    """Re-express `camera`'s pose for points given in `reference`'s camera frame.

    If p_ref = R_f p_world + t_f, the returned camera maps p_ref to `camera`'s
    own frame exactly as `camera` maps world points.
    """
    R = camera.rotation @ reference.rotation.T
    t = camera.translation - R @ reference.translation
    return CameraModel(fx=camera.fx, fy=camera.fy, cx=camera.cx, cy=camera.cy,
                       rotation=R, translation=t,
                       width=camera.width, height=camera.height)


def to_camera_frame(pointmap: PointMap, camera: CameraModel) -> PointMap:
    """Re-express a world-frame pointmap in `camera`'s coordinate frame."""
    pts = camera.world_to_cam(pointmap.points.reshape(-1, 3)).reshape(pointmap.points.shape)
    pts[~pointmap.valid] = 0.0
    return PointMap(points=pts, valid=pointmap.valid.copy())


def fuse_pointmaps(front: PointMap, back: PointMap, left: PointMap, right: PointMap,
                   delta: float) -> FusedPointCloud:
    """Concatenate valid points front->back->left->right, scaled by `delta`."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    positions, views, pixels = [], [], []
    for idx, pm in enumerate((front, back, left, right)):
        pts = pm.valid_points()
        positions.append(pts * delta)
        views.append(np.full(len(pts), idx, dtype=np.int64))
        pixels.append(pm.valid_pixels())
    return FusedPointCloud(
        positions=np.concatenate(positions, axis=0) if positions else np.zeros((0, 3)),
        source_view=np.concatenate(views, axis=0),
        source_pixel=np.concatenate(pixels, axis=0),
    )


def gather_pixel_colors(pointmap: PointMap, image: np.ndarray) -> np.ndarray:
    """Colors of the valid pixels of a pointmap, in valid-pixel (row-major) order."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != pointmap.shape:
        raise ValueError("image resolution does not match the pointmap")
    return image[pointmap.valid]
