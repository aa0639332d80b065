"""Procedural human-proxy subjects and an analytic ray-traced RGB-D renderer.

Stand-in for real scan datasets: each subject is a small union of textured
primitives (spheres, ellipsoids, capsules) articulated per seed, rendered
from a ring of calibrated cameras into (image, mask, depth, camera) bundles.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import CameraModel, look_at_camera, unproject_depth

CANONICAL_AZIMUTHS = {"front": 0.0, "back": 180.0, "left": 90.0, "right": 270.0}
DEPTH_MAGIC = b"DPF1"

_INF = np.inf


@dataclass
class Part:
    """One textured primitive. Geometry is stored directly in world coordinates."""

    kind: str  # sphere | ellipsoid | capsule
    # sphere: center,(radius); ellipsoid: center, semi_axes, rotation;
    # capsule: endpoints a, b and radius
    center: np.ndarray | None = None
    radius: float = 0.0
    semi_axes: np.ndarray | None = None
    rotation: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    texture: str = "stripes"  # stripes | checker | noise
    color_a: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.2, 0.2]))
    color_b: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2, 0.8]))
    tex_freq: float = 8.0

    def bounds(self):
        if self.kind == "sphere":
            c = np.asarray(self.center, dtype=np.float64)
            return c - self.radius, c + self.radius
        if self.kind == "ellipsoid":
            c = np.asarray(self.center, dtype=np.float64)
            # extent of a rotated ellipsoid along each axis
            R = self.rotation if self.rotation is not None else np.eye(3)
            ext = np.sqrt(((R * np.asarray(self.semi_axes)[None, :]) ** 2).sum(axis=1))
            return c - ext, c + ext
        if self.kind == "capsule":
            lo = np.minimum(self.a, self.b) - self.radius
            hi = np.maximum(self.a, self.b) + self.radius
            return lo, hi
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass
class SubjectScene:
    parts: list
    height: float
    seed: int = 0

    def bounds(self):
        los, his = zip(*(p.bounds() for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


@dataclass
class SubjectConfig:
    height_range: tuple = (1.5, 1.9)
    max_limb_angle_deg: float = 30.0
    textures: tuple = ("stripes", "checker", "noise")


@dataclass
class DataConfig:
    resolution: int = 128
    ring_radius: float = 2.5
    focal_factor: float = 1.2  # focal = factor * resolution; subject fills most of the frame
    background: tuple = (1.0, 1.0, 1.0)
    subject: SubjectConfig = field(default_factory=SubjectConfig)


@dataclass
class ViewBundle:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) meters, 0 on background
    camera: CameraModel
    view_tag: str


# ---------------------------------------------------------------------------
# Subject generation


def _rot_x(deg):
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(deg):
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def make_subject(seed: int, config: SubjectConfig | None = None) -> SubjectScene:
    """Deterministic articulated body proxy; proportions, pose and texture per seed.

    Built feet-down at y in [0, height], then recentered so the mid-height point
    is the world origin. The vertical extent equals `height` exactly.
    """
    config = config or SubjectConfig()
    rng = np.random.default_rng(seed)
    h = float(rng.uniform(*config.height_range))
    s = h / 1.75  # proportional scale
    amax = config.max_limb_angle_deg

    palette = rng.uniform(0.05, 0.95, size=(8, 3))
    textures = [config.textures[rng.integers(len(config.textures))] for _ in range(6)]
    freqs = rng.uniform(1.5, 3.5, size=6)

    def tex(i):
        return dict(texture=textures[i % 6], color_a=palette[(2 * i) % 8],
                    color_b=palette[(2 * i + 1) % 8], tex_freq=float(freqs[i % 6]))

    parts = []

    head_r = float(rng.uniform(0.11, 0.14)) * s
    head_c = np.array([0.0, h - head_r, 0.0])
    parts.append(Part(kind="sphere", center=head_c, radius=head_r, **tex(0)))

    torso_ax = float(rng.uniform(0.16, 0.21)) * s
    torso_az = float(rng.uniform(0.12, 0.16)) * s
    torso_cy = 0.62 * h
    torso_ay = 0.21 * h
    parts.append(Part(kind="ellipsoid", center=np.array([0.0, torso_cy, 0.0]),
                      semi_axes=np.array([torso_ax, torso_ay, torso_az]),
                      rotation=np.eye(3), **tex(1)))

    # neck bridges the torso top and the head
    parts.append(Part(kind="capsule", a=np.array([0.0, torso_cy + torso_ay - 0.02 * h, 0.0]),
                      b=np.array([0.0, h - head_r, 0.0]), radius=0.05 * s, **tex(2)))

    shoulder_y = torso_cy + torso_ay * 0.78
    arm_r = float(rng.uniform(0.055, 0.070)) * s
    arm_len = 0.34 * h
    for side in (-1.0, 1.0):
        shoulder = np.array([side * torso_ax * 0.85, shoulder_y, 0.0])
        abduct = float(rng.uniform(5.0, amax))
        swing = float(rng.uniform(-amax / 2, amax / 2))
        d = _rot_x(swing) @ _rot_z(-side * abduct) @ np.array([0.0, -1.0, 0.0])
        parts.append(Part(kind="capsule", a=shoulder, b=shoulder + arm_len * d,
                          radius=arm_r, **tex(3)))

    hip_y = torso_cy - torso_ay * 0.85
    leg_r = float(rng.uniform(0.075, 0.090)) * s
    for side in (-1.0, 1.0):
        hip = np.array([side * torso_ax * 0.42, hip_y, 0.0])
        spread = float(rng.uniform(1.0, amax / 3))
        swing = float(rng.uniform(-amax / 3, amax / 3))
        d = _rot_x(swing) @ _rot_z(-side * spread) @ np.array([0.0, -1.0, 0.0])
        # stretch the leg so the foot bottom lands exactly on y = 0
        L = (hip[1] - leg_r) / max(-d[1], 0.5)
        parts.append(Part(kind="capsule", a=hip, b=hip + L * d, radius=leg_r, **tex(4)))

    # recenter: mid-height at the origin
    shift = np.array([0.0, -h / 2.0, 0.0])
    for p in parts:
        for attr in ("center", "a", "b"):
            v = getattr(p, attr)
            if v is not None:
                setattr(p, attr, np.asarray(v, dtype=np.float64) + shift)
    return SubjectScene(parts=parts, height=h, seed=seed)


# ---------------------------------------------------------------------------
# Ray tracing


def _ray_sphere(o, d, center, radius):
    oc = o - center
    a = (d * d).sum(axis=1)
    b = 2.0 * (d * oc).sum(axis=1)
    c = (oc * oc).sum(axis=1) - radius**2
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-6, t0, t1)
    return np.where(hit & (t > 1e-6), t, _INF)


def _ray_ellipsoid(o, d, part):
    R = part.rotation if part.rotation is not None else np.eye(3)
    s = np.asarray(part.semi_axes, dtype=np.float64)
    ol = ((o - part.center) @ R.T) / s
    dl = (d @ R.T) / s
    return _ray_sphere(ol, dl, np.zeros(3), 1.0)


def _ray_capsule(o, d, part):
    a, b, r = np.asarray(part.a), np.asarray(part.b), part.radius
    axis = b - a
    L = np.linalg.norm(axis)
    u = axis / L
    oa = o - a
    # components orthogonal to the axis
    d_par = d @ u
    oa_par = oa @ u
    d_perp = d - d_par[:, None] * u
    oa_perp = oa - oa_par[:, None] * u
    qa = (d_perp * d_perp).sum(axis=1)
    qb = 2.0 * (d_perp * oa_perp).sum(axis=1)
    qc = (oa_perp * oa_perp).sum(axis=1) - r * r
    disc = qb * qb - 4 * qa * qc
    ok = (disc >= 0) & (qa > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_cyl = (-qb - sq) / np.where(qa > 1e-12, 2 * qa, 1.0)
    axial = oa_par + t_cyl * d_par
    t_cyl = np.where(ok & (t_cyl > 1e-6) & (axial >= 0) & (axial <= L), t_cyl, _INF)
    t_a = _ray_sphere(o, d, a, r)
    t_b = _ray_sphere(o, d, b, r)
    return np.minimum(t_cyl, np.minimum(t_a, t_b))


def _part_color(part: Part, pts: np.ndarray) -> np.ndarray:
    # all fields are smooth in position: band-limited texture keeps the color
    # signal resolvable at the rendered pixel pitch
    f = 2.0 * np.pi * part.tex_freq
    if part.texture == "stripes":
        w = (0.5 + 0.5 * np.sin(pts[:, 1] * f))[:, None]
    elif part.texture == "checker":
        w = (0.5 + 0.5 * np.sin(pts[:, 0] * f) * np.sin((pts[:, 1] + pts[:, 2]) * f))[:, None]
    elif part.texture == "noise":
        # deterministic smooth field: superposition of three plane waves
        v = (np.sin(pts @ np.array([0.8, 1.1, 0.5]) * f)
             + np.sin(pts @ np.array([-1.0, 0.6, 1.4]) * f)
             + np.sin(pts @ np.array([0.3, -0.9, 1.0]) * f))
        w = (0.5 + v / 6.0)[:, None]
    else:
        raise ValueError(f"unknown texture {part.texture!r}")
    return part.color_a[None, :] * w + part.color_b[None, :] * (1.0 - w)


def _trace(scene: SubjectScene, camera: CameraModel, u: np.ndarray, v: np.ndarray):
    """Nearest-hit trace through pixel coordinates (u, v); returns
    (hit, depth, part index, world hit points), all flat arrays."""
    dirs_cam = np.stack([(u - camera.cx) / camera.fx,
                         (v - camera.cy) / camera.fy,
                         np.ones_like(u)], axis=-1)
    d = dirs_cam @ camera.rotation  # camera-to-world rotation applied
    o = np.broadcast_to(camera.position, d.shape)

    best_t = np.full(d.shape[0], _INF)
    best_part = np.full(d.shape[0], -1, dtype=np.int64)
    for i, part in enumerate(scene.parts):
        if part.kind == "sphere":
            t = _ray_sphere(o, d, np.asarray(part.center, dtype=np.float64), part.radius)
        elif part.kind == "ellipsoid":
            t = _ray_ellipsoid(o, d, part)
        elif part.kind == "capsule":
            t = _ray_capsule(o, d, part)
        else:
            raise ValueError(f"unknown primitive kind {part.kind!r}")
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_part = np.where(closer, i, best_part)

    hit = np.isfinite(best_t)
    t_safe = np.where(hit, best_t, 0.0)  # dirs have unit camera z, so t is z-depth
    pts = o + t_safe[:, None] * d
    return hit, t_safe, best_part, pts


def _shade(scene: SubjectScene, hit, part_idx, pts, background) -> np.ndarray:
    image = np.ones((hit.shape[0], 3)) * np.asarray(background, dtype=np.float64)
    for i, part in enumerate(scene.parts):
        sel = hit & (part_idx == i)
        if np.any(sel):
            image[sel] = np.clip(_part_color(part, pts[sel]), 0.0, 1.0)
    return image


def render_view(scene: SubjectScene, camera: CameraModel,
                background=(1.0, 1.0, 1.0), aa_samples: int = 3) -> ViewBundle:
    """Analytic ray trace of the scene; flat-shaded procedural texture.

    The color image is supersampled on an aa_samples x aa_samples sub-pixel
    grid (so silhouettes are antialiased, matching what a splat renderer can
    reproduce); mask and depth come from the pixel-center rays.
    """
    H, W = camera.height, camera.width
    u = np.arange(W, dtype=np.float64)[None, :].repeat(H, axis=0).ravel()
    v = np.arange(H, dtype=np.float64)[:, None].repeat(W, axis=1).ravel()

    hit, depth, part_idx, pts = _trace(scene, camera, u, v)
    if aa_samples <= 1:
        image = _shade(scene, hit, part_idx, pts, background)
    else:
        offsets = (np.arange(aa_samples) + 0.5) / aa_samples - 0.5
        image = np.zeros((u.shape[0], 3))
        for du in offsets:
            for dv in offsets:
                h_s, _, p_s, pts_s = _trace(scene, camera, u + du, v + dv)
                image += _shade(scene, h_s, p_s, pts_s, background)
        image /= aa_samples ** 2
    return ViewBundle(image=image.reshape(H, W, 3), mask=hit.reshape(H, W),
                      depth=np.where(hit, depth, 0.0).reshape(H, W),
                      camera=camera, view_tag="custom")


def ring_camera(azimuth_deg: float, data_config: DataConfig,
                elevation_deg: float = 0.0) -> CameraModel:
    """Camera on the capture ring, looking at the subject centroid (origin)."""
    r = data_config.ring_radius
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    pos = np.array([r * np.cos(el) * np.sin(az),
                    r * np.sin(el),
                    -r * np.cos(el) * np.cos(az)])
    res = data_config.resolution
    return look_at_camera(pos, np.zeros(3), res, res, focal=data_config.focal_factor * res)


def render_canonical_views(scene: SubjectScene, data_config: DataConfig) -> dict:
    out = {}
    for tag, az in CANONICAL_AZIMUTHS.items():
        bundle = render_view(scene, ring_camera(az, data_config), background=data_config.background)
        bundle.view_tag = tag
        out[tag] = bundle
    return out


# ---------------------------------------------------------------------------
# On-disk dataset


def write_depth_f32(path, depth: np.ndarray):
    depth = np.asarray(depth, dtype="<f4")
    H, W = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<HH", H, W))
        f.write(depth.tobytes())


def read_depth_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
        if head[:4] != DEPTH_MAGIC:
            raise ValueError(f"{path}: not a depth raster (bad magic)")
        H, W = struct.unpack("<HH", head[4:])
        return np.frombuffer(f.read(H * W * 4), dtype="<f4").reshape(H, W).astype(np.float64)


def save_bundle(dir_path, bundle: ViewBundle):
    os.makedirs(dir_path, exist_ok=True)
    tag = bundle.view_tag
    img8 = np.clip(np.round(bundle.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img8).save(os.path.join(dir_path, f"{tag}.png"))
    Image.fromarray(bundle.mask).convert("1").save(os.path.join(dir_path, f"{tag}.mask.png"))
    write_depth_f32(os.path.join(dir_path, f"{tag}.depth.f32"), bundle.depth)
    with open(os.path.join(dir_path, f"{tag}.cam.json"), "w") as f:
        json.dump(bundle.camera.to_dict(), f, indent=1, sort_keys=True)


def load_bundle(dir_path, tag) -> ViewBundle:
    img_path = os.path.join(dir_path, f"{tag}.png")
    if not os.path.exists(img_path):
        raise FileNotFoundError(img_path)
    image = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
    mask = np.asarray(Image.open(os.path.join(dir_path, f"{tag}.mask.png"))) > 0
    depth = read_depth_f32(os.path.join(dir_path, f"{tag}.depth.f32"))
    with open(os.path.join(dir_path, f"{tag}.cam.json")) as f:
        camera = CameraModel.from_dict(json.load(f))
    return ViewBundle(image=image, mask=mask, depth=depth, camera=camera, view_tag=tag)


def make_dataset(n_subjects: int, novel_per_subject: int, resolution: int, out_dir,
                 config: DataConfig | None = None, seed_base: int = 0) -> dict:
    """Render and store canonical + novel bundles per subject; returns the manifest."""
    config = config or DataConfig()
    config.resolution = resolution
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "resolution": resolution,
        "ring_radius": config.ring_radius,
        "focal_factor": config.focal_factor,
        "background": list(config.background),
        "seed_base": seed_base,
        "subjects": [],
    }
    for i in range(n_subjects):
        seed = seed_base + i
        scene = make_subject(seed, config.subject)
        subject_id = f"subj_{i:04d}"
        subject_dir = os.path.join(out_dir, subject_id)
        views = []
        for tag, az in CANONICAL_AZIMUTHS.items():
            bundle = render_view(scene, ring_camera(az, config), background=config.background)
            bundle.view_tag = tag
            save_bundle(subject_dir, bundle)
            views.append({"tag": tag, "azimuth": az, "elevation": 0.0})
        view_rng = np.random.default_rng(seed + 10_000_019)
        for k in range(novel_per_subject):
            az = float(view_rng.uniform(0.0, 360.0))
            el = float(view_rng.uniform(-10.0, 10.0))
            tag = f"novel_{k:03d}"
            bundle = render_view(scene, ring_camera(az, config, elevation_deg=el),
                                 background=config.background)
            bundle.view_tag = tag
            save_bundle(subject_dir, bundle)
            views.append({"tag": tag, "azimuth": az, "elevation": el})
        manifest["subjects"].append({
            "id": subject_id, "seed": seed, "height": scene.height, "views": views,
        })
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as f:
        return json.load(f)


def load_subject_views(root, subject_entry: dict) -> dict:
    subject_dir = os.path.join(root, subject_entry["id"])
    return {v["tag"]: load_bundle(subject_dir, v["tag"]) for v in subject_entry["views"]}


def ground_truth_pointmaps(views: dict, delta_frame: str = "front") -> dict:
    """Unproject canonical depth maps and express them in the front camera frame."""
    from .geometry import to_camera_frame
    front_cam = views[delta_frame].camera
    out = {}
    for tag in CANONICAL_AZIMUTHS:
        b = views[tag]
        pm = unproject_depth(b.depth, b.mask, b.camera)
        out[tag] = to_camera_frame(pm, front_cam)
    return out
