"""PLY export for colored point clouds and 3DGS-convention Gaussian sets."""

from __future__ import annotations

import numpy as np


def write_point_cloud_ply(path, positions: np.ndarray, colors: np.ndarray, binary: bool = True):
    """Write x,y,z + 8-bit red,green,blue vertices.

    Colors are expected in [0, 1] and are quantized to uint8.
    """
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if positions.shape[0] != colors.shape[0]:
        raise ValueError("positions and colors must have the same length")
    rgb = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    n = positions.shape[0]
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"] = positions
            rec["rgb"] = rgb
            f.write(rec.tobytes())
        else:
            for p, c in zip(positions, rgb):
                f.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))


GAUSSIAN_PLY_FIELDS = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)

# 3DGS viewer convention: colors as zeroth SH coefficient, opacity as a logit,
# scales in log space.
_SH_C0 = 0.28209479177387814


def write_gaussian_ply(path, mu, color, opacity, scale, quat):
    mu = np.asarray(mu, dtype=np.float32).reshape(-1, 3)
    n = mu.shape[0]
    color = np.asarray(color, dtype=np.float64).reshape(n, 3)
    opacity = np.asarray(opacity, dtype=np.float64).reshape(n)
    scale = np.asarray(scale, dtype=np.float64).reshape(n, 3)
    quat = np.asarray(quat, dtype=np.float32).reshape(n, 4)

    f_dc = (color - 0.5) / _SH_C0
    eps = 1e-7
    op = np.clip(opacity, eps, 1 - eps)
    op_logit = np.log(op / (1 - op))
    log_scale = np.log(np.clip(scale, 1e-9, None))

    data = np.concatenate(
        [mu, np.zeros((n, 3), dtype=np.float32), f_dc.astype(np.float32),
         op_logit[:, None].astype(np.float32), log_scale.astype(np.float32), quat],
        axis=1,
    ).astype("<f4")

    header_props = "".join(f"property float {name}\n" for name in GAUSSIAN_PLY_FIELDS)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n{header_props}end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def read_ply(path):
    """Minimal PLY reader covering the two formats written by this module.

    Returns (fields, (N, F) float array); uchar columns are returned as floats.
    """
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header_lines = raw[:end].decode("ascii").splitlines()
    fields, types = [], []
    n = 0
    binary = False
    for line in header_lines:
        parts = line.split()
        if parts[0] == "format":
            binary = parts[1] == "binary_little_endian"
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            types.append(parts[1])
            fields.append(parts[2])
    if binary:
        dtype = np.dtype([(name, "<f4" if t == "float" else "u1") for name, t in zip(fields, types)])
        rec = np.frombuffer(raw[end:end + n * dtype.itemsize], dtype=dtype)
        data = np.stack([rec[name].astype(np.float64) for name in fields], axis=1)
    else:
        body = raw[end:].decode("ascii").split()
        data = np.asarray(body, dtype=np.float64).reshape(n, len(fields))
    return fields, data
