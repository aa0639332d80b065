"""Side-view color enhancement: exact nearest-neighbor color transfer.

Side pointmaps come out of the prediction model without color, so every side
point borrows the color of its Euclidean nearest neighbor in the colored
front/back cloud (front points first, then back, so ties resolve to the front).
The grid-accelerated search is exact, including tie-breaks, and is verified
against the brute-force scan.
"""

from __future__ import annotations

import numpy as np

from .geometry import PointMap


def nns_brute_force(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """O(M*K) scan; ties resolve to the lowest reference index."""
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if refs.shape[0] == 0:
        raise ValueError("reference set must be non-empty")
    out = np.empty(queries.shape[0], dtype=np.int64)
    # chunked to bound the M x K distance matrix
    step = max(1, int(4e6 // max(refs.shape[0], 1)))
    for lo in range(0, queries.shape[0], step):
        q = queries[lo:lo + step]
        d = q[:, None, :] - refs[None, :, :]
        d2 = d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2
        out[lo:lo + step] = np.argmin(d2, axis=1)  # argmin keeps the first minimum
    return out


class GridIndex:
    """Uniform spatial hash over the reference cloud; queries are exact."""

    def __init__(self, refs: np.ndarray, cell_size: float | None = None):
        refs = np.asarray(refs, dtype=np.float64)
        if refs.shape[0] == 0:
            raise ValueError("reference set must be non-empty")
        if not np.all(np.isfinite(refs)):
            raise ValueError("reference points must be finite")
        self.refs = refs
        self.cell = float(cell_size) if cell_size else self._estimate_cell(refs)
        coords = np.floor(refs / self.cell).astype(np.int64)
        self.cells: dict = {}
        for i, key in enumerate(map(tuple, coords)):
            self.cells.setdefault(key, []).append(i)
        for key in self.cells:
            self.cells[key] = np.asarray(self.cells[key], dtype=np.int64)
        self.lo = coords.min(axis=0)
        self.hi = coords.max(axis=0)

    @staticmethod
    def _estimate_cell(refs: np.ndarray) -> float:
        # median nearest-neighbor distance on a subsample
        n = refs.shape[0]
        if n == 1:
            return 1.0
        rng = np.random.default_rng(0)
        sample = refs[rng.choice(n, size=min(n, 256), replace=False)]
        d = sample[:, None, :] - refs[None, :, :]
        d2 = (d ** 2).sum(axis=-1)
        d2[d2 == 0.0] = np.inf
        med = float(np.sqrt(np.median(d2.min(axis=1))))
        # cells of ~2 NN spacings keep ring expansions short without bloating cells
        return max(2.0 * med, 1e-9)

    def _ring_candidates(self, cq: np.ndarray, r: int) -> np.ndarray:
        """Reference indices in cells at Chebyshev distance exactly r from cq."""
        found = []
        if r == 0:
            hit = self.cells.get(tuple(cq))
            return hit if hit is not None else _EMPTY
        rng_x = range(cq[0] - r, cq[0] + r + 1)
        for x in rng_x:
            for y in range(cq[1] - r, cq[1] + r + 1):
                on_face_xy = abs(x - cq[0]) == r or abs(y - cq[1]) == r
                zs = range(cq[2] - r, cq[2] + r + 1) if on_face_xy else (cq[2] - r, cq[2] + r)
                for z in zs:
                    hit = self.cells.get((x, y, z))
                    if hit is not None:
                        found.append(hit)
        return np.concatenate(found) if found else _EMPTY

    def query(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        out = np.empty(points.shape[0], dtype=np.int64)
        cell = self.cell
        max_ring = int(np.max(self.hi - self.lo)) + 2
        all_cq = np.floor(points / cell).astype(np.int64)
        for qi, p in enumerate(points):
            cq = all_cq[qi]
            best_d2 = np.inf
            best_idx = -1
            r = 0
            while True:
                cand = self._ring_candidates(cq, r)
                if cand.size:
                    d = self.refs[cand] - p
                    d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
                    k = int(np.argmin(d2))
                    # exact tie-break: lowest reference index among equal minima
                    ties = cand[d2 == d2[k]]
                    c_best = int(ties.min())
                    c_d2 = float(d2[k])
                    if c_d2 < best_d2 or (c_d2 == best_d2 and c_best < best_idx):
                        best_d2, best_idx = c_d2, c_best
                # cells at ring r+1 are at least r*cell away from p's cell
                if best_idx >= 0 and best_d2 <= (r * cell) ** 2:
                    break
                ring_lo = cq - r
                ring_hi = cq + r
                if np.all(ring_lo <= self.lo) and np.all(ring_hi >= self.hi):
                    break  # every reference already examined
                if r > max_ring:
                    raise RuntimeError("grid query failed to terminate")
                r += 1
            out[qi] = best_idx
        return out


_EMPTY = np.empty(0, dtype=np.int64)


def nns_color_transfer(side_points: np.ndarray, ref_points: np.ndarray,
                       ref_colors: np.ndarray, use_grid: bool = True) -> np.ndarray:
    """Assign each side point the color of its nearest reference point."""
    side_points = np.asarray(side_points, dtype=np.float64)
    ref_points = np.asarray(ref_points, dtype=np.float64)
    ref_colors = np.asarray(ref_colors, dtype=np.float64)
    if ref_points.shape[0] == 0:
        raise ValueError("reference set must be non-empty")
    if ref_points.shape[0] != ref_colors.shape[0]:
        raise ValueError("reference points and colors must align")
    if not (np.all(np.isfinite(side_points)) and np.all(np.isfinite(ref_points))):
        raise ValueError("points must be finite")
    if use_grid:
        idx = GridIndex(ref_points).query(side_points)
    else:
        idx = nns_brute_force(side_points, ref_points)
    return ref_colors[idx]


def build_pseudo_view(side_pointmap: PointMap, colors: np.ndarray,
                      background=(0.5, 0.5, 0.5)):
    """Write transferred colors back to the side pointmap's pixel grid.

    `colors` must be in the pointmap's valid-pixel (row-major) order.
    Returns (image, valid) with background on invalid pixels.
    """
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n_valid = int(side_pointmap.valid.sum())
    if colors.shape[0] != n_valid:
        raise ValueError(f"expected {n_valid} colors, got {colors.shape[0]}")
    H, W = side_pointmap.shape
    image = np.ones((H, W, 3), dtype=np.float64) * np.asarray(background, dtype=np.float64)
    image[side_pointmap.valid] = colors
    return image, side_pointmap.valid.copy()
