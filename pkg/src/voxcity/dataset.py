"""Dataset construction: height-map rendering, elevation, cropping, and a
synthetic city generator for desk-scale training scenes.

Height maps are top-down orthographic elevation images: pixel (r, c) covers
the world cell [x0 + r*gsd, x0 + (r+1)*gsd) x [y0 + c*gsd, ...), its value
is the maximum elevation of the contained points mapped linearly to
[0, 255] (empty pixels 0). The meters-per-gray-level factor and the minimum
elevation travel with the map so elevation is recoverable per scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import EmptyInputError, VoxCityError

GRAY_MAX = 255.0


@dataclass
class HeightMap:
    """Elevation image with its ground sampling distance and z mapping."""

    values: np.ndarray              # (H, W) float64 in [0, 255]
    gsd: float                      # meters per pixel
    z_min: float = 0.0              # elevation of gray 0
    z_scale: float = 1.0 / GRAY_MAX  # meters per gray level
    origin_xy: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise VoxCityError("height map must be 2-D")
        if not self.gsd > 0:
            raise VoxCityError("gsd must be positive")
        if self.values.size and (self.values.min() < 0
                                 or self.values.max() > GRAY_MAX):
            raise VoxCityError("height map values must lie in [0, 255]")

    @property
    def shape(self):
        return self.values.shape

    def elevation(self) -> np.ndarray:
        return self.z_min + self.values * self.z_scale


def render_heightmap(points: PointCloud, gsd: float, bbox=None,
                     z_range=None) -> HeightMap:
    """Per-pixel maximum elevation, linearly rescaled to [0, 255].

    ``bbox`` is ((x0, y0), (x1, y1)) in meters (defaults to the point
    extent); ``z_range`` pins the gray mapping (defaults to the data range;
    a single-level scene maps to 255).
    """
    if len(points) == 0:
        raise EmptyInputError("empty input")
    pos = points.positions
    if bbox is None:
        lo = pos[:, :2].min(axis=0)
        hi = pos[:, :2].max(axis=0)
        shape = np.floor((hi - lo) / gsd).astype(int) + 1  # cover the max point
    else:
        lo = np.asarray(bbox[0], dtype=np.float64)
        hi = np.asarray(bbox[1], dtype=np.float64)
        shape = np.maximum(np.ceil((hi - lo) / gsd - 1e-9).astype(int), 1)
    r_idx = np.floor((pos[:, 0] - lo[0]) / gsd).astype(int)
    c_idx = np.floor((pos[:, 1] - lo[1]) / gsd).astype(int)
    inside = ((r_idx >= 0) & (r_idx < shape[0]) & (c_idx >= 0) & (c_idx < shape[1]))
    top = np.full(tuple(shape), -np.inf)
    np.maximum.at(top, (r_idx[inside], c_idx[inside]), pos[inside, 2])
    covered = ~np.isneginf(top)
    if z_range is None:
        z_lo = float(pos[inside, 2].min()) if inside.any() else 0.0
        z_hi = float(pos[inside, 2].max()) if inside.any() else 0.0
    else:
        z_lo, z_hi = float(z_range[0]), float(z_range[1])
    if z_hi > z_lo:
        values = np.where(covered,
                          (np.where(covered, top, 0.0) - z_lo)
                          / (z_hi - z_lo) * GRAY_MAX, 0.0)
        values = np.clip(values, 0.0, GRAY_MAX)
        z_scale = (z_hi - z_lo) / GRAY_MAX
    else:
        values = np.where(covered, GRAY_MAX, 0.0)  # single-level scene
        z_scale = 1.0 / GRAY_MAX
    return HeightMap(values, gsd=gsd, z_min=z_lo, z_scale=z_scale,
                     origin_xy=(float(lo[0]), float(lo[1])))


def perturb_heightmap(hm: HeightMap, contrast: float, seed: int,
                      ambient_amplitude: float = 0.0,
                      ambient_cells: int = 4) -> HeightMap:
    """Contrast scaling about mid-gray plus a low-frequency additive field.

    value' = clamp(mid + contrast * (value - mid) + ambient); deterministic
    per seed. contrast=1 with zero amplitude is the identity.
    """
    mid = GRAY_MAX / 2.0
    out = hm.values.copy() if contrast == 1.0 else mid + contrast * (hm.values - mid)
    if ambient_amplitude > 0.0:
        rng = np.random.default_rng(seed)
        h, w = hm.values.shape
        coarse = rng.uniform(-1.0, 1.0,
                             size=(max(h // ambient_cells, 1) + 1,
                                   max(w // ambient_cells, 1) + 1))
        rr = np.linspace(0, coarse.shape[0] - 1, h)
        cc = np.linspace(0, coarse.shape[1] - 1, w)
        r0 = np.floor(rr).astype(int)
        c0 = np.floor(cc).astype(int)
        fr = (rr - r0)[:, None]
        fc = (cc - c0)[None, :]
        r1 = np.minimum(r0 + 1, coarse.shape[0] - 1)
        c1 = np.minimum(c0 + 1, coarse.shape[1] - 1)
        fieldv = ((1 - fr) * (1 - fc) * coarse[np.ix_(r0, c0)]
                  + (1 - fr) * fc * coarse[np.ix_(r0, c1)]
                  + fr * (1 - fc) * coarse[np.ix_(r1, c0)]
                  + fr * fc * coarse[np.ix_(r1, c1)])
        out = out + ambient_amplitude * fieldv
    return HeightMap(np.clip(out, 0.0, GRAY_MAX), gsd=hm.gsd, z_min=hm.z_min,
                     z_scale=hm.z_scale, origin_xy=hm.origin_xy)


def elevate(hm: HeightMap) -> PointCloud:
    """One point per nonzero pixel at the pixel's world corner and its
    decoded elevation."""
    rows, cols = np.nonzero(hm.values > 0)
    if rows.size == 0:
        raise EmptyInputError("height map has no nonzero pixels")
    x = hm.origin_xy[0] + rows * hm.gsd
    y = hm.origin_xy[1] + cols * hm.gsd
    z = hm.z_min + hm.values[rows, cols] * hm.z_scale
    return PointCloud(np.stack([x, y, z], axis=1))


@dataclass
class SceneCrop:
    """Aligned height-map tile and point-cloud tile with provenance offsets."""

    crop_id: int
    heightmap: HeightMap
    points: PointCloud
    px_offset: tuple            # (row0, col0) in source pixels
    world_offset: tuple         # (x0, y0) in meters

    def local_points(self) -> PointCloud:
        offset = (-self.world_offset[0], -self.world_offset[1], 0.0)
        return self.points.transformed(offset)


def crop_dataset(points: PointCloud, hm: HeightMap, tile_px: int = 300,
                 seed: int = 0, ratios=(0.8, 0.1, 0.1)):
    """Aligned tiling plus a deterministic train/val/test split.

    Full tiles only; tiles without any points are dropped. Returns
    (crops, split) where split maps 'train'/'val'/'test' to crop id lists
    forming a partition.
    """
    h, w = hm.shape
    n_r, n_c = h // tile_px, w // tile_px
    if n_r == 0 or n_c == 0:
        raise VoxCityError(f"height map {h}x{w} smaller than one {tile_px} tile")
    crops = []
    pos = points.positions
    tile_m = tile_px * hm.gsd
    tr = np.floor((pos[:, 0] - hm.origin_xy[0]) / tile_m).astype(int)
    tc = np.floor((pos[:, 1] - hm.origin_xy[1]) / tile_m).astype(int)
    crop_id = 0
    for i in range(n_r):
        for j in range(n_c):
            mask = (tr == i) & (tc == j)
            if not mask.any():
                continue
            tile_vals = hm.values[i * tile_px:(i + 1) * tile_px,
                                  j * tile_px:(j + 1) * tile_px]
            wx = hm.origin_xy[0] + i * tile_m
            wy = hm.origin_xy[1] + j * tile_m
            tile_hm = HeightMap(tile_vals.copy(), gsd=hm.gsd, z_min=hm.z_min,
                                z_scale=hm.z_scale, origin_xy=(wx, wy))
            crops.append(SceneCrop(crop_id, tile_hm, points.subset(mask),
                                   px_offset=(i * tile_px, j * tile_px),
                                   world_offset=(wx, wy)))
            crop_id += 1
    ids = [c.crop_id for c in crops]
    rng = np.random.default_rng(seed)
    order = [ids[k] for k in rng.permutation(len(ids))]
    n = len(order)
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    split = {"val": sorted(order[:n_val]),
             "test": sorted(order[n_val:n_val + n_test]),
             "train": sorted(order[n_val + n_test:])}
    return crops, split


# -- synthetic city generator -------------------------------------------------


@dataclass
class CityParams:
    extent_xy: float = 32.0
    n_buildings: int = 10
    building_size: tuple = (3.0, 10.0)   # footprint edge range, meters
    height_range: tuple = (3.0, 14.0)
    n_points: int = 30_000
    ground_fraction: float = 0.35


_GROUND_COLOR = np.array([0.35, 0.42, 0.30])
_PALETTE = np.array([
    [0.75, 0.72, 0.65], [0.62, 0.58, 0.55], [0.70, 0.45, 0.38],
    [0.55, 0.60, 0.68], [0.80, 0.78, 0.70], [0.48, 0.50, 0.52],
])


def generate_city(seed: int, params: CityParams = CityParams()) -> PointCloud:
    """Random boxes on a ground plane, surface-sampled with area weighting.

    Points carry face normals and per-building colors (roofs brighter than
    walls); the result is the colorized training cloud of one scene.
    """
    rng = np.random.default_rng(seed)
    ext = params.extent_xy
    boxes = []
    for _ in range(params.n_buildings):
        wdt = rng.uniform(*params.building_size)
        dep = rng.uniform(*params.building_size)
        hgt = rng.uniform(*params.height_range)
        x0 = rng.uniform(0.0, max(ext - wdt, 0.1))
        y0 = rng.uniform(0.0, max(ext - dep, 0.1))
        boxes.append((x0, y0, wdt, dep, hgt))

    n_ground = int(params.n_points * params.ground_fraction)
    parts = []

    gx = rng.uniform(0.0, ext, size=n_ground)
    gy = rng.uniform(0.0, ext, size=n_ground)
    gz = np.full(n_ground, 0.05)  # slightly above the gray-0 plane
    g_normals = np.tile([0.0, 0.0, 1.0], (n_ground, 1))
    g_colors = _GROUND_COLOR + rng.normal(0, 0.02, size=(n_ground, 3))
    parts.append((np.stack([gx, gy, gz], axis=1), g_normals, g_colors))

    # area-weighted allocation over building faces (roof + 4 walls)
    faces = []
    for b, (x0, y0, wdt, dep, hgt) in enumerate(boxes):
        color = _PALETTE[b % len(_PALETTE)]
        faces.append((b, "roof", wdt * dep, (x0, y0, wdt, dep, hgt), color))
        for side in ("x0", "x1"):
            faces.append((b, side, dep * hgt, (x0, y0, wdt, dep, hgt), color))
        for side in ("y0", "y1"):
            faces.append((b, side, wdt * hgt, (x0, y0, wdt, dep, hgt), color))
    total_area = sum(f[2] for f in faces)
    n_building = params.n_points - n_ground
    for b, kind, area, (x0, y0, wdt, dep, hgt), color in faces:
        n = max(int(round(n_building * area / total_area)), 1)
        u = rng.uniform(size=n)
        v = rng.uniform(size=n)
        if kind == "roof":
            pts = np.stack([x0 + u * wdt, y0 + v * dep, np.full(n, hgt)], axis=1)
            nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
            col = color * 1.08
        elif kind == "x0":
            pts = np.stack([np.full(n, x0), y0 + u * dep, v * hgt], axis=1)
            nrm = np.tile([-1.0, 0.0, 0.0], (n, 1))
            col = color * 0.9
        elif kind == "x1":
            pts = np.stack([np.full(n, x0 + wdt), y0 + u * dep, v * hgt], axis=1)
            nrm = np.tile([1.0, 0.0, 0.0], (n, 1))
            col = color * 0.9
        elif kind == "y0":
            pts = np.stack([x0 + u * wdt, np.full(n, y0), v * hgt], axis=1)
            nrm = np.tile([0.0, -1.0, 0.0], (n, 1))
            col = color
        else:
            pts = np.stack([x0 + u * wdt, np.full(n, y0 + dep), v * hgt], axis=1)
            nrm = np.tile([0.0, 1.0, 0.0], (n, 1))
            col = color
        colors = np.clip(col + rng.normal(0, 0.02, size=(n, 3)), 0, 1)
        parts.append((pts, nrm, colors))

    positions = np.concatenate([p[0] for p in parts])
    normals = np.concatenate([p[1] for p in parts])
    colors = np.clip(np.concatenate([p[2] for p in parts]), 0.0, 1.0)
    return PointCloud(positions, colors=colors, normals=normals)


def point_count_histogram(crops, bins=10):
    """Per-crop point counts, binned (the dataset statistics report)."""
    counts = np.array([len(c.points) for c in crops])
    hist, edges = np.histogram(counts, bins=bins)
    return {"counts": counts.tolist(), "bin_edges": edges.tolist(),
            "histogram": hist.tolist(),
            "min": int(counts.min()) if counts.size else 0,
            "max": int(counts.max()) if counts.size else 0}
