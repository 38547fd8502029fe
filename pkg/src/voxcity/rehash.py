"""Multi-level coarsening of sparse feature grids.

Each level doubles the voxel size and shifts the origin by half the new
voxel relative to the base lattice; occupancy is the geometric cover of the
previous level and vertex features transfer by trilinear interpolation.

The half-voxel shift means fine cells never straddle coarse cell boundaries,
so the 2x cover maps each fine voxel into exactly one coarse voxel and voxel
counts are non-increasing with level.

Feature transfer interpolates over the fine vertex lattice and normalizes by
the weight mass of the vertices actually present, so a constant field stays
exactly constant on every supported coarse vertex; coarse vertices whose
stencil contains no fine vertex are zero-filled and flagged untouched.
"""

from __future__ import annotations

import numpy as np

from .grid import GridSpec, SparseGrid, _sort_unique_coords
from . import kernels

_SUPPORT_EPS = 1e-12


def coarsen_spec(base: GridSpec, n: int) -> GridSpec:
    """Level-n lattice: voxel_size 2**n times the base, origin shifted by half."""
    if n < 0:
        raise ValueError("level must be >= 0")
    v_n = base.voxel_size * (2 ** n)
    origin = tuple(o + v_n / 2.0 for o in base.origin)
    return GridSpec(v_n, origin, depth=n)


def _exact_int(x, what):
    r = np.rint(x)
    if np.any(np.abs(x - r) > 1e-9):
        raise ValueError(f"{what} is not lattice-compatible: {x}")
    return r.astype(np.int64)


def cover_voxels(fine_voxels, fine_spec: GridSpec, coarse_spec: GridSpec):
    """Coarse voxels overlapping any fine voxel (exact integer arithmetic).

    Requires the coarse lattice to be compatible with half-steps of the fine
    one (origin offset a multiple of half a fine voxel, sizes in integer
    ratio), which holds for every lattice pair used in the hierarchy.
    """
    fine_voxels = np.asarray(fine_voxels, dtype=np.int64).reshape(-1, 3)
    if fine_voxels.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int32)
    # work in half-units of the fine voxel: fine cell i spans [2i, 2i+2)
    s2 = _exact_int(2.0 * (coarse_spec.origin_array - fine_spec.origin_array)
                    / fine_spec.voxel_size, "origin offset")
    sc2 = int(_exact_int(2.0 * coarse_spec.voxel_size / fine_spec.voxel_size,
                         "voxel size ratio"))
    lo = np.floor_divide(2 * fine_voxels - s2, sc2)
    hi = np.floor_divide(2 * fine_voxels + 1 - s2, sc2)  # inclusive
    span = hi - lo
    if span.max() > 1:
        raise ValueError("cover spans more than 2 coarse cells per axis")
    cand = lo[:, None, :] + kernels.CORNER_OFFSETS[None, :, :]
    valid = np.all(kernels.CORNER_OFFSETS[None, :, :] <= span[:, None, :], axis=2)
    return _sort_unique_coords(cand[valid])


def transfer_features(prev: SparseGrid, positions):
    """Support-normalized trilinear interpolation of prev's vertex features.

    Returns (values, supported) where supported marks positions whose
    stencil hit at least one fine vertex.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cells, frac = kernels.fractional_coords(positions, prev.spec.origin_array,
                                            prev.spec.voxel_size)
    weights = kernels.corner_weights(frac)
    corners = (cells[:, None, :] + kernels.CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
    rows = prev.vertex_rows(corners).reshape(-1, 8)
    if prev.vertex_untouched is not None:
        # vertices without data are absent from the stencil
        hit = rows >= 0
        dataless = np.zeros_like(hit)
        dataless[hit] = prev.vertex_untouched[rows[hit]]
        rows = np.where(dataless, -1, rows)
    mass = np.where(rows >= 0, weights, 0.0).sum(axis=1)
    numer = kernels.sample_gather(rows, weights, prev.vertex_attrs)
    supported = mass > _SUPPORT_EPS
    out = np.zeros_like(numer)
    out[supported] = numer[supported] / mass[supported, None]
    return out, supported


def rehash_level(prev: SparseGrid, spec_n: GridSpec) -> SparseGrid:
    """One coarsening step: cover occupancy, then transfer vertex features."""
    if prev.is_empty:
        return SparseGrid(spec_n, np.zeros((0, 3)), degenerate=True)
    coarse = SparseGrid(spec_n, cover_voxels(prev.voxels, prev.spec, spec_n))
    if prev.vertex_attrs is None:
        return coarse
    values, supported = transfer_features(prev, coarse.vertex_positions())
    return coarse.with_vertex_attrs(values, prev.layout, untouched=~supported)


def build_hierarchy(x_c0: SparseGrid, n: int):
    """Levels 0..n, level 0 being the input grid itself."""
    if n < 1:
        raise ValueError("hierarchy needs at least one coarsening level")
    base = x_c0.spec.as_base()
    levels = [x_c0]
    for k in range(1, n + 1):
        levels.append(rehash_level(levels[-1], coarsen_spec(base, k)))
    return levels
