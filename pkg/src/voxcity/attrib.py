"""Trilinear splatting (points -> vertices) and sampling (vertices -> points).

Queries interpolate strictly within their enclosing voxel: the 8 corner
vertices of the half-open cell containing the query position. Weights are
the usual trilinear products and sum to 1. Out-of-occupancy queries follow a
caller-chosen policy (zero-fill, the training default, or raise).

Splatting writes the weight-normalized mean of point attributes onto the
corner vertices: the raw (unnormalized) accumulation is the exact transpose
of sampling, which is what the gradient path relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import ChannelMismatchError, OutOfOccupancyError
from .grid import ChannelLayout, GridSpec, SparseGrid
from . import kernels


@dataclass(frozen=True)
class TrilinearWeights:
    """The 8 (vertex coordinate, weight) pairs of one query point."""

    vertices: np.ndarray  # (8, 3) int
    weights: np.ndarray   # (8,) float64, >= 0, sums to 1


def weights_for_points(spec: GridSpec, positions):
    """Vectorized weights: (cells (Q,3), corner coords (Q,8,3), weights (Q,8))."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cells, frac = kernels.fractional_coords(positions, spec.origin_array,
                                            spec.voxel_size)
    weights = kernels.corner_weights(frac)
    corners = cells[:, None, :] + kernels.CORNER_OFFSETS[None, :, :]
    return cells, corners, weights


def weights_for_point(spec: GridSpec, position) -> TrilinearWeights:
    _, corners, weights = weights_for_points(spec, np.asarray(position)[None, :])
    return TrilinearWeights(corners[0], weights[0])


def _query_corner_rows(grid: SparseGrid, positions, on_missing: str):
    """Corner vertex rows per query; all -1 when the enclosing voxel is empty."""
    cells, corners, weights = weights_for_points(grid.spec, positions)
    vox_rows = grid.voxel_rows(cells)
    missing = vox_rows < 0
    if missing.any() and on_missing == "error":
        raise OutOfOccupancyError(int(np.argmax(missing)))
    rows = np.full((cells.shape[0], 8), -1, dtype=np.int64)
    ok = ~missing
    if ok.any():
        rows[ok] = grid.corner_rows()[vox_rows[ok]]
    return rows, weights, missing


def sample(grid: SparseGrid, queries, channel=None, on_missing: str = "zero"):
    """Trilinear interpolation of vertex attributes at query positions.

    queries: PointCloud or (Q, 3) positions. Returns (Q, C) float64.
    on_missing: "zero" fills out-of-occupancy queries with zeros, "error"
    raises OutOfOccupancyError carrying the first offending index.
    """
    positions = queries.positions if isinstance(queries, PointCloud) else queries
    attrs = grid.channel(channel) if channel else grid.vertex_attrs
    if attrs is None:
        raise ChannelMismatchError("grid carries no vertex attributes")
    rows, weights, _ = _query_corner_rows(grid, positions, on_missing)
    return kernels.sample_gather(rows, weights, np.ascontiguousarray(attrs))


def splat(points: PointCloud, grid: SparseGrid, values, *, normalize=True,
          on_missing: str = "error"):
    """Scatter point attributes onto the corner vertices of their voxels.

    Returns (vertex values (M, C), untouched (M,) bool). With normalize=True
    each vertex gets the weight-normalized mean; with False the raw weighted
    accumulation (the transpose of `sample`). Points outside the occupancy
    raise by default, carrying the first offending point index.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != len(points):
        raise ChannelMismatchError("one attribute row per point required")
    rows, weights, missing = _query_corner_rows(grid, points.positions, on_missing)
    accum, wsum = kernels.splat_scatter(rows, weights, values, grid.n_vertices)
    untouched = wsum == 0.0
    if normalize:
        out = np.zeros_like(accum)
        touched = ~untouched
        out[touched] = accum[touched] / wsum[touched, None]
        return out, untouched
    return accum, untouched


def splat_channel(points: PointCloud, grid: SparseGrid, values, name,
                  *, normalize=True) -> SparseGrid:
    """`splat` plus writing the result as a named vertex channel on the grid."""
    vals, untouched = splat(points, grid, values, normalize=normalize)
    layout = ChannelLayout.of((name, vals.shape[1]))
    if grid.vertex_attrs is not None:
        merged = ChannelLayout(grid.layout.names + layout.names,
                               grid.layout.widths + layout.widths)
        attrs = np.hstack([grid.vertex_attrs, vals])
        prev_untouched = (grid.vertex_untouched if grid.vertex_untouched is not None
                          else np.zeros(grid.n_vertices, dtype=bool))
        return grid.with_vertex_attrs(attrs, merged,
                                      untouched=prev_untouched | untouched)
    return grid.with_vertex_attrs(vals, layout, untouched=untouched)


def inverse_sample_color(levels, targets, head=None):
    """Colors from a stack of decoded per-vertex feature grids.

    For each target position the per-level features are trilinearly sampled
    (zero-filled outside each level's occupancy), concatenated in level order
    0..n, passed through the MLP head and squashed to RGB in [0, 1]. A head
    of None means the concatenated features are used directly (width 3
    required).
    """
    positions = targets.positions if isinstance(targets, PointCloud) else \
        (targets.vertex_positions() if isinstance(targets, SparseGrid)
         else np.asarray(targets, dtype=np.float64))
    feats = [sample(lvl, positions, on_missing="zero") for lvl in levels]
    stacked = np.concatenate(feats, axis=1)
    width = stacked.shape[1]
    if head is None:
        if width != 3:
            raise ChannelMismatchError(
                f"identity head needs 3 input channels, got {width}")
        logits = stacked
    else:
        expected = getattr(head, "input_width", None)
        if expected is not None and expected != width:
            raise ChannelMismatchError(
                f"head expects {expected} channels, levels provide {width}")
        logits = head(stacked)
    return 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
