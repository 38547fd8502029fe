"""Pure-numpy reference implementations of the hot kernels.

Semantics are the contract; the compiled backend in ``_fast`` must match
these bit-for-bit on float64 inputs (same operation order per output cell).
Corner ordering: corner ``c`` of a voxel has offsets
``((c >> 2) & 1, (c >> 1) & 1, c & 1)`` along (i, j, k).
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "ref"

# (8, 3) corner offset table, row c = ((c>>2)&1, (c>>1)&1, c&1)
CORNER_OFFSETS = np.array(
    [[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64
)


def bin_points(positions, origin, voxel_size):
    """Half-open binning: point p lands in cell floor((p - origin) / voxel_size)."""
    rel = (np.asarray(positions, dtype=np.float64) - origin) / voxel_size
    return np.floor(rel).astype(np.int64)


def fractional_coords(positions, origin, voxel_size):
    """Cell indices plus in-cell fractional coordinates in [0, 1)."""
    rel = (np.asarray(positions, dtype=np.float64) - origin) / voxel_size
    cells = np.floor(rel).astype(np.int64)
    frac = rel - cells
    return cells, np.clip(frac, 0.0, 1.0)


def corner_weights(frac):
    """(Q, 8) trilinear weights from (Q, 3) fractional coordinates.

    Weight of corner c is prod over axes of (t if corner bit set else 1 - t);
    rows sum to 1 exactly up to float rounding.
    """
    frac = np.asarray(frac, dtype=np.float64)
    q = frac.shape[0]
    w = np.ones((q, 8), dtype=np.float64)
    for c in range(8):
        for ax in range(3):
            t = frac[:, ax]
            w[:, c] = w[:, c] * (t if CORNER_OFFSETS[c, ax] else 1.0 - t)
    return w


def sample_gather(corner_rows, weights, attrs):
    """Weighted gather: out[q] = sum_c weights[q, c] * attrs[corner_rows[q, c]].

    Works for any stencil width (8 for trilinear corners, <= 8 for incidence
    stencils). Rows < 0 contribute zero (zero-fill policy).
    """
    corner_rows = np.asarray(corner_rows, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    q = corner_rows.shape[0]
    c_dim = attrs.shape[1]
    out = np.zeros((q, c_dim), dtype=np.float64)
    for c in range(corner_rows.shape[1]):
        rows = corner_rows[:, c]
        valid = rows >= 0
        if not np.any(valid):
            continue
        out[valid] += weights[valid, c, None] * attrs[rows[valid]]
    return out


def splat_scatter(corner_rows, weights, values, n_vertices):
    """Transpose of sample_gather: scatter-add weighted values onto vertices.

    Returns (accum (M, C), weight_sum (M,)). Rows < 0 are dropped.
    """
    corner_rows = np.asarray(corner_rows, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    c_dim = values.shape[1]
    accum = np.zeros((n_vertices, c_dim), dtype=np.float64)
    wsum = np.zeros(n_vertices, dtype=np.float64)
    for c in range(corner_rows.shape[1]):
        rows = corner_rows[:, c]
        valid = rows >= 0
        if not np.any(valid):
            continue
        np.add.at(accum, rows[valid], weights[valid, c, None] * values[valid])
        np.add.at(wsum, rows[valid], weights[valid, c])
    return accum, wsum
