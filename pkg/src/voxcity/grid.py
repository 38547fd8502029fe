"""Hashed sparse voxel grid core.

A grid is a set of occupied cubic cells on an integer lattice, defined by a
``GridSpec`` (voxel edge length, world origin, hierarchy depth). Cells are
half-open boxes ``[origin + i*v, origin + (i+1)*v)``. Attributes live on cell
corners (vertices), shared between adjacent cells; per-voxel feature vectors
are supported as well for bottleneck plumbing.

Grids are immutable after construction and iterate voxels in sorted (i, j, k)
order, so identical inputs produce bit-identical grids. Voxel and vertex
lookups go through a flat hash: coordinates are packed into integer keys and
resolved by binary search over the sorted key table. Storage is O(#occupied).

Binary file format ``VXC1`` (little-endian) is documented in
``docs/grid_format.md``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import BoundingBoxError, ChannelMismatchError, EmptyInputError, VoxCityError
from . import kernels

# Per-axis voxel span limit for the vectorized key packing (3 x 21 bits in a
# 64-bit key, relative to the grid's own minimum corner).
MAX_EXTENT = 1 << 21

_MIX_MASK = (1 << 96) - 1
_MIX_MUL1 = 0xFF51AFD7ED558CCD9E3779B97F4A7C15
_MIX_MUL2 = 0xC4CEB9FE1A85EC53642E7A2B38F0D9A7


def pack_coords(i: int, j: int, k: int) -> int:
    """Pack signed 32-bit lattice indices into a single 96-bit integer."""
    return (((int(i) + 0x80000000) << 64)
            | ((int(j) + 0x80000000) << 32)
            | (int(k) + 0x80000000))


def coord_key(i: int, j: int, k: int) -> int:
    """Deterministic mixed hash of a lattice coordinate.

    Bijective over the packed 96-bit space (odd multiplications and
    xor-shifts are invertible mod 2**96), hence injective over the full
    signed 32-bit index range per axis.
    """
    x = pack_coords(i, j, k)
    x = (x * (_MIX_MUL1 | 1)) & _MIX_MASK
    x ^= x >> 48
    x = (x * (_MIX_MUL2 | 1)) & _MIX_MASK
    x ^= x >> 48
    return x


def _sort_unique_coords(coords):
    """Sort (N, 3) integer coords lexicographically by (i, j, k), dropping dups."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int32)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order]
    keep = np.ones(coords.shape[0], dtype=bool)
    keep[1:] = np.any(coords[1:] != coords[:-1], axis=1)
    return coords[keep].astype(np.int32)


def _pack_relative(coords, base):
    """Pack coords relative to ``base`` into sortable uint64 keys."""
    rel = np.asarray(coords, dtype=np.int64) - base
    if rel.size and (rel.min() < 0 or rel.max() >= MAX_EXTENT):
        raise VoxCityError(
            f"coordinate span exceeds {MAX_EXTENT} cells per axis; "
            "flat-hash packing does not cover this grid")
    return ((rel[:, 0] << 42) | (rel[:, 1] << 21) | rel[:, 2]).astype(np.uint64)


@dataclass(frozen=True)
class ChannelLayout:
    """Named attribute channels with fixed widths, concatenated in order."""

    names: tuple
    widths: tuple

    def __post_init__(self):
        if len(self.names) != len(self.widths):
            raise ChannelMismatchError("names/widths length mismatch")
        if any(w <= 0 for w in self.widths):
            raise ChannelMismatchError("channel widths must be positive")

    @staticmethod
    def of(*pairs) -> "ChannelLayout":
        names, widths = zip(*pairs) if pairs else ((), ())
        return ChannelLayout(tuple(names), tuple(int(w) for w in widths))

    @property
    def total(self) -> int:
        return int(sum(self.widths))

    def slice_of(self, name) -> slice:
        off = 0
        for n, w in zip(self.names, self.widths):
            if n == name:
                return slice(off, off + w)
            off += w
        raise ChannelMismatchError(f"no channel named {name!r}")

    def __contains__(self, name):
        return name in self.names


@dataclass(frozen=True)
class GridSpec:
    """Lattice parameters: voxel edge length (m), world origin (m), level.

    ``depth`` marks coarsening-hierarchy levels; depth-n specs have
    voxel_size = 2**n * base size and origin shifted by voxel_size / 2
    relative to the base lattice (see the rehash module).
    """

    voxel_size: float
    origin: tuple = (0.0, 0.0, 0.0)
    depth: int = 0

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise VoxCityError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.depth < 0:
            raise VoxCityError("depth must be >= 0")
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))

    @property
    def origin_array(self):
        return np.asarray(self.origin, dtype=np.float64)

    def as_base(self) -> "GridSpec":
        """Reinterpret this lattice as a depth-0 base."""
        return GridSpec(self.voxel_size, self.origin, 0)

    def halved(self) -> "GridSpec":
        """Same origin, half the voxel size (used by subdivision)."""
        return GridSpec(self.voxel_size * 0.5, self.origin, self.depth)

    def lattice_to_world(self, coords):
        """Positions of lattice points (voxel lower corners == vertices)."""
        return self.origin_array + np.asarray(coords, dtype=np.float64) * self.voxel_size

    def voxel_centers(self, coords):
        return self.origin_array + (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size


class SparseGrid:
    """Occupied voxel set plus optional per-vertex / per-voxel attributes.

    ``vertex_attrs`` is an (M, C) float64 matrix aligned with
    ``vertex_coords`` (the sorted corners of all occupied voxels); ``layout``
    names its channels. ``voxel_attrs`` is an (N, Cv) matrix aligned with
    ``voxels``. Either may be None.
    """

    def __init__(self, spec: GridSpec, voxels, *, voxel_attrs=None,
                 voxel_layout: ChannelLayout | None = None, degenerate=False):
        self.spec = spec
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        order = None
        if voxels.shape[0]:
            order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
            sorted_vox = voxels[order]
            keep = np.ones(sorted_vox.shape[0], dtype=bool)
            keep[1:] = np.any(sorted_vox[1:] != sorted_vox[:-1], axis=1)
            if not keep.all():
                raise VoxCityError("duplicate voxel coordinates")
            self.voxels = sorted_vox.astype(np.int32)
        else:
            self.voxels = np.zeros((0, 3), dtype=np.int32)

        if voxel_attrs is not None:
            voxel_attrs = np.asarray(voxel_attrs, dtype=np.float64)
            if voxel_attrs.shape[0] != voxels.shape[0]:
                raise ChannelMismatchError("voxel_attrs row count != voxel count")
            self.voxel_attrs = voxel_attrs[order] if order is not None else voxel_attrs
        else:
            self.voxel_attrs = None
        self.voxel_layout = voxel_layout

        # vertex set: unique corners of occupied voxels
        if self.voxels.shape[0]:
            corners = (self.voxels[:, None, :].astype(np.int64)
                       + kernels.CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
            self.vertex_coords = _sort_unique_coords(corners)
        else:
            self.vertex_coords = np.zeros((0, 3), dtype=np.int32)

        self.vertex_attrs = None
        self.layout: ChannelLayout | None = None
        self.vertex_untouched = None
        self.degenerate = bool(degenerate)

        base = (self.voxels.min(axis=0).astype(np.int64)
                if self.voxels.shape[0] else np.zeros(3, dtype=np.int64))
        self._key_base = base
        self._voxel_keys = _pack_relative(self.voxels, base)
        self._vertex_keys = _pack_relative(self.vertex_coords, base)
        self._corner_rows = None

    # -- layout / attrs ------------------------------------------------

    def with_vertex_attrs(self, attrs, layout: ChannelLayout,
                          untouched=None) -> "SparseGrid":
        """Return a copy carrying per-vertex attributes (aligned with
        ``vertex_coords`` order)."""
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.shape != (self.n_vertices, layout.total):
            raise ChannelMismatchError(
                f"vertex attrs shape {attrs.shape} != ({self.n_vertices}, {layout.total})")
        g = self._shallow_copy()
        g.vertex_attrs = attrs
        g.layout = layout
        g.vertex_untouched = (None if untouched is None
                              else np.asarray(untouched, dtype=bool))
        return g

    def channel(self, name) -> np.ndarray:
        if self.vertex_attrs is None or self.layout is None:
            raise ChannelMismatchError("grid carries no vertex attributes")
        return self.vertex_attrs[:, self.layout.slice_of(name)]

    def _shallow_copy(self) -> "SparseGrid":
        g = object.__new__(SparseGrid)
        g.__dict__.update(self.__dict__)
        return g

    # -- basic properties ----------------------------------------------

    @property
    def n_voxels(self) -> int:
        return self.voxels.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertex_coords.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.n_voxels == 0

    def bbox(self):
        """Half-open voxel index box (lo, hi) covering the occupancy."""
        if self.is_empty:
            raise EmptyInputError("empty grid has no bbox")
        lo = self.voxels.min(axis=0).astype(np.int64)
        hi = self.voxels.max(axis=0).astype(np.int64) + 1
        return lo, hi

    def vertex_positions(self):
        return self.spec.lattice_to_world(self.vertex_coords)

    def storage_nbytes(self) -> int:
        total = self.voxels.nbytes + self.vertex_coords.nbytes
        total += self._voxel_keys.nbytes + self._vertex_keys.nbytes
        for arr in (self.vertex_attrs, self.voxel_attrs, self.vertex_untouched):
            if arr is not None:
                total += arr.nbytes
        return total

    # -- lookup ----------------------------------------------------------

    def _rows_in(self, keys_table, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if keys_table.size == 0 or coords.shape[0] == 0:
            return out
        rel = coords - self._key_base
        inside = np.all((rel >= 0) & (rel < MAX_EXTENT), axis=1)
        if not inside.any():
            return out
        keys = ((rel[inside, 0] << 42) | (rel[inside, 1] << 21)
                | rel[inside, 2]).astype(np.uint64)
        pos = np.searchsorted(keys_table, keys)
        pos = np.minimum(pos, keys_table.size - 1)
        hit = keys_table[pos] == keys
        rows = np.where(hit, pos, -1)
        out[inside] = rows
        return out

    def voxel_rows(self, coords):
        """Row indices into ``voxels`` (-1 where unoccupied)."""
        return self._rows_in(self._voxel_keys, coords)

    def vertex_rows(self, coords):
        """Row indices into ``vertex_coords`` (-1 where absent)."""
        return self._rows_in(self._vertex_keys, coords)

    def contains_voxels(self, coords):
        return self.voxel_rows(coords) >= 0

    def corner_rows(self):
        """(N, 8) vertex rows of each voxel's corners (all present)."""
        if self._corner_rows is None:
            if self.is_empty:
                self._corner_rows = np.zeros((0, 8), dtype=np.int64)
            else:
                corners = (self.voxels[:, None, :].astype(np.int64)
                           + kernels.CORNER_OFFSETS[None, :, :])
                self._corner_rows = self.vertex_rows(
                    corners.reshape(-1, 3)).reshape(-1, 8)
        return self._corner_rows

    def __eq__(self, other):
        if not isinstance(other, SparseGrid):
            return NotImplemented
        if self.spec != other.spec or not np.array_equal(self.voxels, other.voxels):
            return False
        for a, b in ((self.vertex_attrs, other.vertex_attrs),
                     (self.voxel_attrs, other.voxel_attrs)):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    def __repr__(self):
        return (f"SparseGrid(v={self.spec.voxel_size}, depth={self.spec.depth}, "
                f"voxels={self.n_voxels}, vertices={self.n_vertices})")


@dataclass
class DenseVolume:
    """Dense feature block over a voxel-index box of a lattice.

    ``data`` has shape (D, H, W, 1 + C): channel 0 is occupancy, the rest are
    per-cell features described by ``layout``. ``lo`` is the lattice index of
    ``data[0, 0, 0]``.
    """

    spec: GridSpec
    lo: np.ndarray
    data: np.ndarray
    layout: ChannelLayout | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.int64)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise VoxCityError("DenseVolume data must be 4-D (D, H, W, C)")
        expected = 1 + (self.layout.total if self.layout else 0)
        if self.data.shape[3] != expected:
            raise ChannelMismatchError(
                f"data has {self.data.shape[3]} channels, layout implies {expected}")

    @property
    def occupancy(self):
        return self.data[..., 0]

    @property
    def features(self):
        return self.data[..., 1:]

    @property
    def shape3(self):
        return self.data.shape[:3]


class PruneTrace:
    """Keep/drop decisions recorded per upsampling step of a sparse decoder.

    ``base`` is the coarsest occupancy; ``steps[s]`` holds the voxels kept
    after the s-th 2x subdivision. Step s+1 voxels must be children of step-s
    kept voxels.
    """

    def __init__(self, base_spec: GridSpec, base_voxels, steps=()):
        self.base_spec = base_spec
        self.base_voxels = _sort_unique_coords(base_voxels)
        self.steps = [_sort_unique_coords(s) for s in steps]

    def push(self, kept_voxels):
        self.steps.append(_sort_unique_coords(kept_voxels))

    def spec_at(self, step: int) -> GridSpec:
        """Lattice spec after ``step`` subdivisions of the base (step 0 = base)."""
        return GridSpec(self.base_spec.voxel_size / (2 ** step),
                        self.base_spec.origin, self.base_spec.depth)

    def level_voxels(self, step: int):
        return self.base_voxels if step == 0 else self.steps[step - 1]

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def final_spec(self) -> GridSpec:
        return self.spec_at(self.n_steps)

    def final_voxels(self):
        return self.level_voxels(self.n_steps)

    def validate(self):
        prev = self.base_voxels
        for s, kept in enumerate(self.steps):
            parents = _sort_unique_coords(np.floor_divide(kept.astype(np.int64), 2))
            rows = SparseGrid(self.spec_at(s), prev).voxel_rows(parents) if prev.size \
                else np.full(parents.shape[0], -1)
            if parents.size and not np.all(rows >= 0):
                raise VoxCityError(f"trace step {s + 1} contains orphans")
            prev = kept
        return self


# -- operations ----------------------------------------------------------


def voxelize(points: PointCloud, spec: GridSpec) -> SparseGrid:
    """Occupy every voxel whose half-open cube contains at least one point."""
    if len(points) == 0:
        raise EmptyInputError("empty input")
    cells = kernels.bin_points(points.positions, spec.origin_array, spec.voxel_size)
    return SparseGrid(spec, _sort_unique_coords(cells))


def subdivide(grid: SparseGrid) -> SparseGrid:
    """Replace each voxel by its 8 children at half voxel size.

    Attributes are not carried; decoders recompute them per level.
    """
    if grid.is_empty:
        raise EmptyInputError("cannot subdivide an empty grid")
    children = (grid.voxels[:, None, :].astype(np.int64) * 2
                + kernels.CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
    return SparseGrid(grid.spec.halved(), children)


def parent_coords(coords):
    """Parent voxel of each child under 2x subdivision (floor division)."""
    return np.floor_divide(np.asarray(coords, dtype=np.int64), 2)


def coarsen_occupancy(grid: SparseGrid) -> SparseGrid:
    """Occupancy of the parent lattice (doubled voxel size, same origin)."""
    if grid.is_empty:
        return SparseGrid(GridSpec(grid.spec.voxel_size * 2, grid.spec.origin,
                                   grid.spec.depth), np.zeros((0, 3)))
    parents = _sort_unique_coords(parent_coords(grid.voxels))
    return SparseGrid(GridSpec(grid.spec.voxel_size * 2, grid.spec.origin,
                               grid.spec.depth), parents)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def prune(grid: SparseGrid, keep_logits, threshold: float = 0.5):
    """Keep voxels whose sigmoid(logit) clears the threshold.

    ``keep_logits`` is either an (N,) array aligned with ``grid.voxels`` or a
    mapping from (i, j, k) tuples to logits. Returns (pruned grid, kept
    coordinate array); an all-pruned result is legal and flagged degenerate.
    """
    if isinstance(keep_logits, dict):
        logits = np.empty(grid.n_voxels, dtype=np.float64)
        for row, ijk in enumerate(grid.voxels):
            key = tuple(int(x) for x in ijk)
            if key not in keep_logits:
                raise VoxCityError(f"missing keep logit for voxel {key}")
            logits[row] = keep_logits[key]
    else:
        logits = np.asarray(keep_logits, dtype=np.float64).reshape(-1)
        if logits.shape[0] != grid.n_voxels:
            raise VoxCityError(
                f"got {logits.shape[0]} logits for {grid.n_voxels} voxels")
    keep = _sigmoid(logits) >= threshold
    kept = grid.voxels[keep]
    out = SparseGrid(grid.spec, kept, degenerate=(kept.shape[0] == 0))
    return out, kept.copy()


def densify(grid: SparseGrid, bbox) -> DenseVolume:
    """Expand a sparse grid into a dense block over ``bbox`` = (lo, hi).

    Unoccupied cells carry occupancy 0 and zero features; occupied cells get
    occupancy 1 and the grid's per-voxel attributes (if any). Raises listing
    out-of-box voxels when the bbox does not cover the occupancy.
    """
    lo = np.asarray(bbox[0], dtype=np.int64)
    hi = np.asarray(bbox[1], dtype=np.int64)
    if np.any(hi <= lo):
        raise BoundingBoxError(f"empty bbox {lo} .. {hi}")
    if not grid.is_empty:
        rel = grid.voxels.astype(np.int64) - lo
        bad = np.any((rel < 0) | (rel >= (hi - lo)), axis=1)
        if bad.any():
            outside = grid.voxels[bad][:8].tolist()
            raise BoundingBoxError(
                f"bbox {lo.tolist()}..{hi.tolist()} misses voxels {outside}"
                + (" ..." if bad.sum() > 8 else ""))
    shape = tuple((hi - lo).tolist())
    width = grid.voxel_attrs.shape[1] if grid.voxel_attrs is not None else 0
    data = np.zeros(shape + (1 + width,), dtype=np.float64)
    if not grid.is_empty:
        rel = grid.voxels.astype(np.int64) - lo
        data[rel[:, 0], rel[:, 1], rel[:, 2], 0] = 1.0
        if width:
            data[rel[:, 0], rel[:, 1], rel[:, 2], 1:] = grid.voxel_attrs
    layout = grid.voxel_layout
    if layout is None and width:
        layout = ChannelLayout.of(("feat", width))
    return DenseVolume(grid.spec, lo, data, layout)


def sparsify(vol: DenseVolume, occ_threshold: float = 0.5) -> SparseGrid:
    """Inverse of densify: cells at or above the occupancy threshold become voxels."""
    mask = vol.occupancy >= occ_threshold
    idx = np.argwhere(mask).astype(np.int64) + vol.lo
    attrs = None
    if vol.data.shape[3] > 1:
        attrs = vol.data[mask][:, 1:]
    # argwhere is already lexicographic, matching SparseGrid order
    return SparseGrid(vol.spec, idx, voxel_attrs=attrs, voxel_layout=vol.layout,
                      degenerate=(idx.shape[0] == 0))


# -- binary grid file (magic "VXC1") ---------------------------------------

_MAGIC = b"VXC1"


def save_grid(path, grid: SparseGrid):
    """Write the documented little-endian binary grid file."""
    layout = grid.layout or ChannelLayout((), ())
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<d", grid.spec.voxel_size))
        f.write(struct.pack("<3d", *grid.spec.origin))
        f.write(struct.pack("<I", grid.spec.depth))
        f.write(struct.pack("<I", len(layout.names)))
        for name, width in zip(layout.names, layout.widths):
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", width))
        f.write(struct.pack("<Q", grid.n_voxels))
        f.write(np.ascontiguousarray(grid.voxels, dtype="<i4").tobytes())
        f.write(struct.pack("<Q", grid.n_vertices))
        f.write(np.ascontiguousarray(grid.vertex_coords, dtype="<i4").tobytes())
        if grid.vertex_attrs is not None:
            f.write(np.ascontiguousarray(grid.vertex_attrs, dtype="<f8").tobytes())
            flags = (grid.vertex_untouched if grid.vertex_untouched is not None
                     else np.zeros(grid.n_vertices, dtype=bool))
            f.write(np.ascontiguousarray(flags, dtype="u1").tobytes())


def load_grid(path) -> SparseGrid:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise VoxCityError(f"{path}: not a VXC1 grid file")
        voxel_size, = struct.unpack("<d", f.read(8))
        origin = struct.unpack("<3d", f.read(24))
        depth, = struct.unpack("<I", f.read(4))
        n_chan, = struct.unpack("<I", f.read(4))
        names, widths = [], []
        for _ in range(n_chan):
            ln, = struct.unpack("<H", f.read(2))
            names.append(f.read(ln).decode("utf-8"))
            widths.append(struct.unpack("<I", f.read(4))[0])
        n_vox, = struct.unpack("<Q", f.read(8))
        voxels = np.frombuffer(f.read(12 * n_vox), dtype="<i4").reshape(n_vox, 3)
        n_vert, = struct.unpack("<Q", f.read(8))
        verts = np.frombuffer(f.read(12 * n_vert), dtype="<i4").reshape(n_vert, 3)
        grid = SparseGrid(GridSpec(voxel_size, origin, depth), voxels)
        if not np.array_equal(grid.vertex_coords, verts):
            raise VoxCityError(f"{path}: vertex table inconsistent with occupancy")
        if n_chan:
            layout = ChannelLayout(tuple(names), tuple(widths))
            attrs = np.frombuffer(f.read(8 * n_vert * layout.total),
                                  dtype="<f8").reshape(n_vert, layout.total)
            flags = np.frombuffer(f.read(n_vert), dtype="u1").astype(bool)
            grid = grid.with_vertex_attrs(attrs.copy(), layout, untouched=flags)
        return grid
