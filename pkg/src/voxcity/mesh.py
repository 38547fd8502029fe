"""Voxel-boundary surface extraction.

Emits one quad (two triangles) for every face between an occupied and an
unoccupied voxel, with outward-facing winding. Shared faces of adjacent
occupied voxels cancel, so the triangle mesh is watertight on the voxel
boundary: every edge is shared by exactly two faces.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError
from .fileio import _atomic_write
from .grid import SparseGrid

# outward-CCW corner offsets per face direction
_FACE_TABLE = [
    ((+1, 0, 0), [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)]),
    ((-1, 0, 0), [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)]),
    ((0, +1, 0), [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)]),
    ((0, -1, 0), [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)]),
    ((0, 0, +1), [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]),
    ((0, 0, -1), [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)]),
]


@dataclass
class Mesh:
    vertices: np.ndarray             # (V, 3) float64 world positions
    faces: np.ndarray                # (F, 3) int vertex indices, CCW outward
    vertex_colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]


def boundary_quads(grid: SparseGrid):
    """(Q, 4) vertex-row quads between occupied and unoccupied voxels."""
    if grid.is_empty:
        raise EmptyInputError("cannot mesh an empty grid")
    quads = []
    vox = grid.voxels.astype(np.int64)
    for direction, corners in _FACE_TABLE:
        neighbor = vox + np.asarray(direction)
        open_face = ~grid.contains_voxels(neighbor)
        if not open_face.any():
            continue
        face_vox = vox[open_face]
        corner_coords = face_vox[:, None, :] + np.asarray(corners)[None, :, :]
        rows = grid.vertex_rows(corner_coords.reshape(-1, 3)).reshape(-1, 4)
        quads.append(rows)
    return np.concatenate(quads, axis=0) if quads else np.zeros((0, 4), int)


def extract_mesh(grid: SparseGrid) -> Mesh:
    """Boundary quads split into triangles; vertex colors from the grid's
    color channel when present."""
    quads = boundary_quads(grid)
    used = np.unique(quads.reshape(-1))
    remap = np.full(grid.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    q = remap[quads]
    tris = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]], axis=0)
    vertices = grid.vertex_positions()[used]
    colors = None
    if grid.layout is not None and "color" in grid.layout:
        colors = np.clip(grid.channel("color")[used], 0.0, 1.0)
    return Mesh(vertices, tris, colors)


def edge_face_counts(mesh: Mesh):
    """Undirected edge -> number of incident faces (watertight check)."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                        mesh.faces[:, [2, 0]]], axis=0)
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def save_mesh_ply(path, mesh: Mesh):
    n, f = mesh.n_vertices, mesh.n_faces
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if mesh.vertex_colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header += [f"element face {f}", "property list uchar int vertex_indices",
               "end_header"]
    rec = np.empty(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = mesh.vertices.T
    if mesh.vertex_colors is not None:
        rgb = np.clip(np.rint(mesh.vertex_colors * 255), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    face_rec = np.empty(f, dtype=face_dtype)
    face_rec["n"] = 3
    face_rec["idx"] = mesh.faces.astype("<i4")
    _atomic_write(path, "\n".join(header).encode() + b"\n"
                  + rec.tobytes() + face_rec.tobytes())


def save_mesh_obj(path, mesh: Mesh):
    """OBJ with the common per-vertex `v x y z r g b` color extension."""
    lines = []
    if mesh.vertex_colors is not None:
        for p, c in zip(mesh.vertices, mesh.vertex_colors):
            lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                         f"{c[0]:.6g} {c[1]:.6g} {c[2]:.6g}")
    else:
        for p in mesh.vertices:
            lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    for tri in mesh.faces:
        lines.append(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}")
    _atomic_write(os.fspath(path), ("\n".join(lines) + "\n").encode())
