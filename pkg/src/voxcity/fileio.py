"""Point cloud (PLY), height map (16-bit PNG/PGM) and manifest file I/O.

All writes are atomic (temp file + rename). PLY files are binary
little-endian with double-precision positions, uchar RGB, and optional
double normals; height maps store the [0, 255] gray range in 16 bits
(value * 256) with a JSON sidecar carrying gsd, origin and the z mapping.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .cloud import PointCloud
from .errors import VoxCityError


def _atomic_write(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_ply(path, pc: PointCloud):
    n = len(pc)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    if pc.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    if pc.normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        header += ["property double nx", "property double ny",
                   "property double nz"]
    header.append("end_header")
    rec = np.empty(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = pc.positions.T
    if pc.colors is not None:
        rgb = np.clip(np.rint(pc.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    if pc.normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = pc.normals.T
    _atomic_write(path, "\n".join(header).encode() + b"\n" + rec.tobytes())


_PLY_TYPES = {"double": "<f8", "float": "<f4", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "float32": "<f4", "float64": "<f8"}


def load_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise VoxCityError(f"{path}: not a PLY file")
        fmt = f.readline().strip()
        if b"binary_little_endian" not in fmt:
            raise VoxCityError(f"{path}: only binary little-endian PLY supported")
        n = None
        fields = []
        while True:
            line = f.readline()
            if not line:
                raise VoxCityError(f"{path}: truncated header")
            parts = line.decode().strip().split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "element":
                if parts[1] == "vertex":
                    n = int(parts[2])
                elif n is not None and fields:
                    raise VoxCityError(f"{path}: non-vertex elements unsupported")
            elif parts[0] == "property":
                if parts[1] == "list":
                    raise VoxCityError(f"{path}: list properties unsupported")
                if parts[1] not in _PLY_TYPES:
                    raise VoxCityError(f"{path}: unsupported type {parts[1]}")
                fields.append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        if n is None:
            raise VoxCityError(f"{path}: no vertex element")
        rec = np.frombuffer(f.read(), dtype=np.dtype(fields), count=n)
    names = {name for name, _ in fields}
    if not {"x", "y", "z"} <= names:
        raise VoxCityError(f"{path}: missing xyz properties")
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]],
                          axis=1).astype(np.float64) / 255.0
    normals = None
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]],
                           axis=1).astype(np.float64)
    return PointCloud(positions, colors=colors, normals=normals)


def _sidecar_path(path):
    return os.fspath(path) + ".json"


def save_heightmap(path, hm):
    """16-bit PNG or PGM by extension, plus the JSON metadata sidecar."""
    path = os.fspath(path)
    raw = np.clip(np.rint(hm.values * 256.0), 0, 65535).astype(np.uint16)
    if path.endswith(".png"):
        from PIL import Image
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png")
        os.close(fd)
        Image.fromarray(raw, mode="I;16").save(tmp, format="PNG")
        os.replace(tmp, path)
    elif path.endswith(".pgm"):
        header = f"P5\n{raw.shape[1]} {raw.shape[0]}\n65535\n".encode()
        _atomic_write(path, header + raw.astype(">u2").tobytes())
    else:
        raise VoxCityError(f"{path}: use .png or .pgm")
    meta = {"gsd": hm.gsd, "z_min": hm.z_min, "z_scale": hm.z_scale,
            "origin_xy": list(hm.origin_xy)}
    _atomic_write(_sidecar_path(path), json.dumps(meta, indent=1).encode())


def load_heightmap(path):
    from .dataset import HeightMap
    path = os.fspath(path)
    if path.endswith(".png"):
        from PIL import Image
        with Image.open(path) as img:
            raw = np.asarray(img, dtype=np.uint16)
    elif path.endswith(".pgm"):
        with open(path, "rb") as f:
            magic = f.readline().strip()
            if magic != b"P5":
                raise VoxCityError(f"{path}: not a binary PGM")
            dims = f.readline().split()
            while dims and dims[0].startswith(b"#"):
                dims = f.readline().split()
            w, h = int(dims[0]), int(dims[1])
            maxval = int(f.readline())
            dtype = ">u2" if maxval > 255 else "u1"
            raw = np.frombuffer(f.read(), dtype=dtype).reshape(h, w)
    else:
        raise VoxCityError(f"{path}: use .png or .pgm")
    try:
        with open(_sidecar_path(path)) as f:
            meta = json.load(f)
    except FileNotFoundError:
        meta = {"gsd": 1.0, "z_min": 0.0, "z_scale": 1.0 / 255.0,
                "origin_xy": [0.0, 0.0]}
    scale = 256.0 if raw.dtype.itemsize == 2 else 1.0
    return HeightMap(raw.astype(np.float64) / scale, gsd=meta["gsd"],
                     z_min=meta["z_min"], z_scale=meta["z_scale"],
                     origin_xy=tuple(meta["origin_xy"]))


def save_manifest(path, manifest: dict):
    _atomic_write(path, json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)
