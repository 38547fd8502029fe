"""Point cloud container shared by the grid, dataset and metric modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PointCloud:
    """N points with positions in meters and optional color/normal channels.

    positions : (N, 3) float64
    colors    : (N, 3) float64 in [0, 1], optional
    normals   : (N, 3) float64 unit vectors, optional
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        for name in ("colors", "normals"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                if arr.shape != self.positions.shape:
                    raise ValueError(f"{name} must match positions shape")
                setattr(self, name, arr)

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.positions[index],
            None if self.colors is None else self.colors[index],
            None if self.normals is None else self.normals[index],
        )

    def transformed(self, offset=(0.0, 0.0, 0.0)) -> "PointCloud":
        return PointCloud(self.positions + np.asarray(offset, dtype=np.float64),
                          self.colors, self.normals)
