"""Metric BEV grid definition and the dense map types built on it.

Maps are stored channels-first: ``data[d, i, j]`` where ``i`` indexes the x
axis and ``j`` the y axis. Cells are half-open ``[lo, hi)`` intervals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class BevGridSpec:
    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    cells_x: int = 64
    cells_y: int = 64

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("grid bounds must be finite")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid extent is empty")
        if int(self.cells_x) < 1 or int(self.cells_y) < 1:
            raise ValueError("grid needs at least one cell per axis")

    @property
    def cell_size_x(self) -> float:
        return (self.x_max - self.x_min) / self.cells_x

    @property
    def cell_size_y(self) -> float:
        return (self.y_max - self.y_min) / self.cells_y

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cells_x, self.cells_y)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (cx, cy) center coordinate vectors of length X and Y."""
        cx = self.x_min + (np.arange(self.cells_x) + 0.5) * self.cell_size_x
        cy = self.y_min + (np.arange(self.cells_y) + 0.5) * self.cell_size_y
        return cx, cy

    def cell_bounds(self, i: int, j: int) -> tuple[float, float, float, float]:
        return (
            self.x_min + i * self.cell_size_x,
            self.x_min + (i + 1) * self.cell_size_x,
            self.y_min + j * self.cell_size_y,
            self.y_min + (j + 1) * self.cell_size_y,
        )

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min, "x_max": self.x_max,
            "y_min": self.y_min, "y_max": self.y_max,
            "cells_x": self.cells_x, "cells_y": self.cells_y,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        return cls(
            float(d["x_min"]), float(d["x_max"]), float(d["y_min"]), float(d["y_max"]),
            int(d["cells_x"]), int(d["cells_y"]),
        )


def grid_index(spec: BevGridSpec, x: float, y: float) -> Optional[tuple[int, int]]:
    """Cell ``(i, j)`` containing the metric point, or None outside the grid."""
    if not spec.contains(x, y):
        return None
    i = int(math.floor((x - spec.x_min) / spec.cell_size_x))
    j = int(math.floor((y - spec.y_min) / spec.cell_size_y))
    # float rounding can push a point just below x_max onto cells_x
    return min(i, spec.cells_x - 1), min(j, spec.cells_y - 1)


def grid_indices(spec: BevGridSpec, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`grid_index`.

    Returns ``(i, j, valid)``; ``i`` and ``j`` are only meaningful where
    ``valid`` is True.
    """
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[:, 0], xy[:, 1]
    valid = (x >= spec.x_min) & (x < spec.x_max) & (y >= spec.y_min) & (y < spec.y_max)
    i = np.floor((x - spec.x_min) / spec.cell_size_x).astype(np.int64)
    j = np.floor((y - spec.y_min) / spec.cell_size_y).astype(np.int64)
    i = np.clip(i, 0, spec.cells_x - 1)
    j = np.clip(j, 0, spec.cells_y - 1)
    return i, j, valid


@dataclass(frozen=True)
class BevFeatureMap:
    """Dense ``D x X x Y`` float32 feature map on a grid."""

    spec: BevGridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[1:] != self.spec.shape:
            raise ValueError(f"feature map shape {data.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map has non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class WeightMask:
    """Non-negative ``X x Y`` per-cell weights."""

    spec: BevGridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != self.spec.shape:
            raise ValueError(f"mask shape {data.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("mask entries must be finite and non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
