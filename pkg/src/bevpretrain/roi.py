"""Axis-aligned box footprints and bilinear ROI resampling on BEV maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import BevGridSpec
from .scene import Box3D


class EmptyFootprintError(ValueError):
    pass


@dataclass(frozen=True)
class Footprint2D:
    """Axis-aligned rectangle ``[x_min, x_max] x [y_min, y_max]`` in meters."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return max(self.x_max - self.x_min, 0.0) * max(self.y_max - self.y_min, 0.0)


def axis_aligned_footprint(box: Box3D, spec: BevGridSpec) -> Footprint2D:
    """Bounding rectangle of the yaw-rotated BEV corners, clamped to the grid."""
    corners = box.bev_corners()
    x0, y0 = corners.min(axis=0)
    x1, y1 = corners.max(axis=0)
    x0, x1 = max(x0, spec.x_min), min(x1, spec.x_max)
    y0, y1 = max(y0, spec.y_min), min(y1, spec.y_max)
    if not (x1 > x0 and y1 > y0):
        raise EmptyFootprintError("empty footprint: box lies outside the grid")
    return Footprint2D(float(x0), float(y0), float(x1), float(y1))


@dataclass(frozen=True)
class RoiSampler:
    """Precomputed bilinear taps for a stack of ``K`` footprints.

    ``index`` and ``weight`` are ``(K, o*o, 4)`` into the flattened ``X*Y``
    grid; taps falling outside the grid carry zero weight. Sample ``(a, b)``
    of a patch is row ``a * o + b`` with ``a`` running along x.
    """

    index: np.ndarray
    weight: np.ndarray
    size: int
    grid_shape: tuple

    @property
    def count(self) -> int:
        return self.index.shape[0]

    @classmethod
    def build(cls, spec: BevGridSpec, footprints, o: int) -> "RoiSampler":
        if isinstance(footprints, Footprint2D):
            footprints = [footprints]
        if o < 1:
            raise ValueError("output size must be >= 1")
        X, Y = spec.shape
        idx_all, w_all = [], []
        t = (np.arange(o) + 0.5) / o
        for fp in footprints:
            if fp.area <= 0:
                raise EmptyFootprintError("empty footprint")
            xs = fp.x_min + t * (fp.x_max - fp.x_min)
            ys = fp.y_min + t * (fp.y_max - fp.y_min)
            # continuous index space with cell centers on integers
            u = (xs - spec.x_min) / spec.cell_size_x - 0.5
            v = (ys - spec.y_min) / spec.cell_size_y - 0.5
            U, V = np.meshgrid(u, v, indexing="ij")
            U, V = U.ravel(), V.ravel()
            i0 = np.floor(U).astype(np.int64)
            j0 = np.floor(V).astype(np.int64)
            fu, fv = U - i0, V - j0
            ii = np.stack([i0, i0 + 1, i0, i0 + 1], axis=1)
            jj = np.stack([j0, j0, j0 + 1, j0 + 1], axis=1)
            w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
            inside = (ii >= 0) & (ii < X) & (jj >= 0) & (jj < Y)
            w_all.append(np.where(inside, w, 0.0))
            idx_all.append(np.where(inside, ii * Y + jj, 0))
        if idx_all:
            index, weight = np.stack(idx_all), np.stack(w_all)
        else:
            index = np.zeros((0, o * o, 4), dtype=np.int64)
            weight = np.zeros((0, o * o, 4))
        return cls(index, weight, o, (X, Y))

    def sample(self, f: np.ndarray) -> np.ndarray:
        """``D x X x Y`` map -> ``K x D x o x o`` patches."""
        D = f.shape[0]
        flat = f.reshape(D, -1)
        out = (flat[:, self.index] * self.weight).sum(axis=-1)  # D, K, o*o
        return out.transpose(1, 0, 2).reshape(self.count, D, self.size, self.size)

    def backward(self, grad_patch: np.ndarray) -> np.ndarray:
        """Map gradient ``D x X x Y`` of :meth:`sample` given patch gradients."""
        K, D = grad_patch.shape[:2]
        X, Y = self.grid_shape
        g = grad_patch.reshape(K, D, -1, 1) * self.weight[:, None]  # K, D, o*o, 4
        g = g.transpose(1, 0, 2, 3).reshape(D, -1)
        flat_idx = self.index.ravel()
        out = np.empty((D, X * Y))
        for d in range(D):
            out[d] = np.bincount(flat_idx, weights=g[d], minlength=X * Y)
        return out.reshape(D, X, Y)


def roi_align(f: np.ndarray, fp: Footprint2D, o: int, spec: BevGridSpec) -> np.ndarray:
    """Resample one ``D x o x o`` patch of ``f`` over the footprint."""
    return RoiSampler.build(spec, fp, o).sample(np.asarray(f, dtype=np.float64))[0]
