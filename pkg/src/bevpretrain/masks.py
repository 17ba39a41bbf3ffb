"""LiDAR-guided weight masks for the reconstruction loss.

Chain: point counts -> 3x3 Gaussian densification -> prior response from the
teacher map -> binary gate -> regularized weights ``R``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .grid import BevFeatureMap, BevGridSpec, WeightMask
from .scene import PointCloud, count_points_grid

REGULARIZERS = ("none", "sigmoid", "log")


@dataclass(frozen=True)
class MaskConfig:
    sigma: float = 1.0
    gate_quantile: float = 0.6
    gate_abs: Optional[float] = None
    regularizer: str = "log"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.gate_abs is not None and not (self.gate_abs >= 0 and not math.isnan(self.gate_abs)):
            raise ValueError("absolute gate threshold must be >= 0")
        if not 0.0 <= self.gate_quantile <= 1.0:
            raise ValueError("gate quantile must lie in [0, 1]")


@dataclass(frozen=True)
class GaussianKernel:
    weights: np.ndarray
    sigma: float

    @classmethod
    def make(cls, sigma: float = 1.0) -> "GaussianKernel":
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        r = np.arange(-1, 2)
        g = np.exp(-0.5 * (r[:, None] ** 2 + r[None, :] ** 2) / sigma ** 2)
        return cls(g / g.sum(), float(sigma))


def count_points(points: PointCloud, spec: BevGridSpec) -> WeightMask:
    return WeightMask(spec, count_points_grid(points.points, spec))


def smooth_counts(m: WeightMask, kernel: GaussianKernel) -> WeightMask:
    """3x3 zero-padded convolution of the count map."""
    src = np.asarray(m.data, dtype=np.float64)
    X, Y = src.shape
    padded = np.zeros((X + 2, Y + 2))
    padded[1:-1, 1:-1] = src
    out = np.zeros_like(src)
    g = kernel.weights
    # the kernel is symmetric, so correlation and convolution coincide
    for a in range(3):
        for b in range(3):
            out += g[a, b] * padded[a:a + X, b:b + Y]
    return WeightMask(m.spec, np.maximum(out, 0.0))


def channel_response(F_l: BevFeatureMap) -> np.ndarray:
    """Per-cell L2 norm over channels, min-max scaled to [0, 1] over the frame."""
    norm = np.sqrt((np.asarray(F_l.data, dtype=np.float64) ** 2).sum(axis=0))
    lo, hi = norm.min(), norm.max()
    if hi - lo <= 0:
        return np.zeros_like(norm)
    return (norm - lo) / (hi - lo)


def prior_response(m_smooth: WeightMask, F_l: BevFeatureMap) -> WeightMask:
    if m_smooth.spec != F_l.spec:
        raise ValueError("grid spec mismatch between mask and feature map")
    return WeightMask(m_smooth.spec, np.asarray(m_smooth.data, np.float64) * channel_response(F_l))


def gate_threshold(c: WeightMask, cfg: MaskConfig) -> float:
    if cfg.gate_abs is not None:
        return float(cfg.gate_abs)
    nz = np.asarray(c.data, np.float64)
    nz = nz[nz > 0]
    if nz.size == 0:
        return math.inf
    return float(np.quantile(nz, cfg.gate_quantile))


def gate_mask(c: WeightMask, threshold: float) -> WeightMask:
    return WeightMask(c.spec, (np.asarray(c.data) >= threshold).astype(np.float32))


def regularize_weights(m_smooth: WeightMask, c_gate: WeightMask, cfg: MaskConfig) -> WeightMask:
    g = np.asarray(m_smooth.data, np.float64) * np.asarray(c_gate.data, np.float64)
    if cfg.regularizer == "log":
        r = np.sqrt(np.log1p(g))
    elif cfg.regularizer == "sigmoid":
        # 2 * (sigmoid(g) - 0.5), zero at g = 0 and below 1 everywhere
        r = np.tanh(0.5 * g)
    else:
        r = g
    return WeightMask(m_smooth.spec, r)


def build_mask(points: PointCloud, F_l: BevFeatureMap, spec: BevGridSpec, cfg: MaskConfig) -> WeightMask:
    m = count_points(points, spec)
    m_s = smooth_counts(m, GaussianKernel.make(cfg.sigma))
    c = prior_response(m_s, F_l)
    c_gate = gate_mask(c, gate_threshold(c, cfg))
    return regularize_weights(m_s, c_gate, cfg)


class LidarMaskGenerator(BaseEstimator):
    """Estimator wrapper so mask settings take part in parameter grids."""

    def __init__(self, sigma=1.0, gate_quantile=0.6, gate_abs=None, regularizer="log"):
        self.sigma = sigma
        self.gate_quantile = gate_quantile
        self.gate_abs = gate_abs
        self.regularizer = regularizer

    def config(self) -> MaskConfig:
        return MaskConfig(self.sigma, self.gate_quantile, self.gate_abs, self.regularizer)

    def fit(self, X=None, y=None):
        self.config_ = self.config()
        return self

    def generate(self, points: PointCloud, teacher: BevFeatureMap) -> WeightMask:
        return build_mask(points, teacher, teacher.spec, self.config())
