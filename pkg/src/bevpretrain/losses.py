"""Pretraining objectives with closed-form gradients.

All losses evaluate in float64. Map arguments are ``D x X x Y`` arrays for a
single frame; gradients are returned with the same shape.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import BevGridSpec
from .roi import EmptyFootprintError, RoiSampler, axis_aligned_footprint
from .scene import Box3D

log = logging.getLogger(__name__)

RECON_VARIANTS = ("L2", "L1", "KL")


def _check_pair(S, T, R):
    S = np.asarray(S, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if S.shape != T.shape or S.ndim != 3:
        raise ValueError(f"shape mismatch: student {S.shape} vs teacher {T.shape}")
    if R.shape != S.shape[1:]:
        raise ValueError(f"mask shape {R.shape} does not match map grid {S.shape[1:]}")
    if np.any(R < 0):
        raise ValueError("mask weights must be non-negative")
    return S, T, R


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def reconstruction_loss(S, T, R, variant: str = "L2") -> tuple[float, np.ndarray]:
    """Mask-weighted per-cell distance between student and teacher maps,
    averaged over the ``X*Y`` cells. Returns ``(loss, dloss/dS)``."""
    S, T, R = _check_pair(S, T, R)
    n_cells = S.shape[1] * S.shape[2]
    if variant == "L2":
        diff = T - S
        loss = float((R * (diff ** 2).sum(axis=0)).sum() / n_cells)
        grad = -2.0 * R * diff / n_cells
    elif variant == "L1":
        diff = T - S
        loss = float((R * np.abs(diff).sum(axis=0)).sum() / n_cells)
        grad = -R * np.sign(diff) / n_cells
    elif variant == "KL":
        log_p = _log_softmax(T)
        log_q = _log_softmax(S)
        p = np.exp(log_p)
        kl = (p * (log_p - log_q)).sum(axis=0)
        loss = float((R * kl).sum() / n_cells)
        grad = R * (np.exp(log_q) - p) / n_cells
    else:
        raise ValueError(f"unknown reconstruction variant {variant!r}")
    return loss, grad


def standardize_map(S, eps: float = 1e-5):
    """Per-channel standardization over the frame; returns (out, cache)."""
    S = np.asarray(S, dtype=np.float64)
    mu = S.mean(axis=(1, 2), keepdims=True)
    xc = S - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=(1, 2), keepdims=True) + eps)
    out = xc * inv
    return out, (out, inv)


def standardize_backward(grad_out, cache):
    out, inv = cache
    g = np.asarray(grad_out, dtype=np.float64)
    return inv * (g - g.mean(axis=(1, 2), keepdims=True)
                  - out * (g * out).mean(axis=(1, 2), keepdims=True))


def smooth_l1(d, beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise SmoothL1 value and derivative."""
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    small = a < beta
    val = np.where(small, 0.5 * d ** 2 / beta, a - 0.5 * beta)
    der = np.where(small, d / beta, np.sign(d))
    return val, der


class ProjectionHead:
    """Two-layer MLP ``x -> W2 tanh(W1 x + b1) + b2`` on flattened patches."""

    KEYS = ("w1", "b1", "w2", "b2")

    def __init__(self, params: dict, frozen: bool = False):
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in self.KEYS}
        self.frozen = frozen

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
             frozen: bool = False) -> "ProjectionHead":
        s1, s2 = 1.0 / np.sqrt(in_dim), 1.0 / np.sqrt(hidden)
        params = {
            "w1": rng.uniform(-s1, s1, size=(hidden, in_dim)),
            "b1": rng.uniform(-s1, s1, size=hidden),
            "w2": rng.uniform(-s2, s2, size=(out_dim, hidden)),
            "b2": rng.uniform(-s2, s2, size=out_dim),
        }
        return cls(params, frozen)

    def copy(self, frozen: Optional[bool] = None) -> "ProjectionHead":
        return ProjectionHead({k: v.copy() for k, v in self.params.items()},
                              self.frozen if frozen is None else frozen)

    @property
    def in_dim(self) -> int:
        return self.params["w1"].shape[1]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        h = np.tanh(x @ self.params["w1"].T + self.params["b1"])
        e = h @ self.params["w2"].T + self.params["b2"]
        return e, (x, h)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_e):
        x, h = cache
        p = self.params
        grads = {"w2": grad_e.T @ h, "b2": grad_e.sum(axis=0)}
        gz = (grad_e @ p["w2"]) * (1.0 - h ** 2)
        grads["w1"] = gz.T @ x
        grads["b1"] = gz.sum(axis=0)
        grad_x = gz @ p["w1"]
        return grads, grad_x


def box_sampler(boxes: Sequence[Box3D], spec: BevGridSpec, o: int) -> RoiSampler:
    """Sampler over the boxes whose footprint survives clamping; others are
    logged and dropped."""
    fps = []
    for b in boxes:
        try:
            fps.append(axis_aligned_footprint(b, spec))
        except EmptyFootprintError:
            log.info("skipping box at (%.2f, %.2f): empty footprint", b.x, b.y)
    return RoiSampler.build(spec, fps, o)


def correlation_loss_from_targets(S, sampler: RoiSampler, target_emb: np.ndarray,
                                  phi1: ProjectionHead, beta: float = 1.0):
    """Correlation loss against precomputed frozen-branch embeddings.

    Returns ``(loss, dloss/dS, dloss/dphi1 params)``.
    """
    S = np.asarray(S, dtype=np.float64)
    n = sampler.count
    if n == 0:
        return 0.0, np.zeros_like(S), {k: np.zeros_like(v) for k, v in phi1.params.items()}
    xs = sampler.sample(S)
    e_s, cache = phi1.forward(xs.reshape(n, -1))
    val, der = smooth_l1(e_s - target_emb, beta)
    m = e_s.shape[1]
    loss = float(val.mean(axis=1).sum() / n)
    grad_e = der / (m * n)
    grads_phi, grad_x = phi1.backward(cache, grad_e)
    grad_S = sampler.backward(grad_x.reshape(xs.shape))
    return loss, grad_S, grads_phi


def correlation_loss(S, T, boxes: Sequence[Box3D], phi1: ProjectionHead, phi2: ProjectionHead,
                     o: int, spec: BevGridSpec, beta: float = 1.0):
    """Mean SmoothL1 between ``phi1`` of student patches and ``phi2`` of
    teacher patches over box footprints. Gradients never reach ``T`` or
    ``phi2``. Returns ``(loss, dloss/dS, dloss/dphi1 params)``."""
    if not phi2.frozen:
        raise ValueError("the teacher-side projection head must be frozen")
    sampler = box_sampler(boxes, spec, o)
    T = np.asarray(T, dtype=np.float64)
    target = phi2(sampler.sample(T).reshape(sampler.count, -1)) if sampler.count else None
    return correlation_loss_from_targets(S, sampler, target, phi1, beta)


@dataclass
class LossReport:
    l_rec: float
    l_corr: float
    l_total: float
    lambda_rec: float
    lambda_corr: float
    grad_rec: np.ndarray = field(repr=False)
    grad_corr: np.ndarray = field(repr=False)
    grad_phi1: dict = field(repr=False)

    @property
    def grad_S(self) -> np.ndarray:
        return self.lambda_rec * self.grad_rec + self.lambda_corr * self.grad_corr

    @property
    def grad_phi1_total(self) -> dict:
        return {k: self.lambda_corr * v for k, v in self.grad_phi1.items()}


def pretrain_loss(S, T, boxes, R, phi1: ProjectionHead, phi2: ProjectionHead, spec: BevGridSpec,
                  lambda_rec: float = 1.0, lambda_corr: float = 1.0, variant: str = "L2",
                  o: int = 7, beta: float = 1.0, sampler: Optional[RoiSampler] = None,
                  target_emb: Optional[np.ndarray] = None) -> LossReport:
    """Weighted sum of reconstruction and correlation losses.

    ``sampler``/``target_emb`` let callers reuse precomputed teacher-side
    patches; otherwise they are derived from ``boxes`` and ``T``.
    """
    if lambda_rec < 0 or lambda_corr < 0:
        raise ValueError("loss weights must be non-negative")
    l_rec, g_rec = reconstruction_loss(S, T, R, variant)
    if sampler is None:
        if not phi2.frozen:
            raise ValueError("the teacher-side projection head must be frozen")
        sampler = box_sampler(boxes, spec, o)
        if sampler.count:
            target_emb = phi2(sampler.sample(np.asarray(T, np.float64)).reshape(sampler.count, -1))
    l_corr, g_corr, g_phi = correlation_loss_from_targets(S, sampler, target_emb, phi1, beta)
    total = lambda_rec * l_rec + lambda_corr * l_corr
    return LossReport(l_rec, l_corr, total, lambda_rec, lambda_corr, g_rec, g_corr, g_phi)
