"""Central finite-difference checks for every analytic gradient.

Each check draws small random instances (grids up to 16x16, at most 8
channels and 4 boxes), perturbs a random subset of coordinates by
``+-step`` in float64 and compares against the closed-form gradient with
tolerance ``max(abs_tol, rel_tol * |fd|)``. Instances near a kink of L1 or
SmoothL1 are redrawn.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .grid import BevGridSpec
from .losses import (
    RECON_VARIANTS, ProjectionHead, box_sampler, correlation_loss, pretrain_loss, reconstruction_loss,
    standardize_backward, standardize_map,
)
from .scene import Box3D, SceneTruth
from .student import (
    TargetBatch, batch_detection_loss, encode_targets, head_backward, head_forward, init_head_params,
    init_view_params, student_backward, student_forward,
)

STEP = 1e-4
ABS_TOL = 1e-5
REL_TOL = 1e-3
KINK_MARGIN = 1e-2


@dataclass
class CheckResult:
    name: str
    instances: int
    coordinates: int
    max_abs_dev: float
    max_tol_ratio: float  # deviation / tolerance, <= 1 passes

    @property
    def passed(self) -> bool:
        return bool(self.max_tol_ratio <= 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


class _Tracker:
    def __init__(self, name):
        self.name = name
        self.instances = 0
        self.coords = 0
        self.max_dev = 0.0
        self.max_ratio = 0.0

    def compare(self, f: Callable[[], float], arr: np.ndarray, analytic: np.ndarray,
                rng: np.random.Generator, n_coords: int):
        flat = arr.reshape(-1)
        ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for p in picks:
            old = flat[p]
            flat[p] = old + STEP
            up = f()
            flat[p] = old - STEP
            down = f()
            flat[p] = old
            fd = (up - down) / (2 * STEP)
            dev = abs(fd - ana[p])
            self.max_dev = max(self.max_dev, dev)
            self.max_ratio = max(self.max_ratio, dev / max(ABS_TOL, REL_TOL * abs(fd)))
            self.coords += 1

    def result(self) -> CheckResult:
        return CheckResult(self.name, self.instances, self.coords, float(self.max_dev), float(self.max_ratio))


def _spec(rng) -> BevGridSpec:
    X, Y = (int(v) for v in rng.integers(4, 17, size=2))
    return BevGridSpec(-float(X), float(X), -float(Y), float(Y), X, Y)


def _boxes(rng, spec: BevGridSpec, n: int) -> list:
    out = []
    for _ in range(n):
        x = rng.uniform(spec.x_min + 0.5, spec.x_max - 0.5)
        y = rng.uniform(spec.y_min + 0.5, spec.y_max - 0.5)
        out.append(Box3D(x, y, 0.8, rng.uniform(0.8, 3.0), 1.6, rng.uniform(1.0, 5.0),
                         rng.uniform(-math.pi + 1e-3, math.pi), 0))
    return out


def _phis(rng, D: int, o: int):
    phi1 = ProjectionHead.init(D * o * o, 6, 5, rng)
    # perturb away from the shared draw so the two branches disagree
    phi1.params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in phi1.params.items()}
    phi2 = ProjectionHead.init(D * o * o, 6, 5, rng, frozen=True)
    return phi1, phi2


def _embed_gap(S, T, boxes, phi1, phi2, spec, o):
    sampler = box_sampler(boxes, spec, o)
    if not sampler.count:
        return np.zeros(0)
    es = phi1(sampler.sample(S).reshape(sampler.count, -1))
    et = phi2(sampler.sample(T).reshape(sampler.count, -1))
    return es - et


def _near_smooth_kink(gap, beta=1.0) -> bool:
    return bool(np.any(np.abs(np.abs(gap) - beta) < KINK_MARGIN))


def check_reconstruction(variant: str, n: int, rng) -> CheckResult:
    tr = _Tracker(f"reconstruction_{variant}")
    while tr.instances < n:
        spec = _spec(rng)
        D = int(rng.integers(1, 9))
        S = rng.standard_normal((D,) + spec.shape)
        T = rng.standard_normal((D,) + spec.shape)
        if variant == "L1" and np.min(np.abs(T - S)) < KINK_MARGIN:
            continue
        R = rng.uniform(0, 2, size=spec.shape) * (rng.uniform(size=spec.shape) > 0.2)
        _, g = reconstruction_loss(S, T, R, variant)
        tr.compare(lambda: reconstruction_loss(S, T, R, variant)[0], S, g, rng, 24)
        tr.instances += 1
    return tr.result()


def check_correlation(n: int, rng) -> CheckResult:
    tr = _Tracker("correlation")
    while tr.instances < n:
        spec = _spec(rng)
        D, o = int(rng.integers(1, 9)), int(rng.integers(2, 5))
        S = rng.standard_normal((D,) + spec.shape)
        T = rng.standard_normal((D,) + spec.shape)
        boxes = _boxes(rng, spec, int(rng.integers(0, 5)))
        phi1, phi2 = _phis(rng, D, o)
        if _near_smooth_kink(_embed_gap(S, T, boxes, phi1, phi2, spec, o)):
            continue
        _, gS, gphi = correlation_loss(S, T, boxes, phi1, phi2, o, spec)
        f = lambda: correlation_loss(S, T, boxes, phi1, phi2, o, spec)[0]
        tr.compare(f, S, gS, rng, 16)
        for k in ProjectionHead.KEYS:
            tr.compare(f, phi1.params[k], gphi[k], rng, 6)
        tr.instances += 1
    return tr.result()


def check_combined(n: int, rng) -> CheckResult:
    tr = _Tracker("pretrain_combined")
    while tr.instances < n:
        spec = _spec(rng)
        D, o = int(rng.integers(1, 9)), int(rng.integers(2, 5))
        variant = RECON_VARIANTS[tr.instances % len(RECON_VARIANTS)]
        S = rng.standard_normal((D,) + spec.shape)
        T = rng.standard_normal((D,) + spec.shape)
        R = rng.uniform(0, 2, size=spec.shape)
        boxes = _boxes(rng, spec, int(rng.integers(1, 5)))
        phi1, phi2 = _phis(rng, D, o)
        lam1, lam2 = rng.uniform(0, 2, size=2)
        if variant == "L1" and np.min(np.abs(T - S)) < KINK_MARGIN:
            continue
        if _near_smooth_kink(_embed_gap(S, T, boxes, phi1, phi2, spec, o)):
            continue
        rep = pretrain_loss(S, T, boxes, R, phi1, phi2, spec, lam1, lam2, variant, o)
        f = lambda: pretrain_loss(S, T, boxes, R, phi1, phi2, spec, lam1, lam2, variant, o).l_total
        tr.compare(f, S, rep.grad_S, rng, 16)
        for k in ProjectionHead.KEYS:
            tr.compare(f, phi1.params[k], rep.grad_phi1_total[k], rng, 6)
        tr.instances += 1
    return tr.result()


def check_standardize(n: int, rng) -> CheckResult:
    tr = _Tracker("standardize_student")
    while tr.instances < n:
        spec = _spec(rng)
        D = int(rng.integers(1, 9))
        S = rng.standard_normal((D,) + spec.shape)
        T = rng.standard_normal((D,) + spec.shape)
        R = rng.uniform(0, 2, size=spec.shape)

        def f():
            return reconstruction_loss(standardize_map(S)[0], T, R, "L2")[0]

        Z, cache = standardize_map(S)
        _, gZ = reconstruction_loss(Z, T, R, "L2")
        tr.compare(f, S, standardize_backward(gZ, cache), rng, 16)
        tr.instances += 1
    return tr.result()


def check_student_forward(n: int, rng) -> CheckResult:
    tr = _Tracker("student_forward")
    while tr.instances < n:
        spec = _spec(rng)
        C, D = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        B = int(rng.integers(1, 3))
        params = init_view_params(C, D, rng)
        obs = rng.standard_normal((B, C) + spec.shape)
        G = rng.standard_normal((B, D) + spec.shape)
        f = lambda: float((student_forward(params, obs)[0] * G).sum())
        _, cache = student_forward(params, obs)
        grads = student_backward(params, cache, G)
        for k, v in params.items():
            tr.compare(f, v, grads[k], rng, 8)
        tr.instances += 1
    return tr.result()


def _random_scene(rng, spec: BevGridSpec) -> SceneTruth:
    return SceneTruth(_boxes(rng, spec, int(rng.integers(0, 5))), spec, 0)


def check_head_detection(n: int, rng) -> CheckResult:
    tr = _Tracker("head_detection")
    while tr.instances < n:
        spec = _spec(rng)
        D, B = int(rng.integers(1, 9)), int(rng.integers(1, 3))
        head = init_head_params(D, rng)
        F = rng.standard_normal((B, D) + spec.shape)
        targets = TargetBatch.stack([encode_targets(_random_scene(rng, spec), spec) for _ in range(B)])
        pred = head_forward(head, F)
        if len(targets.pos_b):
            r = pred[targets.pos_b, 1:, targets.pos_i, targets.pos_j] - targets.regression
            if _near_smooth_kink(r):
                continue
        _, g = batch_detection_loss(pred, targets)
        grads, gF = head_backward(head, F, g)
        f = lambda: batch_detection_loss(head_forward(head, F), targets)[0]
        for k, v in head.items():
            tr.compare(f, v, grads[k], rng, 8)
        tr.compare(f, F, gF, rng, 12)
        tr.instances += 1
    return tr.result()


def check_end_to_end(n: int, rng) -> CheckResult:
    """Pretraining objective w.r.t. view parameters on 8x8 grids, D=4."""
    tr = _Tracker("pretrain_end_to_end")
    spec = BevGridSpec(-8.0, 8.0, -8.0, 8.0, 8, 8)
    while tr.instances < n:
        C, D, o = 3, 4, 3
        params = init_view_params(C, D, rng)
        obs = rng.standard_normal((C,) + spec.shape)
        T = rng.standard_normal((D,) + spec.shape)
        R = rng.uniform(0, 2, size=spec.shape)
        boxes = _boxes(rng, spec, int(rng.integers(1, 5)))
        phi1, phi2 = _phis(rng, D, o)
        S, cache = student_forward(params, obs)
        if _near_smooth_kink(_embed_gap(S, T, boxes, phi1, phi2, spec, o)):
            continue
        rep = pretrain_loss(S, T, boxes, R, phi1, phi2, spec, 1.0, 1.0, "L2", o)
        grads = student_backward(params, cache, rep.grad_S)
        f = lambda: pretrain_loss(student_forward(params, obs)[0], T, boxes, R, phi1, phi2, spec,
                                  1.0, 1.0, "L2", o).l_total
        for k, v in params.items():
            tr.compare(f, v, grads[k], rng, 8)
        tr.instances += 1
    return tr.result()


def run_gradcheck(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    """Full suite; every check runs ``instances`` random instances."""
    if instances < 1:
        raise ValueError("need at least one instance per check")
    rng = np.random.default_rng(seed)
    results = [check_reconstruction(v, instances, rng) for v in RECON_VARIANTS]
    results += [
        check_correlation(instances, rng),
        check_combined(instances, rng),
        check_standardize(instances, rng),
        check_student_forward(instances, rng),
        check_head_detection(instances, rng),
        check_end_to_end(instances, rng),
    ]
    return results


def gradcheck_report(instances: int = 20, seed: int = 0) -> dict:
    t0 = time.perf_counter()
    results = run_gradcheck(instances, seed)
    return {
        "step": STEP, "abs_tol": ABS_TOL, "rel_tol": REL_TOL,
        "checks": [r.to_dict() for r in results],
        "passed": all(r.passed for r in results),
        "elapsed_s": time.perf_counter() - t0,
    }
