"""Camera-side student network and the center-heatmap detection head.

The student maps a ``C x X x Y`` camera observation to a ``D x X x Y`` BEV
map with a per-cell affine layer plus a 3x3 zero-padded mixing convolution
(both read the observation, so zero mixing leaves the affine map alone).
The head is a 1x1 linear layer emitting, per cell::

    (objectness logit, dx, dy, log w, log l, sin yaw, cos yaw)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .grid import BevGridSpec, grid_index
from .losses import smooth_l1
from .optim import AdamW, cosine_lr
from .scene import Box3D, SceneTruth, wrap_yaw

HEAD_OUTPUTS = 7
VIEW_KEYS = ("view_w", "view_b", "mix_w")
HEAD_KEYS = ("head_w", "head_b")


def _uniform(rng, fan_in, shape):
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def init_view_params(obs_channels: int, channels: int, rng: np.random.Generator) -> dict:
    return {
        "view_w": _uniform(rng, obs_channels, (channels, obs_channels)),
        "view_b": _uniform(rng, obs_channels, (channels,)),
        "mix_w": _uniform(rng, 9 * obs_channels, (channels, obs_channels, 3, 3)),
    }


def init_head_params(channels: int, rng: np.random.Generator) -> dict:
    return {
        "head_w": _uniform(rng, channels, (HEAD_OUTPUTS, channels)),
        "head_b": _uniform(rng, channels, (HEAD_OUTPUTS,)),
    }


@dataclass
class StudentModel:
    params: dict
    seed: int = 0

    @classmethod
    def init(cls, obs_channels: int, channels: int, seed: int = 0) -> "StudentModel":
        rng = np.random.default_rng(seed)
        params = init_view_params(obs_channels, channels, rng)
        params.update(init_head_params(channels, rng))
        return cls(params, seed)

    @property
    def obs_channels(self) -> int:
        return self.params["view_w"].shape[1]

    @property
    def channels(self) -> int:
        return self.params["view_w"].shape[0]

    def view_params(self) -> dict:
        return {k: self.params[k] for k in VIEW_KEYS}

    def head_params(self) -> dict:
        return {k: self.params[k] for k in HEAD_KEYS}

    def copy(self) -> "StudentModel":
        return StudentModel({k: v.copy() for k, v in self.params.items()}, self.seed)


def _patches(obs: np.ndarray) -> np.ndarray:
    """``B x C x X x Y`` -> ``B x 9C x XY`` zero-padded 3x3 neighborhoods
    (row ``9c + 3a + b`` holds tap ``(a, b)`` of channel ``c``)."""
    B, C, X, Y = obs.shape
    padded = np.zeros((B, C, X + 2, Y + 2))
    padded[:, :, 1:-1, 1:-1] = obs
    out = np.empty((B, C, 9, X, Y))
    for a in range(3):
        for b in range(3):
            out[:, :, 3 * a + b] = padded[:, :, a:a + X, b:b + Y]
    return out.reshape(B, C * 9, X * Y)


def _fused_kernel(params: dict) -> np.ndarray:
    D, C = params["view_w"].shape
    k = params["mix_w"].reshape(D, C, 9).copy()
    k[:, :, 4] += params["view_w"]
    return k.reshape(D, C * 9)


def student_forward(params: dict, obs: np.ndarray):
    """Returns ``(S, cache)``; accepts a single observation or a batch."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 3
    if single:
        obs = obs[None]
    D, C = params["view_w"].shape
    if obs.shape[1] != C:
        raise ValueError(f"observation has {obs.shape[1]} channels, model expects {C}")
    B, _, X, Y = obs.shape
    patches = _patches(obs)
    S = np.matmul(_fused_kernel(params), patches)
    S += params["view_b"][None, :, None]
    S = S.reshape(B, D, X, Y)
    return (S[0] if single else S), (patches, single)


def student_backward(params: dict, cache, grad_S: np.ndarray) -> dict:
    patches, single = cache
    g = np.asarray(grad_S, dtype=np.float64)
    if single:
        g = g[None]
    D, C = params["view_w"].shape
    B = g.shape[0]
    g = g.reshape(B, D, -1)
    dk = np.zeros((D, C * 9))
    for b in range(B):
        dk += g[b] @ patches[b].T
    dk = dk.reshape(D, C, 9)
    return {
        "view_w": dk[:, :, 4].copy(),
        "view_b": g.sum(axis=(0, 2)),
        "mix_w": dk.reshape(D, C, 3, 3),
    }


def head_forward(head_params: dict, F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    W, b = head_params["head_w"], head_params["head_b"]
    if F.shape[-3] != W.shape[1]:
        raise ValueError(f"feature map has {F.shape[-3]} channels, head expects {W.shape[1]}")
    lead, (D, X, Y) = F.shape[:-3], F.shape[-3:]
    out = np.matmul(W, F.reshape(lead + (D, X * Y))) + b[:, None]
    return out.reshape(lead + (W.shape[0], X, Y))


def head_backward(head_params: dict, F: np.ndarray, grad_pred: np.ndarray):
    """Returns ``(param grads, dloss/dF)``."""
    F = np.asarray(F, dtype=np.float64)
    g = np.asarray(grad_pred, dtype=np.float64)
    W = head_params["head_w"]
    D, X, Y = F.shape[-3:]
    Ff = F.reshape((-1, D, X * Y))
    gf = g.reshape((-1, W.shape[0], X * Y))
    gw = np.zeros_like(W)
    for b in range(len(Ff)):
        gw += gf[b] @ Ff[b].T
    grads = {"head_w": gw, "head_b": gf.sum(axis=(0, 2))}
    grad_F = np.matmul(W.T, gf).reshape(F.shape)
    return grads, grad_F


# ---------------------------------------------------------------------------
# detection surrogate


@dataclass
class DetectionTargets:
    heatmap: np.ndarray    # X x Y in [0, 1]
    pos_i: np.ndarray      # positive cell indices
    pos_j: np.ndarray
    regression: np.ndarray  # K x 6: dx, dy, log w, log l, sin, cos


def encode_targets(scene: SceneTruth, spec: BevGridSpec, heat_sigma: float = 1.0) -> DetectionTargets:
    """Gaussian-splatted center heatmap (sigma in cells) plus regression
    targets at each box's center cell. Boxes sharing a cell keep the first."""
    X, Y = spec.shape
    heat = np.zeros((X, Y))
    ii = np.arange(X)[:, None]
    jj = np.arange(Y)[None, :]
    pos_i, pos_j, reg, seen = [], [], [], set()
    for box in scene.boxes:
        cell = grid_index(spec, box.x, box.y)
        if cell is None:
            continue
        u = (box.x - spec.x_min) / spec.cell_size_x - 0.5
        v = (box.y - spec.y_min) / spec.cell_size_y - 0.5
        g = np.exp(-0.5 * ((ii - u) ** 2 + (jj - v) ** 2) / heat_sigma ** 2)
        heat = np.maximum(heat, g)
        if cell in seen:
            continue
        seen.add(cell)
        i, j = cell
        pos_i.append(i)
        pos_j.append(j)
        cx = spec.x_min + (i + 0.5) * spec.cell_size_x
        cy = spec.y_min + (j + 0.5) * spec.cell_size_y
        reg.append([(box.x - cx) / spec.cell_size_x, (box.y - cy) / spec.cell_size_y,
                    math.log(box.w), math.log(box.l), math.sin(box.yaw), math.cos(box.yaw)])
    pos_i = np.asarray(pos_i, dtype=np.int64)
    pos_j = np.asarray(pos_j, dtype=np.int64)
    heat[pos_i, pos_j] = 1.0
    return DetectionTargets(heat, pos_i, pos_j, np.asarray(reg, dtype=np.float64).reshape(-1, 6))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _focal(z, y, pos, alpha, beta):
    """Per-cell focal loss and its logit derivative."""
    log_p = -_softplus(-z)
    log_1mp = -_softplus(z)
    p = np.exp(log_p)
    q = np.exp(log_1mp)  # 1 - p without cancellation
    neg_w = (1.0 - y) ** beta
    pa = p ** alpha
    qa = q ** alpha
    loss = np.where(pos, -qa * log_p, -neg_w * pa * log_1mp)
    grad = np.where(pos, alpha * p * qa * log_p - qa * q,
                    -neg_w * (alpha * pa * q * log_1mp - pa * p))
    return loss, grad


def detection_surrogate_loss(pred: np.ndarray, targets: DetectionTargets, alpha: float = 2.0,
                             beta: float = 4.0, reg_weight: float = 1.0):
    """Penalty-reduced focal loss on the center heatmap plus SmoothL1 box
    regression at positive cells, both normalized by the positive count.

    Returns ``(loss, dloss/dpred)`` for a single ``7 x X x Y`` prediction.
    """
    loss, grad = batch_detection_loss(np.asarray(pred)[None], TargetBatch.stack([targets]),
                                      alpha=alpha, beta=beta, reg_weight=reg_weight)
    return loss, grad[0]


@dataclass
class TargetBatch:
    """Stacked targets for vectorized loss evaluation."""

    heatmap: np.ndarray   # B x X x Y
    pos: np.ndarray       # B x X x Y bool
    n_pos: np.ndarray     # B
    pos_b: np.ndarray
    pos_i: np.ndarray
    pos_j: np.ndarray
    regression: np.ndarray

    @classmethod
    def stack(cls, targets: Sequence[DetectionTargets]) -> "TargetBatch":
        heat = np.stack([t.heatmap for t in targets])
        pos = np.zeros(heat.shape, dtype=bool)
        pb, pi, pj, reg = [], [], [], []
        for b, t in enumerate(targets):
            pos[b, t.pos_i, t.pos_j] = True
            pb.append(np.full(len(t.pos_i), b))
            pi.append(t.pos_i)
            pj.append(t.pos_j)
            reg.append(t.regression)
        n_pos = np.maximum(pos.sum(axis=(1, 2)), 1).astype(np.float64)
        return cls(heat, pos, n_pos, np.concatenate(pb).astype(np.int64),
                   np.concatenate(pi).astype(np.int64), np.concatenate(pj).astype(np.int64),
                   np.concatenate(reg).reshape(-1, 6))

    def __len__(self):
        return len(self.heatmap)

    def take(self, idx) -> "TargetBatch":
        idx = np.asarray(idx)
        remap = np.full(len(self), -1)
        remap[idx] = np.arange(len(idx))
        keep = np.isin(self.pos_b, idx)
        return TargetBatch(self.heatmap[idx], self.pos[idx], self.n_pos[idx], remap[self.pos_b[keep]],
                           self.pos_i[keep], self.pos_j[keep], self.regression[keep])


def batch_detection_loss(pred: np.ndarray, targets, alpha: float = 2.0, beta: float = 4.0,
                         reg_weight: float = 1.0):
    """Mean surrogate loss over a ``B x 7 x X x Y`` batch and its gradient."""
    if not isinstance(targets, TargetBatch):
        targets = TargetBatch.stack(targets)
    pred = np.asarray(pred, dtype=np.float64)
    B = len(pred)
    norm = (targets.n_pos * B)[:, None, None]
    cell_loss, cell_grad = _focal(pred[:, 0], targets.heatmap, targets.pos, alpha, beta)
    grad = np.zeros_like(pred)
    grad[:, 0] = cell_grad / norm
    loss = float((cell_loss.sum(axis=(1, 2)) / targets.n_pos).sum() / B)
    if len(targets.pos_b):
        b, i, j = targets.pos_b, targets.pos_i, targets.pos_j
        r = pred[b, 1:, i, j]  # K x 6
        val, der = smooth_l1(r - targets.regression, 1.0)
        w = reg_weight / (targets.n_pos[b] * B)
        loss += float((val.sum(axis=1) * w).sum())
        grad[b, 1:, i, j] = der * w[:, None]
    return loss, grad


def decode_boxes(pred: np.ndarray, spec: BevGridSpec, threshold: float = 0.5, top_k: int = 10,
                 z: float = 0.85, h: float = 1.7) -> list:
    """Boxes at local objectness maxima above ``threshold`` (at most ``top_k``)."""
    logit = np.asarray(pred[0], dtype=np.float64)
    score = 1.0 / (1.0 + np.exp(-logit))
    peak = (logit == maximum_filter(logit, size=3, mode="constant", cval=-np.inf)) & (score > threshold)
    ii, jj = np.nonzero(peak)
    order = np.argsort(-score[ii, jj], kind="stable")[:top_k]
    boxes = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        dx, dy, lw, ll, s, c = pred[1:, i, j]
        x = spec.x_min + (i + 0.5 + dx) * spec.cell_size_x
        y = spec.y_min + (j + 0.5 + dy) * spec.cell_size_y
        x = min(max(x, spec.x_min), np.nextafter(spec.x_max, -np.inf))
        y = min(max(y, spec.y_min), np.nextafter(spec.y_max, -np.inf))
        w = float(np.exp(np.clip(lw, -3, 3)))
        l = float(np.exp(np.clip(ll, -3, 3)))
        boxes.append(Box3D(float(x), float(y), z, w, h, l, wrap_yaw(math.atan2(s, c))))
    return boxes


# ---------------------------------------------------------------------------
# teacher head


class TeacherHead(BaseEstimator):
    """Detection head fitted on teacher BEV features.

    Minibatch AdamW with a cosine schedule on the detection surrogate;
    ``fit`` takes an
    ``N x D x X x Y`` array and a matching sequence of targets.
    """

    def __init__(self, steps=300, lr=0.05, batch_size=16, seed=0, weight_decay=0.0):
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.weight_decay = weight_decay

    def fit(self, maps, targets):
        maps = np.asarray(maps, dtype=np.float64)
        if maps.ndim != 4 or len(maps) == 0:
            raise ValueError("teacher head needs a non-empty N x D x X x Y dataset")
        if len(targets) != len(maps):
            raise ValueError("maps and targets differ in length")
        rng = np.random.default_rng(self.seed)
        params = init_head_params(maps.shape[1], rng)
        opt = AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        tb = targets if isinstance(targets, TargetBatch) else TargetBatch.stack(targets)
        self.loss_curve_ = [batch_detection_loss(head_forward(params, maps), tb)[0]]
        order = np.empty(0, dtype=np.int64)
        for step in range(self.steps):
            if len(order) < self.batch_size:
                order = np.concatenate([order, rng.permutation(len(maps))])
            idx, order = np.sort(order[:self.batch_size]), order[self.batch_size:]
            sub = tb.take(idx)
            pred = head_forward(params, maps[idx])
            _, g = batch_detection_loss(pred, sub)
            grads, _ = head_backward(params, maps[idx], g)
            opt.step(params, grads, lr=cosine_lr(self.lr, step, self.steps))
        self.loss_curve_.append(batch_detection_loss(head_forward(params, maps), tb)[0])
        self.params_ = params
        return self

    @classmethod
    def from_params(cls, params: dict) -> "TeacherHead":
        est = cls()
        est.params_ = {k: np.array(params[k], dtype=np.float64) for k in HEAD_KEYS}
        return est

    def predict(self, F):
        check_is_fitted(self, "params_")
        return head_forward(self.params_, F)

    def decode(self, F, spec: BevGridSpec, threshold: float = 0.5, top_k: int = 10) -> list:
        return decode_boxes(self.predict(F), spec, threshold, top_k)


def inherit_head(student: StudentModel, teacher_head: TeacherHead) -> StudentModel:
    """Copy of ``student`` whose head parameters are deep copies of the teacher's."""
    check_is_fitted(teacher_head, "params_")
    out = student.copy()
    for k in HEAD_KEYS:
        src = teacher_head.params_[k]
        if src.shape != out.params[k].shape:
            raise ValueError(f"head shape mismatch for {k}: {src.shape} vs {out.params[k].shape}")
        out.params[k] = np.array(src, dtype=np.float64, copy=True)
    return out
