"""Two-stage protocol: cross-modal pretraining, then detection finetuning."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import FrameStore
from .grid import BevFeatureMap
from .losses import ProjectionHead, box_sampler, pretrain_loss, reconstruction_loss, standardize_backward, standardize_map
from .masks import MaskConfig, build_mask
from .optim import AdamW, NonFiniteGradientError, cosine_lr
from .roi import RoiSampler
from .student import (
    HEAD_KEYS, VIEW_KEYS, StudentModel, TargetBatch, TeacherHead, batch_detection_loss, encode_targets,
    head_backward, head_forward, inherit_head, student_backward, student_forward,
)
from .whitening import FeatureWhitener

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    # data scale
    n_train: int = 200
    n_heldout: int = 20
    pretrain_ratio: float = 1.0
    # component switches
    pretrain: bool = True
    use_mask: bool = True
    use_tgc: bool = True
    whiten: bool = True
    inherit_head: bool = True
    freeze_head: bool = False
    standardize_student: bool = False
    raw_teacher_prior: bool = False
    # objective
    recon_loss: str = "L2"
    lambda_rec: float = 1.0
    lambda_corr: float = 1.0
    roi_size: int = 7
    embed_dim: int = 64
    hidden_dim: int = 64
    smooth_beta: float = 1.0
    mask: MaskConfig = field(default_factory=MaskConfig)
    whiten_eps: float = 1e-5
    whiten_nonzero_only: bool = False
    # optimization
    pretrain_epochs: int = 24
    finetune_epochs: int = 24
    lr_pretrain: float = 2e-3
    lr_finetune: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 8
    teacher_head_steps: int = 300
    teacher_head_lr: float = 0.05
    unlabeled_threshold: float = 0.5
    unlabeled_top_k: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pretrain_ratio <= 2.0:
            raise ValueError("pretrain_ratio must lie in [0, 2]")
        if self.lambda_rec < 0 or self.lambda_corr < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def does_pretrain(self) -> bool:
        return self.pretrain and self.pretrain_ratio > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask"] = asdict(self.mask)
        return d


class NonFiniteLossError(FloatingPointError):
    pass


def _check_finite(value, what, dump: Optional[Path] = None, batch=None):
    if np.all(np.isfinite(value)):
        return
    if dump is not None and batch is not None:
        dump.mkdir(parents=True, exist_ok=True)
        np.savez(dump / "nonfinite_batch.npz", **batch)
    raise NonFiniteLossError(f"non-finite {what}; aborting run")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainFrames:
    obs: np.ndarray        # N x C x X x Y float32
    target: np.ndarray     # N x D x X x Y float32 (whitened unless disabled)
    weight: np.ndarray     # N x X x Y float32
    samplers: list
    target_emb: list


def teacher_target(raw: np.ndarray, whitener: Optional[FeatureWhitener]) -> np.ndarray:
    return raw if whitener is None else whitener.transform(raw)


def frame_mask(store: FrameStore, k: int, target: np.ndarray, raw: np.ndarray, cfg: MaskConfig,
               raw_prior: bool = False) -> np.ndarray:
    grid = store.grid
    prior = BevFeatureMap(grid, raw if raw_prior else target)
    return np.asarray(build_mask(store.points(k), prior, grid, cfg).data)


def prepare_pretrain_frames(store: FrameStore, cfg: RunConfig, whitener: Optional[FeatureWhitener],
                            teacher_head: Optional[TeacherHead], phi2: ProjectionHead) -> PretrainFrames:
    grid = store.grid
    n = len(store)
    obs, target, weight, samplers, embs = [], [], [], [], []
    for k in range(n):
        raw = store.teacher(k)
        T = teacher_target(raw, whitener).astype(np.float32)
        if cfg.use_mask:
            R = store.mask(k)
            if R is None:
                R = frame_mask(store, k, T, raw, cfg.mask, cfg.raw_teacher_prior)
        else:
            R = np.ones(grid.shape, dtype=np.float32)
        if cfg.use_tgc:
            if store.is_labeled(k):
                boxes = store.labels(k).boxes
            elif teacher_head is not None:
                boxes = teacher_head.decode(T, grid, cfg.unlabeled_threshold, cfg.unlabeled_top_k)
            else:
                boxes = []
            sampler = box_sampler(boxes, grid, cfg.roi_size)
            emb = phi2(sampler.sample(T.astype(np.float64)).reshape(sampler.count, -1)) if sampler.count else None
        else:
            sampler, emb = RoiSampler.build(grid, [], cfg.roi_size), None
        obs.append(store.camera(k))
        target.append(T)
        weight.append(np.asarray(R, dtype=np.float32))
        samplers.append(sampler)
        embs.append(emb)
    return PretrainFrames(np.stack(obs), np.stack(target), np.stack(weight), samplers, embs)


def init_projection_heads(in_dim: int, cfg: RunConfig):
    """Trainable and frozen heads from one shared initial draw."""
    phi1 = ProjectionHead.init(in_dim, cfg.hidden_dim, cfg.embed_dim,
                               np.random.default_rng([cfg.seed, 17]))
    return phi1, phi1.copy(frozen=True)


def masked_reconstruction_error(student: StudentModel, frames: PretrainFrames) -> float:
    """Mean masked L2 reconstruction loss of the student over frames."""
    total = 0.0
    for k in range(len(frames.obs)):
        S, _ = student_forward(student.params, frames.obs[k])
        total += reconstruction_loss(S, frames.target[k], frames.weight[k], "L2")[0]
    return total / max(len(frames.obs), 1)


def _pretrain_batch(student, phi1, phi2, frames: PretrainFrames, idx, cfg: RunConfig):
    S, cache = student_forward(student.params, frames.obs[idx])
    B = len(idx)
    grad_S = np.zeros_like(S)
    phi_grads = {k: np.zeros_like(v) for k, v in phi1.params.items()}
    sums = np.zeros(3)
    lam_corr = cfg.lambda_corr if cfg.use_tgc else 0.0
    for b, k in enumerate(idx):
        Sb = S[b]
        if cfg.standardize_student:
            Sb, std_cache = standardize_map(Sb)
        rep = pretrain_loss(Sb, frames.target[k], None, frames.weight[k], phi1, phi2, None,
                            cfg.lambda_rec, lam_corr, cfg.recon_loss, cfg.roi_size, cfg.smooth_beta,
                            sampler=frames.samplers[k], target_emb=frames.target_emb[k])
        g = rep.grad_S
        if cfg.standardize_student:
            g = standardize_backward(g, std_cache)
        grad_S[b] = g / B
        for key, v in rep.grad_phi1_total.items():
            phi_grads[key] += v / B
        sums += (rep.l_rec, rep.l_corr, rep.l_total)
    grads = student_backward(student.params, cache, grad_S)
    return sums / B, grads, phi_grads


def pretrain(student: StudentModel, store: FrameStore, cfg: RunConfig,
             whitener: Optional[FeatureWhitener], teacher_head: Optional[TeacherHead] = None,
             heldout: Optional[FrameStore] = None, dump_dir: Optional[Path] = None,
             on_epoch: Optional[Callable[[dict], None]] = None):
    """Stage 1. Returns ``(student, phi1, trace)``.

    Only view parameters and ``phi1`` are optimized; the student's head is
    untouched. No augmentation is applied to either modality.
    """
    if len(store) == 0:
        raise ValueError("pretraining dataset is empty")
    if cfg.whiten and whitener is None:
        raise ValueError("whitening enabled but no fitted whitener given")
    wh = whitener if cfg.whiten else None
    student = student.copy()
    D = student.channels
    phi1, phi2 = init_projection_heads(D * cfg.roi_size ** 2, cfg)
    frames = prepare_pretrain_frames(store, cfg, wh, teacher_head, phi2)
    held_frames = None
    if heldout is not None and len(heldout):
        held_cfg = replace(cfg, use_mask=True, use_tgc=False)
        held_frames = prepare_pretrain_frames(heldout, held_cfg, wh, None, phi2)
    params = {k: student.params[k] for k in VIEW_KEYS}
    params.update({f"phi1.{k}": v for k, v in phi1.params.items()})
    opt = AdamW(params, lr=cfg.lr_pretrain, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 23])
    n = len(frames.obs)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.pretrain_epochs
    trace = []
    if held_frames is not None:
        trace.append({"stage": "pretrain", "epoch": 0,
                      "heldout_masked_rec": masked_reconstruction_error(student, held_frames)})
    step = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        t0 = time.perf_counter()
        acc = np.zeros(3)
        for idx in _batches(n, cfg.batch_size, rng):
            losses, grads, phi_grads = _pretrain_batch(student, phi1, phi2, frames, idx, cfg)
            batch_dump = {"obs": frames.obs[idx], "target": frames.target[idx], "weight": frames.weight[idx]}
            _check_finite(losses, "pretrain loss", dump_dir, batch_dump)
            grads.update({f"phi1.{k}": v for k, v in phi_grads.items()})
            try:
                opt.step(params, grads, lr=cosine_lr(cfg.lr_pretrain, step, total_steps))
            except NonFiniteGradientError:
                _check_finite(np.nan, "pretrain gradient", dump_dir, batch_dump)
            step += 1
            acc += losses * len(idx)
        rec = {"stage": "pretrain", "epoch": epoch,
               "l_rec": acc[0] / n, "l_corr": acc[1] / n, "l_total": acc[2] / n}
        if held_frames is not None:
            rec["heldout_masked_rec"] = masked_reconstruction_error(student, held_frames)
        rec["elapsed_s"] = time.perf_counter() - t0
        trace.append(rec)
        if on_epoch:
            on_epoch(rec)
    return student, phi1, trace


# ---------------------------------------------------------------------------
# finetuning


def _camera_batch(store: FrameStore):
    obs = np.stack([store.camera(k) for k in range(len(store))])
    targets = TargetBatch.stack([encode_targets(store.labels(k), store.grid) for k in range(len(store))])
    return obs, targets


def detection_loss_of(student: StudentModel, obs: np.ndarray, targets, chunk: int = 16) -> float:
    total = 0.0
    for s in range(0, len(obs), chunk):
        S, _ = student_forward(student.params, obs[s:s + chunk])
        pred = head_forward(student.params, S)
        total += batch_detection_loss(pred, targets.take(np.arange(s, s + len(pred))))[0] * len(pred)
    return total / max(len(obs), 1)


def evaluate(student: StudentModel, store: FrameStore) -> float:
    """Mean held-out surrogate detection loss; reads camera data and labels only."""
    obs, targets = _camera_batch(store)
    return detection_loss_of(student, obs, targets)


def finetune(student: StudentModel, store: FrameStore, cfg: RunConfig,
             teacher_head: Optional[TeacherHead] = None, inherit: Optional[bool] = None,
             heldout: Optional[FrameStore] = None, dump_dir: Optional[Path] = None,
             on_epoch: Optional[Callable[[dict], None]] = None):
    """Stage 2: detection surrogate from camera observations alone.

    Returns ``(student, trace)``.
    """
    if len(store) == 0:
        raise ValueError("finetuning dataset is empty")
    inherit = cfg.inherit_head if inherit is None else inherit
    if inherit:
        if teacher_head is None:
            raise ValueError("head inheritance requested without a teacher head")
        student = inherit_head(student, teacher_head)
    else:
        student = student.copy()
    obs, targets = _camera_batch(store)
    held = _camera_batch(heldout) if heldout is not None and len(heldout) else None
    keys = VIEW_KEYS if cfg.freeze_head else VIEW_KEYS + HEAD_KEYS
    params = {k: student.params[k] for k in keys}
    opt = AdamW(params, lr=cfg.lr_finetune, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 29])
    n = len(obs)
    total_steps = -(-n // cfg.batch_size) * cfg.finetune_epochs
    trace = []
    if held is not None:
        trace.append({"stage": "finetune", "epoch": 0, "heldout_det": detection_loss_of(student, *held)})
    step = 0
    for epoch in range(1, cfg.finetune_epochs + 1):
        t0 = time.perf_counter()
        acc = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            S, cache = student_forward(student.params, obs[idx])
            pred = head_forward(student.params, S)
            loss, g_pred = batch_detection_loss(pred, targets.take(idx))
            _check_finite(loss, "finetune loss", dump_dir, {"obs": obs[idx]})
            g_head, g_S = head_backward(student.params, S, g_pred)
            grads = student_backward(student.params, cache, g_S)
            if not cfg.freeze_head:
                grads.update(g_head)
            opt.step(params, grads, lr=cosine_lr(cfg.lr_finetune, step, total_steps))
            step += 1
            acc += loss * len(idx)
        rec = {"stage": "finetune", "epoch": epoch, "l_det": acc / n}
        if held is not None:
            rec["heldout_det"] = detection_loss_of(student, *held)
        rec["elapsed_s"] = time.perf_counter() - t0
        trace.append(rec)
        if on_epoch:
            on_epoch(rec)
    return student, trace


# ---------------------------------------------------------------------------
# setup helpers


def fit_whitener(store: FrameStore, cfg: RunConfig) -> FeatureWhitener:
    wh = FeatureWhitener(epsilon=cfg.whiten_eps, nonzero_only=cfg.whiten_nonzero_only)
    return wh.fit(store.teacher(k) for k in range(len(store)))


def fit_teacher_head(store: FrameStore, cfg: RunConfig, whitener: Optional[FeatureWhitener]) -> TeacherHead:
    """Head trained on the teacher-side target representation of labeled frames."""
    labeled = [k for k in range(len(store)) if store.is_labeled(k)]
    if not labeled:
        raise ValueError("teacher head needs labeled frames")
    wh = whitener if cfg.whiten else None
    maps = np.stack([teacher_target(store.teacher(k), wh) for k in labeled])
    targets = [encode_targets(store.labels(k), store.grid) for k in labeled]
    head = TeacherHead(steps=cfg.teacher_head_steps, lr=cfg.teacher_head_lr, seed=cfg.seed)
    return head.fit(maps, targets)


def student_for(store: FrameStore, cfg: RunConfig, teacher_channels: int) -> StudentModel:
    return StudentModel.init(store.camera(0).shape[0], teacher_channels, seed=cfg.seed)
