"""End-to-end protocol runs, an estimator facade and the ablation runner."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, FrameStore, WorldConfig, build_dataset
from .student import StudentModel, TeacherHead, head_forward, student_forward
from .trainer import (
    RunConfig, evaluate, finetune, fit_teacher_head, fit_whitener, pretrain, student_for,
)
from .whitening import FeatureWhitener

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    """A dataset plus the stage-independent teacher-side fits, cached per
    whitening setting so paired cells share them."""

    dataset: Dataset
    world: WorldConfig
    _whiteners: dict = field(default_factory=dict)
    _heads: dict = field(default_factory=dict)

    def whitener(self, cfg: RunConfig) -> FeatureWhitener:
        key = (cfg.whiten_eps, cfg.whiten_nonzero_only)
        if key not in self._whiteners:
            self._whiteners[key] = fit_whitener(self.dataset.pool(), cfg)
        return self._whiteners[key]

    def teacher_head(self, cfg: RunConfig) -> TeacherHead:
        key = (cfg.whiten, cfg.whiten_eps, cfg.whiten_nonzero_only, cfg.teacher_head_steps,
               cfg.teacher_head_lr, cfg.seed)
        if key not in self._heads:
            wh = self.whitener(cfg) if cfg.whiten else None
            self._heads[key] = fit_teacher_head(self.dataset.train, cfg, wh)
        return self._heads[key]


def prepare(world: WorldConfig, seed: int, n_train: int, n_heldout: int, n_unlabeled: int = 0) -> Prepared:
    return Prepared(build_dataset(world, seed, n_train, n_heldout, n_unlabeled), world)


@dataclass
class RunResult:
    student: StudentModel
    pretrain_trace: list
    finetune_trace: list

    @property
    def heldout_det(self) -> float:
        return self.finetune_trace[-1]["heldout_det"]

    def heldout_det_at(self, epoch: int) -> float:
        for rec in self.finetune_trace:
            if rec["epoch"] == epoch:
                return rec["heldout_det"]
        raise KeyError(f"no finetune record for epoch {epoch}")

    @property
    def masked_rec(self) -> float:
        """Final held-out masked reconstruction error (NaN without pretraining)."""
        if not self.pretrain_trace:
            return math.nan
        return self.pretrain_trace[-1]["heldout_masked_rec"]


def run_protocol(prep: Prepared, cfg: RunConfig, on_epoch: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Pretrain (unless disabled) then finetune, evaluating on held-out frames."""
    ds = prep.dataset
    wh = prep.whitener(cfg) if cfg.whiten else None
    needs_head = cfg.inherit_head or (cfg.does_pretrain and cfg.use_tgc and cfg.pretrain_ratio > 1)
    head = prep.teacher_head(cfg) if needs_head else None
    student = student_for(ds.train, cfg, prep.world.teacher.channels)
    pre_trace: list = []
    if cfg.does_pretrain:
        student, _, pre_trace = pretrain(student, ds.pretrain_split(cfg.pretrain_ratio), cfg, wh, head,
                                         ds.heldout, on_epoch=on_epoch)
    student, ft_trace = finetune(student, ds.train, cfg, head, heldout=ds.heldout, on_epoch=on_epoch)
    return RunResult(student, pre_trace, ft_trace)


def clean_sensor_world(world: WorldConfig) -> WorldConfig:
    """``world`` with camera corruption, occlusion and LiDAR-dark boxes off."""
    cam = replace(world.camera, noise_sd=0.0, jitter_sd=0.0, smear=0.0, dropout=0.0)
    scene = replace(world.scene, occlusion_prob=0.0, lidar_dark_prob=0.0)
    return replace(world, camera=cam, scene=scene)


@dataclass
class OverfitResult:
    initial: float
    final: float
    steps: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.final / self.initial if self.initial > 0 else 0.0


def overfit_single_frame(world: WorldConfig, seed: int = 0, steps: int = 500, lr: float = 0.05,
                         base: Optional[RunConfig] = None) -> OverfitResult:
    """Pretrain on one frame with the correlation term off and report the
    masked reconstruction error on that frame before and after."""
    cfg = replace(base if base is not None else RunConfig(), seed=seed, n_train=1, n_heldout=0,
                  use_tgc=False, lambda_corr=0.0, pretrain_epochs=steps, batch_size=1,
                  lr_pretrain=lr, weight_decay=0.0)
    ds = build_dataset(world, seed, 1, 0, 0)
    wh = fit_whitener(ds.train, cfg) if cfg.whiten else None
    student = student_for(ds.train, cfg, world.teacher.channels)
    _, _, trace = pretrain(student, ds.train, cfg, wh, heldout=ds.train)
    return OverfitResult(trace[0]["heldout_masked_rec"], trace[-1]["heldout_masked_rec"], steps)


class TwoStageDetector(BaseEstimator):
    """Estimator view of the pretrain/finetune protocol.

    ``fit`` takes a :class:`Dataset` (or a :class:`Prepared` bundle to reuse
    teacher-side fits). ``transform`` maps camera observations to BEV
    features and ``predict`` returns per-cell head outputs.
    """

    def __init__(self, config: Optional[RunConfig] = None, world: Optional[WorldConfig] = None):
        self.config = config
        self.world = world

    def _cfg(self) -> RunConfig:
        return self.config if self.config is not None else RunConfig()

    def fit(self, X, y=None):
        if isinstance(X, Prepared):
            prep = X
        elif isinstance(X, Dataset):
            prep = Prepared(X, self.world if self.world is not None else WorldConfig())
        else:
            raise TypeError("fit expects a Dataset or Prepared bundle")
        result = run_protocol(prep, self._cfg())
        self.student_ = result.student
        self.pretrain_trace_ = result.pretrain_trace
        self.finetune_trace_ = result.finetune_trace
        return self

    def _obs(self, X) -> np.ndarray:
        check_is_fitted(self, "student_")
        obs = np.asarray(X, dtype=np.float64)
        if obs.ndim not in (3, 4) or not np.all(np.isfinite(obs)):
            raise ValueError("expected finite C x X x Y or N x C x X x Y camera observations")
        return obs

    def transform(self, X) -> np.ndarray:
        obs = self._obs(X)
        return student_forward(self.student_.params, obs)[0]

    def predict(self, X) -> np.ndarray:
        return head_forward(self.student_.params, self.transform(X))

    def score(self, X, y=None) -> float:
        """Negative mean held-out surrogate loss on a labeled store."""
        check_is_fitted(self, "student_")
        if not isinstance(X, FrameStore):
            raise TypeError("score expects a labeled FrameStore")
        return -evaluate(self.student_, X)


# ---------------------------------------------------------------------------
# ablation presets

PRESETS: dict = {
    "components": [
        ("scratch", dict(pretrain=False, inherit_head=False)),
        ("pretrain", dict(use_mask=False, use_tgc=False)),
        ("pretrain+mask", dict(use_mask=True, use_tgc=False)),
        ("pretrain+mask+tgc", dict(use_mask=True, use_tgc=True)),
    ],
    "data-ratio": [(f"{int(round(r * 100))}%", dict(pretrain_ratio=r)) for r in (0.0, 0.1, 0.5, 1.0, 2.0)],
    "regularizer": [(f"reg={r}", dict(mask=None, _regularizer=r)) for r in ("none", "sigmoid", "log")],
    "recon-loss": [(f"loss={v}", dict(recon_loss=v)) for v in ("L1", "L2", "KL")],
    "whitening": [("no-whitening", dict(whiten=False)), ("whitening", dict(whiten=True))],
    "head-init": [("random-head", dict(inherit_head=False)), ("inherit-head", dict(inherit_head=True))],
}


def preset_cells(name: str, base: RunConfig) -> list:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    cells = []
    for label, changes in PRESETS[name]:
        changes = dict(changes)
        reg = changes.pop("_regularizer", None)
        changes.pop("mask", None)
        cfg = replace(base, **changes)
        if reg is not None:
            cfg = replace(cfg, mask=replace(cfg.mask, regularizer=reg))
        cells.append((label, cfg))
    return cells


ROW_FIELDS = ("cell", "seed", "pretrain", "use_mask", "use_tgc", "whiten", "inherit_head", "recon_loss",
              "regularizer", "pretrain_ratio", "heldout_det_epoch1", "heldout_det", "heldout_masked_rec")
SUMMARY_FIELDS = ("cell", "pretrain", "use_mask", "use_tgc", "whiten", "inherit_head", "recon_loss",
                  "regularizer", "pretrain_ratio", "n_seeds", "heldout_det_epoch1_mean", "heldout_det_mean",
                  "heldout_det_std", "heldout_masked_rec_mean")


def _switches(cfg: RunConfig) -> dict:
    return {"pretrain": cfg.does_pretrain, "use_mask": cfg.use_mask, "use_tgc": cfg.use_tgc,
            "whiten": cfg.whiten, "inherit_head": cfg.inherit_head, "recon_loss": cfg.recon_loss,
            "regularizer": cfg.mask.regularizer, "pretrain_ratio": cfg.pretrain_ratio}


def run_ablation(cells: Sequence[tuple], seeds: Iterable[int], world: WorldConfig,
                 n_unlabeled: int = 0, estimator: Optional[TwoStageDetector] = None,
                 progress: Optional[Callable[[dict], None]] = None):
    """Every cell on every seed with shared per-seed data and teacher fits.

    ``cells`` holds ``(label, RunConfig)`` pairs; each cell is fitted by a
    clone of ``estimator`` with its config set. Returns
    ``(per-seed rows, per-cell summary rows)``.
    """
    est = estimator if estimator is not None else TwoStageDetector(world=world)
    cells = list(cells)
    if not cells:
        raise ValueError("ablation needs at least one cell")
    rows = []
    for seed in seeds:
        base = cells[0][1]
        n_unl = max([n_unlabeled] + [int(round(max(c.pretrain_ratio - 1, 0) * c.n_train)) for _, c in cells])
        prep = prepare(world, seed, base.n_train, base.n_heldout, n_unl)
        for label, cfg in cells:
            cfg = replace(cfg, seed=seed)
            model = clone(est).set_params(config=cfg, world=world).fit(prep)
            res = RunResult(model.student_, model.pretrain_trace_, model.finetune_trace_)
            row = {"cell": label, "seed": seed, **_switches(cfg),
                   "heldout_det_epoch1": res.heldout_det_at(1) if cfg.finetune_epochs >= 1 else math.nan,
                   "heldout_det": res.heldout_det, "heldout_masked_rec": res.masked_rec}
            rows.append(row)
            if progress:
                progress(row)
    return rows, summarize(rows)


def summarize(rows: Sequence[dict]) -> list:
    out = []
    for label in dict.fromkeys(r["cell"] for r in rows):
        rs = [r for r in rows if r["cell"] == label]
        det = np.array([r["heldout_det"] for r in rs])
        summary = {k: rs[0][k] for k in SUMMARY_FIELDS if k in rs[0]}
        summary.update({
            "n_seeds": len(rs),
            "heldout_det_epoch1_mean": float(np.mean([r["heldout_det_epoch1"] for r in rs])),
            "heldout_det_mean": float(det.mean()),
            "heldout_det_std": float(det.std(ddof=1)) if len(det) > 1 else 0.0,
            "heldout_masked_rec_mean": float(np.mean([r["heldout_masked_rec"] for r in rs])),
        })
        out.append(summary)
    return out


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
