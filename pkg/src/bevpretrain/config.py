"""Declarative experiment configuration.

A config document is YAML (or JSON, which YAML parses) with the sections::

    seed: 0
    data:    {n_train, n_heldout, n_unlabeled}
    grid:    BevGridSpec fields
    scene / lidar / teacher / camera: generator fields
    mask:    MaskConfig fields
    run:     RunConfig fields (everything except sizes, seed and mask)

Every section is optional; missing keys keep their defaults and unknown keys
are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from .data import WorldConfig
from .grid import BevGridSpec
from .masks import MaskConfig
from .scene import CameraConfig, LidarConfig, SceneConfig, TeacherConfig
from .trainer import RunConfig

RUN_EXCLUDED = ("n_train", "n_heldout", "seed", "mask")
FINETUNE_ONLY = ("finetune_epochs", "lr_finetune", "inherit_head", "freeze_head")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_heldout: int = 20
    n_unlabeled: int = 200

    def __post_init__(self):
        if self.n_train < 1 or self.n_heldout < 0 or self.n_unlabeled < 0:
            raise ValueError("dataset sizes must be non-negative (n_train >= 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        # the run section mirrors sizes, seed and mask so trainers see one object
        run = replace(self.run, n_train=self.data.n_train, n_heldout=self.data.n_heldout, seed=self.seed)
        object.__setattr__(self, "run", run)

    def with_run(self, **changes) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, **changes))

    def to_dict(self) -> dict:
        run = {k: v for k, v in _plain(self.run).items() if k not in RUN_EXCLUDED}
        return {
            "seed": self.seed,
            "data": _plain(self.data),
            "grid": self.world.grid.to_dict(),
            "scene": _plain(self.world.scene),
            "lidar": _plain(self.world.lidar),
            "teacher": _plain(self.world.teacher),
            "camera": _plain(self.world.camera),
            "mask": _plain(self.run.mask),
            "run": run,
        }

    def data_dict(self) -> dict:
        """The part of the config that determines the synthesized dataset."""
        d = self.to_dict()
        return {k: d[k] for k in ("seed", "data", "grid", "scene", "lidar", "teacher", "camera")}

    @property
    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    @property
    def data_hash(self) -> str:
        return stable_hash(self.data_dict())

    def stage_hash(self, stage: str) -> str:
        """Hash of the fields that determine one stage's artifact.

        Upstream artifacts stay valid when only downstream knobs change, e.g.
        a mask setting does not invalidate whitening statistics and a
        finetune setting does not invalidate a pretrained checkpoint.
        """
        d = self.to_dict()
        run = d["run"]
        stats = {"data": self.data_dict(), "stats": {k: run[k] for k in ("whiten_eps", "whiten_nonzero_only")}}
        if stage == "stats":
            return stable_hash(stats)
        if stage == "masks":
            return stable_hash({**stats, "mask": d["mask"],
                                "prior": {k: run[k] for k in ("whiten", "raw_teacher_prior")}})
        if stage == "teacher_head":
            return stable_hash({**stats, "head": {k: run[k] for k in ("whiten", "teacher_head_steps",
                                                                       "teacher_head_lr")}})
        if stage == "pretrained":
            return stable_hash({**d, "run": {k: v for k, v in run.items() if k not in FINETUNE_ONLY}})
        if stage in ("finetuned", "scratch"):
            return self.config_hash
        raise ValueError(f"unknown stage {stage!r}")


def stable_hash(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _plain(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _plain(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(v, d, where) for v, d in zip(value, default)) if len(value) == len(default) \
            else tuple(float(v) for v in value)
    raise ConfigError(f"{where}: unsupported field type")


def _section(cls, raw, where: str, exclude: Iterable[str] = ()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    base = cls()
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(v, getattr(base, k), f"{where}.{k}") for k, v in raw.items()}
    try:
        obj = replace(base, **kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return obj


SECTIONS = ("seed", "data", "grid", "scene", "lidar", "teacher", "camera", "mask", "run")


def config_from_dict(doc: Optional[dict]) -> ExperimentConfig:
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s) {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    grid_raw = doc.get("grid") or {}
    grid = _section(BevGridSpec, grid_raw, "grid")
    world = WorldConfig(
        grid=grid,
        scene=_section(SceneConfig, doc.get("scene"), "scene"),
        lidar=_section(LidarConfig, doc.get("lidar"), "lidar"),
        teacher=_section(TeacherConfig, doc.get("teacher"), "teacher"),
        camera=_section(CameraConfig, doc.get("camera"), "camera"),
    )
    mask = _section(MaskConfig, doc.get("mask"), "mask")
    run = _section(RunConfig, doc.get("run"), "run", exclude=RUN_EXCLUDED)
    try:
        return ExperimentConfig(seed, _section(DataConfig, doc.get("data"), "data"), world,
                                replace(run, mask=mask))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, value = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    return path, yaml.safe_load(value)


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    out = json.loads(json.dumps(doc))
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-mapping")
        node[path[-1]] = value
    return out


def load_document(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    return {} if doc is None else doc


def load_config(path=None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> ExperimentConfig:
    """Config from an optional file plus ``section.key=value`` overrides; an
    explicit ``seed`` wins over both."""
    doc = load_document(path) if path is not None else {}
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    return config_from_dict(doc)
