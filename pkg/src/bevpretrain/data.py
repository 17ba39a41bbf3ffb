"""Synthetic frame generation and data providers that count LiDAR-side reads."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .grid import BevGridSpec
from .scene import (
    CameraConfig, LidarConfig, PointCloud, SceneConfig, SceneTruth, TeacherConfig,
    generate_scene, render_camera_observation, render_teacher_bev, simulate_lidar, stream_seed,
)
from .tensorio import read_tensor, write_tensor

LIDAR_KINDS = ("points", "teacher", "mask")


@dataclass(frozen=True)
class WorldConfig:
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    scene: SceneConfig = field(default_factory=SceneConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)


@dataclass
class Frame:
    scene_id: str
    scene: SceneTruth
    obs: np.ndarray = field(repr=False)
    points: PointCloud = field(repr=False)
    teacher: np.ndarray = field(repr=False)
    labeled: bool = True


def make_frame(world: WorldConfig, scene_seed: int, scene_id: str, labeled: bool = True) -> Frame:
    scene = generate_scene(world.scene, world.grid, scene_seed)
    pts = simulate_lidar(scene, world.lidar, stream_seed(scene_seed, 1))
    teacher = render_teacher_bev(scene, pts, world.grid, world.teacher)
    obs = render_camera_observation(scene, world.camera, stream_seed(scene_seed, 2))
    return Frame(scene_id, scene, obs.data, pts, teacher.data, labeled)


def split_hash(scene_id: str, scene_seed: int) -> str:
    return hashlib.sha256(f"{scene_id}:{scene_seed}".encode()).hexdigest()


def plan_scenes(seed: int, n_train: int, n_heldout: int, n_unlabeled: int) -> list:
    """Deterministic ``(scene_id, scene_seed, split, labeled)`` records.

    The labeled pool is split by sorting on a seed-stable hash; the first
    ``n_heldout`` entries are held out.
    """
    pool = [(f"L{k:05d}", stream_seed(seed, 0, k)) for k in range(n_train + n_heldout)]
    ranked = sorted(pool, key=lambda r: split_hash(*r))
    held = {sid for sid, _ in ranked[:n_heldout]}
    plan = [(sid, s, "heldout" if sid in held else "train", True) for sid, s in pool]
    plan += [(f"U{k:05d}", stream_seed(seed, 1, k), "train", False) for k in range(n_unlabeled)]
    return plan


class AccessCounter:
    def __init__(self):
        self.reads = {k: 0 for k in LIDAR_KINDS}

    @property
    def lidar_reads(self) -> int:
        return sum(self.reads.values())

    def hit(self, kind: str):
        self.reads[kind] += 1


class FrameStore:
    """In-memory provider. Camera observations and labels are free to read;
    point clouds, teacher maps and masks are counted."""

    def __init__(self, frames: Sequence[Frame], counter: Optional[AccessCounter] = None,
                 masks: Optional[dict] = None):
        self._frames = list(frames)
        self.counter = counter or AccessCounter()
        self._masks = masks if masks is not None else {}

    def __len__(self):
        return len(self._frames)

    @property
    def ids(self) -> list:
        return [f.scene_id for f in self._frames]

    @property
    def grid(self) -> BevGridSpec:
        return self._frames[0].scene.extent

    def subset(self, keep) -> "FrameStore":
        return FrameStore([self._frames[k] for k in keep], self.counter, self._masks)

    def join(self, other: "FrameStore") -> "FrameStore":
        if type(other) is not FrameStore:
            raise TypeError("can only join stores of the same kind")
        masks = self._masks if other._masks is self._masks else {**self._masks, **other._masks}
        return FrameStore(self._frames + other._frames, self.counter, masks)

    def with_masks(self, masks: dict) -> "FrameStore":
        """Same frames with precomputed weight masks keyed by scene id."""
        return FrameStore(self._frames, self.counter, {**self._masks, **masks})

    def is_labeled(self, k: int) -> bool:
        return self._frames[k].labeled

    def camera(self, k: int) -> np.ndarray:
        return self._frames[k].obs

    def labels(self, k: int) -> SceneTruth:
        f = self._frames[k]
        if not f.labeled:
            raise KeyError(f"scene {f.scene_id} is unlabeled")
        return f.scene

    def points(self, k: int) -> PointCloud:
        self.counter.hit("points")
        return self._frames[k].points

    def teacher(self, k: int) -> np.ndarray:
        self.counter.hit("teacher")
        return self._frames[k].teacher

    def mask(self, k: int) -> Optional[np.ndarray]:
        self.counter.hit("mask")
        return self._masks.get(self._frames[k].scene_id)


class DiskFrameStore(FrameStore):
    """Provider over a dataset directory written by ``synth``."""

    def __init__(self, root, records: Sequence[dict], counter: Optional[AccessCounter] = None):
        self.root = Path(root)
        self._records = list(records)
        self.counter = counter or AccessCounter()
        self._grid = BevGridSpec.from_dict(json.loads((self.root / "manifest.json").read_text())["grid"])

    def __len__(self):
        return len(self._records)

    @property
    def ids(self) -> list:
        return [r["id"] for r in self._records]

    @property
    def grid(self) -> BevGridSpec:
        return self._grid

    def subset(self, keep) -> "DiskFrameStore":
        return DiskFrameStore(self.root, [self._records[k] for k in keep], self.counter)

    def join(self, other: "DiskFrameStore") -> "DiskFrameStore":
        if not isinstance(other, DiskFrameStore) or other.root != self.root:
            raise TypeError("can only join stores over the same dataset directory")
        return DiskFrameStore(self.root, self._records + other._records, self.counter)

    def is_labeled(self, k: int) -> bool:
        return bool(self._records[k]["labeled"])

    def camera(self, k: int) -> np.ndarray:
        return read_tensor(self.root / "camera" / f"{self._records[k]['id']}.bdkt")

    def labels(self, k: int) -> SceneTruth:
        r = self._records[k]
        if not r["labeled"]:
            raise KeyError(f"scene {r['id']} is unlabeled")
        return SceneTruth.from_json((self.root / "scenes" / f"{r['id']}.json").read_text())

    def points(self, k: int) -> PointCloud:
        self.counter.hit("points")
        return PointCloud(read_tensor(self.root / "points" / f"{self._records[k]['id']}.bdkt"))

    def teacher(self, k: int) -> np.ndarray:
        self.counter.hit("teacher")
        return read_tensor(self.root / "teacher" / f"{self._records[k]['id']}.bdkt")

    def mask(self, k: int) -> Optional[np.ndarray]:
        self.counter.hit("mask")
        path = self.root / "masks" / f"{self._records[k]['id']}.bdkt"
        return read_tensor(path) if path.exists() else None


@dataclass
class Dataset:
    train: FrameStore
    heldout: FrameStore
    unlabeled: FrameStore

    def pretrain_split(self, ratio: float) -> FrameStore:
        """Pretraining frames for a data ratio in [0, 2]: up to 1 takes that
        fraction of the labeled train set, beyond 1 adds unlabeled frames."""
        if not 0.0 <= ratio <= 2.0:
            raise ValueError("pretraining data ratio must lie in [0, 2]")
        n = len(self.train)
        n_lab = int(round(min(ratio, 1.0) * n))
        n_unl = int(round(max(ratio - 1.0, 0.0) * n))
        if n_unl > len(self.unlabeled):
            raise ValueError(f"ratio {ratio} needs {n_unl} unlabeled frames, only {len(self.unlabeled)} exist")
        return self.train.subset(range(n_lab)).join(self.unlabeled.subset(range(n_unl)))

    def pool(self) -> FrameStore:
        """Every frame available for pretraining (labeled and unlabeled)."""
        return self.train.join(self.unlabeled)


def build_dataset(world: WorldConfig, seed: int, n_train: int, n_heldout: int,
                  n_unlabeled: int = 0) -> Dataset:
    counter = AccessCounter()
    groups = {"train": [], "heldout": [], "unlabeled": []}
    for sid, s, split, labeled in plan_scenes(seed, n_train, n_heldout, n_unlabeled):
        frame = make_frame(world, s, sid, labeled)
        groups[split if labeled else "unlabeled"].append(frame)
    masks: dict = {}
    return Dataset(*(FrameStore(groups[g], counter, masks) for g in ("train", "heldout", "unlabeled")))


# ---------------------------------------------------------------------------
# on-disk datasets

MANIFEST = "manifest.json"
ARTIFACT_DIRS = ("scenes", "points", "teacher", "camera")


def write_dataset(root, world: WorldConfig, seed: int, n_train: int, n_heldout: int, n_unlabeled: int,
                  config_hash: str, config: Optional[dict] = None) -> dict:
    """Synthesize every frame and write it under ``root``; returns the manifest."""
    root = Path(root)
    for d in ARTIFACT_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    records = []
    for sid, s, split, labeled in plan_scenes(seed, n_train, n_heldout, n_unlabeled):
        frame = make_frame(world, s, sid, labeled)
        (root / "scenes" / f"{sid}.json").write_text(frame.scene.to_json())
        write_tensor(root / "points" / f"{sid}.bdkt", frame.points.points)
        write_tensor(root / "teacher" / f"{sid}.bdkt", frame.teacher)
        write_tensor(root / "camera" / f"{sid}.bdkt", frame.obs)
        records.append({"id": sid, "seed": int(s), "split": split, "labeled": bool(labeled)})
    manifest = {
        "config_hash": config_hash,
        "grid": world.grid.to_dict(),
        "n_scenes": len(records),
        "scenes": records,
        "content_hash": content_hash(root, [r["id"] for r in records]),
    }
    if config is not None:
        manifest["config"] = config
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def content_hash(root, ids: Sequence[str]) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for sid in ids:
        for d, ext in (("scenes", "json"), ("points", "bdkt"), ("teacher", "bdkt"), ("camera", "bdkt")):
            h.update((root / d / f"{sid}.{ext}").read_bytes())
    return h.hexdigest()


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_dataset(root) -> Dataset:
    """Disk-backed dataset sharing one access counter across splits."""
    manifest = read_manifest(root)
    counter = AccessCounter()
    by_split = {"train": [], "heldout": [], "unlabeled": []}
    for r in manifest["scenes"]:
        by_split["unlabeled" if not r["labeled"] else r["split"]].append(r)
    return Dataset(*(DiskFrameStore(root, by_split[g], counter) for g in ("train", "heldout", "unlabeled")))
