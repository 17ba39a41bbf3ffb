"""Deterministic synthetic driving scenes.

Everything here is a pure function of ``(config, seed)``. The teacher renderer
stands in for a trained LiDAR backbone and the camera observation stands in
for image features after an imperfect view transform.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import BevFeatureMap, BevGridSpec, grid_indices

# (width, length, height) means and jitter per class: car, truck, pedestrian
CLASS_SIZES = (
    ((1.9, 4.6, 1.7), (0.15, 0.4, 0.15)),
    ((2.5, 8.0, 3.0), (0.2, 1.5, 0.4)),
    ((0.7, 0.8, 1.75), (0.1, 0.1, 0.15)),
)
N_CLASSES = len(CLASS_SIZES)


def wrap_yaw(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    y = math.remainder(yaw, 2 * math.pi)
    return math.pi if y == -math.pi else y


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError("box extents must be positive")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.yaw)):
            raise ValueError("box pose must be finite")
        if not (-math.pi < self.yaw <= math.pi):
            raise ValueError(f"yaw {self.yaw} outside (-pi, pi]")

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.w, self.h, self.l, self.yaw, float(self.class_id)]

    @classmethod
    def from_list(cls, v: Sequence[float]) -> "Box3D":
        x, y, z, w, h, l, yaw, c = (float(a) for a in v)
        return cls(x, y, z, w, h, l, yaw, int(c))

    def bev_corners(self) -> np.ndarray:
        """4x2 footprint corners; length runs along the heading."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dl, dw = self.l / 2.0, self.w / 2.0
        local = np.array([[dl, dw], [-dl, dw], [-dl, -dw], [dl, -dw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass(frozen=True)
class SceneConfig:
    min_boxes: int = 4
    max_boxes: int = 12
    margin: float = 2.0
    ego_clearance: float = 4.0
    class_probs: tuple = (0.6, 0.15, 0.25)
    # boxes hidden behind an unmodelled occluder: both sensors lose them
    occlusion_prob: float = 0.2
    # boxes with no LiDAR returns (absorptive paint, glass) that the camera still sees
    lidar_dark_prob: float = 0.15

    def validate(self):
        if self.min_boxes < 0 or self.max_boxes < self.min_boxes:
            raise ValueError("invalid box count range")
        if self.margin < 0 or self.ego_clearance < 0:
            raise ValueError("margin and clearance must be non-negative")
        p = np.asarray(self.class_probs, dtype=float)
        if p.shape != (N_CLASSES,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0):
            raise ValueError("class_probs must be a distribution over 3 classes")
        if not (0.0 <= self.occlusion_prob <= 1.0 and 0.0 <= self.lidar_dark_prob <= 1.0):
            raise ValueError("occlusion_prob and lidar_dark_prob must lie in [0, 1]")


@dataclass
class SceneTruth:
    boxes: list
    extent: BevGridSpec
    seed: int
    occluded: Optional[list] = None
    lidar_dark: Optional[list] = None

    def __post_init__(self):
        n = len(self.boxes)
        self.occluded = [False] * n if self.occluded is None else [bool(o) for o in self.occluded]
        self.lidar_dark = [False] * n if self.lidar_dark is None else [bool(o) for o in self.lidar_dark]
        if len(self.occluded) != n or len(self.lidar_dark) != n:
            raise ValueError("one occlusion and one lidar_dark flag per box required")
        for b in self.boxes:
            if not self.extent.contains(b.x, b.y):
                raise ValueError(f"box center ({b.x}, {b.y}) outside scene extent")

    def to_json(self) -> str:
        return json.dumps({
            "seed": int(self.seed),
            "extent": self.extent.to_dict(),
            "boxes": [b.to_list() for b in self.boxes],
            "occluded": list(self.occluded),
            "lidar_dark": list(self.lidar_dark),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneTruth":
        d = json.loads(text)
        return cls([Box3D.from_list(b) for b in d["boxes"]],
                   BevGridSpec.from_dict(d["extent"]), int(d["seed"]), d.get("occluded"), d.get("lidar_dark"))


def generate_scene(config: SceneConfig, extent: BevGridSpec, seed: int) -> SceneTruth:
    config.validate()
    lo_x, hi_x = extent.x_min + config.margin, extent.x_max - config.margin
    lo_y, hi_y = extent.y_min + config.margin, extent.y_max - config.margin
    if not (hi_x > lo_x and hi_y > lo_y):
        raise ValueError("scene extent is empty after margin")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_boxes, config.max_boxes + 1))
    boxes: list[Box3D] = []
    radii: list[float] = []
    for _ in range(n):
        for _attempt in range(200):
            cls_id = int(rng.choice(N_CLASSES, p=config.class_probs))
            mean, sd = CLASS_SIZES[cls_id]
            w, l, h = (max(m + s * rng.standard_normal(), 0.3 * m)
                       for m, s in zip(mean, sd))
            x = float(rng.uniform(lo_x, hi_x))
            y = float(rng.uniform(lo_y, hi_y))
            yaw = wrap_yaw(float(rng.uniform(-math.pi, math.pi)))
            r = 0.5 * math.hypot(w, l)
            if math.hypot(x, y) < config.ego_clearance + r:
                continue
            if any(math.hypot(x - b.x, y - b.y) < r + rb for b, rb in zip(boxes, radii)):
                continue
            boxes.append(Box3D(x, y, h / 2.0, w, h, l, yaw, cls_id))
            radii.append(r)
            break
        else:
            raise RuntimeError("could not place a non-overlapping box; scene too crowded")
    occluded = list(rng.uniform(size=len(boxes)) < config.occlusion_prob)
    dark = list(rng.uniform(size=len(boxes)) < config.lidar_dark_prob)
    return SceneTruth(boxes, extent, int(seed), occluded, dark)


@dataclass
class PointCloud:
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError("point cloud must be N x (3+K)")
        if not np.all(np.isfinite(pts[:, :3])):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    @property
    def n_extra(self) -> int:
        return self.points.shape[1] - 3

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class LidarConfig:
    # box points = density * surface_area / range^2, clamped
    density: float = 1500.0
    min_box_points: int = 8
    max_box_points: int = 2048
    ground_points: int = 2500
    ground_min_range: float = 2.0
    occluded_fraction: float = 0.05  # surviving share of returns on an occluded box


def box_point_count(box: Box3D, config: LidarConfig, occluded: bool = False, dark: bool = False) -> int:
    if dark:
        return 0
    area = 2.0 * (box.w * box.l + box.w * box.h + box.l * box.h)
    rng_m = max(math.hypot(box.x, box.y), 1.0)
    n = config.density * area / rng_m ** 2
    if occluded:
        n *= config.occluded_fraction
    n = int(round(n))
    return int(min(max(n, config.min_box_points), config.max_box_points))


def _sample_box_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    # faces: top, +/- length sides, +/- width sides (no bottom)
    w, l, h = box.w, box.l, box.h
    areas = np.array([w * l, w * h, w * h, l * h, l * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    top, fl, bl, fw, bw = (face == k for k in range(5))
    local[top] = np.stack([u[top] * l, v[top] * w, np.full(top.sum(), h / 2)], 1)
    local[fl] = np.stack([np.full(fl.sum(), l / 2), u[fl] * w, v[fl] * h], 1)
    local[bl] = np.stack([np.full(bl.sum(), -l / 2), u[bl] * w, v[bl] * h], 1)
    local[fw] = np.stack([u[fw] * l, np.full(fw.sum(), w / 2), v[fw] * h], 1)
    local[bw] = np.stack([u[bw] * l, np.full(bw.sum(), -w / 2), v[bw] * h], 1)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.empty_like(local)
    out[:, 0] = box.x + c * local[:, 0] - s * local[:, 1]
    out[:, 1] = box.y + s * local[:, 0] + c * local[:, 1]
    out[:, 2] = box.z + local[:, 2]
    return out


def _in_footprint(p: np.ndarray, box: Box3D, tol: float = 1e-3) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = p[:, 0] - box.x, p[:, 1] - box.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.l / 2 + tol) & (np.abs(v) <= box.w / 2 + tol)


def simulate_lidar(scene: SceneTruth, config: LidarConfig, seed: int) -> PointCloud:
    rng = np.random.default_rng(seed)
    parts = []
    for box, occ, dark in zip(scene.boxes, scene.occluded, scene.lidar_dark):
        parts.append(_sample_box_surface(box, box_point_count(box, config, occ, dark), rng))
    if config.ground_points > 0:
        ext = scene.extent
        r_max = math.hypot(max(abs(ext.x_min), abs(ext.x_max)), max(abs(ext.y_min), abs(ext.y_max)))
        # radius uniform in [r0, r_max] -> areal density falls off as 1/r
        r = rng.uniform(config.ground_min_range, r_max, size=config.ground_points)
        a = rng.uniform(-math.pi, math.pi, size=config.ground_points)
        ground = np.stack([r * np.cos(a), r * np.sin(a), np.zeros_like(r)], 1)
        # a box hides the ground beneath it
        hidden = np.zeros(len(ground), dtype=bool)
        for box in scene.boxes:
            hidden |= _in_footprint(ground, box)
        parts.append(ground[~hidden])
    if not parts:
        return PointCloud(np.zeros((0, 3), dtype=np.float32))
    pts = np.concatenate(parts).astype(np.float32)
    _, _, valid = grid_indices(scene.extent, pts[:, :2])
    return PointCloud(pts[valid])


def count_points_grid(points: np.ndarray, spec: BevGridSpec) -> np.ndarray:
    """Per-cell point counts, float64 ``X x Y``; out-of-range points dropped."""
    counts = np.zeros(spec.shape, dtype=np.float64)
    if len(points) == 0:
        return counts
    i, j, valid = grid_indices(spec, np.asarray(points)[:, :2])
    np.add.at(counts, (i[valid], j[valid]), 1.0)
    return counts


# ---------------------------------------------------------------------------
# oracle teacher features

N_TEACHER_BASE = 4 + N_CLASSES + 2  # objectness, background, classes, log l, log w, sin, cos


@dataclass(frozen=True)
class TeacherConfig:
    channels: int = 8
    scale_min: float = 4.0
    scale_max: float = 40.0
    feature_seed: int = 1234
    bump_truncation: float = 3.0
    background_gain: float = 0.3
    # a box's activation grows with its LiDAR support as n / (n + evidence_half)
    evidence_half: float = 4.0


def bump_sigma(box: Box3D, spec: BevGridSpec) -> float:
    return max(0.25 * (box.w + box.l), 0.75 * min(spec.cell_size_x, spec.cell_size_y))


def _bump(box: Box3D, spec: BevGridSpec, truncation: float) -> np.ndarray:
    cx, cy = spec.cell_centers()
    sig = bump_sigma(box, spec)
    d2 = (cx[:, None] - box.x) ** 2 + (cy[None, :] - box.y) ** 2
    out = np.exp(-0.5 * d2 / sig ** 2)
    out[d2 > (truncation * sig) ** 2] = 0.0
    return out


def _ground_pattern(spec: BevGridSpec) -> np.ndarray:
    cx, cy = spec.cell_centers()
    return 1.0 + 0.5 * np.sin(2 * np.pi * cx / 17.0)[:, None] * np.cos(2 * np.pi * cy / 23.0)[None, :]


def points_on_box(points: np.ndarray, box: Box3D, tol: float = 1e-3) -> int:
    """Returns above the ground plane that fall inside the box's footprint."""
    if len(points) == 0:
        return 0
    p = np.asarray(points[:, :3], dtype=np.float64)
    return int((_in_footprint(p, box, tol) & (p[:, 2] > tol)).sum())


def teacher_base_features(scene: SceneTruth, points: PointCloud, spec: BevGridSpec,
                          config: TeacherConfig) -> np.ndarray:
    base = np.zeros((N_TEACHER_BASE,) + spec.shape, dtype=np.float64)
    for box in scene.boxes:
        n = points_on_box(points.points, box)
        b = _bump(box, spec, config.bump_truncation) * (n / (n + config.evidence_half))
        base[0] += b
        base[2 + box.class_id] += b
        k = 2 + N_CLASSES
        base[k] += math.log(box.l) * b
        base[k + 1] += math.log(box.w) * b
        base[k + 2] += math.sin(box.yaw) * b
        base[k + 3] += math.cos(box.yaw) * b
    counts = count_points_grid(points.points, spec)
    base[1] = config.background_gain * np.log1p(counts) * _ground_pattern(spec)
    return base


def teacher_projection(config: TeacherConfig) -> np.ndarray:
    """Fixed ``D x base`` matrix: channel 0 is objectness, 1 is background,
    the rest are random mixes; every row carries a mismatched scale."""
    if config.channels < 2:
        raise ValueError("teacher needs at least 2 channels")
    rng = np.random.default_rng(config.feature_seed)
    proj = np.zeros((config.channels, N_TEACHER_BASE))
    proj[0, 0] = 1.0
    proj[1, 1] = 1.0
    if config.channels > 2:
        mix = rng.standard_normal((config.channels - 2, N_TEACHER_BASE))
        mix[:, 1] *= 0.3
        proj[2:] = mix / np.linalg.norm(mix, axis=1, keepdims=True)
    scales = np.exp(rng.uniform(math.log(config.scale_min), math.log(config.scale_max),
                                size=config.channels))
    return proj * scales[:, None]


def render_teacher_bev(scene: SceneTruth, points: PointCloud, spec: BevGridSpec,
                       config: TeacherConfig) -> BevFeatureMap:
    base = teacher_base_features(scene, points, spec, config)
    proj = teacher_projection(config)
    data = np.tensordot(proj, base, axes=(1, 0))
    return BevFeatureMap(spec, data.astype(np.float32))


# ---------------------------------------------------------------------------
# camera stand-in

N_CAMERA_BASE = 2 + N_CLASSES + 4


@dataclass(frozen=True)
class CameraConfig:
    channels: int = N_CAMERA_BASE
    noise_sd: float = 0.1
    jitter_sd: float = 0.5      # radial position error (m) at reference range
    jitter_range: float = 50.0  # reference range for jitter/smear scaling
    smear: float = 1.0          # extra radial blur (m) at reference range
    dropout: float = 0.0        # camera-only misses on top of shared occlusion
    ground_level: float = 0.3
    appearance_seed: int = 99


@dataclass
class CameraObservation:
    data: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 3 or not np.all(np.isfinite(d)):
            raise ValueError("camera observation must be a finite C x X x Y array")
        self.data = d


def _appearance(config: CameraConfig) -> np.ndarray:
    rng = np.random.default_rng(config.appearance_seed)
    return rng.uniform(0.2, 1.0, size=(N_CLASSES, N_CLASSES)) + np.eye(N_CLASSES)


def camera_projection(config: CameraConfig) -> np.ndarray:
    if config.channels == N_CAMERA_BASE:
        return np.eye(N_CAMERA_BASE)
    rng = np.random.default_rng(config.appearance_seed + 1)
    return rng.standard_normal((config.channels, N_CAMERA_BASE)) / math.sqrt(N_CAMERA_BASE)


def _camera_blob(x: float, y: float, box: Box3D, spec: BevGridSpec, config: CameraConfig) -> np.ndarray:
    cx, cy = spec.cell_centers()
    dx = cx[:, None] - x
    dy = cy[None, :] - y
    rng_m = math.hypot(x, y)
    if rng_m > 1e-6:
        ux, uy = x / rng_m, y / rng_m
    else:
        ux, uy = 1.0, 0.0
    radial = dx * ux + dy * uy
    tangential = -dx * uy + dy * ux
    sig_t = bump_sigma(box, spec)
    sig_r = sig_t + config.smear * rng_m / config.jitter_range
    return np.exp(-0.5 * (radial ** 2 / sig_r ** 2 + tangential ** 2 / sig_t ** 2))


def _render_camera(scene: SceneTruth, config: CameraConfig, offsets: np.ndarray,
                   keep: np.ndarray) -> np.ndarray:
    spec = scene.extent
    base = np.zeros((N_CAMERA_BASE,) + spec.shape, dtype=np.float64)
    base[1] = config.ground_level * _ground_pattern(spec)
    app = _appearance(config)
    for k, box in enumerate(scene.boxes):
        if not keep[k]:
            continue
        rng_m = math.hypot(box.x, box.y)
        if rng_m > 1e-6:
            x = box.x + offsets[k] * box.x / rng_m
            y = box.y + offsets[k] * box.y / rng_m
        else:
            x, y = box.x, box.y
        b = _camera_blob(x, y, box, spec, config)
        base[0] += b
        base[2:2 + N_CLASSES] += app[box.class_id][:, None, None] * b
        o = 2 + N_CLASSES
        base[o] += (box.l / 4.0) * b
        base[o + 1] += (box.w / 2.0) * b
        base[o + 2] += math.sin(box.yaw) * b
        base[o + 3] += math.cos(box.yaw) * b
    return np.tensordot(camera_projection(config), base, axes=(1, 0))


def render_camera_clean(scene: SceneTruth, config: CameraConfig) -> np.ndarray:
    """Noise-, jitter- and dropout-free camera rendering."""
    n = len(scene.boxes)
    return _render_camera(scene, config, np.zeros(n), np.ones(n, dtype=bool))


def render_camera_background(scene: SceneTruth, config: CameraConfig) -> np.ndarray:
    n = len(scene.boxes)
    return _render_camera(scene, config, np.zeros(n), np.zeros(n, dtype=bool))


def render_camera_observation(scene: SceneTruth, config: CameraConfig, seed: int) -> CameraObservation:
    rng = np.random.default_rng(seed)
    n = len(scene.boxes)
    ranges = np.array([math.hypot(b.x, b.y) for b in scene.boxes])
    offsets = rng.standard_normal(n) * config.jitter_sd * ranges / config.jitter_range
    keep = (rng.uniform(size=n) >= config.dropout) & ~np.asarray(scene.occluded, dtype=bool)
    data = _render_camera(scene, config, offsets, keep)
    if config.noise_sd > 0:
        data = data + config.noise_sd * rng.standard_normal(data.shape)
    return CameraObservation(data.astype(np.float32), int(seed))


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def stream_seed(*keys: int) -> int:
    """Derive an independent 63-bit seed from integer keys."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def box_support(scene: SceneTruth, spec: BevGridSpec, truncation: float) -> np.ndarray:
    sup = np.zeros(spec.shape, dtype=bool)
    for box in scene.boxes:
        sup |= _bump(box, spec, truncation) > 0
    return sup

