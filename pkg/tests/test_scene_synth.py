from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import SMALL_GRID

from bevpretrain.grid import BevGridSpec, grid_index
from bevpretrain.scene import (
    Box3D, CameraConfig, LidarConfig, PointCloud, SceneConfig, SceneTruth, TeacherConfig, box_point_count,
    generate_scene, render_camera_background, render_camera_clean, render_camera_observation,
    render_teacher_bev, simulate_lidar, wrap_yaw,
)

SPEC = BevGridSpec()
NO_GROUND = LidarConfig(ground_points=0)


def test_generate_scene_is_deterministic():
    a = generate_scene(SceneConfig(), SPEC, 7)
    b = generate_scene(SceneConfig(), SPEC, 7)
    assert a.to_json() == b.to_json()


def test_forced_box_count():
    scene = generate_scene(SceneConfig(min_boxes=5, max_boxes=5), SPEC, 3)
    assert len(scene.boxes) == 5


def test_centers_inside_extent_and_no_overlap():
    for seed in range(20):
        scene = generate_scene(SceneConfig(), SPEC, seed)
        for k, b in enumerate(scene.boxes):
            assert SPEC.contains(b.x, b.y)
            assert -math.pi < b.yaw <= math.pi
            for c in scene.boxes[k + 1:]:
                assert math.hypot(b.x - c.x, b.y - c.y) >= 0.5 * (math.hypot(b.w, b.l) + math.hypot(c.w, c.l)) - 1e-9


def test_scene_json_round_trip():
    scene = generate_scene(SceneConfig(), SPEC, 11)
    back = SceneTruth.from_json(scene.to_json())
    assert back.to_json() == scene.to_json()
    assert back.boxes == scene.boxes


def test_invalid_scene_config():
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(min_boxes=4, max_boxes=2), SPEC, 0)
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(class_probs=(0.5, 0.5, 0.5)), SPEC, 0)


def test_box_validation_and_yaw_wrap():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, -1, 1, 1, 0)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 1, 1, 1, 4.0)
    assert wrap_yaw(-math.pi) == math.pi
    assert wrap_yaw(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_empty_scene_without_ground_has_no_points():
    scene = SceneTruth([], SPEC, 0)
    assert len(simulate_lidar(scene, NO_GROUND, 0)) == 0


def test_near_box_gets_at_least_as_many_points():
    near = Box3D(6.0, 0.0, 0.85, 1.9, 1.7, 4.6, 0.0)
    far = replace(near, x=40.0)
    assert box_point_count(near, NO_GROUND) >= box_point_count(far, NO_GROUND)
    n_near = len(simulate_lidar(SceneTruth([near], SPEC, 0), NO_GROUND, 1))
    n_far = len(simulate_lidar(SceneTruth([far], SPEC, 0), NO_GROUND, 1))
    assert n_near >= n_far


def test_lidar_dark_box_returns_nothing():
    box = Box3D(10.0, 0.0, 0.85, 1.9, 1.7, 4.6, 0.0)
    scene = SceneTruth([box], SPEC, 0, lidar_dark=[True])
    assert len(simulate_lidar(scene, NO_GROUND, 0)) == 0


def test_ground_points_never_fall_under_a_box():
    box = Box3D(6.0, 0.0, 1.5, 2.5, 3.0, 8.0, 0.3)
    pts = simulate_lidar(SceneTruth([box], SPEC, 0), LidarConfig(ground_points=20000), 0).points
    ground = pts[pts[:, 2] == 0]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * (ground[:, 0] - box.x) + s * (ground[:, 1] - box.y)
    v = -s * (ground[:, 0] - box.x) + c * (ground[:, 1] - box.y)
    assert not np.any((np.abs(u) < box.l / 2) & (np.abs(v) < box.w / 2))


def test_lidar_is_deterministic():
    scene = generate_scene(SceneConfig(), SPEC, 5)
    a = simulate_lidar(scene, LidarConfig(), 9).points
    b = simulate_lidar(scene, LidarConfig(), 9).points
    np.testing.assert_array_equal(a, b)


def test_teacher_empty_scene_is_zero():
    scene = SceneTruth([], SPEC, 0)
    fm = render_teacher_bev(scene, simulate_lidar(scene, NO_GROUND, 0), SPEC, TeacherConfig())
    assert not np.any(fm.data)


def test_teacher_objectness_peaks_at_box_center():
    for x, y in ((10.3, -7.1), (-30.0, 22.5), (4.9, 40.2)):
        box = Box3D(x, y, 0.85, 1.9, 1.7, 4.6, 0.4)
        scene = SceneTruth([box], SPEC, 0)
        fm = render_teacher_bev(scene, simulate_lidar(scene, NO_GROUND, 0), SPEC, TeacherConfig())
        act = np.abs(fm.data[0])
        i, j = np.unravel_index(np.argmax(act), act.shape)
        assert (i, j) == grid_index(SPEC, x, y)


def test_teacher_is_additive_over_disjoint_boxes():
    a = Box3D(-25.0, -20.0, 0.85, 1.9, 1.7, 4.6, 0.1)
    b = Box3D(25.0, 20.0, 0.85, 1.9, 1.7, 4.6, -1.0)
    cfg = TeacherConfig()

    # same point sets per box: simulate each separately and merge for the union
    sa, sb = SceneTruth([a], SPEC, 0), SceneTruth([b], SPEC, 0)
    pa, pb = simulate_lidar(sa, NO_GROUND, 0), simulate_lidar(sb, NO_GROUND, 0)
    union = render_teacher_bev(SceneTruth([a, b], SPEC, 0), PointCloud(np.concatenate([pa.points, pb.points])),
                               SPEC, cfg).data.astype(np.float64)
    ta = render_teacher_bev(sa, pa, SPEC, cfg).data.astype(np.float64)
    tb = render_teacher_bev(sb, pb, SPEC, cfg).data.astype(np.float64)
    np.testing.assert_allclose(union, ta + tb, rtol=1e-6, atol=1e-5)
    assert np.abs(ta).sum() > 0 and np.abs(tb).sum() > 0


def test_teacher_ignores_box_without_returns():
    box = Box3D(10.0, 0.0, 0.85, 1.9, 1.7, 4.6, 0.0)
    scene = SceneTruth([box], SPEC, 0, lidar_dark=[True])
    fm = render_teacher_bev(scene, simulate_lidar(scene, NO_GROUND, 0), SPEC, TeacherConfig())
    assert not np.any(fm.data)


def test_camera_without_corruption_equals_clean_render():
    scene = generate_scene(replace(SceneConfig(), occlusion_prob=0.0), SPEC, 4)
    cfg = CameraConfig(noise_sd=0.0, jitter_sd=0.0, dropout=0.0)
    obs = render_camera_observation(scene, cfg, 1)
    np.testing.assert_array_equal(obs.data, render_camera_clean(scene, cfg).astype(np.float32))


def test_full_dropout_leaves_background():
    scene = generate_scene(SceneConfig(), SPEC, 4)
    cfg = CameraConfig(noise_sd=0.0, jitter_sd=0.0, dropout=1.0)
    obs = render_camera_observation(scene, cfg, 1)
    np.testing.assert_array_equal(obs.data, render_camera_background(scene, cfg).astype(np.float32))


def test_occluded_box_is_missing_from_camera():
    box = Box3D(10.0, 0.0, 0.85, 1.9, 1.7, 4.6, 0.0)
    cfg = CameraConfig(noise_sd=0.0, jitter_sd=0.0)
    hidden = render_camera_observation(SceneTruth([box], SPEC, 0, occluded=[True]), cfg, 0)
    np.testing.assert_array_equal(hidden.data, render_camera_background(SceneTruth([box], SPEC, 0), cfg)
                                  .astype(np.float32))


def test_camera_is_deterministic():
    scene = generate_scene(SceneConfig(), SMALL_GRID, 2)
    a = render_camera_observation(scene, CameraConfig(), 3).data
    b = render_camera_observation(scene, CameraConfig(), 3).data
    np.testing.assert_array_equal(a, b)
