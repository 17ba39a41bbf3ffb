from __future__ import annotations

import json

import numpy as np
import pytest
from conftest import SMALL_CONFIG, small_world

from bevpretrain.config import ConfigError, apply_overrides, config_from_dict, load_config, parse_override
from bevpretrain.data import build_dataset, load_dataset, plan_scenes, read_manifest, write_dataset


def test_plan_is_deterministic_and_disjoint():
    a = plan_scenes(3, 10, 4, 5)
    assert a == plan_scenes(3, 10, 4, 5)
    splits = [r[2] for r in a]
    assert splits.count("heldout") == 4 and splits.count("train") == 15
    assert len({r[0] for r in a}) == len(a)
    assert all(r[3] is False for r in a if r[0].startswith("U"))


def test_pretrain_split_ratio_semantics():
    ds = build_dataset(small_world(), 0, 4, 1, 4)
    assert len(ds.pretrain_split(0.5)) == 2
    assert len(ds.pretrain_split(1.0)) == 4
    full = ds.pretrain_split(2.0)
    assert len(full) == 8
    assert sum(full.is_labeled(k) for k in range(len(full))) == 4
    with pytest.raises(ValueError):
        ds.pretrain_split(2.5)


def test_camera_and_labels_are_not_counted():
    ds = build_dataset(small_world(), 0, 3, 1, 0)
    for k in range(len(ds.train)):
        ds.train.camera(k)
        ds.train.labels(k)
    assert ds.train.counter.lidar_reads == 0
    ds.train.teacher(0)
    ds.train.points(1)
    assert ds.train.counter.reads == {"points": 1, "teacher": 1, "mask": 0}
    # all splits share one counter
    assert ds.heldout.counter is ds.train.counter


def test_unlabeled_frames_hide_labels():
    ds = build_dataset(small_world(), 0, 2, 0, 1)
    with pytest.raises(KeyError):
        ds.unlabeled.labels(0)


def test_disk_round_trip(tmp_path):
    world = small_world()
    write_dataset(tmp_path, world, 5, 3, 1, 2, "abc")
    mem = build_dataset(world, 5, 3, 1, 2)
    disk = load_dataset(tmp_path)
    for a, b in ((mem.train, disk.train), (mem.heldout, disk.heldout), (mem.unlabeled, disk.unlabeled)):
        assert a.ids == b.ids
        for k in range(len(a)):
            np.testing.assert_array_equal(a.camera(k), b.camera(k))
            np.testing.assert_array_equal(a.teacher(k), b.teacher(k))
            np.testing.assert_array_equal(a.points(k).points, b.points(k).points)
            if a.is_labeled(k):
                assert a.labels(k).to_json() == b.labels(k).to_json()
    manifest = read_manifest(tmp_path)
    assert manifest["n_scenes"] == 6 and manifest["config_hash"] == "abc"


def test_synth_is_byte_deterministic(tmp_path):
    world = small_world()
    m1 = write_dataset(tmp_path / "a", world, 1, 3, 1, 0, "h")
    m2 = write_dataset(tmp_path / "b", world, 1, 3, 1, 0, "h")
    assert m1["content_hash"] == m2["content_hash"]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_default_config_and_hashes():
    cfg = config_from_dict({})
    assert cfg.run.n_train == 200 and cfg.run.n_heldout == 20
    assert cfg.world.grid.shape == (64, 64)
    other = config_from_dict({"run": {"lambda_corr": 2.0}})
    assert cfg.config_hash != other.config_hash
    assert cfg.data_hash == other.data_hash
    seeded = config_from_dict({"seed": 3})
    assert seeded.data_hash != cfg.data_hash and seeded.run.seed == 3


def test_config_round_trips_through_dict():
    cfg = config_from_dict(SMALL_CONFIG)
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.config_hash == cfg.config_hash


@pytest.mark.parametrize("doc", [
    {"bogus": {}},
    {"run": {"learning": 1}},
    {"run": {"lambda_corr": "high"}},
    {"run": {"use_mask": 1}},
    {"run": {"n_train": 5}},
    {"mask": {"regularizer": "cubic"}},
    {"grid": {"cells_x": 0}},
    {"seed": -1},
    {"data": {"n_train": 0}},
    [1, 2],
])
def test_invalid_configs_are_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_overrides_and_file_loading(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("run:\n  lambda_corr: 0.5\nmask:\n  gate_quantile: 0.5\n")
    cfg = load_config(path, ["run.lambda_corr=2", "scene.max_boxes=6"], seed=9)
    assert cfg.run.lambda_corr == 2.0
    assert cfg.run.mask.gate_quantile == 0.5
    assert cfg.world.scene.max_boxes == 6
    assert cfg.seed == 9 and cfg.run.seed == 9
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])
    with pytest.raises(ConfigError):
        parse_override("no_equals_sign")
    with pytest.raises(ConfigError):
        apply_overrides({"run": 3}, ["run.x=1"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("run: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_stage_hashes_track_only_their_inputs():
    base = config_from_dict({})
    mask = config_from_dict({"mask": {"regularizer": "sigmoid"}})
    ft = config_from_dict({"run": {"finetune_epochs": 3, "freeze_head": True}})
    eps = config_from_dict({"run": {"whiten_eps": 1e-4}})
    assert mask.stage_hash("stats") == base.stage_hash("stats")
    assert mask.stage_hash("masks") != base.stage_hash("masks")
    assert mask.stage_hash("teacher_head") == base.stage_hash("teacher_head")
    assert ft.stage_hash("pretrained") == base.stage_hash("pretrained")
    assert ft.stage_hash("finetuned") != base.stage_hash("finetuned")
    assert all(eps.stage_hash(s) != base.stage_hash(s) for s in ("stats", "masks", "teacher_head", "pretrained"))
    with pytest.raises(ValueError):
        base.stage_hash("nope")
