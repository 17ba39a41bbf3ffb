from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bevpretrain.data import WorldConfig
from bevpretrain.grid import BevGridSpec
from bevpretrain.scene import LidarConfig, SceneConfig

SMALL_GRID = BevGridSpec(-12.8, 12.8, -12.8, 12.8, 16, 16)


def small_world() -> WorldConfig:
    """16x16 grid with one to three boxes per scene; fast enough for unit tests."""
    return WorldConfig(
        grid=SMALL_GRID,
        scene=SceneConfig(min_boxes=1, max_boxes=3, margin=1.0, ego_clearance=2.0),
        lidar=LidarConfig(ground_points=400),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def world():
    return small_world()


SMALL_CONFIG = {
    "seed": 0,
    "data": {"n_train": 6, "n_heldout": 2, "n_unlabeled": 2},
    "grid": SMALL_GRID.to_dict(),
    "scene": {"min_boxes": 1, "max_boxes": 3, "margin": 1.0, "ego_clearance": 2.0},
    "lidar": {"ground_points": 400},
    "run": {"pretrain_epochs": 2, "finetune_epochs": 2, "batch_size": 4, "teacher_head_steps": 20},
}


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
