from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest
from conftest import SMALL_CONFIG

from bevpretrain.cli import main


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


def run(cfg_path, out, *args):
    return main(["--config", cfg_path, "--out", str(out), *args])


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "bevpretrain.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "maskgen", "stats", "pretrain", "finetune", "gradcheck", "eval", "ablate"):
        assert name in proc.stdout


@pytest.mark.parametrize("argv", [[], ["nope"], ["synth", "--seed", "x"], ["ablate"]])
def test_bad_arguments_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bad_config_and_threads_exit_two(tmp_path, cfg_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"run": {"no_such_key": 1}}))
    assert main(["--config", str(bad), "--out", str(tmp_path / "o"), "synth"]) == 2
    assert run(cfg_path, tmp_path / "o", "--threads", "0", "synth") == 2
    assert run(cfg_path, tmp_path / "o", "--set", "run.lambda_corr=-1", "synth") == 2


def test_synth_is_deterministic_and_counts(tmp_path, cfg_path):
    assert run(cfg_path, tmp_path / "a", "synth") == 0
    assert run(cfg_path, tmp_path / "b", "synth") == 0
    ma = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "data" / "manifest.json").read_text())
    assert ma["content_hash"] == mb["content_hash"]
    splits = [s["split"] for s in ma["scenes"]]
    assert splits.count("train") == 6 + 2 and splits.count("heldout") == 2
    assert run(cfg_path, tmp_path / "c", "--seed", "7", "synth") == 0
    mc = json.loads((tmp_path / "c" / "data" / "manifest.json").read_text())
    assert mc["content_hash"] != ma["content_hash"]


def test_existing_output_needs_overwrite(tmp_path, cfg_path):
    assert run(cfg_path, tmp_path, "synth") == 0
    assert run(cfg_path, tmp_path, "synth") == 2
    assert run(cfg_path, tmp_path, "--overwrite", "synth") == 0


def test_unwritable_output_exits_two(tmp_path, cfg_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(cfg_path, blocker / "run", "synth") == 2


def test_stage_order_and_hash_checks(tmp_path, cfg_path):
    assert run(cfg_path, tmp_path, "stats") == 2  # no data yet
    assert run(cfg_path, tmp_path, "synth") == 0
    assert run(cfg_path, tmp_path, "--set", "scene.max_boxes=2", "stats") == 2  # data hash mismatch
    assert run(cfg_path, tmp_path, "stats") == 0
    assert run(cfg_path, tmp_path, "pretrain") == 2  # masks missing
    assert run(cfg_path, tmp_path, "--set", "run.whiten_eps=1e-4", "maskgen") == 2  # stats hash mismatch
    # a loss weight does not feed the masks, so the stats stay valid
    assert run(cfg_path, tmp_path, "--set", "run.lambda_corr=3", "maskgen") == 0


def test_flags_scope_artifact_hashes(tmp_path, cfg_path):
    for cmd in (["synth"], ["stats"], ["maskgen", "--regularizer", "sigmoid", "--sigma", "0.8"]):
        assert run(cfg_path, tmp_path, *cmd) == 0, cmd
    assert run(cfg_path, tmp_path, "pretrain") == 2  # masks were built with other mask settings
    same = ["--set", "mask.regularizer=sigmoid", "--set", "mask.sigma=0.8"]
    assert run(cfg_path, tmp_path, *same, "pretrain") == 0
    # finetune-only settings reuse the pretrained checkpoint
    assert run(cfg_path, tmp_path, *same, "finetune", "--freeze-head") == 0
    assert run(cfg_path, tmp_path, "eval") == 0
    assert run(cfg_path, tmp_path, *same, "finetune", "--name", "again",
               "--init", str(tmp_path / "finetune" / "checkpoint")) == 2  # not a pretrained checkpoint
    assert run(cfg_path, tmp_path, "--seed", "3", "eval", "--name", "other") == 2  # different dataset


def test_full_chain(tmp_path, cfg_path):
    for cmd in (["synth"], ["stats"], ["maskgen"], ["pretrain"], ["finetune"], ["finetune", "--scratch"],
                ["eval"], ["eval", "--checkpoint", str(tmp_path / "finetune_scratch" / "checkpoint"),
                           "--name", "scratch"]):
        assert run(cfg_path, tmp_path, *cmd) == 0, cmd
    ft = json.loads((tmp_path / "finetune" / "summary.json").read_text())
    assert ft["lidar_reads_during_finetune"] == 0 and ft["inherit_head"] is True
    assert ft["heldout_det_final"] < ft["heldout_det_initial"]
    ev = json.loads((tmp_path / "eval" / "finetuned.json").read_text())
    assert ev["heldout_det"] == pytest.approx(ft["heldout_det_final"], rel=1e-12)
    assert ev["lidar_reads"] == 0
    lines = (tmp_path / "pretrain" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(s)["epoch"] for s in lines] == list(range(1, SMALL_CONFIG["run"]["pretrain_epochs"] + 1))
    assert (tmp_path / "teacher_head" / "manifest.json").exists()


def test_gradcheck_passes(tmp_path, cfg_path):
    assert run(cfg_path, tmp_path, "gradcheck", "--instances", "3") == 0
    report = json.loads((tmp_path / "gradcheck" / "report.json").read_text())
    assert report["passed"] and all(c["passed"] for c in report["checks"])


def test_ablate_writes_one_row_per_cell(tmp_path, cfg_path):
    assert run(cfg_path, tmp_path, "ablate", "--preset", "components", "--n-seeds", "1") == 0
    with open(tmp_path / "ablate" / "components.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["cell"] for r in rows] == ["scratch", "pretrain", "pretrain+mask", "pretrain+mask+tgc"]
    assert run(cfg_path, tmp_path / "x", "ablate", "--preset", "nope", "--n-seeds", "1") == 2
    assert run(cfg_path, tmp_path / "y", "ablate", "--preset", "components", "--n-seeds", "0") == 2
