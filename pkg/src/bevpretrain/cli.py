"""Command-line entry point.

Every subcommand works inside one run directory (``--out``)::

    data/                 synth: manifest, scenes/, points/, teacher/, camera/
    data/masks/           maskgen: one weight mask per scene
    stats/whitening.json  stats: per-channel teacher statistics
    teacher_head/         fitted teacher detection head (checkpoint)
    <stage>/              pretrain / finetune: checkpoint/, metrics.jsonl, timing.jsonl, summary.json
    eval/<name>.json      eval summaries
    gradcheck/report.json
    ablate/<preset>.csv   per-cell summary (plus <preset>_runs.csv per seed)

Exit codes: 0 success, 1 property or run failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, load_dataset, read_manifest, write_dataset
from .grid import BevFeatureMap
from .masks import build_mask
from .optim import NonFiniteGradientError
from .student import HEAD_KEYS, StudentModel, TeacherHead
from .tensorio import TensorFileError, read_tensor, write_tensor
from .trainer import NonFiniteLossError, evaluate, finetune, fit_teacher_head, pretrain, student_for
from .whitening import ChannelStats, FeatureWhitener

log = logging.getLogger("bevpretrain")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
STAGES = ("pretrained", "finetuned", "scratch")


class UsageError(Exception):
    """Bad invocation, missing inputs or mismatched artifacts (exit 2)."""


# ---------------------------------------------------------------------------
# artifact helpers


def _prepare_dir(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()) if path.is_dir() else path.exists():
        if not overwrite:
            raise UsageError(f"{path} already exists; pass --overwrite to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {path}: {exc.strerror}") from None
    return path


def _prepare_file(path: Path, overwrite: bool) -> Path:
    if path.exists() and not overwrite:
        raise UsageError(f"{path} already exists; pass --overwrite to replace it")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {path.parent}: {exc.strerror}") from None
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise UsageError(f"missing artifact {path}")
    return json.loads(path.read_text())


def _check_hash(found: Optional[str], expected: str, what: str) -> None:
    if found != expected:
        raise UsageError(f"{what} was produced with config hash {found}, current config hash is {expected}; "
                         "rerun the upstream command with this config")


def save_checkpoint(root: Path, params: dict, stage: str, cfg: ExperimentConfig, extra: Optional[dict] = None):
    if stage not in STAGES + ("teacher_head",):
        raise ValueError(f"unknown stage tag {stage!r}")
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        fname = f"{name}.bdkt"
        write_tensor(root / fname, arr)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"stage": stage, "config_hash": cfg.stage_hash(stage), "data_hash": cfg.data_hash, "params": entries}
    if extra:
        manifest.update(extra)
    _write_json(root / "manifest.json", manifest)


def load_checkpoint(root: Path) -> tuple[dict, dict]:
    manifest = _read_json(root / "manifest.json")
    params = {}
    for e in manifest["params"]:
        arr = read_tensor(root / e["file"])
        if list(arr.shape) != e["shape"]:
            raise UsageError(f"checkpoint tensor {e['name']} has shape {arr.shape}, manifest says {e['shape']}")
        params[e["name"]] = np.array(arr, dtype=np.float64)
    return params, manifest


# ---------------------------------------------------------------------------
# shared loading


class Workspace:
    def __init__(self, cfg: ExperimentConfig, out: Path, overwrite: bool):
        self.cfg = cfg
        self.out = out
        self.overwrite = overwrite

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    def dataset(self) -> Dataset:
        try:
            manifest = read_manifest(self.data_dir)
        except FileNotFoundError as exc:
            raise UsageError(f"{exc}; run `synth` first") from None
        _check_hash(manifest.get("config_hash"), self.cfg.data_hash, "dataset")
        return load_dataset(self.data_dir)

    def whitener(self) -> FeatureWhitener:
        doc = _read_json(self.out / "stats" / "whitening.json")
        _check_hash(doc.get("config_hash"), self.cfg.stage_hash("stats"), "whitening stats")
        return FeatureWhitener.from_stats(ChannelStats.from_json(json.dumps(doc["stats"])))

    def teacher_head(self, ds: Dataset, wh: Optional[FeatureWhitener]) -> TeacherHead:
        """Load the cached teacher head or fit it (deterministic) and cache it."""
        root = self.out / "teacher_head"
        if (root / "manifest.json").exists():
            params, manifest = load_checkpoint(root)
            _check_hash(manifest.get("config_hash"), self.cfg.stage_hash("teacher_head"), "teacher head")
            return TeacherHead.from_params(params)
        head = fit_teacher_head(ds.train, self.cfg.run, wh)
        save_checkpoint(root, head.params_, "teacher_head", self.cfg,
                        {"loss_curve": [float(v) for v in (head.loss_curve_[0], head.loss_curve_[-1])]})
        return head


class _MetricsWriter:
    """metrics.jsonl gets the deterministic fields; wall-clock time goes to timing.jsonl."""

    def __init__(self, stage_dir: Path):
        self.metrics = (stage_dir / "metrics.jsonl").open("w")
        self.timing = (stage_dir / "timing.jsonl").open("w")

    def __call__(self, rec: dict) -> None:
        rec = dict(rec)
        elapsed = rec.pop("elapsed_s", None)
        self.metrics.write(json.dumps(rec, sort_keys=True) + "\n")
        self.metrics.flush()
        if elapsed is not None:
            self.timing.write(json.dumps({"epoch": rec.get("epoch"), "elapsed_s": elapsed}) + "\n")

    def close(self) -> None:
        self.metrics.close()
        self.timing.close()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ws: Workspace, args) -> int:
    cfg = ws.cfg
    root = _prepare_dir(ws.data_dir, ws.overwrite)
    d = cfg.data
    manifest = write_dataset(root, cfg.world, cfg.seed, d.n_train, d.n_heldout, d.n_unlabeled,
                             cfg.data_hash, cfg.data_dict())
    print(f"synth: {manifest['n_scenes']} scenes -> {root} (content {manifest['content_hash'][:16]})")
    return EXIT_OK


def cmd_stats(ws: Workspace, args) -> int:
    ds = ws.dataset()
    path = _prepare_file(ws.out / "stats" / "whitening.json", ws.overwrite)
    run = ws.cfg.run
    pool = ds.pool()
    wh = FeatureWhitener(epsilon=run.whiten_eps, nonzero_only=run.whiten_nonzero_only)
    wh.fit(pool.teacher(k) for k in range(len(pool)))
    _write_json(path, {"config_hash": ws.cfg.stage_hash("stats"), "n_frames": len(pool),
                       "stats": json.loads(wh.stats_.to_json())})
    print(f"stats: {len(pool)} frames, variance range "
          f"[{wh.var_.min():.4g}, {wh.var_.max():.4g}] -> {path}")
    return EXIT_OK


def cmd_maskgen(ws: Workspace, args) -> int:
    ds = ws.dataset()
    run = ws.cfg.run
    wh = ws.whitener() if run.whiten else None
    root = _prepare_dir(ws.data_dir / "masks", ws.overwrite)
    pool = ds.pool().join(ds.heldout)
    grid = pool.grid
    ids = pool.ids
    for k, sid in enumerate(ids):
        raw = pool.teacher(k)
        prior = raw if (wh is None or run.raw_teacher_prior) else wh.transform(raw)
        R = build_mask(pool.points(k), BevFeatureMap(grid, prior), grid, run.mask)
        write_tensor(root / f"{sid}.bdkt", R.data)
    _write_json(root / "manifest.json", {"config_hash": ws.cfg.stage_hash("masks"), "n_masks": len(ids),
                                         "mask": json.loads(json.dumps(ws.cfg.to_dict()["mask"]))})
    print(f"maskgen: {len(ids)} masks -> {root}")
    return EXIT_OK


def _check_masks(ws: Workspace) -> None:
    path = ws.data_dir / "masks" / "manifest.json"
    if not path.exists():
        raise UsageError(f"missing masks at {path.parent}; run `maskgen` first")
    _check_hash(_read_json(path).get("config_hash"), ws.cfg.stage_hash("masks"), "masks")


def cmd_pretrain(ws: Workspace, args) -> int:
    run = ws.cfg.run
    if not run.does_pretrain:
        raise UsageError("pretraining is disabled in this config (run.pretrain false or ratio 0)")
    ds = ws.dataset()
    wh = ws.whitener() if run.whiten else None
    if run.use_mask:
        _check_masks(ws)
    head = ws.teacher_head(ds, wh) if (run.use_tgc and run.pretrain_ratio > 1) else None
    stage_dir = _prepare_dir(ws.out / (args.name or "pretrain"), ws.overwrite)
    store = ds.pretrain_split(run.pretrain_ratio)
    student = student_for(ds.train, run, ws.cfg.world.teacher.channels)
    emit = _MetricsWriter(stage_dir)
    try:
        student, phi1, trace = pretrain(student, store, run, wh, head, ds.heldout,
                                        dump_dir=stage_dir, on_epoch=emit)
    finally:
        emit.close()
    params = dict(student.params)
    params.update({f"phi1.{k}": v for k, v in phi1.params.items()})
    save_checkpoint(stage_dir / "checkpoint", params, "pretrained", ws.cfg)
    summary = {
        "stage": "pretrain", "config_hash": ws.cfg.stage_hash("pretrained"), "data_hash": ws.cfg.data_hash,
        "n_frames": len(store), "epochs": run.pretrain_epochs,
        "heldout_masked_rec_initial": trace[0]["heldout_masked_rec"],
        "heldout_masked_rec_final": trace[-1]["heldout_masked_rec"],
        "final": {k: trace[-1][k] for k in ("l_rec", "l_corr", "l_total")},
        "lidar_reads": dict(ds.train.counter.reads),
    }
    _write_json(stage_dir / "summary.json", summary)
    print(f"pretrain: masked rec {summary['heldout_masked_rec_initial']:.4f} -> "
          f"{summary['heldout_masked_rec_final']:.4f}; checkpoint -> {stage_dir / 'checkpoint'}")
    return EXIT_OK


def cmd_finetune(ws: Workspace, args) -> int:
    run = ws.cfg.run
    ds = ws.dataset()
    if args.scratch:
        student = student_for(ds.train, run, ws.cfg.world.teacher.channels)
        stage, init = "scratch", "random"
    else:
        init_dir = Path(args.init) if args.init else ws.out / "pretrain" / "checkpoint"
        params, manifest = load_checkpoint(init_dir)
        if manifest.get("stage") != "pretrained":
            raise UsageError(f"checkpoint {init_dir} is a {manifest.get('stage')!r} checkpoint, not a pretrained one")
        _check_hash(manifest.get("config_hash"), ws.cfg.stage_hash("pretrained"), f"checkpoint {init_dir}")
        student = StudentModel({k: v for k, v in params.items() if not k.startswith("phi1.")}, run.seed)
        stage, init = "finetuned", str(init_dir)
    inherit = run.inherit_head and not args.scratch
    head = None
    if inherit:
        wh = ws.whitener() if run.whiten else None
        head = ws.teacher_head(ds, wh)
    stage_dir = _prepare_dir(ws.out / (args.name or ("finetune_scratch" if args.scratch else "finetune")),
                             ws.overwrite)
    before = ds.train.counter.lidar_reads
    emit = _MetricsWriter(stage_dir)
    try:
        student, trace = finetune(student, ds.train, run, head, inherit=inherit, heldout=ds.heldout,
                                  dump_dir=stage_dir, on_epoch=emit)
    finally:
        emit.close()
    reads = ds.train.counter.lidar_reads - before
    save_checkpoint(stage_dir / "checkpoint", student.params, stage, ws.cfg)
    summary = {
        "stage": "finetune", "init": init, "inherit_head": inherit,
        "config_hash": ws.cfg.config_hash, "data_hash": ws.cfg.data_hash, "epochs": run.finetune_epochs,
        "heldout_det_initial": trace[0]["heldout_det"],
        "heldout_det_epoch1": trace[1]["heldout_det"] if len(trace) > 1 else None,
        "heldout_det_final": trace[-1]["heldout_det"],
        "lidar_reads_during_finetune": reads,
    }
    _write_json(stage_dir / "summary.json", summary)
    print(f"finetune ({stage}): held-out loss {summary['heldout_det_initial']:.4f} -> "
          f"{summary['heldout_det_final']:.4f}; LiDAR reads {reads}")
    if reads:
        log.error("finetuning read %d LiDAR-side artifacts", reads)
        return EXIT_FAIL
    return EXIT_OK


def cmd_eval(ws: Workspace, args) -> int:
    ds = ws.dataset()
    ckpt = Path(args.checkpoint) if args.checkpoint else ws.out / "finetune" / "checkpoint"
    params, manifest = load_checkpoint(ckpt)
    if manifest.get("stage") not in STAGES:
        raise UsageError(f"checkpoint {ckpt} has unknown stage {manifest.get('stage')!r}")
    # the held-out loss depends only on the parameters and the data, so any
    # checkpoint trained on this dataset can be evaluated
    _check_hash(manifest.get("data_hash"), ws.cfg.data_hash, f"checkpoint {ckpt}")
    if any(k not in params for k in HEAD_KEYS):
        raise UsageError(f"checkpoint {ckpt} has no detection head")
    student = StudentModel({k: v for k, v in params.items() if not k.startswith("phi1.")}, ws.cfg.seed)
    name = args.name or manifest["stage"]
    path = _prepare_file(ws.out / "eval" / f"{name}.json", ws.overwrite)
    before = ds.heldout.counter.lidar_reads
    loss = evaluate(student, ds.heldout)
    summary = {"checkpoint": str(ckpt), "stage": manifest["stage"], "checkpoint_hash": manifest["config_hash"],
               "data_hash": ws.cfg.data_hash,
               "n_heldout": len(ds.heldout), "heldout_det": loss,
               "lidar_reads": ds.heldout.counter.lidar_reads - before}
    _write_json(path, summary)
    print(f"eval ({manifest['stage']}): held-out surrogate loss {loss:.6f} -> {path}")
    return EXIT_OK


def cmd_gradcheck(ws: Workspace, args) -> int:
    from .gradcheck import gradcheck_report

    report = gradcheck_report(args.instances, ws.cfg.seed)
    path = _prepare_file(ws.out / "gradcheck" / "report.json", ws.overwrite)
    _write_json(path, {k: v for k, v in report.items() if k != "elapsed_s"})
    for c in report["checks"]:
        flag = "ok  " if c["passed"] else "FAIL"
        print(f"{flag} {c['name']:<24} instances={c['instances']:<3} max|dev|={c['max_abs_dev']:.3e} "
              f"dev/tol={c['max_tol_ratio']:.3e}")
    print(f"gradcheck: {'passed' if report['passed'] else 'FAILED'} in {report['elapsed_s']:.1f}s -> {path}")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_ablate(ws: Workspace, args) -> int:
    from .pipeline import ROW_FIELDS, SUMMARY_FIELDS, preset_cells, run_ablation, write_csv

    cfg = ws.cfg
    try:
        cells = preset_cells(args.preset, cfg.run)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    if args.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    seeds = [cfg.seed + k for k in range(args.n_seeds)]
    out_csv = _prepare_file(ws.out / "ablate" / f"{args.preset}.csv", ws.overwrite)
    runs_csv = _prepare_file(ws.out / "ablate" / f"{args.preset}_runs.csv", ws.overwrite)

    def progress(row):
        log.info("seed %s %-20s held-out %.5f", row["seed"], row["cell"], row["heldout_det"])

    rows, summary = run_ablation(cells, seeds, cfg.world, n_unlabeled=0, progress=progress)
    write_csv(runs_csv, rows, ROW_FIELDS)
    write_csv(out_csv, summary, SUMMARY_FIELDS)
    for s in summary:
        print(f"{s['cell']:<20} held-out {s['heldout_det_mean']:.5f} +- {s['heldout_det_std']:.5f} "
              f"(epoch 1: {s['heldout_det_epoch1_mean']:.5f})")
    print(f"ablate: {len(summary)} rows -> {out_csv}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "synthesize scenes, point clouds, teacher maps and camera observations"),
    "stats": (cmd_stats, "compute per-channel whitening statistics over the pretraining pool"),
    "maskgen": (cmd_maskgen, "generate LiDAR-guided weight masks for every scene"),
    "pretrain": (cmd_pretrain, "stage 1: cross-modal pretraining of the camera student"),
    "finetune": (cmd_finetune, "stage 2: detection finetuning from camera observations only"),
    "eval": (cmd_eval, "held-out surrogate detection loss of a checkpoint"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every analytic gradient"),
    "ablate": (cmd_ablate, "run an ablation preset over paired seeds and write a CSV report"),
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    g = parser.add_argument_group("global options")
    g.add_argument("--config", default=d, help="YAML or JSON config document")
    g.add_argument("--seed", type=int, default=d, help="master seed (overrides the config)")
    g.add_argument("--threads", type=int, default=d, help="BLAS/OpenMP thread limit (default 1)")
    g.add_argument("--overwrite", action="store_true", default=d, help="replace existing artifacts")
    g.add_argument("--out", default=d, help="run directory (default: runs/default)")
    g.add_argument("--set", dest="overrides", action="append", default=d, metavar="SECTION.KEY=VALUE",
                   help="config override; repeatable, wins over the config file")
    g.add_argument("-v", "--verbose", action="store_true", default=d, help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevpretrain", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        if name in ("pretrain", "finetune", "eval"):
            p.add_argument("--name", help="output name (subdirectory or eval file stem)")
        if name == "finetune":
            p.add_argument("--init", help="pretrained checkpoint directory (default: <out>/pretrain/checkpoint)")
            p.add_argument("--scratch", action="store_true", help="start from random initialization")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/finetune/checkpoint)")
        if name == "maskgen":
            p.add_argument("--sigma", type=float, help="Gaussian kernel sigma in cells (mask.sigma)")
            p.add_argument("--gate-quantile", type=float, help="per-frame gate quantile (mask.gate_quantile)")
            p.add_argument("--gate-abs", type=float, help="absolute gate threshold (mask.gate_abs)")
            p.add_argument("--regularizer", choices=("none", "sigmoid", "log"), help="mask.regularizer")
        if name == "stats":
            p.add_argument("--nonzero-only", action="store_true", default=None,
                           help="accumulate statistics over nonzero cells only (run.whiten_nonzero_only)")
        if name == "finetune":
            p.add_argument("--freeze-head", action="store_true", default=None,
                           help="keep the inherited head fixed (run.freeze_head)")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=20, help="random instances per check (default 20)")
        if name == "ablate":
            p.add_argument("--preset", required=True, help="components, data-ratio, regularizer, recon-loss, whitening or head-init")
            p.add_argument("--n-seeds", type=int, default=5, help="paired seeds, starting at --seed (default 5)")
    return parser


# subcommand flags that are shorthands for config overrides; they enter the
# config hash like any other override, so later stages must repeat them
_FLAG_KEYS = {"sigma": "mask.sigma", "gate_quantile": "mask.gate_quantile", "gate_abs": "mask.gate_abs",
              "regularizer": "mask.regularizer", "nonzero_only": "run.whiten_nonzero_only",
              "freeze_head": "run.freeze_head"}


def _flag_overrides(args) -> list:
    out = []
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            out.append(f"{key}={json.dumps(v)}")
    return out


def _thread_limit(n: Optional[int]):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = 1 if args.threads is None else args.threads
    if threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, list(args.overrides or ()) + _flag_overrides(args), args.seed)
        ws = Workspace(cfg, Path(args.out or "runs/default"), bool(args.overwrite))
        fn = COMMANDS[args.command][0]
        with _thread_limit(threads):
            return fn(ws, args)
    except (ConfigError, UsageError, TensorFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, NonFiniteGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
