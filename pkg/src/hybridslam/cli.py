"""Command-line interface: ``hybridslam {synth,run,eval,mesh,selftest}``.

Exit codes: 0 success, 2 configuration or input error, 3 tracking diverged
on more than 20% of frames, 4 self-test failure.

A run directory holds ``config.txt`` (effective config, first line
``# dataset: <path>``), ``trajectory.txt`` (TUM format), ``losses.csv``,
``checkpoint.bin``, ``mesh.ply``, ``metrics.txt`` (JSON) and the figures
``trajectory.png`` and ``losses.png``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .camera import Pose
from .config import Config, ConfigError, default_table, parse_config, parse_config_text
from .evaluation import (
    EvaluationError,
    Mesh,
    cull_mesh,
    depth_l1,
    extract_mesh,
    held_out,
    mesh_metrics,
    read_ply,
    write_ply,
)
from .evaluation import ate_rmse as _ate
from .field import SceneField
from .params import config_hash, load_checkpoint, save_checkpoint
from .slam import SlamPipeline
from .tum import DatasetError, load_tum_sequence, read_trajectory, write_trajectory

log = logging.getLogger("hybridslam")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SELFTEST = 0, 2, 3, 4
DIVERGED_FRACTION = 0.2
RUN_DIR_ENV = "HYBRIDSLAM_RUN_DIR"
BREAK_ENV = "HYBRIDSLAM_BREAK_ADJOINT"

ARTIFACTS = {
    "config": "config.txt",
    "trajectory": "trajectory.txt",
    "losses": "losses.csv",
    "checkpoint": "checkpoint.bin",
    "mesh": "mesh.ply",
    "metrics": "metrics.txt",
}
FIGURES = ("trajectory.png", "losses.png")
GT_MESH = "gt_mesh.ply"
METRIC_KEYS = ("ate_rmse_cm", "depth_l1_cm", "accuracy_cm", "completion_cm", "completion_rate_pct")


class CliError(Exception):
    """Input problem reported with exit code 2."""


# ---- config plumbing -------------------------------------------------------------------


def build_config(args) -> Config:
    """Config file (if any) overridden by command-line flags."""
    cfg = parse_config(getattr(args, "config", None))
    flag_keys = {
        "no_gba": ("gba", "false"),
        "no_patch_loss": ("patch_loss", "false"),
        "deterministic": ("deterministic", "true"),
        "force": ("overwrite", "true"),
    }
    for attr, (key, value) in flag_keys.items():
        if getattr(args, attr, False):
            cfg.set(key, value)
    if getattr(args, "encoder", None):
        cfg.set("encoder", args.encoder)
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", str(args.seed))
    if getattr(args, "frames", None) is not None:
        cfg.set("n_frames" if args.command == "synth" else "max_frames", str(args.frames))
    if getattr(args, "run_dir", None):
        cfg.set("run_dir", args.run_dir)
    return cfg


def _prepare_dir(path: Path, overwrite: bool) -> None:
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise CliError(f"{path} exists and is not empty (use --force or overwrite = true)")
    path.mkdir(parents=True, exist_ok=True)


def resolve_run_dir(cfg: Config, dataset: Path | None = None) -> Path:
    if cfg.run.run_dir:
        return Path(cfg.run.run_dir)
    if os.environ.get(RUN_DIR_ENV):
        return Path(os.environ[RUN_DIR_ENV])
    name = dataset.resolve().name if dataset is not None else "run"
    return Path("runs") / name


def load_run_config(run_dir: Path) -> tuple[Config, Path | None]:
    """Effective config of a run and the dataset path recorded in its header."""
    path = run_dir / ARTIFACTS["config"]
    if not path.exists():
        raise CliError(f"missing artifact {path}")
    text = path.read_text()
    dataset = None
    for line in text.splitlines():
        if line.startswith("# dataset:"):
            dataset = Path(line.split(":", 1)[1].strip())
            break
    return parse_config_text(text, source=str(path)), dataset


# ---- shared evaluation --------------------------------------------------------------------


def restore_scene(cfg: Config, checkpoint: Path) -> SceneField:
    if not checkpoint.exists():
        raise CliError(f"missing artifact {checkpoint}")
    scene = SceneField(cfg, seed=cfg.pipeline.seed)
    _, digest = load_checkpoint(checkpoint, scene.store)
    if digest != config_hash(cfg.to_text()):
        log.warning("%s was written under a different config", checkpoint)
    return scene


def scene_mesh(scene: SceneField, cfg: Config, frames, poses, cull: bool = True) -> Mesh:
    b = scene.bounds
    return extract_mesh(scene.sdf, b.min_corner, b.max_corner, cfg.eval.mesh_resolution,
                        frames if cull else None, poses, cfg.eval.cull_margin, cfg.render.max_depth)


def compute_metrics(cfg: Config, scene: SceneField, frames, stamps, poses, mesh: Mesh,
                    dataset: Path) -> dict:
    """All report numbers; a metric without ground truth is ``None``."""
    e = cfg.eval
    report = dict.fromkeys(METRIC_KEYS)
    gt_file = dataset / "groundtruth.txt"
    has_gt = all(f.gt_pose is not None for f in frames)
    if gt_file.exists():
        gt_t, gt_p = read_trajectory(gt_file)
        try:
            report["ate_rmse_cm"] = _ate(stamps, poses, gt_t, gt_p)
        except EvaluationError as exc:
            log.warning("ATE not computed: %s", exc)
    ids = held_out(len(frames), e.eval_frame_stride, e.eval_frame_offset) or list(range(len(frames)))
    view_poses = [frames[i].gt_pose if has_gt else poses[i] for i in ids]
    report["depth_l1_cm"] = depth_l1(scene, cfg, [frames[i] for i in ids], view_poses,
                                     e.eval_pixel_stride, seed=cfg.pipeline.seed)
    if (dataset / GT_MESH).exists() and not mesh.empty:
        gt = read_ply(dataset / GT_MESH)
        gt_poses = [f.gt_pose for f in frames] if has_gt else list(poses)
        gt = cull_mesh(gt, frames, gt_poses, e.cull_margin, cfg.render.max_depth)
        m = mesh_metrics(mesh, gt, e.mesh_samples, e.completion_threshold_cm, seed=cfg.pipeline.seed)
        report.update(accuracy_cm=m.accuracy_cm, completion_cm=m.completion_cm,
                      completion_rate_pct=m.completion_rate_pct)
    return report


def write_metrics(path: Path, report: dict) -> None:
    path.write_text(json.dumps(report, indent=2) + "\n")


def print_metrics(report: dict) -> None:
    for k in METRIC_KEYS:
        v = report.get(k)
        print(f"{k:<22s} {'n/a' if v is None else f'{v:.4f}'}")


def write_figures(run_dir: Path, poses, frames, rows) -> None:
    from .plotting import plot_losses, plot_trajectory

    est = np.stack([p.translation for p in poses])
    gt = None
    if all(f.gt_pose is not None for f in frames):
        gt = np.stack([f.gt_pose.translation for f in frames])
    plot_trajectory(run_dir / FIGURES[0], est, gt)
    if rows:
        plot_losses(run_dir / FIGURES[1], rows)


# ---- commands -----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthetic import SyntheticScene, ground_truth_mesh, make_sequence
    from .tum import write_tum_sequence

    cfg = build_config(args)
    out = Path(args.out_dir)
    _prepare_dir(out, cfg.run.overwrite)
    scene = SyntheticScene()
    frames = make_sequence(cfg, scene)
    write_tum_sequence(out, frames)
    v, f = ground_truth_mesh(scene)
    write_ply(out / GT_MESH, Mesh(v, f))
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    dataset = Path(args.dataset)
    src = load_tum_sequence(dataset, max_frames=cfg.pipeline.max_frames or None)
    if cfg.pipeline.deterministic:
        import numba

        numba.set_num_threads(1)
    run_dir = resolve_run_dir(cfg, dataset)
    _prepare_dir(run_dir, cfg.run.overwrite)
    (run_dir / ARTIFACTS["config"]).write_text(f"# dataset: {dataset.resolve()}\n" + cfg.to_text())

    pipe = SlamPipeline(cfg)
    frames = []
    t0 = time.perf_counter()
    with open(run_dir / ARTIFACTS["losses"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SlamPipeline.loss_header())
        pipe.on_iteration = lambda r: writer.writerow(
            [r.phase, r.frame_id, r.iteration, *(repr(float(r.terms[k])) for k in r.terms), repr(float(r.total))]
        )
        for i, frame in enumerate(src):
            frames.append(frame)
            rec = pipe.process(frame, i)
            if not args.quiet:
                print(f"frame {i:4d}  loss {rec.track_loss:.4f}  {time.perf_counter() - t0:7.1f} s"
                      + ("  diverged" if rec.diverged else "") + (f"  kf:{rec.keyframe}" if rec.keyframe else ""),
                      file=sys.stderr, flush=True)
    stamps, poses = pipe.trajectory()
    write_trajectory(run_dir / ARTIFACTS["trajectory"], stamps, poses)
    save_checkpoint(run_dir / ARTIFACTS["checkpoint"], pipe.scene.store, pipe.scene_state,
                    config_hash(cfg.to_text()))
    mesh = scene_mesh(pipe.scene, cfg, frames, poses)
    write_ply(run_dir / ARTIFACTS["mesh"], mesh)
    report = compute_metrics(cfg, pipe.scene, frames, stamps, poses, mesh, dataset)
    report["runtime_s"] = time.perf_counter() - t0
    write_metrics(run_dir / ARTIFACTS["metrics"], report)
    write_figures(run_dir, poses, frames, pipe.rows)
    print_metrics(report)
    print(f"run directory: {run_dir}")
    diverged = sum(r.diverged for r in pipe.records)
    if diverged > DIVERGED_FRACTION * len(pipe.records):
        print(f"tracking diverged on {diverged} of {len(pipe.records)} frames", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _run_dir_arg(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    if os.environ.get(RUN_DIR_ENV):
        return Path(os.environ[RUN_DIR_ENV])
    raise CliError(f"no run directory given and ${RUN_DIR_ENV} is not set")


def _load_run(args):
    run_dir = _run_dir_arg(args)
    cfg, dataset = load_run_config(run_dir)
    if getattr(args, "dataset", None):
        dataset = Path(args.dataset)
    if dataset is None:
        raise CliError(f"{run_dir / ARTIFACTS['config']} names no dataset; pass --dataset")
    traj = Path(args.trajectory) if getattr(args, "trajectory", None) else run_dir / ARTIFACTS["trajectory"]
    if not traj.exists():
        raise CliError(f"missing artifact {traj}")
    stamps, poses = read_trajectory(traj)
    src = load_tum_sequence(dataset, max_frames=len(stamps))
    frames = list(src)
    if len(frames) != len(poses):
        raise CliError(f"{traj} has {len(poses)} poses but the dataset yields {len(frames)} frames")
    return run_dir, cfg, dataset, frames, stamps, poses


def cmd_eval(args) -> int:
    run_dir, cfg, dataset, frames, stamps, poses = _load_run(args)
    scene = restore_scene(cfg, run_dir / ARTIFACTS["checkpoint"])
    mesh_path = run_dir / ARTIFACTS["mesh"]
    if not mesh_path.exists():
        raise CliError(f"missing artifact {mesh_path}")
    report = compute_metrics(cfg, scene, frames, stamps, poses, read_ply(mesh_path), dataset)
    write_metrics(Path(args.out) if args.out else run_dir / ARTIFACTS["metrics"], report)
    print_metrics(report)
    return EXIT_OK


def cmd_mesh(args) -> int:
    run_dir, cfg, dataset, frames, stamps, poses = _load_run(args)
    if args.resolution is not None:
        cfg.eval.mesh_resolution = args.resolution
    scene = restore_scene(cfg, run_dir / ARTIFACTS["checkpoint"])
    mesh = scene_mesh(scene, cfg, frames, poses, cull=not args.no_cull)
    out = Path(args.out) if args.out else run_dir / ARTIFACTS["mesh"]
    write_ply(out, mesh)
    print(f"wrote {mesh.faces.shape[0]} triangles to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    broken = args.break_adjoint or os.environ.get(BREAK_ENV) or None
    t0 = time.perf_counter()
    results = run_selftest(seed=args.seed or 0, instances=args.instances, broken=broken)
    ok = all(r.passed for r in results)
    return EXIT_OK if ok and time.perf_counter() - t0 < args.budget else EXIT_SELFTEST


# ---- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridslam", description="Dense RGB-D SLAM with a hybrid neural scene field.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    p.add_argument("--print-defaults", action="store_true", help="print the config key table and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="random seed (key: seed)")

    s = sub.add_parser("synth", help="write the synthetic box-room sequence in TUM layout")
    s.add_argument("out_dir")
    common(s)
    s.add_argument("--frames", type=int, help="number of frames (key: n_frames)")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory (key: overwrite)")

    r = sub.add_parser("run", help="track and map a TUM-layout sequence")
    r.add_argument("dataset")
    common(r)
    r.add_argument("--run-dir", help=f"output directory (key: run_dir; default ${RUN_DIR_ENV} or runs/<dataset>)")
    r.add_argument("--frames", type=int, help="process only the first N frames (key: max_frames)")
    r.add_argument("--no-gba", action="store_true", help="disable active global BA (key: gba)")
    r.add_argument("--no-patch-loss", action="store_true", help="disable the patch SSIM loss (key: patch_loss)")
    r.add_argument("--encoder", choices=("hybrid", "hash", "triplane"), help="feature encoders (key: encoder)")
    r.add_argument("--deterministic", action="store_true", help="single-threaded kernels (key: deterministic)")
    r.add_argument("--force", action="store_true", help="reuse a non-empty run directory (key: overwrite)")
    r.add_argument("--quiet", action="store_true", help="no per-frame progress lines")

    e = sub.add_parser("eval", help="recompute the metrics report of a run")
    e.add_argument("run_dir", nargs="?")
    e.add_argument("--dataset", help="override the dataset recorded in config.txt")
    e.add_argument("--trajectory", help="evaluate this TUM trajectory instead of the run's")
    e.add_argument("--out", help="report path (default <run_dir>/metrics.txt)")

    m = sub.add_parser("mesh", help="extract a mesh from a run's checkpoint")
    m.add_argument("run_dir", nargs="?")
    m.add_argument("--dataset", help="override the dataset recorded in config.txt")
    m.add_argument("--resolution", type=float, help="grid step [m] (key: mesh_resolution)")
    m.add_argument("--no-cull", action="store_true", help="keep triangles no camera observed")
    m.add_argument("--out", help="output PLY (default <run_dir>/mesh.ply)")

    t = sub.add_parser("selftest", help="gradient and oracle checks")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--instances", type=int, default=1000, help="random instances per oracle check")
    t.add_argument("--budget", type=float, default=300.0, help="fail if slower than this [s]")
    t.add_argument("--break-adjoint", help=argparse.SUPPRESS)
    return p


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "eval": cmd_eval, "mesh": cmd_mesh, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        print(default_table())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, CliError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
