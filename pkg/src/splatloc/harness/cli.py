"""Command-line entry point.

Data directory layout written by ``synth`` and read by the later stages::

    intrinsics.txt        fx fy cx cy width height
    scene_gt.splat        ground-truth scene (synthetic worlds only)
    scene_init.splat      geometry with neutral appearance, the training start
    config.ini            the configuration the directory was made with
    train/poses.txt       training poses; train/<name>.png and <name>.frst
    queries/poses.txt     ground-truth query poses; queries/<name>.png and <name>.frst

``.frst`` files are the teacher descriptor maps, read back through
:class:`~splatloc.descriptors.FileProvider`.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import io
from ..descriptors import FileProvider
from ..distill import TrainView, train
from ..errors import SplatLocError
from ..geometry import Pose
from ..refinement import VARIANTS, localize
from .config import PipelineConfig, dump_config, load_config
from .evaluate import THRESHOLDS, evaluate, evaluate_named
from .synthetic import generate_world

log = logging.getLogger("splatloc")


class CliError(Exception):
    pass


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config, args.set or ())
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


# -- synth --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    seed = _seed(args)
    world = generate_world(seed, cfg.scene.n_gaussians, cfg.scene.n_views, cfg.scene.feature_dim, cfg.world)
    provider = world.provider(noise=cfg.provider.noise, stride=cfg.provider.stride)
    out.mkdir(parents=True, exist_ok=True)
    io.write_intrinsics(out / "intrinsics.txt", world.intrinsics)
    io.write_scene(out / "scene_gt.splat", world.scene)
    io.write_scene(out / "scene_init.splat", world.initial_scene())
    dump_config(cfg, out / "config.ini")
    sets = {"train": world.poses, "queries": world.sample_poses(cfg.scene.n_queries, seed=1)}
    for sub, poses in sets.items():
        d = out / sub
        d.mkdir(exist_ok=True)
        named = {}
        for i, pose in enumerate(poses):
            name = f"{sub[0]}{i:04d}"
            img = provider.render_image(pose)
            io.write_png(d / f"{name}.png", img)
            io.write_raster(d / f"{name}.frst", provider.dense_features(img).data)
            named[name] = pose
        io.write_poses(d / "poses.txt", named)
    print(f"wrote {len(world.poses)} training views and {len(sets['queries'])} queries to {out}")
    return 0


# -- train --------------------------------------------------------------------------

def _load_views(data: Path, K, feature_dim: int) -> list[TrainView]:
    poses = io.read_poses(data / "train" / "poses.txt")
    provider = FileProvider(data / "train", feature_dim)
    views = []
    for name, pose in poses.items():
        img = io.read_png(data / "train" / f"{name}.png")
        views.append(TrainView(img, provider.dense_features(img, name=name).data, pose, K))
    return views


def cmd_train(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    K = io.read_intrinsics(data / "intrinsics.txt")
    scene = io.read_scene(args.init or data / "scene_init.splat")
    train_cfg = cfg.train
    if args.iterations is not None:
        train_cfg = dataclasses.replace(train_cfg, iterations=args.iterations)
    views = _load_views(data, K, scene.feature_dim)
    t0 = time.perf_counter()
    trained, history = train(scene, views, train_cfg)
    io.write_scene(args.out, trained)
    if args.history:
        history.to_csv(args.history)
    print(f"trained {train_cfg.iterations} iterations in {time.perf_counter() - t0:.1f}s; "
          f"L_GS {history.l_gs[0]:.5f} -> {history.l_gs[-1]:.5f}" if history.l_gs else "no iterations run")
    return 0


# -- localize -----------------------------------------------------------------------

def _queries(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise CliError(f"no .png queries in {path}")
        return files
    if not path.exists():
        raise CliError(f"query {path} does not exist")
    return [path]


def _write_trace(path: Path, result) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "n_valid", "qw", "qx", "qy", "qz", "tx", "ty", "tz"])
        for i, (loss, n, pose) in enumerate(zip(result.losses, result.n_valid, result.poses)):
            w.writerow([i, repr(loss), n, *(repr(float(x)) for x in pose.as_array())])


def cmd_localize(args) -> int:
    cfg = _config(args)
    K = io.read_intrinsics(args.intrinsics or Path(args.data) / "intrinsics.txt")
    scene = io.read_scene(args.scene)
    lcfg = cfg.localize_config()
    estimates: dict[str, Pose] = {}
    trace_dir = Path(args.trace_dir) if args.trace_dir else None
    if trace_dir:
        trace_dir.mkdir(parents=True, exist_ok=True)
    for qpath in _queries(Path(args.query)):
        name = qpath.stem
        provider = FileProvider(qpath.parent, scene.feature_dim)
        img = io.read_png(qpath)
        res = localize(img, scene, K, provider, lcfg, args.variant, name=name, keep_poses=trace_dir is not None)
        if trace_dir and res.warp is not None:
            _write_trace(trace_dir / f"{name}.trace.csv", res.warp)
        estimates[name] = res.pose
        log.info("%s: %s in %s", name, args.variant,
                 ", ".join(f"{k} {v:.2f}s" for k, v in res.timings.items()))
    io.write_poses(args.out, estimates)
    print(f"localized {len(estimates)} queries ({args.variant}) -> {args.out}")
    return 0


# -- eval / report ------------------------------------------------------------------

def cmd_eval(args) -> int:
    est = io.read_poses(args.estimates)
    gt = io.read_poses(args.gt)
    report = evaluate_named(est, gt)
    print(report.summary())
    if args.csv:
        report.to_csv(args.csv)
    return 0


def _read_trace(path: Path):
    losses, poses = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            losses.append(float(row["loss"]))
            poses.append(Pose.from_array([float(row[k]) for k in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")]))
    return losses, poses


def cmd_report(args) -> int:
    traces = sorted(Path(args.traces).glob("*.trace.csv"))
    if not traces:
        raise CliError(f"no *.trace.csv files in {args.traces}")
    gt = io.read_poses(args.gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names, losses, poses = [], [], []
    for path in traces:
        name = path.name[: -len(".trace.csv")]
        if name not in gt:
            raise CliError(f"no ground truth for {name}")
        l, p = _read_trace(path)
        names.append(name)
        losses.append(l)
        poses.append(p)
    n_it = min(len(l) for l in losses)
    with open(out / "loss_traces.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *names])
        for i in range(n_it):
            w.writerow([i, *(repr(l[i]) for l in losses)])
    rows = []
    for i in range(n_it):
        rep = evaluate([p[i] for p in poses], [gt[n] for n in names], names)
        rows.append([i, rep.median_translation_cm, rep.median_rotation_deg, *rep.recall.values()])
    with open(out / "accuracy_vs_iteration.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "median_cm", "median_deg", *(f"recall_{c:g}cm_{d:g}deg" for c, d in THRESHOLDS)])
        w.writerows(rows)
    if args.plots:
        _plots(out, np.asarray(losses)[:, :n_it], np.asarray(rows, dtype=float))
    final = rows[-1]
    print(f"{len(names)} traces, {n_it} iterations; final median {final[1]:.3f} cm / {final[2]:.4f} deg")
    return 0


def _plots(out: Path, losses: np.ndarray, rows: np.ndarray) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping plots")
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(losses.T, color="0.6", lw=0.7)
    ax.plot(np.median(losses, axis=0), color="k", lw=1.5, label="median")
    ax.set(xlabel="iteration", ylabel="warp loss", yscale="log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_traces.png", dpi=120)
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for j, (c, d) in enumerate(THRESHOLDS):
        ax.plot(rows[:, 0], rows[:, 3 + j], label=f"{c:g}cm/{d:g}deg")
    ax.set(xlabel="iteration", ylabel="frames under threshold (%)", ylim=(0, 101))
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "accuracy_vs_iteration.png", dpi=120)
    plt.close(fig)


# -- pipeline -----------------------------------------------------------------------

def cmd_pipeline(args) -> int:
    """synth, train, localize (every variant) and eval in one directory."""
    out = Path(args.out)
    common = _common_argv(args)
    steps = [["synth", "--out", str(out)],
             ["train", "--data", str(out), "--out", str(out / "scene.splat"),
              "--history", str(out / "train_history.csv")]]
    for variant in args.variants:
        steps.append(["localize", "--data", str(out), "--scene", str(out / "scene.splat"),
                      "--query", str(out / "queries"), "--variant", variant,
                      "--out", str(out / f"estimates_{variant}.txt")])
        steps.append(["eval", "--estimates", str(out / f"estimates_{variant}.txt"),
                      "--gt", str(out / "queries" / "poses.txt"), "--csv", str(out / f"report_{variant}.csv")])
    for step in steps:
        print(f"== {step[0]} {step[-1] if step[0] != 'eval' else step[2]}")
        code = main(step + common)
        if code:
            return code
    return 0


def _common_argv(args) -> list[str]:
    argv = []
    if args.config:
        argv += ["--config", args.config]
    for item in args.set or ():
        argv += ["--set", item]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return argv


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key/value config file (INI sections)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="seed for every random stage")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="splatloc", description="Localize cameras in a feature Gaussian-splat scene.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic world and its renders")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="distill colors, opacities and features")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="trained scene file")
    s.add_argument("--init", help="initial scene (default: DATA/scene_init.splat)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--history", help="loss history CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("localize", parents=[common], help="estimate query poses")
    s.add_argument("--scene", required=True)
    s.add_argument("--query", required=True, help="a .png query (with <name>.frst beside it) or a directory")
    s.add_argument("--variant", choices=VARIANTS, default="base")
    s.add_argument("--data", default=".", help="directory holding intrinsics.txt")
    s.add_argument("--intrinsics")
    s.add_argument("--out", required=True, help="output pose file")
    s.add_argument("--trace-dir", help="write per-iteration warp traces here")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("eval", parents=[common], help="compare estimates against ground truth")
    s.add_argument("--estimates", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="CSV (and optional plots) from warp traces")
    s.add_argument("--traces", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", parents=[common], help="synth, train, localize and eval end to end")
    s.add_argument("--out", required=True)
    s.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SplatLocError, CliError, OSError) as exc:
        print(f"splatloc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
