"""End-to-end synthetic benchmark: Coarse / Base / Fine localization errors.

    python scripts/benchmark.py --seed 0 --queries 20 --out results/bench

Builds the default desk-scale world, distills it, localizes held-out
queries with all three variants and prints median errors and recall.
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from splatloc.distill import TrainConfig, train
from splatloc.harness.evaluate import evaluate
from splatloc.harness.synthetic import generate_world
from splatloc.refinement import LocalizeConfig, localize


def run(seed=0, n_gaussians=500, n_views=20, n_queries=20, feature_dim=16, iterations=3000,
        noise=0.01, verbose=True):
    t0 = time.perf_counter()
    world = generate_world(seed, n_gaussians, n_views, feature_dim)
    provider = world.provider(noise=noise, stride=1)
    views = world.training_views(provider)
    scene, history = train(world.initial_scene(), views, TrainConfig(iterations=iterations, seed=seed))
    t_train = time.perf_counter() - t0
    if verbose:
        print(f"world: {n_gaussians} Gaussians, diameter {world.diameter:.3f} m; "
              f"trained {iterations} iterations in {t_train:.0f}s "
              f"(L_GS {history.l_gs[0]:.4f} -> {np.mean(history.l_gs[-n_views:]):.4f})")

    cfg = LocalizeConfig()
    gt = world.sample_poses(n_queries, seed=1000 + seed)
    est = {"coarse": [], "base": [], "fine": []}
    diverged = {"base": 0, "fine": 0}
    for i, pose in enumerate(gt):
        img = provider.render_image(pose)
        coarse = localize(img, scene, world.intrinsics, provider, cfg, "coarse")
        est["coarse"].append(coarse.pose)
        for variant in ("base", "fine"):
            res = localize(img, scene, world.intrinsics, provider, cfg, variant, coarse=coarse.pose)
            est[variant].append(res.pose)
            diverged[variant] += "warp_diverged" in res.diagnostics
        if verbose:
            print(f"  query {i:2d} done ({time.perf_counter() - t0:.0f}s)", flush=True)
    names = [f"q{i:03d}" for i in range(n_queries)]
    reports = {v: evaluate(p, gt, names) for v, p in est.items()}
    if verbose:
        print(f"warp divergence guard fired: base {diverged['base']}, fine {diverged['fine']} of {n_queries}")
    return world, reports, time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gaussians", type=int, default=500)
    ap.add_argument("--views", type=int, default=20)
    ap.add_argument("--queries", type=int, default=20)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--noise", type=float, default=0.01)
    ap.add_argument("--out", type=Path, help="directory for per-variant CSV reports")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    world, reports, elapsed = run(args.seed, args.gaussians, args.views, args.queries, args.dim,
                                  args.iterations, args.noise)
    diam_cm = 100 * world.diameter
    print(f"\n{'variant':8s} {'median cm':>10s} {'% diam':>7s} {'median deg':>11s}   recall (10/5 5/5 2/2 1/1)")
    for v, rep in reports.items():
        rec = " ".join(f"{x:5.1f}" for x in rep.recall.values())
        print(f"{v:8s} {rep.median_translation_cm:10.3f} {100 * rep.median_translation_cm / diam_cm:6.2f}% "
              f"{rep.median_rotation_deg:11.4f}   {rec}")
    c, b = reports["coarse"], reports["base"]
    print(f"\nbase reduces median translation by {100 * (1 - b.median_translation_cm / c.median_translation_cm):.1f}%")
    print(f"total {elapsed:.0f}s")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        for v, rep in reports.items():
            rep.to_csv(args.out / f"{v}.csv")


if __name__ == "__main__":
    main()
