"""Experiment harness CLI.

Subcommands: init, run, sweep, eval, timings, scale-probe.  Exit codes:
0 success, 2 calibration failure rate exceeded, 3 configuration error.
Per-frame series go to CSV, summaries to JSON; plotting is left to
external tools.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, PtzTrackError
from .metrics import (
    clear_mot,
    events_to_csv,
    load_boxes_from_trajectories,
    load_boxes_from_truth,
)
from .pipeline import (
    RunConfig,
    offline_init,
    run_online,
    save_scene_map,
    write_outputs,
)
from .scenarios import revisit_scenario, tracking_scenario, zoom_ladder_scenario
from .simulator import Scenario, SimulatorStream
from .worldproj import build_homology, estimate_scale

BUILTINS = {
    "revisit": revisit_scenario,
    "tracking": tracking_scenario,
    "zoom-ladder": zoom_ladder_scenario,
}

EXIT_OK = 0
EXIT_CALIB_FAILURE = 2
EXIT_CONFIG = 3


def _load_scenario(args) -> Scenario:
    if getattr(args, "builtin", None):
        builder = BUILTINS.get(args.builtin)
        if builder is None:
            raise ConfigError(f"unknown builtin scenario {args.builtin!r}")
        sc = builder(seed=args.seed if args.seed is not None else 0)
    elif getattr(args, "scenario", None):
        path = Path(args.scenario)
        if not path.exists():
            raise ConfigError(f"scenario file not found: {path}")
        sc = Scenario.from_json(path.read_text())
        if args.seed is not None:
            sc.seed = args.seed
    else:
        raise ConfigError("one of --scenario or --builtin is required")
    return sc


def _add_scenario_args(p: argparse.ArgumentParser):
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--builtin", choices=sorted(BUILTINS), help="built-in scenario")
    p.add_argument("--seed", type=int, default=None, help="override scenario seed")


def cmd_init(args) -> int:
    sc = _load_scenario(args)
    out_dir = Path(args.out)
    map_path = out_dir / "scene_map.bin"
    if map_path.exists() and not args.force:
        print(f"refusing to overwrite {map_path} (use --force)", file=sys.stderr)
        return EXIT_CONFIG
    init = offline_init(sc)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_scene_map(map_path, init.scene)
    report = {
        "scenario": sc.name,
        "seed": sc.seed,
        "rms_px": init.bundle.rms_px,
        "converged": init.bundle.converged,
        "iterations": init.bundle.iterations,
        "mu": init.mu,
        "views": [
            {
                "view": i,
                "focal_px": k.f,
                "rotation": r.tolist(),
            }
            for i, (k, r) in enumerate(zip(init.bundle.intrinsics, init.bundle.rotations))
        ],
    }
    (out_dir / "init_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"map written to {map_path} (BA rms {init.bundle.rms_px:.3g} px)")
    return EXIT_OK


def _run_config_from_args(args) -> RunConfig:
    if getattr(args, "manifest", None):
        manifest = json.loads(Path(args.manifest).read_text())
        return RunConfig.from_manifest(manifest)
    sc = _load_scenario(args)
    return RunConfig(
        scenario=sc,
        sample_size=args.sample_size,
        ransac_threshold_px=args.ransac_threshold,
        map_updating=not args.no_map_updating,
        proximity_check=not args.no_proximity_check,
        tracking_mode=args.mode,
        parallel=args.parallel,
        seed=args.seed,
    )


def cmd_run(args) -> int:
    config = _run_config_from_args(args)
    init = offline_init(config.scenario)
    outputs = run_online(config, init)
    out_dir = Path(args.out)
    write_outputs(out_dir, config, outputs)
    print(
        f"{outputs.n_frames} frames, {outputs.stale_frames} stale, "
        f"{outputs.wall_seconds:.2f}s ({outputs.n_frames / max(outputs.wall_seconds, 1e-9):.1f} fps)"
    )
    if outputs.stale_fraction > config.max_stale_fraction:
        print(
            f"calibration failure rate {outputs.stale_fraction:.1%} exceeds "
            f"{config.max_stale_fraction:.1%}",
            file=sys.stderr,
        )
        return EXIT_CALIB_FAILURE
    return EXIT_OK


def cmd_sweep(args) -> int:
    import csv as _csv

    sc = _load_scenario(args)
    landmarks = [int(x) for x in args.landmarks.split(",")]
    thresholds = [float(x) for x in args.thresholds.split(",")]
    seeds = list(range(args.seeds))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def mean_reproj(config: RunConfig, init) -> float:
        outputs = run_online(config, init)
        vals = [r.reproj_px for r in outputs.calib_records]
        return float(np.mean(vals)) if vals else float("nan")

    with open(out_dir / "sweep_landmarks.csv", "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["landmark_count", "seed", "mean_reproj_px"])
        for n in landmarks:
            for seed in seeds:
                sc_i = _load_scenario(args)
                sc_i.seed = seed
                init = offline_init(sc_i)
                cfg = RunConfig(scenario=sc_i, sample_size=n, seed=seed)
                wr.writerow([n, seed, f"{mean_reproj(cfg, init):.17g}"])
    with open(out_dir / "sweep_threshold.csv", "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["threshold_px", "seed", "mean_reproj_px"])
        for thr in thresholds:
            for seed in seeds:
                sc_i = _load_scenario(args)
                sc_i.seed = seed
                init = offline_init(sc_i)
                cfg = RunConfig(
                    scenario=sc_i, sample_size=args.sample_size,
                    ransac_threshold_px=thr, seed=seed,
                )
                wr.writerow([thr, seed, f"{mean_reproj(cfg, init):.17g}"])
    print(f"sweep tables written to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    truth = Path(args.truth)
    traj = Path(args.trajectories)
    if not truth.exists() or not traj.exists():
        raise ConfigError("truth/trajectory files not found")
    image_size = tuple(int(v) for v in args.image_size.split("x"))
    gt = load_boxes_from_truth(truth, image_size)
    hyp = load_boxes_from_trajectories(traj)
    report, events = clear_mot(gt, hyp)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "mot_report.json").write_text(report.to_json())
    events_to_csv(out_dir / "mot_events.csv", events)
    print(report.to_json())
    return EXIT_OK


def cmd_timings(args) -> int:
    sc = _load_scenario(args)
    if args.frames:
        sc.n_frames = args.frames
    init = offline_init(sc)
    rows = []
    totals = {}
    for mode, parallel in (("sequential", False), ("parallel", True)):
        import copy

        cfg = RunConfig(scenario=sc, parallel=parallel, sample_size=args.sample_size)
        outputs = run_online(cfg, copy.deepcopy(init))
        n = max(outputs.n_frames, 1)
        if mode == "sequential":
            for stage_name, secs in outputs.stage_seconds.items():
                rows.append((stage_name, secs / n * 1000.0, n / max(secs, 1e-9)))
        totals[mode] = outputs.wall_seconds
    seq_total_ms = sum(r[1] for r in rows)
    print(f"{'Component':<22}{'Time':>10}{'fps':>9}")
    for name, ms, fps in rows:
        print(f"{name:<22}{ms:>8.1f}ms{fps:>9.1f}")
    n = sc.n_frames
    print(f"{'Total (sequential)':<22}{totals['sequential']/n*1000:>8.1f}ms"
          f"{n/max(totals['sequential'],1e-9):>9.1f}")
    print(f"{'Total (parallel)':<22}{totals['parallel']/n*1000:>8.1f}ms"
          f"{n/max(totals['parallel'],1e-9):>9.1f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            json.dumps(
                {
                    "stages_ms": {r[0]: r[1] for r in rows},
                    "sequential_total_ms": totals["sequential"] / n * 1000.0,
                    "parallel_total_ms": totals["parallel"] / n * 1000.0,
                    "sequential_stage_sum_ms": seq_total_ms,
                    "fps_parallel": n / max(totals["parallel"], 1e-9),
                },
                indent=2, sort_keys=True,
            )
        )
    return EXIT_OK


def cmd_scale_probe(args) -> int:
    import csv as _csv

    sc = _load_scenario(args)
    init = offline_init(sc)
    stream = SimulatorStream(sc)
    view = init.scene.reference_view
    g = (init.scene.world.h_w @ view.h_rk).inverse()
    homology = build_homology(g, view.k_k, init.mu)
    w, h = sc.image_size
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["foot_x", "foot_y", "head_x", "head_y", "height_px"])
        for y in np.arange(args.spacing / 2, h, args.spacing):
            for x in np.arange(args.spacing / 2, w, args.spacing):
                try:
                    est = estimate_scale(homology, np.array([x, y]))
                except PtzTrackError:
                    continue
                wr.writerow(
                    [x, y, f"{est.head[0]:.17g}", f"{est.head[1]:.17g}",
                     f"{est.height_px:.17g}"]
                )
    print(f"scale grid written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptztrack", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("init", help="offline keyframe pass + bundle adjustment")
    _add_scenario_args(pi)
    pi.add_argument("--out", required=True)
    pi.add_argument("--force", action="store_true")
    pi.set_defaults(func=cmd_init)

    pr = sub.add_parser("run", help="full online calibration + tracking run")
    _add_scenario_args(pr)
    pr.add_argument("--manifest", help="re-run from a manifest.json")
    pr.add_argument("--out", required=True)
    pr.add_argument("--sample-size", type=int, default=1000)
    pr.add_argument("--ransac-threshold", type=float, default=3.0)
    pr.add_argument("--no-map-updating", action="store_true")
    pr.add_argument("--no-proximity-check", action="store_true")
    pr.add_argument("--mode", choices=("2d", "3d"), default="3d")
    pr.add_argument("--parallel", action="store_true")
    pr.set_defaults(func=cmd_run)

    ps = sub.add_parser("sweep", help="landmark-count and RANSAC-threshold sweeps")
    _add_scenario_args(ps)
    ps.add_argument("--out", required=True)
    ps.add_argument("--landmarks", default="50,100,200,500,1000,2000")
    ps.add_argument("--thresholds", default="0.5,1,3,10")
    ps.add_argument("--seeds", type=int, default=5)
    ps.add_argument("--sample-size", type=int, default=1000)
    ps.set_defaults(func=cmd_sweep)

    pe = sub.add_parser("eval", help="CLEAR MOT / USC metrics from files")
    pe.add_argument("--truth", required=True)
    pe.add_argument("--trajectories", required=True)
    pe.add_argument("--out", required=True)
    pe.add_argument("--image-size", default="640x480")
    pe.set_defaults(func=cmd_eval)

    pt = sub.add_parser("timings", help="per-stage timings, sequential vs parallel")
    _add_scenario_args(pt)
    pt.add_argument("--frames", type=int, default=None)
    pt.add_argument("--sample-size", type=int, default=1000)
    pt.add_argument("--out", default=None)
    pt.set_defaults(func=cmd_timings)

    pp = sub.add_parser("scale-probe", help="dump predicted head positions on a grid")
    _add_scenario_args(pp)
    pp.add_argument("--out", required=True)
    pp.add_argument("--spacing", type=float, default=40.0)
    pp.set_defaults(func=cmd_scale_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PtzTrackError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
