"""End-to-end experiment pipeline: offline init, online loop, outputs.

The online loop consumes simulator frames, runs per-frame calibration and
map updating, and feeds the tracker.  In parallel mode calibration runs on
the main thread and tracking on a consumer thread behind a bounded
in-order queue, so outputs are identical to sequential mode; wall times
are the only thing that changes.

Every run writes a manifest (scenario + run configuration + library
versions) sufficient to reproduce the trajectory and metric files
bit-exactly: all randomness is derived from the manifest seeds, per frame.
"""

from __future__ import annotations

import csv
import json
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .calibrate import CalibConfig, CalibrationResult, FrameCalibrator
from .errors import ConfigError
from .geometry import CameraPose, Homography, decompose_to_pose
from .metrics import (
    CalibErrorRecord,
    calib_errors,
    write_trajectories,
    write_truth,
)
from .offline_init import (
    BundleResult,
    build_problem,
    build_scene_map,
    bundle_adjust,
    register_world,
)
from .scene_map import SceneMap, serialize_map
from .simulator import Scenario, SimulatorStream, project_3d
from .tracker import ImageTracker, TrackerConfig, WorldTracker
from .worldproj import build_homology, calibrate_mu


@dataclass
class RunConfig:
    """Knobs of one experiment run (the paper-style ablation axes)."""

    scenario: Scenario
    sample_size: int = 1000
    ransac_threshold_px: float = 3.0
    map_updating: bool = True
    proximity_check: bool = True
    tracking_mode: str = "3d"  # "3d" | "2d"
    parallel: bool = False
    seed: Optional[int] = None  # defaults to the scenario seed
    max_stale_fraction: float = 0.25

    def run_seed(self) -> int:
        return self.scenario.seed if self.seed is None else self.seed

    def to_manifest(self) -> dict:
        d = asdict(self)
        d["scenario"] = json.loads(self.scenario.to_json())
        d["versions"] = {"ptztrack": __version__, "numpy": np.__version__}
        return d

    @classmethod
    def from_manifest(cls, manifest: dict) -> "RunConfig":
        d = dict(manifest)
        d.pop("versions", None)
        d["scenario"] = Scenario.from_json(json.dumps(d["scenario"]))
        return cls(**d)


@dataclass
class InitResult:
    scene: SceneMap
    bundle: BundleResult
    mu: float
    stream: SimulatorStream


@dataclass
class RunOutputs:
    trajectories: list = field(default_factory=list)
    truth_rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    calib_records: list = field(default_factory=list)
    stale_frames: int = 0
    n_frames: int = 0
    stage_seconds: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def stale_fraction(self) -> float:
        return self.stale_frames / max(self.n_frames, 1)


def offline_init(scenario: Scenario, calib: Optional[CalibConfig] = None) -> InitResult:
    """Keyframe pass, bundle adjustment, map assembly, world registration."""
    calib = calib or CalibConfig()
    stream = SimulatorStream(scenario)
    captures = stream.keyframe_captures()
    problem = build_problem(
        captures, scenario.principal_point, reference=stream.ref_index,
        seed=scenario.seed,
    )
    bundle = bundle_adjust(problem)
    scene = build_scene_map(
        captures, bundle, reference=stream.ref_index,
        keypoint_sigma=max(scenario.noise.keypoint_sigma, calib.keypoint_sigma),
    )
    reg = stream.registration_truth()
    k_r = bundle.intrinsics[stream.ref_index]
    scene.world = register_world(
        k_r, reg.vp_x, reg.vp_y, reg.vline, reg.p1, reg.p2, reg.length_m
    )
    # cross-ratio from one exact reference target in the reference view
    anchor = np.array([0.0, 0.6 * scenario.known_distance_m])
    ref_pose = stream.ref_pose
    from .simulator import ground_homography

    g_ref_true = ground_homography(
        ref_pose.pan, ref_pose.tilt, ref_pose.focal, scenario.principal_point,
        scenario.cam_height_m,
    )
    foot = Homography(g_ref_true).apply(anchor)
    head = project_3d(
        ref_pose, scenario.principal_point, scenario.cam_height_m,
        np.array([[anchor[0], anchor[1], scenario.target_height_m]]),
    )[0]
    g_ref_est = (scene.world.h_w @ scene.reference_view.h_rk).inverse()
    mu = calibrate_mu(g_ref_est, k_r, scenario.target_height_m, foot, head)
    return InitResult(scene=scene, bundle=bundle, mu=mu, stream=stream)


def _calib_config(config: RunConfig) -> CalibConfig:
    return CalibConfig(
        sample_size=config.sample_size,
        ransac_threshold_px=config.ransac_threshold_px,
        keypoint_sigma=max(config.scenario.noise.keypoint_sigma, 0.5),
        map_updating=config.map_updating,
        proximity_check=config.proximity_check,
        frame_size=config.scenario.image_size,
    )


def _keyframe_lookup(scenario: Scenario) -> dict:
    return {cmd: i for i, cmd in enumerate(scenario.keyframe_grid())}


def run_online(
    config: RunConfig,
    init: Optional[InitResult] = None,
    tracker_config: Optional[TrackerConfig] = None,
) -> RunOutputs:
    """Full online loop over the scenario's frames."""
    scenario = config.scenario
    if config.tracking_mode not in ("2d", "3d"):
        raise ConfigError(f"unknown tracking mode {config.tracking_mode!r}")
    init = init or offline_init(scenario)
    scene = init.scene
    stream = SimulatorStream(scenario)  # fresh stream for the online pass
    calibrator = FrameCalibrator(scene, _calib_config(config))
    tracker = (
        WorldTracker(tracker_config) if config.tracking_mode == "3d" else ImageTracker(tracker_config)
    )
    kf_lookup = _keyframe_lookup(scenario)
    run_seed = config.run_seed()
    out = RunOutputs()
    t_start = time.perf_counter()
    stage = {"render": 0.0, "calibrate": 0.0, "track": 0.0}

    def calib_stage(frame):
        t0 = time.perf_counter()
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=run_seed, spawn_key=(9, frame.index))
        )
        result = calibrator.calibrate_frame_arrays(
            frame.obs_pos, frame.obs_desc, frame.obs_cov, frame.reading, frame.index, rng
        )
        stage["calibrate"] += time.perf_counter() - t0
        return result

    def track_stage(frame, result):
        t0 = time.perf_counter()
        g = result.g
        homology = None
        if g is not None and result.intrinsics is not None:
            try:
                homology = build_homology(g, result.intrinsics, init.mu)
            except Exception:
                homology = None
        if config.tracking_mode == "3d":
            records = (
                tracker.step(
                    frame.index, frame.t, frame.detections, g, homology, result.stale
                )
                if g is not None
                else []
            )
        else:
            records = tracker.step(
                frame.index, frame.t, frame.detections, None, None, result.stale
            )
        stage["track"] += time.perf_counter() - t0
        return records

    w_img, h_img = scenario.image_size

    def bookkeeping(frame, result, records):
        out.n_frames += 1
        if result.stale:
            out.stale_frames += 1
        # hypotheses are only meaningful inside the frame, like detections
        out.trajectories.extend(
            r for r in records
            if 0 <= r.x_img < w_img and 0 <= r.y_img < h_img
        )
        for tt in frame.truth.targets:
            out.truth_rows.append(
                {
                    "frame": frame.index,
                    "target_id": tt.target_id,
                    "x_world": float(tt.world[0]),
                    "y_world": float(tt.world[1]),
                    "x_img": float(tt.foot_img[0]),
                    "y_img": float(tt.foot_img[1]),
                    "height_px": tt.height_px,
                }
            )
        rec = None
        cmd = stream.commanded_pose(frame.t)
        kf = kf_lookup.get(cmd)
        if kf is not None and result.h_total is not None and result.pose is not None:
            view = scene.views[kf]
            ref_k = scene.reference_view.k_k
            ref_chain_pose = decompose_to_pose(view.h_rk, ref_k, view.k_k)
            rec = calib_errors(
                frame.index,
                result.pose,
                ref_chain_pose,
                result.h_total.h,
                view.h_rk.h,
                scenario.image_size,
            )
            out.calib_records.append(rec)
        out.diagnostics.append(
            {
                "frame": frame.index,
                "stale": int(result.stale),
                "view_id": result.view_id,
                "n_matches": result.n_matches,
                "inliers": len(result.inlier_obs),
                "outliers": len(result.outlier_obs),
                "births": result.births,
                "deaths": result.deaths,
                "pan": result.pose.pan if result.pose else float("nan"),
                "tilt": result.pose.tilt if result.pose else float("nan"),
                "focal": result.pose.focal if result.pose else float("nan"),
                "reproj_px": rec.reproj_px if rec else float("nan"),
                "wall_ms": result.elapsed_s * 1000.0,
            }
        )

    if not config.parallel:
        for frame in _timed_frames(stream, stage):
            result = calib_stage(frame)
            records = track_stage(frame, result)
            bookkeeping(frame, result, records)
    else:
        q: queue.Queue = queue.Queue(maxsize=8)
        consumer_out = []

        def consumer():
            while True:
                item = q.get()
                if item is None:
                    return
                frame, result = item
                records = track_stage(frame, result)
                consumer_out.append((frame, result, records))

        th = threading.Thread(target=consumer, daemon=True)
        th.start()
        for frame in _timed_frames(stream, stage):
            result = calib_stage(frame)
            q.put((frame, result))
        q.put(None)
        th.join()
        for frame, result, records in consumer_out:
            bookkeeping(frame, result, records)

    out.wall_seconds = time.perf_counter() - t_start
    out.stage_seconds = dict(stage)
    return out


def _timed_frames(stream: SimulatorStream, stage: dict):
    for i in range(stream.sc.n_frames):
        t0 = time.perf_counter()
        frame = stream.render_frame(i)
        stage["render"] += time.perf_counter() - t0
        yield frame


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

DIAG_FIELDS = [
    "frame", "stale", "view_id", "n_matches", "inliers", "outliers", "births",
    "deaths", "pan", "tilt", "focal", "reproj_px", "wall_ms",
]


def write_outputs(out_dir: Path, config: RunConfig, outputs: RunOutputs) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(config.to_manifest(), fh, indent=2, sort_keys=True)
    write_trajectories(out_dir / "trajectories.csv", outputs.trajectories)
    write_truth(out_dir / "truth.csv", outputs.truth_rows)
    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=DIAG_FIELDS)
        wr.writeheader()
        for row in outputs.diagnostics:
            wr.writerow(row)
    with open(out_dir / "calib_errors.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "e_pan_deg", "e_tilt_deg", "e_f_pct", "reproj_px"])
        for r in outputs.calib_records:
            wr.writerow(
                [
                    r.frame, f"{r.e_pan_deg:.17g}", f"{r.e_tilt_deg:.17g}",
                    f"{r.e_f_pct:.17g}", f"{r.reproj_px:.17g}",
                ]
            )


def save_scene_map(path: Path, scene: SceneMap) -> None:
    Path(path).write_bytes(serialize_map(scene))
