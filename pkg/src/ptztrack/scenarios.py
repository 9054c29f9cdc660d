"""Builders for the standard simulation scenarios used by tests and the CLI.

Each returns a fully-specified Scenario; tweak fields afterwards as
needed.  Trajectories are dwell-and-move scripts over the keyframe grid so
revisit instants land exactly on commanded keyframe poses.
"""

from __future__ import annotations

import numpy as np

from .simulator import DetectionBlock, EventSpec, NoiseBlock, Scenario, TargetSpec

ZOOM_LADDER = (400.0, 566.0, 800.0, 1131.0, 1600.0)


def dwell_trajectory(
    grid: list[tuple[float, float, float]],
    order: list[int],
    dwell_s: float,
    move_s: float,
    start_t: float = 0.0,
) -> list[list[float]]:
    """Keypoints that dwell at each commanded pose then move to the next."""
    traj = []
    t = start_t
    for idx in order:
        pan, tilt, f = grid[idx]
        traj.append([t, pan, tilt, f])
        t += dwell_s
        traj.append([t, pan, tilt, f])
        t += move_s
    return traj


def revisit_scenario(
    seed: int = 0,
    n_frames: int = 600,
    fps: float = 10.0,
    drift_rate: float = 0.0,
    events: list | None = None,
    landmark_count: int = 1200,
    keypoint_sigma: float = 1.0,
    descriptor_sigma: float = 0.08,
    servo_sigma_deg: float = 0.0,
    dwell_s: float = 2.0,
    move_s: float = 1.0,
) -> Scenario:
    """Cycle over a 3x2 keyframe grid at fixed zoom, revisiting forever."""
    sc = Scenario(
        name="revisit",
        seed=seed,
        keyframe_pans_deg=(-12.0, 0.0, 12.0),
        keyframe_tilts_deg=(-22.0, -16.0),
        keyframe_focals=(500.0,),
        landmark_count=landmark_count,
        n_frames=n_frames,
        fps=fps,
        noise=NoiseBlock(
            keypoint_sigma=keypoint_sigma,
            descriptor_sigma=descriptor_sigma,
            servo_sigma_deg=servo_sigma_deg,
            actuator_sigma_deg=0.05,
        ),
        drift_rate=drift_rate,
        events=events or [],
    )
    grid = sc.keyframe_grid()
    order = list(range(len(grid)))
    cycle = dwell_trajectory(grid, order, dwell_s, move_s)
    cycle_t = cycle[-1][0] + move_s
    duration = n_frames / fps
    traj = []
    k = 0
    while k * cycle_t < duration + cycle_t:
        for kp in dwell_trajectory(grid, order, dwell_s, move_s, start_t=k * cycle_t):
            traj.append(kp)
        k += 1
    sc.trajectory = traj
    return sc


def zoom_ladder_scenario(
    seed: int = 0,
    target_focal: float = 2085.0,
    n_frames: int = 40,
    keypoint_sigma: float = 0.5,
) -> Scenario:
    """Keyframes over the full zoom ladder, then an online zoom past the
    last rung up to the target focal."""
    sc = Scenario(
        name="zoom_ladder",
        seed=seed,
        keyframe_pans_deg=(-8.0, 0.0, 8.0),
        keyframe_tilts_deg=(-20.0, -15.0),
        keyframe_focals=ZOOM_LADDER,
        landmark_count=2600,
        n_frames=n_frames,
        fps=10.0,
        noise=NoiseBlock(keypoint_sigma=keypoint_sigma, descriptor_sigma=0.05),
    )
    t_ramp = 0.6 * n_frames / sc.fps
    t_end = n_frames / sc.fps
    sc.trajectory = [
        [0.0, 0.0, -15.0, ZOOM_LADDER[-1]],
        [t_ramp, 0.0, -15.0, target_focal],
        [t_end, 0.0, -15.0, target_focal],
    ]
    return sc


def tracking_scenario(
    seed: int = 0,
    n_frames: int = 300,
    fps: float = 10.0,
    zoom_burst: bool = True,
    detection_noise: float = 2.0,
    miss_rate: float = 0.05,
    false_alarms: float = 0.2,
) -> Scenario:
    """Three crossing targets under camera pan sweeps and a zoom step."""
    duration = n_frames / fps
    f0, f1 = 520.0, (1040.0 if zoom_burst else 520.0)
    traj = [
        [0.0, -8.0, -18.0, f0],
        [0.35 * duration, 8.0, -18.0, f0],
        [0.40 * duration, 8.0, -18.0, f1],
        [0.70 * duration, -4.0, -18.0, f1],
        [duration, 2.0, -18.0, f0],
    ]
    targets = [
        TargetSpec(waypoints=[[0.0, -12.0, 24.0], [duration, 12.0, 30.0]], height_m=1.8),
        TargetSpec(waypoints=[[0.0, 12.0, 26.0], [duration, -12.0, 28.0]], height_m=1.8),
        TargetSpec(
            waypoints=[[0.0, 0.0, 36.0], [0.5 * duration, 2.0, 24.0], [duration, -6.0, 34.0]],
            height_m=1.8,
        ),
    ]
    return Scenario(
        name="tracking",
        seed=seed,
        image_size=(640, 480),
        cam_height_m=10.0,
        keyframe_pans_deg=(-10.0, 0.0, 10.0),
        keyframe_tilts_deg=(-21.0, -16.0),
        keyframe_focals=(520.0, 1040.0),
        landmark_count=1600,
        n_frames=n_frames,
        fps=fps,
        trajectory=traj,
        targets=targets,
        noise=NoiseBlock(keypoint_sigma=1.0, descriptor_sigma=0.05),
        detection=DetectionBlock(
            miss_rate=miss_rate,
            false_alarms_per_frame=false_alarms,
            pos_sigma=detection_noise,
            height_rel_sigma=0.03,
        ),
    )


def parked_car_events(frame: int, region: list, burst: int = 60) -> list[EventSpec]:
    """A large object leaves: its landmarks die, fresh background appears."""
    return [
        EventSpec(frame=frame, kind="death_burst", count=burst, region=region),
        EventSpec(frame=frame, kind="birth_burst", count=burst, region=region),
    ]
