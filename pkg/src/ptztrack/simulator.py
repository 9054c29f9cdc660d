"""Synthetic rotating/zooming pinhole camera over a planar scene.

Ground-truth oracle for the calibration and tracking pipeline: a camera
fixed at ``(0, 0, cam_height)`` rotates about its nodal point above the
ground plane Z = 0 (X east, Y north, Z up).  Background landmarks are
generated directly in the reference keyframe's image plane (the mosaic)
and transported between views by the exact rotation homographies, so the
rotation-only model holds by construction and every emitted quantity has a
closed-form truth.

Pose conventions match the geometry module: the world -> camera rotation is
``R_x(tilt) R_y(pan) R0`` with the base ``R0`` aligning the reference
orientation (optical axis north, image y down).

Determinism: every random draw comes from a generator seeded by
``(scenario.seed, stream, frame)``, so identical scenarios produce
bit-identical streams.  Scene state (descriptor drift, scripted
birth/death bursts) evolves sequentially inside a stream instance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .calibrate import Observation
from .geometry import CameraPose, Homography, Intrinsics, apply_homography
from .scene_map import ActuatorReading
from .tracker import Detection

R0 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])

STREAM_KEYFRAME = 0
STREAM_ONLINE = 1
STREAM_FIELD = 2
STREAM_EVENT = 3


# ---------------------------------------------------------------------------
# scenario description
# ---------------------------------------------------------------------------

@dataclass
class NoiseBlock:
    keypoint_sigma: float = 1.0
    keypoint_glitch_rate: float = 0.0  # fraction of observations displaced
    keypoint_glitch_px: tuple = (3.0, 15.0)  # displacement range (uniform)
    descriptor_sigma: float = 0.05
    servo_sigma_deg: float = 0.0  # pose return error, redrawn per move
    actuator_sigma_deg: float = 0.0  # reading noise, per frame
    actuator_step_deg: float = 0.02  # motor quantization of readings
    zoom_rel_sigma: float = 0.0

    def __post_init__(self):
        self.keypoint_glitch_px = tuple(self.keypoint_glitch_px)


@dataclass
class DetectionBlock:
    miss_rate: float = 0.0
    false_alarms_per_frame: float = 0.0
    pos_sigma: float = 1.0
    height_rel_sigma: float = 0.02


@dataclass
class TargetSpec:
    waypoints: list  # [[t, X, Y], ...] world meters
    height_m: float = 1.8


@dataclass
class EventSpec:
    frame: int
    kind: str  # death_burst | birth_burst | set_drift
    count: int = 0
    rate: float = 0.0
    region: Optional[list] = None  # [x0, y0, x1, y1] in mosaic pixels


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    image_size: tuple[int, int] = (640, 480)
    cam_height_m: float = 10.0
    keyframe_pans_deg: tuple = (-10.0, 0.0, 10.0)
    keyframe_tilts_deg: tuple = (-22.0, -18.0)
    keyframe_focals: tuple = (500.0,)
    reference_keyframe: int = 0  # index into the pan x tilt x focal grid
    landmark_count: int = 1500
    descriptor_dim: int = 16
    trajectory: list = field(default_factory=list)  # [[t, pan, tilt, focal], ...]
    n_frames: int = 100
    fps: float = 10.0
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    detection: DetectionBlock = field(default_factory=DetectionBlock)
    targets: list = field(default_factory=list)  # TargetSpec dicts or objects
    events: list = field(default_factory=list)  # EventSpec dicts or objects
    drift_rate: float = 0.0  # descriptor random-walk step norm per frame
    known_distance_m: float = 10.0
    target_height_m: float = 1.8

    def __post_init__(self):
        self.noise = NoiseBlock(**self.noise) if isinstance(self.noise, dict) else self.noise
        self.detection = (
            DetectionBlock(**self.detection) if isinstance(self.detection, dict) else self.detection
        )
        self.targets = [
            TargetSpec(**t) if isinstance(t, dict) else t for t in self.targets
        ]
        self.events = [EventSpec(**e) if isinstance(e, dict) else e for e in self.events]

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.image_size[0] / 2.0, self.image_size[1] / 2.0)

    def keyframe_grid(self) -> list[tuple[float, float, float]]:
        """Commanded (pan_deg, tilt_deg, focal) triples, zoom-major order."""
        out = []
        for f in self.keyframe_focals:
            for tilt in self.keyframe_tilts_deg:
                for pan in self.keyframe_pans_deg:
                    out.append((float(pan), float(tilt), float(f)))
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        raw = json.loads(text)
        raw["image_size"] = tuple(raw.get("image_size", (640, 480)))
        for key in ("keyframe_pans_deg", "keyframe_tilts_deg", "keyframe_focals"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


# ---------------------------------------------------------------------------
# truth containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetTruth:
    target_id: int
    world: np.ndarray  # (2,) meters
    foot_img: np.ndarray  # (2,) pixels (noise-free)
    height_px: float  # noise-free projected height


@dataclass(frozen=True)
class FrameTruth:
    pose: CameraPose
    h_from_ref: np.ndarray  # 3x3, reference mosaic -> this view
    g: np.ndarray  # 3x3, world plane -> this view
    obs_landmark_ids: np.ndarray
    det_target_ids: np.ndarray  # -1 marks a false alarm
    targets: tuple[TargetTruth, ...]


@dataclass(frozen=True)
class SimFrame:
    index: int
    t: float
    obs_pos: np.ndarray  # (n, 2)
    obs_desc: np.ndarray  # (n, d)
    obs_cov: np.ndarray  # (n, 2, 2)
    detections: list[Detection]
    reading: ActuatorReading
    truth: FrameTruth

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(pos=self.obs_pos[i], desc=self.obs_desc[i], cov=self.obs_cov[i])
            for i in range(len(self.obs_pos))
        ]


@dataclass(frozen=True)
class KeyframeCapture:
    view_id: int
    commanded: tuple[float, float, float]  # pan_deg, tilt_deg, focal
    actual: CameraPose
    reading: ActuatorReading
    observations: list[Observation]
    landmark_ids: np.ndarray


@dataclass(frozen=True)
class RegistrationTruth:
    """Exact single-view quantities of the reference mosaic."""

    vline: np.ndarray  # ground-plane vanishing line (homogeneous)
    vp_x: np.ndarray  # vanishing point of world +X (homogeneous)
    vp_y: np.ndarray  # vanishing point of world +Y (homogeneous)
    p1: np.ndarray  # mosaic image of the world origin
    p2: np.ndarray  # mosaic image of (L, 0)
    length_m: float


# ---------------------------------------------------------------------------
# projection helpers
# ---------------------------------------------------------------------------

def pose_rotation(pan_rad: float, tilt_rad: float) -> np.ndarray:
    c, s = np.cos(pan_rad), np.sin(pan_rad)
    ry = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    c, s = np.cos(-tilt_rad), np.sin(-tilt_rad)
    rx = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return rx @ ry


def full_rotation(pan_rad: float, tilt_rad: float) -> np.ndarray:
    return pose_rotation(pan_rad, tilt_rad) @ R0


def intrinsic_matrix(f: float, pp: tuple[float, float]) -> np.ndarray:
    return np.array([[f, 0.0, pp[0]], [0.0, f, pp[1]], [0.0, 0.0, 1.0]])


def ground_homography(
    pan_rad: float, tilt_rad: float, f: float, pp: tuple[float, float], cam_h: float
) -> np.ndarray:
    """World plane (X, Y) meters -> image pixels, exact pinhole."""
    r = full_rotation(pan_rad, tilt_rad)
    c = np.array([0.0, 0.0, cam_h])
    k = intrinsic_matrix(f, pp)
    return k @ np.column_stack([r[:, 0], r[:, 1], -r @ c])


def view_from_ref_homography(
    pose: CameraPose, ref: CameraPose, pp: tuple[float, float]
) -> np.ndarray:
    """Reference mosaic pixels -> view pixels (pure rotation chain)."""
    k_v = intrinsic_matrix(pose.focal, pp)
    k_r_inv = np.linalg.inv(intrinsic_matrix(ref.focal, pp))
    r_rel = pose_rotation(pose.pan, pose.tilt) @ pose_rotation(ref.pan, ref.tilt).T
    return k_v @ r_rel @ k_r_inv


def project_3d(
    pose: CameraPose, pp: tuple[float, float], cam_h: float, pts: np.ndarray
) -> np.ndarray:
    """Full pinhole projection of 3D world points (meters)."""
    r = full_rotation(pose.pan, pose.tilt)
    c = np.array([0.0, 0.0, cam_h])
    k = intrinsic_matrix(pose.focal, pp)
    cam = (np.atleast_2d(pts) - c) @ r.T
    img = cam @ k.T
    return img[:, :2] / img[:, 2:3]


# ---------------------------------------------------------------------------
# the stream
# ---------------------------------------------------------------------------

class SimulatorStream:
    """One deterministic playback of a scenario."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.pp = scenario.principal_point
        grid = scenario.keyframe_grid()
        self.keyframe_commanded = grid
        nz = scenario.noise
        # servo return error per keyframe capture, fixed at capture time
        self.keyframe_actual: list[CameraPose] = []
        for i, (pan, tilt, f) in enumerate(grid):
            rng = self._rng(STREAM_KEYFRAME, i)
            dp = rng.normal(0, nz.servo_sigma_deg)
            dt_ = rng.normal(0, nz.servo_sigma_deg)
            fz = f * np.exp(rng.normal(0, nz.zoom_rel_sigma))
            self.keyframe_actual.append(
                CameraPose(
                    pan=np.deg2rad(pan + dp), tilt=np.deg2rad(tilt + dt_), focal=fz
                )
            )
        self.ref_index = scenario.reference_keyframe
        self.ref_pose = self.keyframe_actual[self.ref_index]
        self._build_landmark_field()
        self._drift_rate = scenario.drift_rate
        self._events = sorted(scenario.events, key=lambda e: e.frame)
        self._frame_cursor = 0
        self._last_commanded: Optional[tuple[float, float, float]] = None
        self._servo_offset = (0.0, 0.0, 1.0)

    # -- deterministic rng streams ------------------------------------------------

    def _rng(self, stream: int, frame: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.sc.seed, spawn_key=(stream, frame))
        )

    # -- landmark field -----------------------------------------------------------

    def _mosaic_cover(self) -> tuple[float, float, float, float]:
        w, h = self.sc.image_size
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float)
        poses = list(self.keyframe_actual)
        for kp in self.sc.trajectory:
            poses.append(
                CameraPose(np.deg2rad(kp[1]), np.deg2rad(kp[2]), float(kp[3]))
            )
        lo = np.array([np.inf, np.inf])
        hi = np.array([-np.inf, -np.inf])
        for pose in poses:
            h_vr = view_from_ref_homography(pose, self.ref_pose, self.pp)
            m = apply_homography(np.linalg.inv(h_vr), corners)
            lo = np.minimum(lo, m.min(axis=0))
            hi = np.maximum(hi, m.max(axis=0))
        pad = 0.02 * (hi - lo)
        lo, hi = lo - pad, hi + pad
        return lo[0], lo[1], hi[0], hi[1]

    def _build_landmark_field(self):
        rng = self._rng(STREAM_FIELD, 0)
        x0, y0, x1, y1 = self._mosaic_cover()
        n = self.sc.landmark_count
        self.lm_pos = np.column_stack(
            [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)]
        )
        self.lm_desc = rng.standard_normal((n, self.sc.descriptor_dim))
        self.lm_ids = np.arange(n, dtype=np.int64)
        self._next_lm_id = n
        self.mosaic_bounds = (x0, y0, x1, y1)

    # -- scene evolution ----------------------------------------------------------

    def _region_indices(self, region: Optional[list]) -> np.ndarray:
        """Indices of current landmarks inside a mosaic rect (all if None)."""
        if region is None:
            return np.arange(len(self.lm_ids))
        x0, y0, x1, y1 = region
        inside = (
            (self.lm_pos[:, 0] >= x0)
            & (self.lm_pos[:, 0] <= x1)
            & (self.lm_pos[:, 1] >= y0)
            & (self.lm_pos[:, 1] <= y1)
        )
        return np.flatnonzero(inside)

    def _apply_events(self, frame: int):
        for ev in self._events:
            if ev.frame != frame:
                continue
            rng = self._rng(STREAM_EVENT, frame)
            if ev.kind == "set_drift":
                self._drift_rate = ev.rate
            elif ev.kind == "death_burst":
                mask = np.ones(len(self.lm_ids), dtype=bool)
                cand = self._region_indices(ev.region)
                count = min(ev.count, len(cand))
                if count:
                    kill = rng.choice(cand, size=count, replace=False)
                    mask[kill] = False
                    self.lm_pos = self.lm_pos[mask]
                    self.lm_desc = self.lm_desc[mask]
                    self.lm_ids = self.lm_ids[mask]
            elif ev.kind == "birth_burst":
                x0, y0, x1, y1 = ev.region if ev.region else self.mosaic_bounds
                n = ev.count
                pos = np.column_stack(
                    [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)]
                )
                desc = rng.standard_normal((n, self.sc.descriptor_dim))
                ids = np.arange(self._next_lm_id, self._next_lm_id + n, dtype=np.int64)
                self._next_lm_id += n
                self.lm_pos = np.vstack([self.lm_pos, pos])
                self.lm_desc = np.vstack([self.lm_desc, desc])
                self.lm_ids = np.concatenate([self.lm_ids, ids])
            else:
                raise ValueError(f"unknown event kind {ev.kind!r}")

    def _apply_drift(self, frame: int):
        if self._drift_rate <= 0 or len(self.lm_ids) == 0:
            return
        rng = self._rng(STREAM_EVENT, 10_000_000 + frame)
        step = rng.standard_normal(self.lm_desc.shape)
        norms = np.linalg.norm(step, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        self.lm_desc = self.lm_desc + self._drift_rate * step / norms

    # -- trajectory ---------------------------------------------------------------

    def commanded_pose(self, t: float) -> tuple[float, float, float]:
        """Piecewise-linear (pan_deg, tilt_deg, focal) along the script."""
        traj = self.sc.trajectory
        if not traj:
            pan, tilt, f = self.keyframe_commanded[self.ref_index]
            return pan, tilt, f
        ts = [kp[0] for kp in traj]
        if t <= ts[0]:
            return tuple(traj[0][1:4])
        if t >= ts[-1]:
            return tuple(traj[-1][1:4])
        j = int(np.searchsorted(ts, t, side="right")) - 1
        t0, t1 = ts[j], ts[j + 1]
        a = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        p = [traj[j][k] + a * (traj[j + 1][k] - traj[j][k]) for k in (1, 2, 3)]
        return p[0], p[1], p[2]

    def _true_pose(self, frame: int, commanded: tuple[float, float, float]) -> CameraPose:
        nz = self.sc.noise
        if commanded != self._last_commanded:
            rng = self._rng(STREAM_ONLINE, 20_000_000 + frame)
            self._servo_offset = (
                rng.normal(0, nz.servo_sigma_deg),
                rng.normal(0, nz.servo_sigma_deg),
                float(np.exp(rng.normal(0, nz.zoom_rel_sigma))),
            )
            self._last_commanded = commanded
        dp, dt_, fz = self._servo_offset
        return CameraPose(
            pan=np.deg2rad(commanded[0] + dp),
            tilt=np.deg2rad(commanded[1] + dt_),
            focal=commanded[2] * fz,
        )

    # -- target motion ------------------------------------------------------------

    def target_state(self, spec: TargetSpec, t: float) -> Optional[np.ndarray]:
        """[X, Y, Xd, Yd] at time t, or None when outside the path window."""
        wp = spec.waypoints
        if not wp or t < wp[0][0] or t > wp[-1][0]:
            return None
        ts = [w[0] for w in wp]
        if t >= ts[-1]:
            j = len(wp) - 2
        else:
            j = max(0, int(np.searchsorted(ts, t, side="right")) - 1)
        t0, t1 = wp[j][0], wp[j + 1][0]
        a = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        x = wp[j][1] + a * (wp[j + 1][1] - wp[j][1])
        y = wp[j][2] + a * (wp[j + 1][2] - wp[j][2])
        vx = 0.0 if t1 == t0 else (wp[j + 1][1] - wp[j][1]) / (t1 - t0)
        vy = 0.0 if t1 == t0 else (wp[j + 1][2] - wp[j][2]) / (t1 - t0)
        return np.array([x, y, vx, vy])

    # -- rendering ----------------------------------------------------------------

    def _render_observations(
        self, pose: CameraPose, rng: np.random.Generator, keypoint_sigma: float
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        w, h = self.sc.image_size
        h_vr = view_from_ref_homography(pose, self.ref_pose, self.pp)
        q = np.hstack([self.lm_pos, np.ones((len(self.lm_pos), 1))]) @ h_vr.T
        wz = q[:, 2]
        front = wz > 1e-9
        img = np.full((len(q), 2), -1.0)
        img[front] = q[front, :2] / wz[front, None]
        vis = front & (img[:, 0] >= 0) & (img[:, 0] < w) & (img[:, 1] >= 0) & (img[:, 1] < h)
        idx = np.flatnonzero(vis)
        nz = self.sc.noise
        pos = img[idx] + rng.normal(0, keypoint_sigma, (len(idx), 2))
        if nz.keypoint_glitch_rate > 0 and len(idx):
            hit = rng.uniform(size=len(idx)) < nz.keypoint_glitch_rate
            n_hit = int(hit.sum())
            if n_hit:
                ang = rng.uniform(0, 2 * np.pi, n_hit)
                mag = rng.uniform(*nz.keypoint_glitch_px, n_hit)
                pos[hit] += np.column_stack([mag * np.cos(ang), mag * np.sin(ang)])
        desc = self.lm_desc[idx] + rng.normal(
            0, nz.descriptor_sigma, (len(idx), self.sc.descriptor_dim)
        )
        cov = np.tile(np.eye(2) * max(keypoint_sigma, 1e-6) ** 2, (len(idx), 1, 1))
        return pos, desc, cov, self.lm_ids[idx].copy()

    def keyframe_captures(self) -> list[KeyframeCapture]:
        """Offline pass over the commanded grid (does not advance the stream)."""
        out = []
        nz = self.sc.noise
        for i, commanded in enumerate(self.keyframe_commanded):
            pose = self.keyframe_actual[i]
            rng = self._rng(STREAM_KEYFRAME, 1_000_000 + i)
            pos, desc, cov, ids = self._render_observations(pose, rng, nz.keypoint_sigma)
            obs = [
                Observation(pos=pos[k], desc=desc[k], cov=cov[k]) for k in range(len(pos))
            ]
            reading = ActuatorReading(
                pan=commanded[0],
                tilt=commanded[1],
                zoom=commanded[2],
                noise=(nz.actuator_sigma_deg, nz.actuator_sigma_deg, nz.zoom_rel_sigma),
            )
            out.append(
                KeyframeCapture(
                    view_id=i,
                    commanded=commanded,
                    actual=pose,
                    reading=reading,
                    observations=obs,
                    landmark_ids=ids,
                )
            )
        return out

    def registration_truth(self) -> RegistrationTruth:
        sc = self.sc
        g_ref = ground_homography(
            self.ref_pose.pan, self.ref_pose.tilt, self.ref_pose.focal, self.pp,
            sc.cam_height_m,
        )
        vline = np.linalg.inv(g_ref).T @ np.array([0.0, 0.0, 1.0])
        r = full_rotation(self.ref_pose.pan, self.ref_pose.tilt)
        k = intrinsic_matrix(self.ref_pose.focal, self.pp)
        vp_x = k @ r[:, 0]
        vp_y = k @ r[:, 1]
        p1 = apply_homography(g_ref, np.array([0.0, 0.0]))
        p2 = apply_homography(g_ref, np.array([sc.known_distance_m, 0.0]))
        return RegistrationTruth(
            vline=vline, vp_x=vp_x, vp_y=vp_y, p1=p1, p2=p2,
            length_m=sc.known_distance_m,
        )

    def render_frame(self, index: int) -> SimFrame:
        """Render the next frame; must be called with consecutive indices."""
        if index != self._frame_cursor:
            raise ValueError(
                f"stream is sequential: expected frame {self._frame_cursor}, got {index}"
            )
        self._frame_cursor += 1
        sc = self.sc
        nz = sc.noise
        t = index / sc.fps
        self._apply_events(index)
        self._apply_drift(index)
        commanded = self.commanded_pose(t)
        pose = self._true_pose(index, commanded)

        rng = self._rng(STREAM_ONLINE, index)
        obs_pos, obs_desc, obs_cov, obs_ids = self._render_observations(
            pose, rng, nz.keypoint_sigma
        )

        # actuator reading: commanded + sensor noise, quantized to motor steps
        step = max(nz.actuator_step_deg, 1e-9)
        pan_r = np.round((commanded[0] + rng.normal(0, nz.actuator_sigma_deg)) / step) * step
        tilt_r = np.round((commanded[1] + rng.normal(0, nz.actuator_sigma_deg)) / step) * step
        zoom_r = commanded[2] * np.exp(rng.normal(0, nz.zoom_rel_sigma))
        reading = ActuatorReading(
            pan=float(pan_r), tilt=float(tilt_r), zoom=float(zoom_r),
            noise=(nz.actuator_sigma_deg, nz.actuator_sigma_deg, nz.zoom_rel_sigma),
        )

        # targets
        g_true = ground_homography(pose.pan, pose.tilt, pose.focal, self.pp, sc.cam_height_m)
        det_block = sc.detection
        w, h = sc.image_size
        detections: list[Detection] = []
        det_ids: list[int] = []
        truths: list[TargetTruth] = []
        for tid, spec in enumerate(sc.targets, start=1):
            st = self.target_state(spec, t)
            if st is None:
                continue
            foot = apply_homography(g_true, st[:2])
            head = project_3d(
                pose, self.pp, sc.cam_height_m,
                np.array([[st[0], st[1], spec.height_m]]),
            )[0]
            height_px = float(np.linalg.norm(head - foot))
            truths.append(
                TargetTruth(target_id=tid, world=st.copy(), foot_img=foot, height_px=height_px)
            )
            if not (0 <= foot[0] < w and 0 <= foot[1] < h):
                continue
            if rng.uniform() < det_block.miss_rate:
                continue
            p_noisy = foot + rng.normal(0, det_block.pos_sigma, 2)
            h_obs = height_px * (1.0 + rng.normal(0, det_block.height_rel_sigma))
            detections.append(Detection(p=p_noisy, confidence=1.0, height_px=float(h_obs)))
            det_ids.append(tid)
        n_fa = rng.poisson(det_block.false_alarms_per_frame)
        typical = np.median([tr.height_px for tr in truths]) if truths else 80.0
        for _ in range(n_fa):
            p_fa = np.array([rng.uniform(0, w), rng.uniform(0, h)])
            detections.append(
                Detection(
                    p=p_fa, confidence=0.5,
                    height_px=float(typical * rng.uniform(0.5, 1.5)),
                )
            )
            det_ids.append(-1)

        truth = FrameTruth(
            pose=pose,
            h_from_ref=view_from_ref_homography(pose, self.ref_pose, self.pp),
            g=g_true,
            obs_landmark_ids=obs_ids,
            det_target_ids=np.array(det_ids, dtype=np.int64),
            targets=tuple(truths),
        )
        return SimFrame(
            index=index, t=t, obs_pos=obs_pos, obs_desc=obs_desc, obs_cov=obs_cov,
            detections=detections, reading=reading, truth=truth,
        )

    def frames(self) -> Iterator[SimFrame]:
        for i in range(self._frame_cursor, self.sc.n_frames):
            yield self.render_frame(i)
