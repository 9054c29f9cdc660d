"""Multi-target tracking on the world plane with Cheap-JPDAF association.

Targets carry a constant-velocity state [X, Y, Xd, Yd] in meters on the
ground plane.  The measurement is the projective image of the position
through the world -> frame homography; gain and innovation covariance use
its 2x4 linearization ``[J | 0]``.  Association weights follow the cheap
joint-probabilistic form ``b_ij = g_ij / (S_Ti + S_Dj - g_ij + B)`` and are
applied as a weighted innovation with a spread-of-innovations covariance
correction, so a lone gated detection with zero bias degenerates to a
plain gated EKF update.

``ImageTracker`` is the ablation: the same machinery with state in pixels,
identity measurement, and the per-track scale clamped to +-15% of its
previous value per frame instead of the homology prediction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import BehindCamera, SingularS
from .geometry import Homography, linearize_homography_at
from .worldproj import Homology, estimate_scale, frame_to_world

STATUS_TENTATIVE = "tentative"
STATUS_CONFIRMED = "confirmed"
STATUS_LOST = "lost"


@dataclass(frozen=True)
class TargetState:
    """World-plane target state with covariance and lifecycle counters."""

    s: np.ndarray  # [X, Y, Xd, Yd]
    P: np.ndarray  # (4, 4)
    id: int
    status: str = STATUS_TENTATIVE
    age: int = 0
    hits: int = 0
    misses: int = 0


@dataclass(frozen=True)
class Detection:
    """Target foot observation in the current frame."""

    p: np.ndarray  # (2,) pixels
    confidence: float = 1.0
    height_px: float = 0.0  # predicted (3D mode) or observed (2D mode) height


@dataclass(frozen=True)
class MotionModel:
    """Constant-velocity transition with white-acceleration process noise."""

    dt: float
    sigma_a: float

    @property
    def A(self) -> np.ndarray:
        a = np.eye(4)
        a[0, 2] = self.dt
        a[1, 3] = self.dt
        return a

    @property
    def Q(self) -> np.ndarray:
        dt = self.dt
        q = self.sigma_a**2
        q11 = q * dt**4 / 4.0
        q12 = q * dt**3 / 2.0
        q22 = q * dt**2
        out = np.zeros((4, 4))
        out[0, 0] = out[1, 1] = q11
        out[0, 2] = out[2, 0] = q12
        out[1, 3] = out[3, 1] = q12
        out[2, 2] = out[3, 3] = q22
        return out


@dataclass
class TrackerConfig:
    sigma_a: float = 0.5  # m/s^2 (3D) or px/s^2-scaled (2D mode uses sigma_a_px)
    sigma_a_px: float = 40.0
    v_sigma_px: float = 2.0
    gate_sigma: float = 3.0
    spawn_suppress_sigma: float = 6.0  # no new track inside this gate of an old one
    clutter_bias_frac: float = 1e-3  # B as a fraction of the peak likelihood
    confirm_m: int = 3
    confirm_n: int = 5
    delete_after: int = 10
    stale_v_inflation: float = 4.0
    init_pos_var: float = 0.05  # m^2; roughly the back-projected detection noise
    init_vel_var: float = 1.0  # (m/s)^2, pedestrian speeds
    init_pos_var_px: float = 25.0  # 2D-mode equivalents
    init_vel_var_px: float = 900.0

    def v_cov(self, stale: bool = False) -> np.ndarray:
        v = np.eye(2) * self.v_sigma_px**2
        return v * self.stale_v_inflation if stale else v


# ---------------------------------------------------------------------------
# single-track operations
# ---------------------------------------------------------------------------

def predict(track: TargetState, dt: float, model: Optional[MotionModel] = None,
            sigma_a: float = 0.5) -> TargetState:
    """Constant-velocity prediction: s <- A s, P <- A P A^T + Q."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    m = model or MotionModel(dt=dt, sigma_a=sigma_a)
    a = m.A
    return replace(track, s=a @ track.s, P=a @ track.P @ a.T + m.Q, age=track.age + 1)


def project_track(
    track: TargetState, g: Homography, v_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted image point, innovation covariance and 2x4 Jacobian.

    The point is the exact projective image of the position; the Jacobian
    is the homography linearized at the predicted position padded with
    zeros on the velocity block.
    """
    x = np.array([track.s[0], track.s[1], 1.0])
    q = g.h @ x
    ref = g.h @ np.array([0.0, 0.0, 1.0])
    if abs(q[2]) < 1e-12 or np.sign(q[2]) != np.sign(ref[2]):
        raise BehindCamera(f"track {track.id} projects behind the camera")
    p = q[:2] / q[2]
    j = linearize_homography_at(g, track.s[:2])
    g_tilde = np.hstack([j, np.zeros((2, 2))])
    s_cov = g_tilde @ track.P @ g_tilde.T + v_cov
    return p, s_cov, g_tilde


@dataclass
class Association:
    """Per-track JPDAF output: weighted innovation and bookkeeping."""

    innovation: np.ndarray  # beta-weighted innovation (2,)
    beta: np.ndarray  # weights over gated detections
    beta0: float  # leftover no-detection mass
    spread: np.ndarray  # sum_j beta_j nu_j nu_j^T - nu nu^T
    det_indices: np.ndarray


def associate_cheap_jpdaf(
    predicted: Sequence[np.ndarray],
    innovation_covs: Sequence[np.ndarray],
    detections: Sequence[Detection],
    gate_sigma: float = 3.0,
    clutter_bias_frac: float = 1e-3,
) -> list[Optional[Association]]:
    """Cheap-JPDAF weights for every track; None where nothing gated.

    ``b_ij = g_ij / (S_Ti + S_Dj - g_ij + B)`` with g the Gaussian
    measurement likelihood, S_Ti/S_Dj its row/column sums and B a clutter
    bias set to a fraction of the peak likelihood.
    """
    nt = len(predicted)
    nd = len(detections)
    if nt == 0:
        return []
    if nd == 0:
        return [None] * nt
    pts = np.array([d.p for d in detections])
    lik = np.zeros((nt, nd))
    nus = np.zeros((nt, nd, 2))
    gated = np.zeros((nt, nd), dtype=bool)
    for i in range(nt):
        s = innovation_covs[i]
        det = np.linalg.det(s)
        if det <= 0:
            raise SingularS(f"innovation covariance not positive for track {i}")
        s_inv = np.linalg.inv(s)
        nu = pts - predicted[i]
        d2 = np.einsum("nj,jk,nk->n", nu, s_inv, nu)
        inside = d2 <= gate_sigma**2
        gated[i] = inside
        nus[i] = nu
        lik[i, inside] = np.exp(-0.5 * d2[inside]) / (2 * np.pi * np.sqrt(det))
    peak = lik.max()
    bias = clutter_bias_frac * peak if peak > 0 else 0.0
    s_t = lik.sum(axis=1, keepdims=True)
    s_d = lik.sum(axis=0, keepdims=True)
    denom = s_t + s_d - lik + bias
    beta = np.divide(lik, denom, out=np.zeros_like(lik), where=denom > 0)
    out: list[Optional[Association]] = []
    for i in range(nt):
        sel = np.flatnonzero(gated[i])
        if len(sel) == 0 or beta[i, sel].sum() <= 0:
            out.append(None)
            continue
        b = beta[i, sel]
        nu_bar = b @ nus[i, sel]
        spread = np.einsum("n,ni,nj->ij", b, nus[i, sel], nus[i, sel]) - np.outer(
            nu_bar, nu_bar
        )
        out.append(
            Association(
                innovation=nu_bar,
                beta=b,
                beta0=float(max(0.0, 1.0 - b.sum())),
                spread=spread,
                det_indices=sel,
            )
        )
    return out


def update(
    track: TargetState,
    assoc: Association,
    s_cov: np.ndarray,
    g_tilde: np.ndarray,
    v_cov: np.ndarray,
) -> TargetState:
    """JPDAF-weighted Kalman update with Joseph-form covariance."""
    det = np.linalg.det(s_cov)
    if not np.isfinite(det) or det <= 0:
        raise SingularS("innovation covariance not invertible")
    s_inv = np.linalg.inv(s_cov)
    w = track.P @ g_tilde.T @ s_inv
    s_new = track.s + w @ assoc.innovation
    i_wg = np.eye(4) - w @ g_tilde
    p_updated = i_wg @ track.P @ i_wg.T + w @ v_cov @ w.T
    p_new = (
        assoc.beta0 * track.P
        + (1.0 - assoc.beta0) * p_updated
        + w @ assoc.spread @ w.T
    )
    p_new = 0.5 * (p_new + p_new.T)
    return replace(track, s=s_new, P=p_new)


def track_manage(
    tracks: list[TargetState],
    hit_history: dict[int, list[bool]],
    unassociated: Sequence[Detection],
    new_states: Sequence[np.ndarray],
    new_covs: Sequence[np.ndarray],
    id_counter: itertools.count,
    config: TrackerConfig,
) -> list[TargetState]:
    """M-of-N confirmation, miss-count deletion, and new tentative tracks.

    Track ids are handed out monotonically and never reused.
    """
    managed: list[TargetState] = []
    for t in tracks:
        hist = hit_history.setdefault(t.id, [])
        del hist[: max(0, len(hist) - config.confirm_n)]
        status = t.status
        if status == STATUS_TENTATIVE and sum(hist) >= config.confirm_m:
            status = STATUS_CONFIRMED
        if t.misses >= config.delete_after:
            status = STATUS_LOST
        if status == STATUS_LOST:
            hit_history.pop(t.id, None)
            continue
        managed.append(replace(t, status=status))
    for det, s0, p0 in zip(unassociated, new_states, new_covs):
        tid = next(id_counter)
        managed.append(
            TargetState(s=np.asarray(s0, dtype=float), P=np.asarray(p0, dtype=float),
                        id=tid, status=STATUS_TENTATIVE, age=0, hits=1, misses=0)
        )
        hit_history[tid] = [True]
    return managed


# ---------------------------------------------------------------------------
# per-frame record
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackRecord:
    """One trajectory-file row."""

    frame: int
    track_id: int
    x_world: float
    y_world: float
    x_img: float
    y_img: float
    height_px: float
    status: str


class WorldTracker:
    """3D-mode tracker: states in meters on the ground plane."""

    mode = "3d"

    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.tracks: list[TargetState] = []
        self.hit_history: dict[int, list[bool]] = {}
        self._ids = itertools.count(1)
        self._last_t: Optional[float] = None

    def step(
        self,
        frame: int,
        t: float,
        detections: Sequence[Detection],
        g: Homography,
        homology: Optional[Homology] = None,
        stale: bool = False,
    ) -> list[TrackRecord]:
        cfg = self.config
        dt = (t - self._last_t) if self._last_t is not None else None
        self._last_t = t
        if dt is not None and dt > 0:
            model = MotionModel(dt=dt, sigma_a=cfg.sigma_a)
            self.tracks = [predict(tr, dt, model) for tr in self.tracks]
        v_cov = cfg.v_cov(stale)

        predicted, s_covs, g_tildes, visible = [], [], [], []
        for tr in self.tracks:
            try:
                p, s_cov, g_tilde = project_track(tr, g, v_cov)
            except BehindCamera:
                predicted.append(None)
                s_covs.append(None)
                g_tildes.append(None)
                visible.append(False)
                continue
            predicted.append(p)
            s_covs.append(s_cov)
            g_tildes.append(g_tilde)
            visible.append(True)

        vis_idx = [i for i, v in enumerate(visible) if v]
        assoc = associate_cheap_jpdaf(
            [predicted[i] for i in vis_idx],
            [s_covs[i] for i in vis_idx],
            detections,
            cfg.gate_sigma,
            cfg.clutter_bias_frac,
        )
        used = np.zeros(len(detections), dtype=bool)
        new_tracks = list(self.tracks)
        for k, i in enumerate(vis_idx):
            a = assoc[k]
            tr = self.tracks[i]
            if a is None:
                new_tracks[i] = replace(tr, misses=tr.misses + 1)
                self.hit_history.setdefault(tr.id, []).append(False)
                continue
            used[a.det_indices] = True
            new_tracks[i] = replace(
                update(tr, a, s_covs[i], g_tildes[i], v_cov),
                hits=tr.hits + 1,
                misses=0,
            )
            self.hit_history.setdefault(tr.id, []).append(True)
        for i, v in enumerate(visible):
            if not v:
                tr = new_tracks[i]
                new_tracks[i] = replace(tr, misses=tr.misses + 1)
                self.hit_history.setdefault(tr.id, []).append(False)

        free = np.flatnonzero(~used)
        if len(free) and vis_idx:
            keep = []
            for j in free:
                d2_min = np.inf
                for i in vis_idx:
                    nu = detections[j].p - predicted[i]
                    d2 = float(nu @ np.linalg.solve(s_covs[i], nu))
                    d2_min = min(d2_min, d2)
                if d2_min > cfg.spawn_suppress_sigma**2:
                    keep.append(j)
            free = np.array(keep, dtype=np.int64)
        fresh = [detections[j] for j in free]
        states, covs = [], []
        for det in fresh:
            xy = frame_to_world(g, det.p)
            states.append(np.array([xy[0], xy[1], 0.0, 0.0]))
            p0 = np.diag(
                [cfg.init_pos_var, cfg.init_pos_var, cfg.init_vel_var, cfg.init_vel_var]
            )
            covs.append(p0)
        self.tracks = track_manage(
            new_tracks, self.hit_history, fresh, states, covs, self._ids, cfg
        )

        records = []
        for tr in self.tracks:
            try:
                q = g.h @ np.array([tr.s[0], tr.s[1], 1.0])
                img = q[:2] / q[2]
            except Exception:
                continue
            height = 0.0
            if homology is not None:
                try:
                    height = estimate_scale(homology, img, stale=stale).height_px
                except Exception:
                    height = 0.0
            records.append(
                TrackRecord(
                    frame=frame,
                    track_id=tr.id,
                    x_world=float(tr.s[0]),
                    y_world=float(tr.s[1]),
                    x_img=float(img[0]),
                    y_img=float(img[1]),
                    height_px=float(height),
                    status=tr.status,
                )
            )
        return records


class ImageTracker:
    """2D ablation mode: pixel states, identity measurement, scale window.

    Without the world-plane mapping the target scale cannot be predicted;
    each track's scale follows the detection heights clamped to +-15% of
    the previous value per frame.
    """

    mode = "2d"
    SCALE_WINDOW = 0.15

    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.tracks: list[TargetState] = []
        self.hit_history: dict[int, list[bool]] = {}
        self.scales: dict[int, float] = {}
        self._ids = itertools.count(1)
        self._last_t: Optional[float] = None

    def step(
        self,
        frame: int,
        t: float,
        detections: Sequence[Detection],
        g: Optional[Homography] = None,
        homology: Optional[Homology] = None,
        stale: bool = False,
    ) -> list[TrackRecord]:
        cfg = self.config
        dt = (t - self._last_t) if self._last_t is not None else None
        self._last_t = t
        if dt is not None and dt > 0:
            model = MotionModel(dt=dt, sigma_a=cfg.sigma_a_px)
            self.tracks = [predict(tr, dt, model) for tr in self.tracks]
        v_cov = cfg.v_cov(stale)
        g_tilde = np.hstack([np.eye(2), np.zeros((2, 2))])

        predicted = [tr.s[:2] for tr in self.tracks]
        s_covs = [g_tilde @ tr.P @ g_tilde.T + v_cov for tr in self.tracks]
        assoc = associate_cheap_jpdaf(
            predicted, s_covs, detections, cfg.gate_sigma, cfg.clutter_bias_frac
        )
        used = np.zeros(len(detections), dtype=bool)
        new_tracks = list(self.tracks)
        for i, a in enumerate(assoc):
            tr = self.tracks[i]
            if a is None:
                new_tracks[i] = replace(tr, misses=tr.misses + 1)
                self.hit_history.setdefault(tr.id, []).append(False)
                continue
            used[a.det_indices] = True
            new_tracks[i] = replace(
                update(tr, a, s_covs[i], g_tilde, v_cov), hits=tr.hits + 1, misses=0
            )
            self.hit_history.setdefault(tr.id, []).append(True)
            # scale search within the window around the previous scale
            obs_h = float(
                np.dot(a.beta, [detections[j].height_px for j in a.det_indices])
                / max(a.beta.sum(), 1e-12)
            )
            prev = self.scales.get(tr.id, obs_h)
            lo, hi = prev * (1 - self.SCALE_WINDOW), prev * (1 + self.SCALE_WINDOW)
            self.scales[tr.id] = float(np.clip(obs_h, lo, hi)) if prev > 0 else obs_h

        free = np.flatnonzero(~used)
        if len(free) and self.tracks:
            keep = []
            for j in free:
                d2_min = min(
                    float((detections[j].p - predicted[i])
                          @ np.linalg.solve(s_covs[i], detections[j].p - predicted[i]))
                    for i in range(len(self.tracks))
                )
                if d2_min > cfg.spawn_suppress_sigma**2:
                    keep.append(j)
            free = np.array(keep, dtype=np.int64)
        fresh = [detections[j] for j in free]
        states = [np.array([d.p[0], d.p[1], 0.0, 0.0]) for d in fresh]
        covs = [
            np.diag([cfg.init_pos_var_px, cfg.init_pos_var_px,
                     cfg.init_vel_var_px, cfg.init_vel_var_px])
            for _ in fresh
        ]
        before = {tr.id for tr in new_tracks}
        self.tracks = track_manage(
            new_tracks, self.hit_history, fresh, states, covs, self._ids, cfg
        )
        for tr, det in zip([t_ for t_ in self.tracks if t_.id not in before], fresh):
            self.scales[tr.id] = float(det.height_px)

        records = []
        for tr in self.tracks:
            records.append(
                TrackRecord(
                    frame=frame,
                    track_id=tr.id,
                    x_world=float("nan"),
                    y_world=float("nan"),
                    x_img=float(tr.s[0]),
                    y_img=float(tr.s[1]),
                    height_px=float(self.scales.get(tr.id, 0.0)),
                    status=tr.status,
                )
            )
        return records
