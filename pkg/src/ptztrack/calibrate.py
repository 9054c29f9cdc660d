"""On-line camera pose estimation and scene-map updating.

Per frame: retrieve the nearest view map from the actuator reading, match
observation descriptors against a random landmark subset, estimate the
frame -> view-map homography with RANSAC + DLT, derive pose and the
world -> frame map, then refine each matched landmark with a per-landmark
EKF and run the birth-death lifecycle.

The EKF works in the view-map frame: the observation is back-mapped
through the estimated homography and compared against the stored landmark.
With ``H~`` the 2x2 linearization of the frame -> map homography at the
observation, the gain is ``K = P H~^-1 [H~^-1 P H~^-T + L]^-1`` (the
``as_printed`` form); the transposed textbook gain ``K = P H~^-T [...]`` is
available via ``gain_form="textbook"``.  The two coincide whenever the
local linearization is a scaled rotation, which inter-keyframe PTZ motion
approximates closely.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .errors import (
    InsufficientInliers,
    NoInliers,
    NotARotation,
    SingularInnovation,
    TooFewMatches,
)
from .geometry import Homography, PointMatch
from .scene_map import Landmark, SceneMap, ViewMap, match_indices, nearest_view

GAIN_FORMS = ("as_printed", "textbook")


@dataclass(frozen=True)
class Observation:
    """A keypoint detected in the current frame."""

    pos: np.ndarray
    desc: np.ndarray
    cov: Optional[np.ndarray] = None  # defaults to the configured keypoint noise


@dataclass
class MeasurementNoise:
    """Per-landmark mapping-error covariance with its three addends."""

    lam: np.ndarray  # (2, 2) total
    homography_term: np.ndarray
    keypoint_term: np.ndarray
    map_term: np.ndarray

    @property
    def homogeneous(self) -> np.ndarray:
        """3x3 form in normalized coordinates; its principal minor is lam."""
        out = np.zeros((3, 3))
        out[:2, :2] = self.lam
        return out


@dataclass
class CalibConfig:
    """Knobs of the per-frame calibration loop."""

    sample_size: int = 1000
    ratio: float = 0.8
    ransac_threshold_px: float = 3.0
    ransac_confidence: float = 0.999
    ransac_max_iters: int = 1000
    min_inliers: int = 8
    keypoint_sigma: float = 1.0
    forgetting_alpha: float = 0.1
    birth_persistence: int = 20
    birth_desc_gate: float = 2.0
    birth_pos_gate_px: float = 8.0
    death_threshold: int = 20
    proximity_accept: float = 0.5
    protected_min_original: int = 50
    max_landmarks: int = 3000
    birth_inflation_px2: float = 1.0
    landmark_process_noise_px2: float = 0.0  # optional per-frame prior
    # inflation for non-original landmarks (originals always anchor the datum)
    rotation_defect_tol: float = 0.08  # looser than the kernel default: noisy
    # zoomed chains show defects ~0.02 while pose/focal stay accurate
    gain_form: str = "as_printed"
    map_updating: bool = True
    proximity_check: bool = True
    frame_size: tuple[int, int] = (1280, 720)

    def keypoint_cov(self) -> np.ndarray:
        return np.eye(2) * self.keypoint_sigma**2


@dataclass
class CalibrationResult:
    """Outcome of one calibration frame."""

    frame: int
    view_id: int
    stale: bool
    h: Optional[Homography] = None  # frame -> view map, with covariance
    h_total: Optional[Homography] = None  # frame -> reference mosaic
    pose: Optional[geo.CameraPose] = None
    g: Optional[Homography] = None  # world -> frame
    intrinsics: Optional[geo.Intrinsics] = None
    n_matches: int = 0
    inlier_obs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    inlier_lm: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    outlier_obs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    births: int = 0
    deaths: int = 0
    elapsed_s: float = 0.0


# ---------------------------------------------------------------------------
# robust homography estimation
# ---------------------------------------------------------------------------

def _dlt_minimal_batch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """4-point DLT for a batch of minimal samples: (k, 4, 2) -> (k, 3, 3).

    Degenerate samples come back as NaN matrices instead of raising.
    """
    k = src.shape[0]
    c_s = src.mean(axis=1, keepdims=True)
    d_s = np.linalg.norm(src - c_s, axis=2).mean(axis=1)
    s_s = np.where(d_s > 0, np.sqrt(2.0) / np.where(d_s > 0, d_s, 1.0), 1.0)
    c_d = dst.mean(axis=1, keepdims=True)
    d_d = np.linalg.norm(dst - c_d, axis=2).mean(axis=1)
    s_d = np.where(d_d > 0, np.sqrt(2.0) / np.where(d_d > 0, d_d, 1.0), 1.0)
    sn = (src - c_s) * s_s[:, None, None]
    dn = (dst - c_d) * s_d[:, None, None]
    x, y = sn[:, :, 0], sn[:, :, 1]
    xd, yd = dn[:, :, 0], dn[:, :, 1]
    a = np.zeros((k, 8, 9))
    a[:, 0::2, 0] = -x
    a[:, 0::2, 1] = -y
    a[:, 0::2, 2] = -1.0
    a[:, 0::2, 6] = xd * x
    a[:, 0::2, 7] = xd * y
    a[:, 0::2, 8] = xd
    a[:, 1::2, 3] = -x
    a[:, 1::2, 4] = -y
    a[:, 1::2, 5] = -1.0
    a[:, 1::2, 6] = yd * x
    a[:, 1::2, 7] = yd * y
    a[:, 1::2, 8] = yd
    m = a.transpose(0, 2, 1) @ a
    w, v = np.linalg.eigh(m)
    h_n = v[:, :, 0].reshape(k, 3, 3)
    bad = w[:, 1] <= 1e-18 * np.maximum(w[:, -1], 1e-300)
    t_dst_inv = np.zeros((k, 3, 3))
    t_dst_inv[:, 0, 0] = 1.0 / s_d
    t_dst_inv[:, 1, 1] = 1.0 / s_d
    t_dst_inv[:, 0, 2] = c_d[:, 0, 0]
    t_dst_inv[:, 1, 2] = c_d[:, 0, 1]
    t_dst_inv[:, 2, 2] = 1.0
    t_src = np.zeros((k, 3, 3))
    t_src[:, 0, 0] = s_s
    t_src[:, 1, 1] = s_s
    t_src[:, 0, 2] = -s_s * c_s[:, 0, 0]
    t_src[:, 1, 2] = -s_s * c_s[:, 0, 1]
    t_src[:, 2, 2] = 1.0
    h = t_dst_inv @ h_n @ t_src
    h[bad] = np.nan
    return h


def ransac_homography_arrays(
    src: np.ndarray,
    dst: np.ndarray,
    threshold_px: float = 3.0,
    confidence: float = 0.999,
    max_iters: int = 1000,
    min_inliers: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC + DLT re-estimation on coordinate arrays.

    Returns (3x3 homography, inlier mask); the mask is recomputed under
    the final fit, so every reported inlier has forward transfer error
    <= threshold_px.
    """
    n = len(src)
    if n < 4:
        raise TooFewMatches(f"need >= 4 tentative matches, got {n}")
    rng = rng or np.random.default_rng()
    src_h = np.hstack([src, np.ones((n, 1))])

    def errors(hm: np.ndarray) -> np.ndarray:
        q = src_h @ hm.T
        w = q[:, 2]
        bad = np.abs(w) < 1e-12
        w = np.where(bad, 1.0, w)
        e = np.linalg.norm(q[:, :2] / w[:, None] - dst, axis=1)
        return np.where(bad, np.inf, e)

    best_mask = None
    best_count = 0
    needed = max_iters
    drawn = 0
    batch = 16
    while drawn < min(needed, max_iters):
        k = min(batch, max_iters - drawn)
        drawn += k
        picks = np.array([rng.choice(n, size=4, replace=False) for _ in range(k)])
        cands = _dlt_minimal_batch(src[picks], dst[picks])  # (k, 3, 3), NaN if bad
        q = cands @ src_h.T  # (k, 3, n)
        w = q[:, 2, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            e2 = (q[:, 0, :] / w - dst[:, 0]) ** 2 + (q[:, 1, :] / w - dst[:, 1]) ** 2
        ok = np.isfinite(e2) & (np.abs(w) > 1e-12)
        inl = ok & (e2 <= threshold_px**2)
        counts = inl.sum(axis=1)
        bi = int(np.argmax(counts))
        if counts[bi] > best_count:
            mask = inl[bi]
            count = int(counts[bi])
            if count >= 4:
                # local optimization: one consensus refit tightens the
                # inlier count and with it the adaptive iteration bound
                try:
                    h_lo = geo.dlt_homography_arrays(src[mask], dst[mask])
                    mask_lo = errors(h_lo) <= threshold_px
                    if int(mask_lo.sum()) > count:
                        mask = mask_lo
                        count = int(mask_lo.sum())
                except geo.DegenerateConfiguration:
                    pass
            best_count = count
            best_mask = mask
            w_in = count / n
            if w_in >= 1.0:
                break
            denom = np.log(max(1.0 - w_in**4, 1e-12))
            needed = int(np.ceil(np.log(max(1.0 - confidence, 1e-12)) / denom))
    if best_mask is None or best_count < max(4, min_inliers):
        raise InsufficientInliers(
            f"best consensus {best_count} below minimum {min_inliers}"
        )
    # refit on the consensus set until the mask stabilizes
    mask = best_mask
    h = None
    for _ in range(3):
        h = geo.dlt_homography_arrays(src[mask], dst[mask])
        new_mask = errors(h) <= threshold_px
        if new_mask.sum() < max(4, min_inliers):
            raise InsufficientInliers("consensus collapsed during re-estimation")
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = errors(h) <= threshold_px
    if mask.sum() < max(4, min_inliers):
        raise InsufficientInliers("final inlier set below minimum")
    return h, mask


def estimate_frame_homography(
    matches: Sequence[PointMatch],
    threshold_px: float = 3.0,
    confidence: float = 0.999,
    max_iters: int = 1000,
    min_inliers: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Homography, np.ndarray]:
    """RANSAC + DLT re-estimation; returns (homography, inlier mask)."""
    src = np.array([m.src for m in matches]) if matches else np.empty((0, 2))
    dst = np.array([m.dst for m in matches]) if matches else np.empty((0, 2))
    h, mask = ransac_homography_arrays(
        src, dst, threshold_px, confidence, max_iters, min_inliers, rng
    )
    return Homography(h), mask


# ---------------------------------------------------------------------------
# measurement covariance (landmark mapping error)
# ---------------------------------------------------------------------------

def _perspective_jacobian(q: np.ndarray) -> np.ndarray:
    w = q[2]
    return np.array([[1.0 / w, 0.0, -q[0] / w**2], [0.0, 1.0 / w, -q[1] / w**2]])


def measurement_covariance(
    match: PointMatch,
    h: Homography,
    lm_P: Optional[np.ndarray] = None,
    keypoint_sigma: float = 1.0,
) -> MeasurementNoise:
    """Covariance of the landmark mapping error for one matched pair.

    Three addends, assembled in homogeneous coordinates and reduced with
    the perspective-division Jacobian: the homography uncertainty acting
    through the observation's homogeneous coordinates, the keypoint
    localization error of the current frame, and the stored landmark
    position uncertainty propagated by the localized inverse map.
    """
    if h.cov is None:
        raise ValueError("homography covariance required")
    u = np.asarray(match.dst, dtype=float)
    lam_prime = (
        np.asarray(match.src_cov, dtype=float)
        if match.src_cov is not None
        else np.eye(2) * keypoint_sigma**2
    )
    P = (
        np.asarray(lm_P, dtype=float)
        if lm_P is not None
        else (np.asarray(match.dst_cov, dtype=float) if match.dst_cov is not None else np.zeros((2, 2)))
    )
    hinv = np.linalg.inv(h.h)
    z = hinv @ np.array([u[0], u[1], 1.0])  # predicted observation, homogeneous
    jp = _perspective_jacobian(z)
    # d(pi(H^-1 u~))/dh = -J_pi H^-1 B(z); B stacks z^T blockwise
    b = np.zeros((3, 9))
    b[0, 0:3] = z
    b[1, 3:6] = z
    b[2, 6:9] = z
    j_h = -jp @ hinv @ b
    term_h = j_h @ h.cov @ j_h.T
    m_inv = jp @ hinv[:, :2]  # localized map -> frame Jacobian
    term_p = m_inv @ P @ m_inv.T
    lam = term_h + lam_prime + term_p
    lam = 0.5 * (lam + lam.T)
    return MeasurementNoise(
        lam=lam, homography_term=term_h, keypoint_term=lam_prime, map_term=term_p
    )


def measurement_covariance_batch(
    lm_pos: np.ndarray,
    lm_P: np.ndarray,
    kp_cov: np.ndarray,
    h: Homography,
) -> np.ndarray:
    """Vectorized measurement_covariance over matched landmarks.

    lm_pos (n, 2), lm_P (n, 2, 2), kp_cov (n, 2, 2); returns (n, 2, 2).
    """
    n = len(lm_pos)
    if n == 0:
        return np.empty((0, 2, 2))
    hinv = np.linalg.inv(h.h)
    z = np.hstack([lm_pos, np.ones((n, 1))]) @ hinv.T  # predicted observations
    w = z[:, 2]
    jp = np.zeros((n, 2, 3))
    jp[:, 0, 0] = 1.0 / w
    jp[:, 1, 1] = 1.0 / w
    jp[:, 0, 2] = -z[:, 0] / w**2
    jp[:, 1, 2] = -z[:, 1] / w**2
    t = jp @ hinv  # (n, 2, 3): d(pi(H^-1 y))/dy at the landmark
    # homography term: J = -T B(z), with B stacking z^T blockwise
    jh = np.zeros((n, 2, 9))
    jh[:, :, 0:3] = -t[:, :, 0:1] * z[:, None, :]
    jh[:, :, 3:6] = -t[:, :, 1:2] * z[:, None, :]
    jh[:, :, 6:9] = -t[:, :, 2:3] * z[:, None, :]
    term_h = (jh @ h.cov) @ jh.transpose(0, 2, 1)
    t2 = t[:, :, :2]
    term_p = t2 @ lm_P @ t2.transpose(0, 2, 1)
    lam = term_h + kp_cov + term_p
    return 0.5 * (lam + lam.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# per-landmark EKF
# ---------------------------------------------------------------------------

def ekf_update_landmark(
    lm: Landmark,
    obs: Observation,
    h: Homography,
    lam: MeasurementNoise,
    gain_form: str = "as_printed",
) -> Landmark:
    """Refine one landmark from its back-mapped observation."""
    if gain_form not in GAIN_FORMS:
        raise ValueError(f"unknown gain form {gain_form!r}")
    v = np.asarray(obs.pos, dtype=float)
    u_obs = h.apply(v)
    ht = geo.linearize_homography_at(h, v)
    ht_inv = np.linalg.inv(ht)
    P = lm.P
    s = ht_inv @ P @ ht_inv.T + lam.lam
    det = np.linalg.det(s)
    if not np.isfinite(det) or abs(det) < 1e-18:
        raise SingularInnovation("innovation covariance not invertible")
    s_inv = np.linalg.inv(s)
    gain_mat = ht_inv if gain_form == "as_printed" else ht_inv.T
    k = P @ gain_mat @ s_inv
    innov = ht_inv @ (u_obs - lm.pos)
    new_pos = lm.pos + k @ innov
    new_P = (np.eye(2) - k @ ht_inv) @ P
    new_P = 0.5 * (new_P + new_P.T)
    return replace(lm, pos=new_pos, P=new_P)


def ekf_update_batch(
    pos: np.ndarray,
    P: np.ndarray,
    obs_pos: np.ndarray,
    h: Homography,
    lam: np.ndarray,
    gain_form: str = "as_printed",
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized EKF over matched landmarks; mirrors ekf_update_landmark."""
    n = len(pos)
    if n == 0:
        return pos, P
    hm = h.h
    q = np.hstack([obs_pos, np.ones((n, 1))]) @ hm.T
    w = q[:, 2]
    u_obs = q[:, :2] / w[:, None]
    # batched 2x2 linearization of the frame -> map homography
    ht = (hm[None, :2, :2] - u_obs[:, :, None] * hm[None, 2, :2][:, None, :]) / w[
        :, None, None
    ]
    det = ht[:, 0, 0] * ht[:, 1, 1] - ht[:, 0, 1] * ht[:, 1, 0]
    ht_inv = np.empty_like(ht)
    ht_inv[:, 0, 0] = ht[:, 1, 1]
    ht_inv[:, 1, 1] = ht[:, 0, 0]
    ht_inv[:, 0, 1] = -ht[:, 0, 1]
    ht_inv[:, 1, 0] = -ht[:, 1, 0]
    ht_inv /= det[:, None, None]
    s = ht_inv @ P @ ht_inv.transpose(0, 2, 1) + lam
    s_det = s[:, 0, 0] * s[:, 1, 1] - s[:, 0, 1] * s[:, 1, 0]
    if np.any(np.abs(s_det) < 1e-18):
        raise SingularInnovation("batched innovation covariance singular")
    s_inv = np.empty_like(s)
    s_inv[:, 0, 0] = s[:, 1, 1]
    s_inv[:, 1, 1] = s[:, 0, 0]
    s_inv[:, 0, 1] = -s[:, 0, 1]
    s_inv[:, 1, 0] = -s[:, 1, 0]
    s_inv /= s_det[:, None, None]
    gain_mat = ht_inv if gain_form == "as_printed" else ht_inv.transpose(0, 2, 1)
    k = P @ gain_mat @ s_inv
    innov = np.einsum("nij,nj->ni", ht_inv, u_obs - pos)
    new_pos = pos + np.einsum("nij,nj->ni", k, innov)
    new_P = (np.eye(2)[None] - k @ ht_inv) @ P
    new_P = 0.5 * (new_P + new_P.transpose(0, 2, 1))
    return new_pos, new_P


# ---------------------------------------------------------------------------
# birth-death lifecycle
# ---------------------------------------------------------------------------

def proximity_check(candidate: np.ndarray, matched_positions: np.ndarray) -> float:
    """Bounding-box ratio gate for a birth candidate (frame coordinates).

    area(box of matched inliers) / area(that box extended to include the
    candidate), clipped to [0, 1].
    """
    if matched_positions.size == 0:
        raise NoInliers("proximity check needs matched inliers")
    lo = matched_positions.min(axis=0)
    hi = matched_positions.max(axis=0)
    area_a = float(np.prod(hi - lo))
    lo_b = np.minimum(lo, candidate)
    hi_b = np.maximum(hi, candidate)
    area_b = float(np.prod(hi_b - lo_b))
    if area_b <= 0.0:
        return 1.0
    return float(np.clip(area_a / area_b, 0.0, 1.0))


class PersistenceTracker:
    """Tracks unmatched-observation clusters across consecutive frames.

    A candidate survives only if re-observed every frame (drop on gap);
    positions are kept in the view-map frame so camera motion does not
    break continuity.
    """

    def __init__(self, desc_gate: float = 1.0, pos_gate_px: float = 6.0):
        self.desc_gate = desc_gate
        self.pos_gate_px = pos_gate_px
        self.pos = np.empty((0, 2))
        self.desc = np.empty((0, 0))
        self.count = np.empty(0, dtype=np.int64)
        self.founder_cov: list[np.ndarray] = []

    def step(
        self,
        obs_pos_map: np.ndarray,
        obs_desc: np.ndarray,
        obs_cov: list[np.ndarray],
        persistence: int,
    ) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], np.ndarray]:
        """Advance one frame; returns (pos, desc, cov, candidate frame idx)
        of candidates that just reached the persistence count."""
        n_new = len(obs_pos_map)
        if self.desc.shape[1] == 0 and n_new:
            self.desc = np.empty((0, obs_desc.shape[1]))
        matched_prev = np.full(len(self.pos), False)
        assign = np.full(n_new, -1, dtype=np.int64)
        if len(self.pos) and n_new:
            d_pos = np.linalg.norm(
                self.pos[None, :, :] - obs_pos_map[:, None, :], axis=2
            )
            d_desc = np.linalg.norm(
                self.desc[None, :, :] - obs_desc[:, None, :], axis=2
            )
            ok = (d_pos <= self.pos_gate_px) & (d_desc <= self.desc_gate)
            cost = np.where(ok, d_pos, np.inf)
            for oi in np.argsort(cost.min(axis=1)):
                ci = int(np.argmin(cost[oi]))
                if np.isfinite(cost[oi, ci]) and not matched_prev[ci]:
                    matched_prev[ci] = True
                    assign[oi] = ci
        new_pos = []
        new_desc = []
        new_count = []
        new_cov = []
        ready = []
        for oi in range(n_new):
            ci = assign[oi]
            if ci >= 0:
                c = int(self.count[ci]) + 1
                # count-weighted running mean: the founding position uses the
                # whole persistence window, not just the recent frames
                p = (self.pos[ci] * (c - 1) + obs_pos_map[oi]) / c
                d = (self.desc[ci] * (c - 1) + obs_desc[oi]) / c
                cov = self.founder_cov[ci]
            else:
                c = 1
                p = obs_pos_map[oi]
                d = obs_desc[oi]
                cov = obs_cov[oi]
            if c >= persistence:
                ready.append((p, d, cov, oi))
            else:
                new_pos.append(p)
                new_desc.append(d)
                new_count.append(c)
                new_cov.append(cov)
        self.pos = np.array(new_pos) if new_pos else np.empty((0, 2))
        self.desc = (
            np.array(new_desc)
            if new_desc
            else np.empty((0, self.desc.shape[1] if self.desc.size else 0))
        )
        self.count = np.array(new_count, dtype=np.int64)
        self.founder_cov = new_cov
        if not ready:
            return (
                np.empty((0, 2)),
                np.empty((0, obs_desc.shape[1] if n_new else 0)),
                [],
                np.empty(0, dtype=np.int64),
            )
        rp = np.array([r[0] for r in ready])
        rd = np.array([r[1] for r in ready])
        rc = [r[2] for r in ready]
        ro = np.array([r[3] for r in ready], dtype=np.int64)
        return rp, rd, rc, ro


def lifecycle_step(
    view: ViewMap,
    h: Homography,
    inlier_lm_idx: np.ndarray,
    inlier_obs_desc: np.ndarray,
    updated_pos: Optional[np.ndarray],
    updated_P: Optional[np.ndarray],
    birth_candidates: tuple[np.ndarray, np.ndarray, list[np.ndarray]],
    inlier_obs_pos: np.ndarray,
    frame: int,
    config: CalibConfig,
) -> tuple[ViewMap, int, int]:
    """Build the next view map: refreshed matches, aged/terminated
    landmarks, and proximity-accepted births.  Returns (view, births,
    deaths)."""
    n = len(view)
    pos = view.pos.copy()
    P = view.P.copy()
    desc = view.desc.copy()
    seen = view.frames_seen.copy()
    since = view.frames_since_match.copy()
    born = view.born_at.copy()
    orig = view.original.copy()
    ids = view.ids.copy()
    next_id = view.next_id

    a = config.forgetting_alpha
    if len(inlier_lm_idx):
        if updated_pos is not None:
            pos[inlier_lm_idx] = updated_pos
            if config.landmark_process_noise_px2 > 0:
                updated_P = updated_P.copy()
                updated_P[~orig[inlier_lm_idx]] += (
                    np.eye(2) * config.landmark_process_noise_px2
                )
            P[inlier_lm_idx] = updated_P
        desc[inlier_lm_idx] = (1.0 - a) * desc[inlier_lm_idx] + a * inlier_obs_desc
        seen[inlier_lm_idx] += 1
        since[inlier_lm_idx] = 0

    # age only landmarks that were visible (inside the current frame)
    unmatched = np.ones(n, dtype=bool)
    unmatched[inlier_lm_idx] = False
    if unmatched.any():
        hinv = np.linalg.inv(h.h)
        q = np.hstack([pos[unmatched], np.ones((int(unmatched.sum()), 1))]) @ hinv.T
        w = q[:, 2]
        safe = np.abs(w) > 1e-12
        fx = np.where(safe, q[:, 0] / np.where(safe, w, 1.0), -1.0)
        fy = np.where(safe, q[:, 1] / np.where(safe, w, 1.0), -1.0)
        wdt, hgt = config.frame_size
        visible = safe & (fx >= 0) & (fx < wdt) & (fy >= 0) & (fy < hgt)
        idx_un = np.flatnonzero(unmatched)
        since[idx_un[visible]] += 1

    # deaths, never dropping originals below the protected floor
    kill = since > config.death_threshold
    if kill.any():
        orig_alive = int((orig & ~kill).sum())
        if orig_alive < config.protected_min_original:
            protect_n = config.protected_min_original - orig_alive
            kid = np.flatnonzero(kill & orig)
            spare = kid[np.argsort(since[kid])][:protect_n]
            kill[spare] = False
    deaths = int(kill.sum())
    if deaths:
        keep = ~kill
        ids, pos, desc, P = ids[keep], pos[keep], desc[keep], P[keep]
        seen, since, born, orig = seen[keep], since[keep], born[keep], orig[keep]

    # births
    cand_pos_map, cand_desc, cand_cov = birth_candidates
    births = 0
    if len(cand_pos_map) and len(ids) < config.max_landmarks:
        accepted = []
        for ci in range(len(cand_pos_map)):
            if len(ids) + len(accepted) >= config.max_landmarks:
                break
            accepted.append(ci)
        if accepted:
            sel = np.array(accepted, dtype=np.int64)
            new_ids = np.arange(next_id, next_id + len(sel), dtype=np.int64)
            next_id += len(sel)
            births = len(sel)
            newP = np.stack(
                [
                    np.asarray(cand_cov[ci]) + np.eye(2) * config.birth_inflation_px2
                    for ci in sel
                ]
            )
            ids = np.concatenate([ids, new_ids])
            pos = np.vstack([pos, cand_pos_map[sel]])
            desc = np.vstack([desc, cand_desc[sel]])
            P = np.vstack([P, newP])
            seen = np.concatenate([seen, np.ones(len(sel), dtype=np.int64)])
            since = np.concatenate([since, np.zeros(len(sel), dtype=np.int64)])
            born = np.concatenate([born, np.full(len(sel), frame, dtype=np.int64)])
            orig = np.concatenate([orig, np.zeros(len(sel), dtype=bool)])

    new_view = ViewMap(
        view.view_id,
        view.key,
        view.k_k,
        view.r_k,
        view.h_rk,
        ids,
        pos,
        desc,
        P,
        seen,
        since,
        born,
        orig,
        next_id=next_id,
        validate=False,
    )
    return new_view, births, deaths


# ---------------------------------------------------------------------------
# the per-frame driver
# ---------------------------------------------------------------------------

class FrameCalibrator:
    """Single-writer calibration loop bound to one scene map."""

    def __init__(self, scene: SceneMap, config: Optional[CalibConfig] = None):
        self.scene = scene
        self.config = config or CalibConfig()
        self.persistence: dict[int, PersistenceTracker] = {}
        self.last_good: Optional[CalibrationResult] = None

    def _stale_result(self, frame: int, view_id: int, n_matches: int) -> CalibrationResult:
        prev = self.last_good
        return CalibrationResult(
            frame=frame,
            view_id=view_id,
            stale=True,
            h=None,
            h_total=prev.h_total if prev else None,
            pose=prev.pose if prev else None,
            g=prev.g if prev else None,
            intrinsics=prev.intrinsics if prev else None,
            n_matches=n_matches,
        )

    def calibrate_frame(
        self,
        observations: Sequence[Observation],
        reading,
        frame: int,
        rng: Optional[np.random.Generator] = None,
    ) -> CalibrationResult:
        """Process one frame; stateless across frames apart from the map,
        returning a stale result flagged from the last good one when the
        consensus is insufficient."""
        if len(observations) == 0:
            view = nearest_view(self.scene, reading)
            return self._stale_result(frame, view.view_id, 0)
        obs_pos = np.array([np.asarray(o.pos, dtype=float) for o in observations])
        obs_desc = np.array([np.asarray(o.desc, dtype=float) for o in observations])
        kp = self.config.keypoint_cov()
        obs_cov = np.stack(
            [
                np.asarray(o.cov, dtype=float) if o.cov is not None else kp
                for o in observations
            ]
        )
        return self.calibrate_frame_arrays(obs_pos, obs_desc, obs_cov, reading, frame, rng)

    def calibrate_frame_arrays(
        self,
        obs_pos: np.ndarray,
        obs_desc: np.ndarray,
        obs_cov: np.ndarray,
        reading,
        frame: int,
        rng: Optional[np.random.Generator] = None,
    ) -> CalibrationResult:
        """Array fast path of calibrate_frame (obs_cov is (n, 2, 2))."""
        t0 = time.perf_counter()
        cfg = self.config
        rng = rng or np.random.default_rng()
        view = nearest_view(self.scene, reading)
        vid = view.view_id

        n_obs = len(obs_pos)
        if n_obs == 0:
            return self._stale_result(frame, vid, 0)
        obs_idx, lm_idx = match_indices(
            obs_pos, obs_desc, view, cfg.sample_size, cfg.ratio, rng
        )
        if len(obs_idx) < 4:
            return self._stale_result(frame, vid, len(obs_idx))

        src = obs_pos[obs_idx]
        dst = view.pos[lm_idx]
        src_cov = obs_cov[obs_idx]
        try:
            hm, mask = ransac_homography_arrays(
                src,
                dst,
                threshold_px=cfg.ransac_threshold_px,
                confidence=cfg.ransac_confidence,
                max_iters=cfg.ransac_max_iters,
                min_inliers=cfg.min_inliers,
                rng=rng,
            )
        except (InsufficientInliers, TooFewMatches):
            return self._stale_result(frame, vid, len(obs_idx))

        h = Homography(hm)
        h.cov = geo.homography_covariance_arrays(
            h.h, src[mask], dst[mask], src_cov[mask], view.P[lm_idx[mask]]
        )
        inl_obs = obs_idx[mask]
        inl_lm = lm_idx[mask]
        out_obs = np.setdiff1d(np.arange(n_obs), inl_obs)

        h_total = view.h_rk @ h
        try:
            k_t = geo.intrinsics_from_homography(h_total, self.scene.reference_view.k_k)
            pose = geo.decompose_to_pose(
                h_total, self.scene.reference_view.k_k, k_t,
                defect_tol=cfg.rotation_defect_tol,
            )
        except NotARotation:
            return self._stale_result(frame, vid, len(obs_idx))

        g = None
        if self.scene.world is not None:
            chain = self.scene.world.h_w @ h_total  # frame -> world
            g = chain.inverse()

        births = deaths = 0
        if cfg.map_updating:
            lam = measurement_covariance_batch(
                view.pos[inl_lm], view.P[inl_lm], src_cov[mask], h
            )
            try:
                new_pos, new_P = ekf_update_batch(
                    view.pos[inl_lm],
                    view.P[inl_lm],
                    obs_pos[inl_obs],
                    h,
                    lam,
                    cfg.gain_form,
                )
            except SingularInnovation:
                new_pos, new_P = view.pos[inl_lm], view.P[inl_lm]

            tracker = self.persistence.setdefault(
                vid,
                PersistenceTracker(
                    desc_gate=cfg.birth_desc_gate, pos_gate_px=cfg.birth_pos_gate_px
                ),
            )
            if len(out_obs):
                mapped = h.apply(obs_pos[out_obs])
                covs = list(obs_cov[out_obs])
                rp, rd, rc, _ = tracker.step(
                    mapped, obs_desc[out_obs], covs, cfg.birth_persistence
                )
            else:
                tracker.step(
                    np.empty((0, 2)), np.empty((0, obs_desc.shape[1])), [],
                    cfg.birth_persistence,
                )
                rp, rd, rc = np.empty((0, 2)), np.empty((0, obs_desc.shape[1])), []
            if len(rp) and cfg.proximity_check and len(inl_obs):
                # gate candidates in the current frame, where the boxes live
                inl_frame = obs_pos[inl_obs]
                hinv = np.linalg.inv(h.h)
                keep = []
                for ci in range(len(rp)):
                    cand_frame = geo.apply_homography(hinv, rp[ci])
                    ratio = proximity_check(cand_frame, inl_frame)
                    if ratio >= cfg.proximity_accept:
                        keep.append(ci)
                rp = rp[keep] if keep else np.empty((0, 2))
                rd = rd[keep] if keep else np.empty((0, rd.shape[1] if rd.size else 0))
                rc = [rc[i] for i in keep]
            new_view, births, deaths = lifecycle_step(
                view,
                h,
                inl_lm,
                obs_desc[inl_obs],
                new_pos,
                new_P,
                (rp, rd, rc),
                obs_pos[inl_obs],
                frame,
                cfg,
            )
            self.scene.publish(new_view)

        result = CalibrationResult(
            frame=frame,
            view_id=vid,
            stale=False,
            h=h,
            h_total=h_total,
            pose=pose,
            g=g,
            intrinsics=k_t,
            n_matches=len(obs_idx),
            inlier_obs=inl_obs,
            inlier_lm=inl_lm,
            outlier_obs=out_obs,
            births=births,
            deaths=deaths,
            elapsed_s=time.perf_counter() - t0,
        )
        self.last_good = result
        return result
