"""Projective-geometry kernel for a rotating/zooming camera.

Conventions used throughout the library:

* Image points are (x, y) in pixels, x right, y down.
* Homogeneous 3-vectors are column vectors; a homography maps
  ``x_dst ~ H @ (x_src, y_src, 1)`` followed by perspective division.
* Homographies are stored Frobenius-normalized (``||H||_F = 1``) with the
  sign chosen so the bottom-right entry is positive (largest-magnitude
  entry decides if that entry is ~0).  The optional 9x9 covariance is over
  the row-major stacked entries of the normalized matrix.
* A camera pose is (pan, tilt, focal).  The pose rotation mapping
  reference-camera coordinates to the posed camera is
  ``R = R_x(-tilt) @ R_y(pan)``: pan about the camera y-axis (the world
  vertical of the reference orientation), then tilt about the camera
  x-axis, with positive tilt raising the optical axis (image y points
  down, hence the sign).  A camera looking down at the ground has
  negative tilt.
* The inter-view homography of a camera rotating about its nodal point is
  ``H_rk = K_r R_r R_k^-1 K_k^-1`` mapping view k pixels into view r.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AtInfinity,
    DegenerateConfiguration,
    NotARotation,
    SingularNormalMatrix,
    TooFewMatches,
)

DET_EPS = 1e-12
ROTATION_DEFECT_TOL = 1e-2


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: zero skew, unit aspect, fixed principal point."""

    f: float
    pp: tuple[float, float]

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.f, 0.0, self.pp[0]], [0.0, self.f, self.pp[1]], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.f, 0.0, -self.pp[0] / self.f],
                [0.0, 1.0 / self.f, -self.pp[1] / self.f],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class CameraPose:
    """Pan/tilt in radians, focal length in pixels."""

    pan: float
    tilt: float
    focal: float

    def __post_init__(self):
        if not (-np.pi < self.pan <= np.pi):
            raise ValueError(f"pan out of range (-pi, pi]: {self.pan}")
        if not (-np.pi / 2 < self.tilt < np.pi / 2):
            raise ValueError(f"tilt out of range (-pi/2, pi/2): {self.tilt}")
        if not self.focal > 0:
            raise ValueError(f"focal must be positive: {self.focal}")

    def rotation(self) -> np.ndarray:
        return rot_x(-self.tilt) @ rot_y(self.pan)


@dataclass(frozen=True)
class PointMatch:
    """A 2D correspondence (src -> dst) with optional per-point covariances."""

    src: np.ndarray
    dst: np.ndarray
    src_cov: Optional[np.ndarray] = None
    dst_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "src", np.asarray(self.src, dtype=float))
        object.__setattr__(self, "dst", np.asarray(self.dst, dtype=float))
        if not (np.isfinite(self.src).all() and np.isfinite(self.dst).all()):
            raise ValueError("match coordinates must be finite")


@dataclass
class Homography:
    """A 3x3 projective map, Frobenius-normalized, with optional covariance."""

    h: np.ndarray
    cov: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.h = normalize_homography(np.asarray(self.h, dtype=float))
        if abs(np.linalg.det(self.h)) <= DET_EPS:
            raise DegenerateConfiguration("homography not invertible")
        if self.cov is not None:
            self.cov = np.asarray(self.cov, dtype=float)
            if self.cov.shape != (9, 9):
                raise ValueError("homography covariance must be 9x9")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map (..., 2) points through the homography with perspective division."""
        return apply_homography(self.h, pts)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.h @ other.h)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def normalize_homography(h: np.ndarray) -> np.ndarray:
    """Scale to unit Frobenius norm; sign fixed on the bottom-right entry.

    Bit-level idempotent: an already-normalized matrix is returned
    unchanged so serialization round trips stay exact.
    """
    n = np.linalg.norm(h)
    if n == 0 or not np.isfinite(n):
        raise DegenerateConfiguration("cannot normalize zero/non-finite matrix")
    if abs(n - 1.0) > 1e-12:
        h = h / n
    anchor = h[2, 2]
    if abs(anchor) < 1e-9:
        flat = h.ravel()
        anchor = flat[np.argmax(np.abs(flat))]
    return h if anchor > 0 else -h


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    pts2 = np.atleast_2d(pts)
    ones = np.ones((pts2.shape[0], 1))
    q = np.hstack([pts2, ones]) @ h.T
    w = q[:, 2]
    if np.any(np.abs(w) < DET_EPS * max(np.linalg.norm(h), 1.0)):
        raise AtInfinity("point maps to the line at infinity")
    out = q[:, :2] / w[:, None]
    return out[0] if single else out


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (orthogonal Procrustes via SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def _matches_arrays(matches: Sequence[PointMatch]) -> tuple[np.ndarray, np.ndarray]:
    src = np.array([m.src for m in matches], dtype=float)
    dst = np.array([m.dst for m in matches], dtype=float)
    return src, dst


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin, mean radius to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]], dtype=float)


def _dlt_design_matrix(src_n: np.ndarray, dst_n: np.ndarray) -> np.ndarray:
    n = src_n.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = src_n[:, 0], src_n[:, 1]
    xd, yd = dst_n[:, 0], dst_n[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = xd * x
    a[0::2, 7] = xd * y
    a[0::2, 8] = xd
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = yd * x
    a[1::2, 7] = yd * y
    a[1::2, 8] = yd
    return a


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def dlt_homography_arrays(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Array fast path of the DLT: Hartley normalization, smallest
    eigenvector of the normal matrix, denormalization.  Returns the
    Frobenius-normalized 3x3 matrix."""
    if len(src) < 4:
        raise TooFewMatches(f"need >= 4 matches, got {len(src)}")
    c_s = src.mean(axis=0)
    d_s = np.linalg.norm(src - c_s, axis=1).mean()
    s_s = np.sqrt(2.0) / d_s if d_s > 0 else 1.0
    c_d = dst.mean(axis=0)
    d_d = np.linalg.norm(dst - c_d, axis=1).mean()
    s_d = np.sqrt(2.0) / d_d if d_d > 0 else 1.0
    src_n = (src - c_s) * s_s
    dst_n = (dst - c_d) * s_d
    a = _dlt_design_matrix(src_n, dst_n)
    m = a.T @ a
    w, v = np.linalg.eigh(m)
    # rank must be 8: the second eigenvalue bounds away from zero
    if w[1] <= 1e-18 * max(w[-1], 1e-300):
        raise DegenerateConfiguration("design matrix rank-deficient")
    h_n = v[:, 0].reshape(3, 3)
    t_dst_inv = np.array(
        [[1.0 / s_d, 0.0, c_d[0]], [0.0, 1.0 / s_d, c_d[1]], [0.0, 0.0, 1.0]]
    )
    t_src = np.array(
        [[s_s, 0.0, -s_s * c_s[0]], [0.0, s_s, -s_s * c_s[1]], [0.0, 0.0, 1.0]]
    )
    h = t_dst_inv @ h_n @ t_src
    return normalize_homography(h)


def estimate_homography_dlt(matches: Sequence[PointMatch]) -> Homography:
    """Least-squares DLT homography from >= 4 correspondences.

    Input points are Hartley-normalized, the stacked linear system is
    solved via its normal matrix, and the result is denormalized and
    Frobenius-normalized.

    Raises TooFewMatches below four matches and DegenerateConfiguration
    when the design matrix is rank-deficient (e.g. collinear points).
    """
    src, dst = _matches_arrays(matches)
    return Homography(dlt_homography_arrays(src, dst))


def transfer_error(h: np.ndarray, matches: Sequence[PointMatch]) -> np.ndarray:
    """Forward transfer error |pi(H src) - dst| per match, in pixels."""
    src, dst = _matches_arrays(matches)
    return np.linalg.norm(apply_homography(h, src) - dst, axis=1)


def homography_covariance_arrays(
    h: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    src_cov: np.ndarray,
    dst_cov: np.ndarray,
) -> np.ndarray:
    """Blockwise first-order covariance of the DLT estimate (see
    homography_covariance); per-point covariances as (n, 2, 2) stacks."""
    n = len(src)
    if n < 4:
        raise TooFewMatches(f"need >= 4 matches, got {n}")
    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    s_s, s_d = t_src[0, 0], t_dst[0, 0]
    src_n = apply_homography(t_src, src)
    dst_n = apply_homography(t_dst, dst)

    # express the supplied homography in the normalized frame
    h_n = t_dst @ h @ np.linalg.inv(t_src)
    h_n = h_n / np.linalg.norm(h_n)
    hv = h_n.ravel()

    a = _dlt_design_matrix(src_n, dst_n)
    m = a.T @ a
    w, v = np.linalg.eigh(m)
    if w[1] <= 1e-12 * max(w[-1], 1.0):
        raise SingularNormalMatrix("normal equations singular beyond the gauge direction")
    # rank-8 pseudo-inverse: drop the solution direction (smallest eigenvalue)
    m_pinv = (v[:, 1:] / w[1:]) @ v[:, 1:].T

    # d(A h)/d(point coords) per match, columns ordered (x, y, X, Y)
    x, y = src_n[:, 0], src_n[:, 1]
    xd, yd = dst_n[:, 0], dst_n[:, 1]
    wv = x * hv[6] + y * hv[7] + hv[8]
    jp = np.zeros((n, 2, 4))
    jp[:, 0, 0] = -hv[0] + xd * hv[6]
    jp[:, 0, 1] = -hv[1] + xd * hv[7]
    jp[:, 0, 2] = wv
    jp[:, 1, 0] = -hv[3] + yd * hv[6]
    jp[:, 1, 1] = -hv[4] + yd * hv[7]
    jp[:, 1, 3] = wv

    # point covariances, rescaled into the normalized frames
    sigma_blocks = np.zeros((n, 4, 4))
    sigma_blocks[:, :2, :2] = s_s**2 * src_cov
    sigma_blocks[:, 2:, 2:] = s_d**2 * dst_cov

    a_pairs = a.reshape(n, 2, 9)
    at_jp = a_pairs.transpose(0, 2, 1) @ jp  # (n, 9, 4)
    g_blocks = m_pinv @ at_jp  # (n, 9, 4), broadcast over matches
    tmp = g_blocks @ sigma_blocks  # (n, 9, 4)
    cov_n = np.tensordot(tmp, g_blocks, axes=([0, 2], [0, 2]))

    # denormalize: H = T_dst^-1 H_n T_src, row-major vec(ABC) = (A kron C^T) vec(B)
    lin = np.kron(np.linalg.inv(t_dst), t_src.T)
    g_raw = lin @ hv
    cov_raw = lin @ cov_n @ lin.T

    # project through Frobenius normalization (sign flips cancel)
    norm = np.linalg.norm(g_raw)
    ghat = g_raw / norm
    proj = (np.eye(9) - np.outer(ghat, ghat)) / norm
    cov = proj @ cov_raw @ proj.T
    return 0.5 * (cov + cov.T)


def homography_covariance(
    h: Homography,
    matches: Sequence[PointMatch],
    default_sigma_px: float = 1.0,
) -> np.ndarray:
    """First-order covariance of the 9 stacked entries of the DLT estimate.

    Propagates the per-point covariances (isotropic ``default_sigma_px**2``
    where a match does not carry one) through the constrained minimizer of
    the normalized DLT system, then through denormalization and Frobenius
    normalization.  The normalizing similarities are treated as fixed.
    """
    if len(matches) < 4:
        raise TooFewMatches(f"need >= 4 matches, got {len(matches)}")
    src, dst = _matches_arrays(matches)
    eye2 = np.eye(2) * default_sigma_px**2
    src_cov = np.stack(
        [np.asarray(m.src_cov) if m.src_cov is not None else eye2 for m in matches]
    )
    dst_cov = np.stack(
        [np.asarray(m.dst_cov) if m.dst_cov is not None else eye2 for m in matches]
    )
    return homography_covariance_arrays(h.h, src, dst, src_cov, dst_cov)


def linearize_homography_at(h: Homography | np.ndarray, p: np.ndarray) -> np.ndarray:
    """Jacobian of ``x -> pi(H x~)`` at the 2D point p (2x2)."""
    hm = h.h if isinstance(h, Homography) else np.asarray(h, dtype=float)
    p = np.asarray(p, dtype=float)
    q = hm @ np.array([p[0], p[1], 1.0])
    w = q[2]
    scale = np.linalg.norm(hm) * max(np.linalg.norm(p), 1.0)
    if abs(w) < 1e-12 * max(scale, 1.0):
        raise AtInfinity("linearization point maps to infinity")
    j = (hm[:2, :2] - np.outer(q[:2] / w, hm[2, :2])) / w
    return j


def compose_rotation_homography(
    k_r: Intrinsics, r_r: np.ndarray, r_k: np.ndarray, k_k: Intrinsics
) -> Homography:
    """``K_r R_r R_k^-1 K_k^-1`` mapping view-k pixels into view r."""
    for r in (r_r, r_k):
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-8 or np.linalg.det(r) < 0:
            raise NotARotation("R_r/R_k must be proper rotations")
    return Homography(k_r.matrix() @ r_r @ r_k.T @ k_k.inverse_matrix())


def decompose_to_pose(
    h_total: Homography,
    k_r: Intrinsics,
    k_k: Intrinsics,
    defect_tol: float = ROTATION_DEFECT_TOL,
) -> CameraPose:
    """Recover (pan, tilt) of view k from a view-k -> reference chain.

    Assumes the reference rotation is the gauge identity, so
    ``K_r^-1 H K_k ~ R_k^-1``.  The matrix is scale-fixed to unit
    determinant, checked for orthonormality, projected to the nearest
    rotation, and the angles are read off the tilt-then-pan factorization.
    """
    m = k_r.inverse_matrix() @ h_total.h @ k_k.matrix()
    det = np.linalg.det(m)
    if abs(det) <= DET_EPS:
        raise NotARotation("chain matrix is singular")
    m = m / np.cbrt(det)
    defect = np.linalg.norm(m.T @ m - np.eye(3))
    if defect > defect_tol:
        raise NotARotation(f"orthonormality defect {defect:.3g} > {defect_tol}")
    r_k = project_to_rotation(m).T
    pan = np.arctan2(r_k[0, 2], r_k[0, 0])
    tilt = np.arctan2(-r_k[2, 1], r_k[1, 1])
    return CameraPose(pan=float(pan), tilt=float(tilt), focal=k_k.f)


def intrinsics_from_homography(
    h: Homography, k_r: Intrinsics, consistency_tol: float = 0.5
) -> Intrinsics:
    """Current-view focal from a current -> reference rotation chain.

    Transfers the dual image of the absolute conic through the chain:
    ``K K^T ~ H^-1 (K_r K_r^T) H^-T``.  The recovered principal point must
    stay near the reference one; the focal is the mean of the two diagonal
    estimates, which must agree within ``consistency_tol`` relatively.
    """
    hk = h.h
    hinv = np.linalg.inv(hk)
    d = hinv @ (k_r.matrix() @ k_r.matrix().T) @ hinv.T
    if abs(d[2, 2]) <= DET_EPS:
        raise NotARotation("degenerate conic transfer")
    d = d / d[2, 2]
    px, py = d[0, 2], d[1, 2]
    f2a = d[0, 0] - px * px
    f2b = d[1, 1] - py * py
    if f2a <= 0 or f2b <= 0:
        raise NotARotation("conic transfer yields non-positive focal")
    if abs(f2a - f2b) > consistency_tol * max(f2a, f2b):
        raise NotARotation("inconsistent focal estimates; chain is not a rotation conjugate")
    return Intrinsics(f=float(np.sqrt(0.5 * (f2a + f2b))), pp=k_r.pp)
