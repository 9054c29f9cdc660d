"""Frame <-> world-plane transforms and homology-based target scale.

The world plane is the ground (Z = 0, meters).  ``G`` names the
world -> frame homography of the current pose; its inverse registers image
feet back onto the plane.  The foot-to-head map of equal-height targets is
a planar homology with the horizon as axis and the vertical vanishing
point as center, parameterized by a scene-constant cross-ratio ``mu``.

The horizon is obtained by pulling the world line at infinity back through
the frame -> world chain (``l = G^-T e3``), which is the line-transform
dual of the point map.  The variant that pushes ``e3`` forward through G
is kept behind ``line_convention="as_written"`` for comparison; the
simulator ground-truth test discriminates the two and the pullback
reproduces the true horizon, so it is the default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    AboveHorizon,
    CoincidentPoints,
    DegenerateHomology,
    DegenerateObservation,
)
from .geometry import Homography, Intrinsics, apply_homography

LINE_CONVENTIONS = ("pullback", "as_written")


@dataclass(frozen=True)
class WorldRegistration:
    """Mosaic -> world registration: rectifier H_p, metric similarity H_s."""

    h_p: Homography
    h_s: Homography
    known_distance: float
    endpoints: tuple[np.ndarray, np.ndarray]

    @property
    def h_w(self) -> Homography:
        """Full mosaic -> world-plane map (meters)."""
        return self.h_s @ self.h_p


@dataclass(frozen=True)
class Homology:
    """Foot-to-head map: W = I + (mu - 1) v l^T / (v^T l)."""

    W: np.ndarray
    l_inf: np.ndarray
    v_inf: np.ndarray
    mu: float


@dataclass(frozen=True)
class ScaleEstimate:
    foot: np.ndarray
    head: np.ndarray
    height_px: float
    stale: bool = False


def world_to_frame(g: Homography, x: np.ndarray) -> np.ndarray:
    """Project world-plane points (meters) into the frame (pixels)."""
    return g.apply(x)


def frame_to_world(g: Homography, p: np.ndarray) -> np.ndarray:
    """Register frame points (pixels) back onto the world plane (meters)."""
    return apply_homography(np.linalg.inv(g.h), p)


def horizon_line(g: Homography, convention: str = "pullback") -> np.ndarray:
    """Image of the world plane's line at infinity under the chosen convention."""
    if convention == "pullback":
        l = np.linalg.inv(g.h).T @ np.array([0.0, 0.0, 1.0])
    elif convention == "as_written":
        l = g.h @ np.array([0.0, 0.0, 1.0])
    else:
        raise ValueError(f"unknown line convention {convention!r}")
    n = np.linalg.norm(l)
    if n < 1e-15:
        raise DegenerateHomology("vanishing line is zero")
    return l / n


def build_homology(
    g: Homography,
    k: Intrinsics,
    mu: float,
    line_convention: str = "pullback",
) -> Homology:
    """Construct the foot-to-head homology for the current pose.

    The vertical vanishing point is the pole of the horizon with respect
    to the dual conic ``K K^T``.  The horizon sign is made canonical by
    requiring the principal point (assumed on the ground side of the
    horizon for a surveillance camera) to have positive incidence.
    """
    l = horizon_line(g, line_convention)
    pp = np.array([k.pp[0], k.pp[1], 1.0])
    if l @ pp < 0:
        l = -l
    km = k.matrix()
    v = km @ km.T @ l
    denom = float(v @ l)
    if abs(denom) < 1e-12 * (np.linalg.norm(v) * np.linalg.norm(l)):
        raise DegenerateHomology("vanishing point conjugate to the vanishing line")
    W = np.eye(3) + (mu - 1.0) * np.outer(v, l) / denom
    return Homology(W=W, l_inf=l, v_inf=v, mu=float(mu))


def estimate_scale(homology: Homology, p: np.ndarray, stale: bool = False) -> ScaleEstimate:
    """Predicted head position and pixel height for a foot point.

    Feet strictly above the horizon (negative incidence under the
    canonical sign) are rejected; a foot on the horizon maps to itself
    with zero height.
    """
    p = np.asarray(p, dtype=float)
    ph = np.array([p[0], p[1], 1.0])
    side = float(homology.l_inf @ ph)
    if side < -1e-9 * (1.0 + np.linalg.norm(p)):
        raise AboveHorizon(f"foot point {p} lies above the horizon")
    q = homology.W @ ph
    if abs(q[2]) < 1e-12:
        raise DegenerateHomology("head maps to infinity")
    head = q[:2] / q[2]
    return ScaleEstimate(
        foot=p, head=head, height_px=float(np.linalg.norm(head - p)), stale=stale
    )


def calibrate_mu(
    g: Homography,
    k: Intrinsics,
    target_height_m: float,
    foot: np.ndarray,
    head: np.ndarray,
    line_convention: str = "pullback",
) -> float:
    """Solve the homology cross-ratio from one observed (foot, head) pair.

    One exact correspondence pins mu for targets of ``target_height_m``;
    estimate_scale with the returned mu reproduces the pair.
    """
    if target_height_m <= 0:
        raise ValueError("target height must be positive")
    foot = np.asarray(foot, dtype=float)
    head = np.asarray(head, dtype=float)
    if np.linalg.norm(head - foot) < 1e-12:
        raise DegenerateObservation("head coincides with foot")
    l = horizon_line(g, line_convention)
    pp = np.array([k.pp[0], k.pp[1], 1.0])
    if l @ pp < 0:
        l = -l
    km = k.matrix()
    v = km @ km.T @ l
    denom = float(v @ l)
    if abs(denom) < 1e-12 * (np.linalg.norm(v) * np.linalg.norm(l)):
        raise DegenerateHomology("vanishing point conjugate to the vanishing line")
    ph = np.array([foot[0], foot[1], 1.0])
    hh = np.array([head[0], head[1], 1.0])
    c = float(l @ ph) / denom
    if abs(c) < 1e-15:
        raise DegenerateObservation("foot lies on the horizon; mu unobservable")
    # beta solves (ph + beta v) parallel to hh in least squares
    a = np.cross(v, hh)
    b = np.cross(ph, hh)
    na = float(a @ a)
    if na < 1e-18:
        raise DegenerateObservation("head direction degenerate with the vertical")
    beta = -float(b @ a) / na
    return 1.0 + beta / c
