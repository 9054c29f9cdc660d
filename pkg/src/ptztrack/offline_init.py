"""Off-line scene-map initialization.

Bundle adjustment jointly refines one rotation and focal length per
keyframe under the rotation-only inter-view model
``H_ba = K_b R_b R_a^T K_a^-1`` with a shared, fixed principal point.  The
cost is the symmetric transfer error of all cross-view matches, minimized
by Levenberg-Marquardt on local rotation increments and log-focal
parameters with analytic Jacobians; the gauge is fixed by pinning the
reference rotation to the identity.  Accepted steps never increase the
cost, and the accepted-cost history is part of the result.

World registration is stratified single-view geometry on the reference
mosaic: the ground plane's vanishing line and the reference intrinsics
give the plane normal, rotating the camera fronto-parallel removes the
perspective distortion exactly (up to similarity), the orthogonal
vanishing-point pair aligns and right-hands the axes, and a known world
distance between two mosaic points fixes the metric scale.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .calibrate import Observation
from .errors import (
    CoincidentPoints,
    DegenerateVanishingGeometry,
    DisconnectedGraph,
)
from .geometry import (
    Homography,
    Intrinsics,
    PointMatch,
    compose_rotation_homography,
)
from .scene_map import ActuatorReading, SceneMap, ViewMap, match_indices
from .worldproj import WorldRegistration


@dataclass
class BundleProblem:
    """Keyframe observation sets plus their cross-view matches."""

    observations: list[list[Observation]]
    readings: list[ActuatorReading]
    cross_matches: list[tuple[int, int, list[PointMatch]]]
    pp: tuple[float, float]
    reference: int = 0


@dataclass
class BundleResult:
    rotations: list[np.ndarray]
    intrinsics: list[Intrinsics]
    rms_px: float
    cost_history: list[float] = field(default_factory=list)
    converged: bool = True
    iterations: int = 0


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of a rotation vector."""
    theta = np.linalg.norm(w)
    k = np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _check_connected(n_views: int, pairs: Sequence[tuple[int, int]], reference: int):
    adj: dict[int, set[int]] = {i: set() for i in range(n_views)}
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    seen = {reference}
    queue = deque([reference])
    while queue:
        cur = queue.popleft()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    if len(seen) != n_views:
        missing = sorted(set(range(n_views)) - seen)
        raise DisconnectedGraph(f"views {missing} unreachable from reference")


def build_problem(
    captures: Sequence,
    pp: tuple[float, float],
    reference: int = 0,
    min_pair_matches: int = 12,
    ratio: float = 0.8,
    ransac_threshold_px: float = 3.0,
    seed: int = 0,
) -> BundleProblem:
    """Cross-match keyframe observation sets into a bundle problem.

    Every view pair is matched by descriptor nearest-neighbor ratio and
    gated by a pairwise RANSAC homography, which removes the accidental
    matches between non-covisible landmarks; pairs with too few surviving
    correspondences are dropped.
    """
    from .calibrate import estimate_frame_homography

    n = len(captures)
    obs_sets = [c.observations for c in captures]
    readings = [c.reading for c in captures]
    pos = [np.array([o.pos for o in s]) for s in obs_sets]
    desc = [np.array([o.desc for o in s]) for s in obs_sets]
    rng = np.random.default_rng(seed)
    cross = []
    for a in range(n):
        for b in range(a + 1, n):
            if len(desc[a]) == 0 or len(desc[b]) == 0:
                continue
            temp_view = _obs_view(b, readings[b], pos[b], desc[b], pp)
            ia, ib = match_indices(pos[a], desc[a], temp_view, None, ratio, None)
            if len(ia) < min_pair_matches:
                continue
            ms = [PointMatch(src=pos[a][i], dst=pos[b][j]) for i, j in zip(ia, ib)]
            try:
                _, mask = estimate_frame_homography(
                    ms,
                    threshold_px=ransac_threshold_px,
                    min_inliers=min_pair_matches,
                    rng=rng,
                )
            except Exception:
                continue
            ms = [ms[i] for i in np.flatnonzero(mask)]
            cross.append((a, b, ms))
    return BundleProblem(
        observations=obs_sets, readings=readings, cross_matches=cross, pp=pp,
        reference=reference,
    )


def _obs_view(view_id, reading, pos, desc, pp) -> ViewMap:
    n = len(pos)
    return ViewMap(
        view_id,
        reading,
        Intrinsics(f=max(reading.zoom, 1.0), pp=pp),
        np.eye(3),
        Homography(np.eye(3)),
        np.arange(n, dtype=np.int64),
        pos,
        desc,
        np.zeros((n, 2, 2)),
    )


def bundle_adjust(
    problem: BundleProblem,
    zoom_to_focal: Callable[[float], float] = lambda z: z,
    max_iterations: int = 200,
    rel_tol: float = 1e-10,
) -> BundleResult:
    """Levenberg-Marquardt refinement of per-view rotations and focals."""
    n = len(problem.observations)
    ref = problem.reference
    pairs = [(a, b) for a, b, _ in problem.cross_matches]
    _check_connected(n, pairs, ref)

    pp = np.asarray(problem.pp, dtype=float)
    # initial guesses from the actuator readings, gauge-aligned to the reference
    r_ref0 = _reading_rotation(problem.readings[ref])
    rotations = [
        _reading_rotation(problem.readings[k]) @ r_ref0.T for k in range(n)
    ]
    rotations[ref] = np.eye(3)
    logf = np.array(
        [np.log(max(zoom_to_focal(problem.readings[k].zoom), 1.0)) for k in range(n)]
    )

    # flatten matches once
    pair_src = []
    pair_dst = []
    for a, b, ms in problem.cross_matches:
        pair_src.append(np.array([m.src for m in ms]))
        pair_dst.append(np.array([m.dst for m in ms]))

    # parameter layout: per view, 3 rotation dof (except reference) + 1 log f
    offsets = {}
    cursor = 0
    for k in range(n):
        nrot = 0 if k == ref else 3
        offsets[k] = (cursor, nrot)
        cursor += nrot + 1
    n_params = cursor

    def k_mat(f):
        return np.array([[f, 0.0, pp[0]], [0.0, f, pp[1]], [0.0, 0.0, 1.0]])

    def residuals_and_jac(rots, lf, want_jac=True):
        res_blocks = []
        jac_blocks = [] if want_jac else None
        for (a, b, _), src, dst in zip(problem.cross_matches, pair_src, pair_dst):
            for (i, j, s_pts, d_pts) in ((a, b, src, dst), (b, a, dst, src)):
                f_i, f_j = np.exp(lf[i]), np.exp(lf[j])
                r_rel = rots[j] @ rots[i].T
                kj = k_mat(f_j)
                w = np.column_stack(
                    [(s_pts[:, 0] - pp[0]) / f_i, (s_pts[:, 1] - pp[1]) / f_i,
                     np.ones(len(s_pts))]
                )
                z = w @ r_rel.T
                y = z @ kj.T
                pred = y[:, :2] / y[:, 2:3]
                r = pred - d_pts
                res_blocks.append(r.ravel())
                if not want_jac:
                    continue
                m = len(s_pts)
                jb = np.zeros((2 * m, n_params))
                inv_w = 1.0 / y[:, 2]
                # perspective-division Jacobian rows, batched
                jp = np.zeros((m, 2, 3))
                jp[:, 0, 0] = inv_w
                jp[:, 1, 1] = inv_w
                jp[:, 0, 2] = -y[:, 0] * inv_w**2
                jp[:, 1, 2] = -y[:, 1] * inv_w**2
                off_j, nrot_j = offsets[j]
                off_i, nrot_i = offsets[i]
                if nrot_j:
                    # dz/d(delta_j) = -skew(z), laid out per column
                    dz = np.empty((m, 3, 3))
                    dz[:, :, 0] = np.column_stack([np.zeros(m), -z[:, 2], z[:, 1]])
                    dz[:, :, 1] = np.column_stack([z[:, 2], np.zeros(m), -z[:, 0]])
                    dz[:, :, 2] = np.column_stack([-z[:, 1], z[:, 0], np.zeros(m)])
                    block = np.einsum("nij,jk,nkl->nil", jp, kj, dz)
                    jb[0::2, off_j : off_j + 3] = block[:, 0, :]
                    jb[1::2, off_j : off_j + 3] = block[:, 1, :]
                if nrot_i:
                    # dz/d(delta_i) = R_rel skew(w), skew laid out per column
                    wx = np.empty((m, 3, 3))
                    wx[:, :, 0] = np.column_stack([np.zeros(m), w[:, 2], -w[:, 1]])
                    wx[:, :, 1] = np.column_stack([-w[:, 2], np.zeros(m), w[:, 0]])
                    wx[:, :, 2] = np.column_stack([w[:, 1], -w[:, 0], np.zeros(m)])
                    kr = kj @ r_rel
                    block = np.einsum("nij,jk,nkl->nil", jp, kr, wx)
                    jb[0::2, off_i : off_i + 3] = block[:, 0, :]
                    jb[1::2, off_i : off_i + 3] = block[:, 1, :]
                # d/d log f_j : y = K_j z, dy = f_j * (z1, z2, 0)
                dy = np.column_stack([f_j * z[:, 0], f_j * z[:, 1], np.zeros(m)])
                col = np.einsum("nij,nj->ni", jp, dy)
                jb[0::2, off_j + nrot_j] = col[:, 0]
                jb[1::2, off_j + nrot_j] = col[:, 1]
                # d/d log f_i : w' = (-w1, -w2, 0)
                dw = np.column_stack([-w[:, 0], -w[:, 1], np.zeros(m)])
                dy = (dw @ r_rel.T) @ kj.T
                col = np.einsum("nij,nj->ni", jp, dy)
                jb[0::2, off_i + nrot_i] = col[:, 0]
                jb[1::2, off_i + nrot_i] = col[:, 1]
                jac_blocks.append(jb)
        r = np.concatenate(res_blocks) if res_blocks else np.zeros(0)
        jac = np.vstack(jac_blocks) if want_jac and jac_blocks else None
        return r, jac

    if not problem.cross_matches:
        return BundleResult(
            rotations=rotations,
            intrinsics=[Intrinsics(f=float(np.exp(v)), pp=tuple(pp)) for v in logf],
            rms_px=0.0,
            cost_history=[0.0],
            converged=True,
            iterations=0,
        )

    r, _ = residuals_and_jac(rotations, logf, want_jac=False)
    cost = float(r @ r)
    history = [cost]
    lam = 1e-3
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        r, jac = residuals_and_jac(rotations, logf, want_jac=True)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 1e-12] = 1.0
        accepted = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_rots = list(rotations)
            new_logf = logf.copy()
            for k in range(len(rotations)):
                off, nrot = offsets[k]
                if nrot:
                    new_rots[k] = so3_exp(delta[off : off + 3]) @ rotations[k]
                new_logf[k] = logf[k] + delta[off + nrot]
            r_new, _ = residuals_and_jac(new_rots, new_logf, want_jac=False)
            new_cost = float(r_new @ r_new)
            if new_cost < cost:
                rotations, logf = new_rots, new_logf
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # stuck in a minimum; treat as converged
            break
        rel_drop = (history[-1] - new_cost) / max(history[-1], 1e-300)
        history.append(new_cost)
        cost = new_cost
        if rel_drop < rel_tol:
            converged = True
            break
    n_res2d = sum(2 * len(ms) for _, _, ms in problem.cross_matches)
    rms = float(np.sqrt(cost / max(n_res2d, 1)))
    return BundleResult(
        rotations=rotations,
        intrinsics=[Intrinsics(f=float(np.exp(v)), pp=tuple(pp)) for v in logf],
        rms_px=rms,
        cost_history=history,
        converged=converged,
        iterations=it,
    )


def _reading_rotation(reading: ActuatorReading) -> np.ndarray:
    from .geometry import rot_x, rot_y

    return rot_x(np.deg2rad(reading.tilt)) @ rot_y(np.deg2rad(reading.pan))


# ---------------------------------------------------------------------------
# scene-map assembly
# ---------------------------------------------------------------------------

def build_scene_map(
    captures: Sequence,
    result: BundleResult,
    reference: int = 0,
    keypoint_sigma: float = 1.0,
) -> SceneMap:
    """Assemble the bundle-adjusted keyframes into a SceneMap."""
    scene = SceneMap(reference=reference)
    k_r = result.intrinsics[reference]
    p0 = np.eye(2) * keypoint_sigma**2
    for cap in captures:
        k = cap.view_id
        n = len(cap.observations)
        pos = np.array([o.pos for o in cap.observations]) if n else np.empty((0, 2))
        desc = (
            np.array([o.desc for o in cap.observations]) if n else np.empty((0, 1))
        )
        h_rk = compose_rotation_homography(
            k_r, result.rotations[reference], result.rotations[k], result.intrinsics[k]
        )
        scene.add_view(
            ViewMap(
                k,
                cap.reading,
                result.intrinsics[k],
                result.rotations[k],
                h_rk,
                np.arange(n, dtype=np.int64),
                pos,
                desc,
                np.tile(p0, (n, 1, 1)),
            )
        )
    return scene


# ---------------------------------------------------------------------------
# world registration
# ---------------------------------------------------------------------------

def rectify_from_vanishing(
    vp_x: np.ndarray,
    vp_y: np.ndarray,
    vline: np.ndarray,
    k_r: Intrinsics,
) -> Homography:
    """Metric rectification of the reference mosaic's ground plane.

    The plane normal ``K^T l`` and the reference intrinsics define the
    synthetic rotation that makes the camera fronto-parallel, mapping the
    vanishing line to infinity and removing projective and affine
    distortion exactly.  The orthogonal vanishing-point pair then rotates
    world +X onto the +x axis and flips the y axis if needed so the
    rectified frame is right-handed with the world.
    """
    vp_x = np.asarray(vp_x, dtype=float)
    vp_y = np.asarray(vp_y, dtype=float)
    l = np.asarray(vline, dtype=float)
    if np.linalg.norm(l) < 1e-12:
        raise DegenerateVanishingGeometry("vanishing line is zero")
    v1 = vp_x / np.linalg.norm(vp_x)
    v2 = vp_y / np.linalg.norm(vp_y)
    if np.linalg.norm(np.cross(v1, v2)) < 1e-9:
        raise DegenerateVanishingGeometry("coincident vanishing points")
    ln = l / np.linalg.norm(l)
    for vp, name in ((v1, "x"), (v2, "y")):
        if abs(ln @ vp) > 1e-6:
            raise DegenerateVanishingGeometry(
                f"vanishing point {name} does not lie on the vanishing line"
            )
    km = k_r.matrix()
    n = km.T @ l
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        raise DegenerateVanishingGeometry("degenerate plane normal")
    n = n / nn
    # rotation with third row n: maps the plane normal onto the optical axis
    a = np.array([1.0, 0.0, 0.0])
    if abs(n @ a) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    b1 = np.cross(a, n)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    r_v = np.vstack([b1, b2, n])
    h0 = km @ r_v @ np.linalg.inv(km)

    dx = h0 @ vp_x
    dy = h0 @ vp_y
    ex = dx[:2] / np.linalg.norm(dx[:2])
    ey = dy[:2] / np.linalg.norm(dy[:2])
    if np.linalg.norm(ex - ey) < 1e-9 or np.linalg.norm(ex + ey) < 1e-9:
        raise DegenerateVanishingGeometry("rectified axes parallel")
    align = np.array([[ex[0], ex[1]], [-ex[1], ex[0]]])
    ey_al = align @ ey
    if ey_al[1] < 0:  # enforce right-handed axes
        align = np.array([[1.0, 0.0], [0.0, -1.0]]) @ align
    h = np.eye(3)
    h[:2, :2] = align
    return Homography(h @ h0)


def scale_from_known_distance(
    p1: np.ndarray, p2: np.ndarray, length_m: float, h_p: Homography
) -> Homography:
    """Similarity fixing metric scale after rectification.

    Maps the rectified image of p1 to the world origin and the p1 -> p2
    direction onto +X with length ``length_m``.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if np.linalg.norm(p1 - p2) < 1e-12:
        raise CoincidentPoints("registration points coincide")
    q1 = h_p.apply(p1)
    q2 = h_p.apply(p2)
    d = q2 - q1
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        raise CoincidentPoints("rectified registration points coincide")
    s = length_m / dist
    ca, sa = d[0] / dist, d[1] / dist
    rot = np.array([[ca, sa], [-sa, ca]])  # rotate p1->p2 onto +X
    m = s * rot
    h = np.eye(3)
    h[:2, :2] = m
    h[:2, 2] = -m @ q1
    return Homography(h)


def register_world(
    k_r: Intrinsics,
    vp_x: np.ndarray,
    vp_y: np.ndarray,
    vline: np.ndarray,
    p1: np.ndarray,
    p2: np.ndarray,
    length_m: float,
) -> WorldRegistration:
    h_p = rectify_from_vanishing(vp_x, vp_y, vline, k_r)
    h_s = scale_from_known_distance(p1, p2, length_m, h_p)
    return WorldRegistration(
        h_p=h_p,
        h_s=h_s,
        known_distance=float(length_m),
        endpoints=(np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)),
    )
