"""View-map and scene-map storage, descriptor matching, keyframe retrieval.

A ViewMap holds the landmarks of one keyframe in struct-of-arrays form so
per-frame matching and filtering stay vectorized; `Landmark` objects are
materialized on demand for the single-landmark API.  ViewMaps are treated
as immutable: map updating builds a replacement and the SceneMap publishes
it atomically, which gives readers snapshot isolation.

Serialized maps use a little-endian binary container: magic ``PTZM``,
format version, reference view id, then one record per view.  The
round-trip is bit-exact; see ``serialize_map``.
"""

from __future__ import annotations

import io
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import CorruptPayload, DimensionMismatch, EmptyMap, VersionMismatch
from .geometry import Homography, Intrinsics, PointMatch

MAGIC = b"PTZM"
FORMAT_VERSION = 1

BRUTE_FORCE_LIMIT = 2000  # below this many landmarks, match exactly
FOREST_TREES = 4
FOREST_SUBSPACE = 8
FOREST_CANDIDATES = 4  # neighbors fetched per tree before exact re-ranking

DEFAULT_RATIO = 0.8
PAN_TILT_WEIGHT = 1.0
LOG_ZOOM_WEIGHT = 10.0


@dataclass(frozen=True)
class Landmark:
    """A persistent background keypoint of one view map."""

    id: int
    pos: np.ndarray  # (2,) pixels in the view's keyframe frame
    desc: np.ndarray  # fixed-length descriptor
    P: np.ndarray  # (2, 2) position covariance, pixels^2
    frames_seen: int = 1
    frames_since_match: int = 0
    born_at: int = 0
    original: bool = True


@dataclass(frozen=True)
class ActuatorReading:
    """Motor-reported pan/tilt (degrees) and zoom value, with noise sigmas."""

    pan: float
    tilt: float
    zoom: float
    noise: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.zoom > 0:
            raise ValueError("zoom motor value must be positive")


class ViewMap:
    """Landmarks of one keyframe plus its registration to the reference."""

    def __init__(
        self,
        view_id: int,
        key: ActuatorReading,
        k_k: Intrinsics,
        r_k: np.ndarray,
        h_rk: Homography,
        ids: np.ndarray,
        pos: np.ndarray,
        desc: np.ndarray,
        P: np.ndarray,
        frames_seen: Optional[np.ndarray] = None,
        frames_since_match: Optional[np.ndarray] = None,
        born_at: Optional[np.ndarray] = None,
        original: Optional[np.ndarray] = None,
        next_id: Optional[int] = None,
        validate: bool = True,
    ):
        n = len(ids)
        self.view_id = int(view_id)
        self.key = key
        self.k_k = k_k
        self.r_k = np.asarray(r_k, dtype=float)
        self.h_rk = h_rk
        self.ids = np.asarray(ids, dtype=np.int64)
        self.pos = np.asarray(pos, dtype=float).reshape(n, 2)
        self.desc = np.asarray(desc, dtype=float).reshape(n, -1)
        self.P = np.asarray(P, dtype=float).reshape(n, 2, 2)
        self.frames_seen = (
            np.ones(n, dtype=np.int64) if frames_seen is None else np.asarray(frames_seen, dtype=np.int64)
        )
        self.frames_since_match = (
            np.zeros(n, dtype=np.int64)
            if frames_since_match is None
            else np.asarray(frames_since_match, dtype=np.int64)
        )
        self.born_at = (
            np.zeros(n, dtype=np.int64) if born_at is None else np.asarray(born_at, dtype=np.int64)
        )
        self.original = (
            np.ones(n, dtype=bool) if original is None else np.asarray(original, dtype=bool)
        )
        if validate and len(np.unique(self.ids)) != n:
            raise ValueError("landmark ids must be unique within a view map")
        self.next_id = int(self.ids.max()) + 1 if (next_id is None and n) else int(next_id or 0)
        self._index = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def descriptor_dim(self) -> int:
        return self.desc.shape[1]

    def landmark(self, i: int) -> Landmark:
        return Landmark(
            id=int(self.ids[i]),
            pos=self.pos[i].copy(),
            desc=self.desc[i].copy(),
            P=self.P[i].copy(),
            frames_seen=int(self.frames_seen[i]),
            frames_since_match=int(self.frames_since_match[i]),
            born_at=int(self.born_at[i]),
            original=bool(self.original[i]),
        )

    @property
    def landmarks(self) -> list[Landmark]:
        return [self.landmark(i) for i in range(len(self))]

    def copy(self) -> "ViewMap":
        return ViewMap(
            self.view_id,
            self.key,
            self.k_k,
            self.r_k.copy(),
            self.h_rk,
            self.ids.copy(),
            self.pos.copy(),
            self.desc.copy(),
            self.P.copy(),
            self.frames_seen.copy(),
            self.frames_since_match.copy(),
            self.born_at.copy(),
            self.original.copy(),
            next_id=self.next_id,
        )

    def descriptor_index(self) -> "DescriptorIndex":
        if self._index is None or self._index.size != len(self):
            self._index = DescriptorIndex(self.desc)
        return self._index


@dataclass
class SceneMap:
    """All view maps, keyed by view id, with one designated reference."""

    views: dict[int, ViewMap] = field(default_factory=dict)
    reference: int = 0
    world: Optional[object] = None  # worldproj.WorldRegistration once registered
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __deepcopy__(self, memo):
        # the lock is not copyable; give the copy a fresh one
        with self._lock:
            views = {vid: v.copy() for vid, v in self.views.items()}
        return SceneMap(views=views, reference=self.reference, world=self.world)

    def add_view(self, view: ViewMap) -> None:
        with self._lock:
            self.views[view.view_id] = view

    def publish(self, view: ViewMap) -> None:
        """Atomically replace a view map (single-writer update path)."""
        with self._lock:
            self.views[view.view_id] = view

    def snapshot(self) -> dict[int, ViewMap]:
        """Consistent frozen view of the map for concurrent readers."""
        with self._lock:
            return dict(self.views)

    @property
    def reference_view(self) -> ViewMap:
        return self.views[self.reference]


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def actuator_distance(a: ActuatorReading, b: ActuatorReading) -> float:
    """Weighted retrieval distance: degrees for pan/tilt, log2 for zoom."""
    return (
        PAN_TILT_WEIGHT * abs(a.pan - b.pan)
        + PAN_TILT_WEIGHT * abs(a.tilt - b.tilt)
        + LOG_ZOOM_WEIGHT * abs(np.log2(a.zoom / b.zoom))
    )


def nearest_view(scene: SceneMap, reading: ActuatorReading) -> ViewMap:
    """The view map whose actuator key is closest to the reading.

    Ties break deterministically toward the lowest view id.
    """
    views = scene.snapshot()
    if not views:
        raise EmptyMap("scene map has no views")
    best = min(
        views.values(), key=lambda v: (actuator_distance(v.key, reading), v.view_id)
    )
    return best


# ---------------------------------------------------------------------------
# descriptor matching
# ---------------------------------------------------------------------------

class DescriptorIndex:
    """Two-nearest-descriptor search: exact below BRUTE_FORCE_LIMIT, else a
    forest of randomized-subspace k-d trees with exact re-ranking of the
    gathered candidates."""

    def __init__(self, desc: np.ndarray, rng_seed: int = 0x5EED):
        self.desc = desc
        self.size = desc.shape[0]
        self._trees = []
        if self.size >= BRUTE_FORCE_LIMIT:
            rng = np.random.default_rng(rng_seed)
            dim = desc.shape[1]
            k = min(FOREST_SUBSPACE, dim)
            for _ in range(FOREST_TREES):
                dims = rng.choice(dim, size=k, replace=False)
                self._trees.append((dims, cKDTree(desc[:, dims])))

    def query_two(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Indices of the nearest landmark and the first/second distances."""
        if self.size == 0:
            raise EmptyMap("no landmarks to match")
        if not self._trees:
            d2 = (
                np.sum(q * q, axis=1)[:, None]
                + np.sum(self.desc * self.desc, axis=1)[None, :]
                - 2.0 * q @ self.desc.T
            )
            if self.size == 1:
                best = np.zeros(len(q), dtype=np.int64)
                d1 = np.sqrt(np.maximum(d2[:, 0], 0.0))
                return best, d1, np.full(len(q), np.inf)
            rows = np.arange(len(q))
            best = np.argmin(d2, axis=1)
            first = d2[rows, best].copy()
            d2[rows, best] = np.inf
            second = d2[rows, np.argmin(d2, axis=1)]
            return (
                best.astype(np.int64),
                np.sqrt(np.maximum(first, 0.0)),
                np.sqrt(np.maximum(second, 0.0)),
            )
        cand: list[np.ndarray] = []
        for dims, tree in self._trees:
            _, idx = tree.query(q[:, dims], k=FOREST_CANDIDATES)
            cand.append(np.atleast_2d(idx))
        cands = np.hstack(cand)  # (nq, trees * k)
        best = np.empty(len(q), dtype=np.int64)
        d1 = np.empty(len(q))
        d2_ = np.empty(len(q))
        for i in range(len(q)):
            c = np.unique(cands[i])
            dist = np.linalg.norm(self.desc[c] - q[i], axis=1)
            o = np.argsort(dist)
            best[i] = c[o[0]]
            d1[i] = dist[o[0]]
            d2_[i] = dist[o[1]] if len(o) > 1 else np.inf
        return best, d1, d2_


def match_indices(
    obs_pos: np.ndarray,
    obs_desc: np.ndarray,
    view: ViewMap,
    sample_size: Optional[int] = None,
    ratio: float = DEFAULT_RATIO,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mutual-best distance-ratio matching.

    Returns (observation indices, view landmark indices) of the accepted
    pairs.  At most ``sample_size`` landmarks are considered, chosen by
    random sampling with the supplied generator.
    """
    if obs_desc.shape[1] != view.descriptor_dim:
        raise DimensionMismatch(
            f"observation descriptors have dim {obs_desc.shape[1]}, map has {view.descriptor_dim}"
        )
    n_lm = len(view)
    if n_lm == 0 or len(obs_desc) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    if sample_size is not None and sample_size < n_lm:
        rng = rng or np.random.default_rng()
        sel = np.sort(rng.choice(n_lm, size=sample_size, replace=False))
        desc = view.desc[sel]
        index = DescriptorIndex(desc)
    else:
        sel = None
        index = view.descriptor_index()
    best, d1, d2 = index.query_two(obs_desc)
    ok = d1 < ratio * d2
    # mutual best: of the observations claiming a landmark, keep the closest
    okidx = np.flatnonzero(ok)
    if len(okidx) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    order = okidx[np.argsort(d1[okidx], kind="stable")]
    lm_sorted = best[order]
    uniq, first = np.unique(lm_sorted, return_index=True)
    obs_idx = order[first]
    lm_idx = uniq.astype(np.int64)
    if sel is not None:
        lm_idx = sel[lm_idx]
    srt = np.argsort(obs_idx)
    return obs_idx[srt].astype(np.int64), lm_idx[srt]


def match_descriptors(
    frame_obs: Sequence,
    view: ViewMap,
    sample_size: Optional[int] = None,
    ratio: float = DEFAULT_RATIO,
    rng: Optional[np.random.Generator] = None,
) -> list[PointMatch]:
    """Match frame observations (objects with .pos/.desc) against a view map.

    Returned matches run observation -> landmark with the landmark position
    covariance attached as dst_cov.
    """
    if len(frame_obs) == 0:
        return []
    obs_pos = np.array([np.asarray(o.pos, dtype=float) for o in frame_obs])
    obs_desc = np.array([np.asarray(o.desc, dtype=float) for o in frame_obs])
    obs_idx, lm_idx = match_indices(obs_pos, obs_desc, view, sample_size, ratio, rng)
    out = []
    for oi, li in zip(obs_idx, lm_idx):
        cov = getattr(frame_obs[oi], "cov", None)
        out.append(
            PointMatch(
                src=obs_pos[oi],
                dst=view.pos[li].copy(),
                src_cov=None if cov is None else np.asarray(cov, dtype=float),
                dst_cov=view.P[li].copy(),
            )
        )
    return out


def update_descriptor(lm: Landmark, new_desc: np.ndarray, alpha: float) -> Landmark:
    """Running average with forgetting factor: desc <- (1-a) desc + a new."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"forgetting factor must be in (0, 1], got {alpha}")
    new_desc = np.asarray(new_desc, dtype=float)
    if new_desc.shape != lm.desc.shape:
        raise DimensionMismatch(
            f"descriptor length {new_desc.shape} != {lm.desc.shape}"
        )
    return replace(lm, desc=(1.0 - alpha) * lm.desc + alpha * new_desc)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _write_array(out: io.BytesIO, a: np.ndarray, dtype: str) -> None:
    out.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _read(buf: memoryview, offset: int, count: int, dtype: str) -> tuple[np.ndarray, int]:
    item = np.dtype(dtype).itemsize
    end = offset + count * item
    if end > len(buf):
        raise CorruptPayload("stream truncated")
    arr = np.frombuffer(buf[offset:end], dtype=dtype).copy()
    return arr, end


def serialize_map(scene: SceneMap) -> bytes:
    """Versioned binary encoding of a scene map (bit-exact round trip)."""
    from .worldproj import WorldRegistration  # local import to avoid a cycle

    out = io.BytesIO()
    out.write(MAGIC)
    views = scene.snapshot()
    dim = next(iter(views.values())).descriptor_dim if views else 0
    world = scene.world
    out.write(
        struct.pack(
            "<IqIB", FORMAT_VERSION, scene.reference, dim, 1 if world is not None else 0
        )
    )
    if world is not None:
        assert isinstance(world, WorldRegistration)
        _write_array(out, world.h_p.h, "<f8")
        _write_array(out, world.h_s.h, "<f8")
        out.write(struct.pack("<d", world.known_distance))
        _write_array(out, np.asarray(world.endpoints, dtype=float), "<f8")
    out.write(struct.pack("<I", len(views)))
    for vid in sorted(views):
        v = views[vid]
        out.write(
            struct.pack(
                "<qdddddd",
                v.view_id,
                v.key.pan,
                v.key.tilt,
                v.key.zoom,
                *v.key.noise,
            )
        )
        out.write(struct.pack("<ddd", v.k_k.f, *v.k_k.pp))
        _write_array(out, v.r_k, "<f8")
        _write_array(out, v.h_rk.h, "<f8")
        has_cov = v.h_rk.cov is not None
        out.write(struct.pack("<B", 1 if has_cov else 0))
        if has_cov:
            _write_array(out, v.h_rk.cov, "<f8")
        out.write(struct.pack("<Iq", len(v), v.next_id))
        _write_array(out, v.ids, "<i8")
        _write_array(out, v.pos, "<f8")
        _write_array(out, v.desc, "<f8")
        _write_array(out, v.P, "<f8")
        _write_array(out, v.frames_seen, "<i8")
        _write_array(out, v.frames_since_match, "<i8")
        _write_array(out, v.born_at, "<i8")
        _write_array(out, v.original.astype(np.uint8), "<u1")
    return out.getvalue()


def deserialize_map(data: bytes) -> SceneMap:
    """Inverse of serialize_map; raises VersionMismatch / CorruptPayload."""
    from .worldproj import WorldRegistration

    buf = memoryview(data)
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise CorruptPayload("bad magic")
    off = 4
    try:
        version, reference, dim, has_world = struct.unpack_from("<IqIB", buf, off)
    except struct.error as e:
        raise CorruptPayload(str(e)) from e
    off += struct.calcsize("<IqIB")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    world = None
    if has_world:
        hp, off = _read(buf, off, 9, "<f8")
        hs, off = _read(buf, off, 9, "<f8")
        if off + 8 > len(buf):
            raise CorruptPayload("stream truncated")
        (length,) = struct.unpack_from("<d", buf, off)
        off += 8
        eps, off = _read(buf, off, 4, "<f8")
        world = WorldRegistration(
            h_p=Homography(hp.reshape(3, 3)),
            h_s=Homography(hs.reshape(3, 3)),
            known_distance=float(length),
            endpoints=(eps[:2], eps[2:]),
        )
    try:
        (n_views,) = struct.unpack_from("<I", buf, off)
    except struct.error as e:
        raise CorruptPayload(str(e)) from e
    off += 4
    scene = SceneMap(reference=reference, world=world)
    for _ in range(n_views):
        try:
            vid, pan, tilt, zoom, n0, n1, n2 = struct.unpack_from("<qdddddd", buf, off)
            off += struct.calcsize("<qdddddd")
            f, ppx, ppy = struct.unpack_from("<ddd", buf, off)
            off += struct.calcsize("<ddd")
        except struct.error as e:
            raise CorruptPayload(str(e)) from e
        r_k, off = _read(buf, off, 9, "<f8")
        h_rk, off = _read(buf, off, 9, "<f8")
        if off + 1 > len(buf):
            raise CorruptPayload("stream truncated")
        has_cov = buf[off]
        off += 1
        cov = None
        if has_cov:
            c, off = _read(buf, off, 81, "<f8")
            cov = c.reshape(9, 9)
        try:
            n, next_id = struct.unpack_from("<Iq", buf, off)
        except struct.error as e:
            raise CorruptPayload(str(e)) from e
        off += struct.calcsize("<Iq")
        ids, off = _read(buf, off, n, "<i8")
        pos, off = _read(buf, off, 2 * n, "<f8")
        desc, off = _read(buf, off, dim * n, "<f8")
        P, off = _read(buf, off, 4 * n, "<f8")
        seen, off = _read(buf, off, n, "<i8")
        since, off = _read(buf, off, n, "<i8")
        born, off = _read(buf, off, n, "<i8")
        orig, off = _read(buf, off, n, "<u1")
        scene.add_view(
            ViewMap(
                vid,
                ActuatorReading(pan, tilt, zoom, (n0, n1, n2)),
                Intrinsics(f=f, pp=(ppx, ppy)),
                r_k.reshape(3, 3),
                Homography(h_rk.reshape(3, 3), cov=cov),
                ids,
                pos.reshape(n, 2),
                desc.reshape(n, dim),
                P.reshape(n, 2, 2),
                seen,
                since,
                born,
                orig.astype(bool),
                next_id=next_id,
            )
        )
    if off != len(buf):
        raise CorruptPayload(f"{len(buf) - off} trailing bytes")
    return scene
