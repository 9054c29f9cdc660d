"""Evaluation: calibration error records, CLEAR MOT and USC trajectory metrics.

Tracking metrics operate on frame-indexed pedestrian boxes built from foot
points and pixel heights with a fixed aspect ratio.  Per frame, ground
truth and hypotheses are assigned by Hungarian matching on VOC overlap
(IoU) with a 0.5 acceptance threshold; identity switches are counted when
a ground-truth trajectory re-associates to a different hypothesis id than
its previous one.  Every per-frame decision is recorded in an event log
from which all reported percentages can be recomputed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import FrameIndexMismatch
from .geometry import CameraPose, Homography, apply_homography

BOX_ASPECT = 0.41  # pedestrian box width as a fraction of height
VOC_THRESHOLD = 0.5


@dataclass(frozen=True)
class CalibErrorRecord:
    """Per-instant calibration errors against the bundle-adjusted reference."""

    frame: int
    e_pan_deg: float
    e_tilt_deg: float
    e_f_pct: float
    reproj_px: float


@dataclass
class MotReport:
    mota: float  # percent
    motp: float  # percent (mean VOC over TP)
    fn_pct: float
    fp_pct: float
    id_sw: int
    tr_fr: int
    mt_pct: float
    pt_pct: float
    ml_pct: float
    faf: float
    n_gt: int = 0
    n_frames: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def foot_to_box(foot: np.ndarray, height_px: float, aspect: float = BOX_ASPECT) -> np.ndarray:
    """(x1, y1, x2, y2) box standing on the foot point."""
    h = max(float(height_px), 1e-6)
    w = aspect * h
    x, y = float(foot[0]), float(foot[1])
    return np.array([x - w / 2.0, y - h, x + w / 2.0, y])


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    x1 = max(a[0], b[0])
    y1 = max(a[1], b[1])
    x2 = min(a[2], b[2])
    y2 = min(a[3], b[3])
    if x2 <= x1 or y2 <= y1:
        return 0.0
    inter = (x2 - x1) * (y2 - y1)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


# frame-indexed box collections: {frame: {track_id: box}}
Boxes = dict[int, dict[int, np.ndarray]]


@dataclass
class FrameEvents:
    frame: int
    matches: list[tuple[int, int, float]] = field(default_factory=list)  # (gt, hyp, iou)
    misses: list[int] = field(default_factory=list)
    false_positives: list[int] = field(default_factory=list)
    switches: list[tuple[int, int, int]] = field(default_factory=list)  # (gt, old, new)


def clear_mot(
    gt: Boxes, hyp: Boxes, overlap_threshold: float = VOC_THRESHOLD
) -> tuple[MotReport, list[FrameEvents]]:
    """CLEAR MOT + USC metrics with a per-frame audit log.

    MOTA = 1 - (FN + FP + ID_SW) / total ground-truth count;
    MOTP = mean VOC overlap over true positives.
    """
    if not gt:
        raise FrameIndexMismatch("empty ground truth")
    frames = sorted(gt.keys())
    frame_set = set(frames)
    for f in hyp.keys():
        if f not in frame_set:
            raise FrameIndexMismatch(f"hypothesis frame {f} not in ground truth")

    last_match: dict[int, int] = {}
    events: list[FrameEvents] = []
    total_gt = 0
    fn = fp = idsw = 0
    voc_sum = 0.0
    tp = 0
    gt_frames: dict[int, int] = {}
    gt_matched_frames: dict[int, list[int]] = {}

    for f in frames:
        g = gt.get(f, {})
        h = hyp.get(f, {})
        ev = FrameEvents(frame=f)
        total_gt += len(g)
        for gid in g:
            gt_frames[gid] = gt_frames.get(gid, 0) + 1
        gids = sorted(g.keys())
        hids = sorted(h.keys())
        matched_g: set[int] = set()
        matched_h: set[int] = set()
        if gids and hids:
            iou = np.zeros((len(gids), len(hids)))
            for i, gid in enumerate(gids):
                for j, hid in enumerate(hids):
                    iou[i, j] = box_iou(g[gid], h[hid])
            cost = np.where(iou >= overlap_threshold, -iou, 1.0)
            rows, cols = linear_sum_assignment(cost)
            for i, j in zip(rows, cols):
                if iou[i, j] < overlap_threshold:
                    continue
                gid, hid = gids[i], hids[j]
                matched_g.add(gid)
                matched_h.add(hid)
                prev = last_match.get(gid)
                if prev is not None and prev != hid:
                    idsw += 1
                    ev.switches.append((gid, prev, hid))
                last_match[gid] = hid
                ev.matches.append((gid, hid, float(iou[i, j])))
                voc_sum += float(iou[i, j])
                tp += 1
                gt_matched_frames.setdefault(gid, []).append(f)
        for gid in gids:
            if gid not in matched_g:
                fn += 1
                ev.misses.append(gid)
        for hid in hids:
            if hid not in matched_h:
                fp += 1
                ev.false_positives.append(hid)
        events.append(ev)

    mota = 100.0 * (1.0 - (fn + fp + idsw) / max(total_gt, 1))
    motp = 100.0 * (voc_sum / tp) if tp else 0.0
    # fragmentations: interruptions of per-trajectory coverage
    tr_fr = 0
    for gid, n_present in gt_frames.items():
        present = sorted(f for f in frames if gid in gt.get(f, {}))
        matched = set(gt_matched_frames.get(gid, []))
        state = False
        frag = 0
        ever = False
        for f in present:
            m = f in matched
            if m and ever and not state:
                frag += 1
            if m:
                ever = True
            state = m
        tr_fr += frag
    mt, pt, ml = _usc_buckets(gt_frames, gt_matched_frames)
    report = MotReport(
        mota=mota,
        motp=motp,
        fn_pct=100.0 * fn / max(total_gt, 1),
        fp_pct=100.0 * fp / max(total_gt, 1),
        id_sw=idsw,
        tr_fr=tr_fr,
        mt_pct=mt,
        pt_pct=pt,
        ml_pct=ml,
        faf=fp / max(len(frames), 1),
        n_gt=len(gt_frames),
        n_frames=len(frames),
    )
    return report, events


def _usc_buckets(
    gt_frames: dict[int, int], gt_matched_frames: dict[int, list[int]]
) -> tuple[float, float, float]:
    n = len(gt_frames)
    if n == 0:
        return 0.0, 0.0, 0.0
    mt = pt = ml = 0
    for gid, present in gt_frames.items():
        cov = len(gt_matched_frames.get(gid, [])) / present
        if cov > 0.8:
            mt += 1
        elif cov < 0.2:
            ml += 1
        else:
            pt += 1
    return 100.0 * mt / n, 100.0 * pt / n, 100.0 * ml / n


def usc_metric(gt: Boxes, hyp: Boxes, overlap_threshold: float = VOC_THRESHOLD):
    """(MT%, PT%, ML%, FAF) trajectory-coverage buckets."""
    report, _ = clear_mot(gt, hyp, overlap_threshold)
    return report.mt_pct, report.pt_pct, report.ml_pct, report.faf


def recompute_from_events(events: Sequence[FrameEvents], total_gt: int) -> dict:
    """Audit: rebuild the headline counts from the per-frame event log."""
    fn = sum(len(e.misses) for e in events)
    fp = sum(len(e.false_positives) for e in events)
    idsw = sum(len(e.switches) for e in events)
    tp = sum(len(e.matches) for e in events)
    voc = sum(m[2] for e in events for m in e.matches)
    return {
        "mota": 100.0 * (1.0 - (fn + fp + idsw) / max(total_gt, 1)),
        "motp": 100.0 * voc / tp if tp else 0.0,
        "fn": fn,
        "fp": fp,
        "id_sw": idsw,
        "tp": tp,
    }


# ---------------------------------------------------------------------------
# calibration errors
# ---------------------------------------------------------------------------

def calib_errors(
    frame: int,
    est_pose: CameraPose,
    ref_pose: CameraPose,
    est_chain: np.ndarray,
    ref_chain: np.ndarray,
    image_size: tuple[int, int],
    grid_spacing: float = 40.0,
) -> CalibErrorRecord:
    """Angle/focal errors plus grid reprojection error between two chains.

    Both chains map the current frame into the reference mosaic; the grid
    covers the frame at the given spacing and the reprojection error is
    the mean distance between its two images.
    """
    w, h = image_size
    xs = np.arange(grid_spacing / 2.0, w, grid_spacing)
    ys = np.arange(grid_spacing / 2.0, h, grid_spacing)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    a = apply_homography(est_chain, grid)
    b = apply_homography(ref_chain, grid)
    reproj = float(np.mean(np.linalg.norm(a - b, axis=1)))
    return CalibErrorRecord(
        frame=frame,
        e_pan_deg=float(np.rad2deg(abs(est_pose.pan - ref_pose.pan))),
        e_tilt_deg=float(np.rad2deg(abs(est_pose.tilt - ref_pose.tilt))),
        e_f_pct=float(100.0 * abs(est_pose.focal - ref_pose.focal) / ref_pose.focal),
        reproj_px=reproj,
    )


# ---------------------------------------------------------------------------
# file I/O (trajectory + truth dumps)
# ---------------------------------------------------------------------------

TRAJECTORY_FIELDS = [
    "frame", "track_id", "x_world", "y_world", "x_img", "y_img", "height_px", "status",
]
TRUTH_FIELDS = ["frame", "target_id", "x_world", "y_world", "x_img", "y_img", "height_px"]


def write_trajectories(path, records: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRAJECTORY_FIELDS)
        for r in records:
            wr.writerow(
                [
                    r.frame, r.track_id,
                    f"{r.x_world:.17g}", f"{r.y_world:.17g}",
                    f"{r.x_img:.17g}", f"{r.y_img:.17g}",
                    f"{r.height_px:.17g}", r.status,
                ]
            )


def load_boxes_from_trajectories(path, confirmed_only: bool = True) -> Boxes:
    out: Boxes = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            if confirmed_only and row["status"] != "confirmed":
                continue
            frame = int(row["frame"])
            foot = np.array([float(row["x_img"]), float(row["y_img"])])
            out.setdefault(frame, {})[int(row["track_id"])] = foot_to_box(
                foot, float(row["height_px"])
            )
    return out


def write_truth(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRUTH_FIELDS)
        for r in rows:
            wr.writerow(
                [
                    r["frame"], r["target_id"],
                    f"{r['x_world']:.17g}", f"{r['y_world']:.17g}",
                    f"{r['x_img']:.17g}", f"{r['y_img']:.17g}",
                    f"{r['height_px']:.17g}",
                ]
            )


def load_boxes_from_truth(path, image_size: Optional[tuple[int, int]] = None) -> Boxes:
    out: Boxes = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            frame = int(row["frame"])
            foot = np.array([float(row["x_img"]), float(row["y_img"])])
            if image_size is not None:
                w, h = image_size
                if not (0 <= foot[0] < w and 0 <= foot[1] < h):
                    continue
            out.setdefault(frame, {})[int(row["target_id"])] = foot_to_box(
                foot, float(row["height_px"])
            )
    return out


def events_to_csv(path, events: Sequence[FrameEvents]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "kind", "gt_id", "hyp_id", "iou"])
        for e in events:
            for gid, hid, iou in e.matches:
                wr.writerow([e.frame, "match", gid, hid, f"{iou:.17g}"])
            for gid in e.misses:
                wr.writerow([e.frame, "miss", gid, "", ""])
            for hid in e.false_positives:
                wr.writerow([e.frame, "fp", "", hid, ""])
            for gid, old, new in e.switches:
                wr.writerow([e.frame, "switch", gid, f"{old}->{new}", ""])
