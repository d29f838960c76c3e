"""Coarse-to-fine refinement with progressively finer segment splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..geom import SimilarityTransform, refine_pose
from .model import Reconstruction, merge_submaps, split_reconstruction
from .segba import SegmentBAProblem, segment_ba
from .segments import (SegmentPartition, detect_global_splits, detect_split_points,
                       split_scores)

log = logging.getLogger(__name__)


@dataclass
class RefineParams:
    error_threshold: float = 1.0       # mean reprojection (px) that ends the loop
    max_segments: int = None           # n'_max; None means unlimited
    max_levels: int = 8
    ba_iters: int = 30
    ba_tol: float = 1e-10
    robust: bool = False               # zero-weight residuals above median + 3 * 1.4826 MAD
    final_pose_iters: int = 10


@dataclass
class RefineLevel:
    t: int
    mode: str                          # "global" | "capped-global" | "local"
    n_segments: int
    splits: list
    error_before: float
    error_after: float
    cost_before: float
    cost_after: float
    ba_iterations: int


@dataclass
class RefineReport:
    levels: list = field(default_factory=list)
    initial_error: float = 0.0
    final_error: float = 0.0
    capped: bool = False

    @property
    def doublings(self) -> int:
        return len({lv.t for lv in self.levels})


def build_problem(rec: Reconstruction, partition: SegmentPartition, fixed_segments=None,
                  fixed_points=None, frames=None, weights=None) -> tuple:
    """Segment problem over ``rec`` with identity transforms and the current poses
    frozen inside each segment. ``frames`` restricts the observations used.

    Returns ``(problem, segment list)``.
    """
    segs = partition.segments()
    slot_frames, slot_seg = [], []
    for j, (_, fl) in enumerate(segs):
        for f in fl:
            slot_frames.append(f)
            slot_seg.append(j)
    slot = {f: i for i, f in enumerate(slot_frames)}
    use = np.ones(rec.n_observations, bool) if frames is None else np.isin(rec.obs_frame, list(frames))
    use &= np.isin(rec.obs_frame, slot_frames)
    obs_frame = np.array([slot[int(f)] for f in rec.obs_frame[use]], dtype=int)
    if fixed_segments is None:
        fixed_segments = {0}
    w = None if weights is None else weights[use]
    problem = SegmentBAProblem(
        [SimilarityTransform.identity() for _ in segs], slot_seg,
        [rec.poses[f] for f in slot_frames], [rec.intrinsics[f] for f in slot_frames],
        rec.points.copy(), rec.obs_point[use], obs_frame, rec.obs_px[use],
        frozenset(fixed_segments), fixed_points, w, slot_frames, rec.point_ids.copy())
    return problem, segs


def fold_solution(rec: Reconstruction, problem: SegmentBAProblem) -> Reconstruction:
    """Absorb each segment's similarity into its frames' rigid poses."""
    out = rec.copy()
    for k, f in enumerate(problem.frame_ids):
        T = problem.transforms[problem.frame_segment[k]]
        out.poses[f] = problem.frame_poses[k].after_similarity(T)
    out.points = problem.points.copy()
    return out


def _robust_weights(rec: Reconstruction):
    e = rec.reprojection_errors()
    med = np.median(e)
    mad = np.median(np.abs(e - med))
    return (e <= med + 3.0 * 1.4826 * mad + 1e-12).astype(float)


def _run(rec, partition, params, fixed_segments, fixed_points=None, frames=None):
    weights = _robust_weights(rec) if params.robust else None
    problem, segs = build_problem(rec, partition, fixed_segments, fixed_points, frames, weights)
    res = segment_ba(problem, params.ba_iters, params.ba_tol)
    return fold_solution(rec, res.problem), res, len(segs)


def reference_segment(partition: SegmentPartition, reference: int) -> int:
    n = 0
    for j, sp in enumerate(partition.splits):
        if j == reference:
            return n
        n += len(sp) + 1
    raise IndexError(reference)


def refine_reconstruction(rec: Reconstruction, params: RefineParams = RefineParams(),
                          reference=0):
    """Split, solve, fold, repeat with twice the segments; then per-frame poses.

    Returns ``(refined reconstruction, RefineReport)``.
    """
    rec = rec.copy()
    report = RefineReport(initial_error=rec.mean_reprojection_error())
    cap = params.max_segments
    t = 0
    for t in range(1, params.max_levels + 1):
        wanted = sum(min(2 ** t, len(s)) for s in rec.sequences)
        if cap is not None and wanted > cap:
            report.capped = True
            rec = _capped(rec, params, t, reference, report)
            break
        part = detect_split_points(rec, t)
        before = rec.mean_reprojection_error()
        rec, res, nseg = _run(rec, part, params, {reference_segment(part, reference)})
        after = rec.mean_reprojection_error()
        report.levels.append(RefineLevel(t, "global", nseg, part.splits, before, after,
                                         res.initial_cost, res.final_cost, res.iterations))
        log.info("level %d: %d segments, mean error %.4g -> %.4g px", t, nseg, before, after)
        single = all(len(fl) == 1 for _, fl in part.segments())
        if after <= params.error_threshold or single:
            break
    rec = final_pose_pass(rec, params.final_pose_iters)
    report.final_error = rec.mean_reprojection_error()
    return rec, report


def _capped(rec, params, t, reference, report):
    """Two-step refinement once the global system would exceed ``max_segments``."""
    n = len(rec.sequences)
    m = params.max_segments - n
    if m > 0:
        part = detect_global_splits(rec, t, m)
        before = rec.mean_reprojection_error()
        rec, res, nseg = _run(rec, part, params, {reference_segment(part, reference)})
        report.levels.append(RefineLevel(t, "capped-global", nseg, part.splits, before,
                                         rec.mean_reprojection_error(), res.initial_cost,
                                         res.final_cost, res.iterations))
    for j, seq in enumerate(rec.sequences):
        for level in range(t, params.max_levels + 1):
            sub = _sequence_error(rec, seq)
            if sub <= params.error_threshold and level > t:
                break
            scores = split_scores(rec)
            part_j = detect_split_points(rec, level, count=[
                (2 ** level - 1) if i == j else 0 for i in range(n)], scores=scores)
            segs = part_j.segments()
            own = [k for k, (i, _) in enumerate(segs) if i == j]
            fixed = {k for k, (i, _) in enumerate(segs) if i != j}
            if not fixed:
                fixed = {own[0]}
            in_seq = set(seq)
            others = np.isin(rec.obs_frame, list(in_seq), invert=True)
            fixed_pts = np.zeros(len(rec.points), bool)
            fixed_pts[np.unique(rec.obs_point[others])] = True
            before = rec.mean_reprojection_error()
            rec, res, nseg = _run(rec, part_j, params, fixed, fixed_pts)
            report.levels.append(RefineLevel(level, "local", nseg, part_j.splits, before,
                                             rec.mean_reprojection_error(), res.initial_cost,
                                             res.final_cost, res.iterations))
            if all(len(segs[k][1]) == 1 for k in own):
                break
    return rec


def _sequence_error(rec, seq):
    m = np.isin(rec.obs_frame, list(seq))
    e = rec.reprojection_errors()[m]
    return float(e.mean()) if len(e) else 0.0


def final_pose_pass(rec: Reconstruction, iters=10) -> Reconstruction:
    """Points fixed, every frame pose re-estimated from its own observations."""
    out = rec.copy()
    order = np.argsort(rec.obs_frame, kind="stable")
    fids, starts = np.unique(rec.obs_frame[order], return_index=True)
    bounds = dict(zip(fids.tolist(), zip(starts, np.r_[starts[1:], len(order)])))
    for f in rec.frames:
        a, b = bounds.get(f, (0, 0))
        rows = order[a:b]
        if len(rows) < 6:
            continue
        out.poses[f] = refine_pose(rec.intrinsics[f], rec.poses[f], rec.points[rec.obs_point[rows]],
                                   rec.obs_px[rows], iters)
    return out


def coarse_to_fine_refine(submaps, transforms, max_segments=None,
                          params: RefineParams = None, reference=None):
    """Refine registered submaps jointly; returns ``(refined submaps, RefineReport)``.

    ``transforms[j]`` maps world coordinates into submap ``j``; the reference
    (identity transform unless given) keeps its first segment pinned.
    """
    params = RefineParams() if params is None else params
    if max_segments is not None:
        params = RefineParams(**{**params.__dict__, "max_segments": max_segments})
    if reference is None:
        reference = next((j for j, T in enumerate(transforms) if T.is_identity()), 0)
    rec = merge_submaps(submaps, transforms)
    rec, report = refine_reconstruction(rec, params, reference)
    out = split_reconstruction(rec)
    for sm, orig in zip(out, submaps):
        sm.sequence_id = orig.sequence_id
    return out, report
