"""Per-sequence incremental reconstruction."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import EnftError, InitFailure, InsufficientMatches, ResectionFailure
from ..geom import CameraPose, relative_pose, resect, triangulate_multiview
from ..geom.twoview import triangulation_angle
from .bundle import bundle_adjust
from .model import Reconstruction, Submap, intrinsics_map

log = logging.getLogger(__name__)


@dataclass
class IncrementalParams:
    min_init_matches: int = 100
    init_candidates: int = 60          # pairs scored by relative pose, spread over all qualifying
    min_parallax_deg: float = 1.0
    max_error: float = 3.0
    local_ba_every: int = 5
    local_window: int = 10
    ba_iters: int = 30
    final_ba_iters: int = 100
    seed: int = 0


def _track_table(tracks, frames):
    """Track id -> {frame: pixel} restricted to ``frames``."""
    fset = set(frames)
    out = {}
    for t in tracks:
        obs = {f: i for f, i in t.observations.items() if f in fset}
        if len(obs) >= 2:
            out[t.track_id] = obs
    return out


def _pair_counts(table, order):
    pos = {f: k for k, f in enumerate(order)}
    n = len(order)
    C = np.zeros((n, n), int)
    for obs in table.values():
        ks = sorted(pos[f] for f in obs)
        for a in range(len(ks)):
            C[ks[a], ks[a + 1:]] += 1
    return C


def _init_pair(table, order, feats, intr, params, rng):
    C = _pair_counts(table, order)
    ii, jj = np.nonzero(np.triu(C, 1) >= params.min_init_matches)
    if not len(ii):
        raise InitFailure(f"no frame pair shares {params.min_init_matches} tracks "
                          f"(best {int(np.triu(C, 1).max()) if len(order) > 1 else 0})")
    pick = np.unique(np.linspace(0, len(ii) - 1, min(params.init_candidates, len(ii))).astype(int))
    best = None
    for a, b in zip(ii[pick], jj[pick]):
        fa, fb = order[a], order[b]
        common = [tid for tid, obs in table.items() if fa in obs and fb in obs]
        pa = np.array([feats[fa].positions[table[t][fa]] for t in common])
        pb = np.array([feats[fb].positions[table[t][fb]] for t in common])
        try:
            pose, mask, X = relative_pose(intr[fa], intr[fb], pa, pb, rng=rng)
        except (EnftError, np.linalg.LinAlgError, ValueError):
            continue
        if mask.sum() < params.min_init_matches:
            continue
        ang = np.degrees(np.median(triangulation_angle(np.zeros(3), pose.center, X[mask])))
        if not ang >= params.min_parallax_deg:
            continue
        score = int(mask.sum()) * ang
        if best is None or score > best[0]:
            best = (score, fa, fb, pose)
    if best is None:
        raise InitFailure("no candidate pair has enough inliers and parallax")
    return best[1:]


class _Builder:
    """Mutable reconstruction state during incremental growth."""

    def __init__(self, table, feats, intr, params):
        self.table = table
        self.feats = feats
        self.intr = intr
        self.params = params
        self.poses = {}
        self.points = {}                  # track id -> X
        self.rejected = set()             # (track, frame) observations pruned as outliers
        self.frame_tracks = {}
        for tid, obs in table.items():
            for f in obs:
                self.frame_tracks.setdefault(f, []).append(tid)
        self.support = {}                 # frame -> number of its tracks with a 3D point

    def set_point(self, tid, X):
        if tid not in self.points:
            for f in self.table[tid]:
                self.support[f] = self.support.get(f, 0) + 1
        self.points[tid] = X

    def drop_point(self, tid):
        del self.points[tid]
        for f in self.table[tid]:
            self.support[f] -= 1

    def px(self, tid, f):
        return self.feats[f].positions[self.table[tid][f]]

    def triangulate(self, tids=None):
        """Points for tracks with >= 2 registered views that pass the parallax,
        depth and reprojection gates."""
        tids = self.table if tids is None else tids
        min_ang = np.radians(self.params.min_parallax_deg)
        added = 0
        for tid in tids:
            if tid in self.points:
                continue
            views = [f for f in self.table[tid] if f in self.poses and (tid, f) not in self.rejected]
            if len(views) < 2:
                continue
            poses = [self.poses[f] for f in views]
            xns = [self.intr[f].to_normalized(self.px(tid, f)) for f in views]
            X = triangulate_multiview(poses, xns)
            if not np.isfinite(X).all():
                continue
            C = np.array([p.center for p in poses])
            ang = triangulation_angle(C[:, None, :], C[None, :, :], X).max()
            if not ang >= min_ang:
                continue
            ok = True
            for f, p in zip(views, poses):
                Z = p.R @ X + p.t
                if Z[2] <= 0:
                    ok = False
                    break
                e = np.linalg.norm(self.intr[f].to_pixels(Z[:2] / Z[2]) - self.px(tid, f))
                if e > self.params.max_error:
                    ok = False
                    break
            if ok:
                self.set_point(tid, X)
                added += 1
        return added

    def reconstruction(self, order) -> Reconstruction:
        seq = [f for f in order if f in self.poses]
        ids = np.array(sorted(self.points), int)
        index = {t: i for i, t in enumerate(ids)}
        op, of, ox = [], [], []
        for tid in ids:
            for f in sorted(self.table[tid]):
                if f in self.poses and (tid, f) not in self.rejected:
                    op.append(index[tid])
                    of.append(f)
                    ox.append(self.px(tid, f))
        pts = np.array([self.points[t] for t in ids]).reshape(-1, 3)
        return Reconstruction([seq], dict(self.poses), {f: self.intr[f] for f in seq}, ids, pts,
                              op, of, np.array(ox).reshape(-1, 2))

    def absorb(self, rec: Reconstruction):
        self.poses.update(rec.poses)
        for tid, X in zip(rec.point_ids, rec.points):
            self.set_point(int(tid), X)

    def prune(self, order):
        """Reject observations above the error bound; drop points left with < 2 views."""
        rec = self.reconstruction(order)
        e = rec.reprojection_errors()
        for k in np.flatnonzero(e > self.params.max_error):
            self.rejected.add((int(rec.point_ids[rec.obs_point[k]]), int(rec.obs_frame[k])))
        for tid in list(self.points):
            views = [f for f in self.table[tid] if f in self.poses and (tid, f) not in self.rejected]
            if len(views) < 2:
                self.drop_point(tid)


def incremental_sfm(tracks, frames, intrinsics, sequence=None, sequence_id=0,
                    params: IncrementalParams = None) -> Submap:
    """Reconstruct one sequence from its feature tracks.

    ``frames`` maps frame id to FrameFeatures; ``sequence`` gives the frame
    order (defaults to the sorted frame ids present in ``frames``). Frames
    that cannot be resected are listed in ``Submap.unregistered``.
    """
    params = IncrementalParams() if params is None else params
    feats = frames if isinstance(frames, dict) else {f.frame_id: f for f in frames}
    order = sorted(feats) if sequence is None else list(sequence)
    intr = intrinsics_map(intrinsics, order)
    rng = np.random.default_rng(params.seed)
    table = _track_table(tracks, order)
    if len(order) < 2:
        raise InitFailure("need at least two frames")
    fa, fb, pose_b = _init_pair(table, order, feats, intr, params, rng)
    log.info("init pair %d-%d", fa, fb)
    b = _Builder(table, feats, intr, params)
    b.anchor = fa
    b.poses[fa] = CameraPose.identity()
    b.poses[fb] = pose_b
    b.triangulate()
    b.absorb(bundle_adjust(b.reconstruction(order), [fb], max_nfev=params.ba_iters))
    b.prune(order)

    unregistered = []
    pending = [f for f in order if f not in b.poses]
    added = []
    while pending:
        counts = [b.support.get(f, 0) for f in pending]
        k = int(np.argmax(counts))
        f = pending.pop(k)
        if counts[k] < 6:
            unregistered.append(f)
            continue
        tids = [t for t in b.frame_tracks.get(f, []) if t in b.points]
        X = np.array([b.points[t] for t in tids])
        px = np.array([b.px(t, f) for t in tids])
        try:
            pose, mask = resect(intr[f], X, px, threshold=params.max_error, rng=rng)
        except (ResectionFailure, InsufficientMatches) as exc:
            log.info("frame %d not registered: %s", f, exc)
            unregistered.append(f)
            continue
        b.poses[f] = pose
        for t, m in zip(tids, mask):
            if not m:
                b.rejected.add((t, f))
        b.triangulate(b.frame_tracks.get(f, []))
        added.append(f)
        if len(added) % params.local_ba_every == 0:
            _local_ba(b, order, added[-params.local_window:], params)
    rec = b.reconstruction(order)
    rec = bundle_adjust(rec, [f for f in rec.frames if f != fa], max_nfev=params.final_ba_iters)
    b.absorb(rec)
    b.prune(order)
    rec = b.reconstruction(order)
    rec.prune(params.max_error, 2)
    unregistered = [f for f in order if f not in b.poses]
    return Submap.from_reconstruction(rec, sequence_id, unregistered)


def _local_ba(b: _Builder, order, window, params):
    rec = b.reconstruction(order)
    wset = set(window)
    seen = np.zeros(len(rec.points), bool)
    seen[rec.obs_point[np.isin(rec.obs_frame, list(wset))]] = True
    free = [f for f in window if f != b.anchor]
    b.absorb(bundle_adjust(rec, free, seen, max_nfev=params.ba_iters))
    b.prune(order)


def register_remaining_frames(rec: Reconstruction, tracks, frames, intrinsics, sequences,
                              max_error=3.0, seed=0):
    """Resect every frame of ``sequences`` missing from ``rec`` against its fixed points.

    Used after a keyframe-only reconstruction. Points are not moved; each new
    frame keeps the observations that reproject within ``max_error``. Returns
    ``(reconstruction, unregistered frame ids)``.
    """
    feats = frames if isinstance(frames, dict) else {f.frame_id: f for f in frames}
    wanted = [f for s in sequences for f in s if f not in rec.poses and f in feats]
    intr = intrinsics_map(intrinsics, wanted)
    index = rec.point_index()
    obs_of = {f: [] for f in wanted}
    for t in tracks:
        k = index.get(t.track_id)
        if k is None:
            continue
        for f, i in t.observations.items():
            if f in obs_of:
                obs_of[f].append((k, i))
    rng = np.random.default_rng(seed)
    poses, intr_all = dict(rec.poses), dict(rec.intrinsics)
    op, of, ox = [rec.obs_point], [rec.obs_frame], [rec.obs_px]
    missing = []
    for f in wanted:
        pairs = sorted(obs_of[f])
        if len(pairs) < 6:
            missing.append(f)
            continue
        ks = np.array([k for k, _ in pairs])
        px = feats[f].positions[[i for _, i in pairs]]
        try:
            pose, mask = resect(intr[f], rec.points[ks], px, threshold=max_error, rng=rng)
        except (ResectionFailure, InsufficientMatches) as exc:
            log.info("frame %d not registered: %s", f, exc)
            missing.append(f)
            continue
        poses[f] = pose
        intr_all[f] = intr[f]
        op.append(ks[mask])
        of.append(np.full(int(mask.sum()), f))
        ox.append(px[mask])
    # new frames join the sequence whose registered frames they sit between
    seqs = []
    for s in rec.sequences:
        home = next((full for full in sequences if s and s[0] in full), list(s))
        seqs.append([f for f in home if f in poses])
    out = Reconstruction(seqs, poses, intr_all, rec.point_ids.copy(), rec.points.copy(),
                         np.concatenate(op), np.concatenate(of), np.concatenate(ox))
    return out, missing
