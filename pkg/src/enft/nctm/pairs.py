"""Track-level matching of one keyframe pair, fresh or guided by known track pairs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateConfiguration, InsufficientMatches
from ..features import match_2nn
from ..geom import FundamentalMatrix, estimate_fundamental_ransac, symmetric_epipolar_distance


@dataclass
class TrackIndex:
    """Per-frame lookup from feature index to track id, plus track descriptors."""

    tracks: dict                      # track id -> FeatureTrack
    frames: dict                      # frame id -> FrameFeatures
    in_frame: dict = field(default_factory=dict)   # frame id -> (track ids, feature idx)

    @classmethod
    def build(cls, tracks, frames):
        idx = cls({t.track_id: t for t in tracks}, frames)
        per = {}
        for t in tracks:
            for f, i in t.observations.items():
                per.setdefault(f, []).append((t.track_id, i))
        for f, lst in per.items():
            lst.sort()
            idx.in_frame[f] = (np.array([a for a, _ in lst], int), np.array([b for _, b in lst], int))
        return idx

    def observed(self, frame):
        return self.in_frame.get(frame, (np.zeros(0, int), np.zeros(0, int)))

    def position(self, track_id, frame):
        return self.frames[frame].positions[self.tracks[track_id].observations[frame]]


def pair_key(a, b):
    return (a, b) if a < b else (b, a)


@dataclass
class FramePairMatch:
    t1: int
    t2: int
    pairs: list                       # (track in t1, track in t2)
    inlier: np.ndarray                # bool per pair
    F: FundamentalMatrix
    mode: str


def _mergeable(index, a, b):
    ta, tb = index.tracks[a], index.tracks[b]
    return a != b and not (ta.observations.keys() & tb.observations.keys())


def match_frame_pair(index: TrackIndex, t1, t2, mode="fresh_2nn", prior=(), ratio=0.8,
                     tau_e=2.0, min_inliers=16, max_distance=0.9, rng=None) -> FramePairMatch:
    """Match the tracks observed in keyframes ``t1`` and ``t2``.

    ``fresh_2nn``: ratio matching of track descriptors plus RANSAC F.
    ``guided``: F from ``prior`` track pairs visible in both frames, every prior
    pair labeled against it, then remaining tracks matched by descriptor among
    candidates within ``tau_e`` of their epipolar line (ratio-tested among
    candidates). Raises InsufficientMatches when F cannot be supported.
    """
    ids1, _ = index.observed(t1)
    ids2, _ = index.observed(t2)
    if len(ids1) < 8 or len(ids2) < 8:
        raise InsufficientMatches(f"keyframes {t1}/{t2}: too few tracked features")
    x1 = np.array([index.position(t, t1) for t in ids1])
    x2 = np.array([index.position(t, t2) for t in ids2])
    d1 = np.array([index.tracks[t].mean_descriptor for t in ids1])
    d2 = np.array([index.tracks[t].mean_descriptor for t in ids2])

    if mode == "fresh_2nn":
        ia, ib, _ = match_2nn(d1, d2, ratio)
        keep = [k for k in range(len(ia)) if _mergeable(index, ids1[ia[k]], ids2[ib[k]])]
        ia, ib = ia[keep], ib[keep]
        if len(ia) < min_inliers:
            raise InsufficientMatches(f"keyframes {t1}/{t2}: {len(ia)} descriptor matches")
        try:
            F, mask = estimate_fundamental_ransac(x1[ia], x2[ib], tau_e, rng=rng)
        except DegenerateConfiguration as e:
            raise InsufficientMatches(str(e)) from None
        if mask.sum() < min_inliers:
            raise InsufficientMatches(f"keyframes {t1}/{t2}: {int(mask.sum())} inliers")
        pairs = [(int(ids1[a]), int(ids2[b])) for a, b in zip(ia, ib)]
        return FramePairMatch(t1, t2, pairs, mask, F, mode)

    if mode != "guided":
        raise ValueError(f"unknown mode {mode!r}")
    pos1 = {int(t): k for k, t in enumerate(ids1)}
    pos2 = {int(t): k for k, t in enumerate(ids2)}
    known = []
    for a, b in prior:
        if a in pos1 and b in pos2:
            known.append((a, b))
        elif b in pos1 and a in pos2:
            known.append((b, a))
    known = sorted(set(known))
    if len(known) < min_inliers:
        raise InsufficientMatches(f"keyframes {t1}/{t2}: {len(known)} prior pairs")
    ka = np.array([pos1[a] for a, _ in known])
    kb = np.array([pos2[b] for _, b in known])
    try:
        F, mask = estimate_fundamental_ransac(x1[ka], x2[kb], tau_e, rng=rng)
    except DegenerateConfiguration as e:
        raise InsufficientMatches(str(e)) from None
    if mask.sum() < min_inliers:
        raise InsufficientMatches(f"keyframes {t1}/{t2}: {int(mask.sum())} prior inliers")

    used1 = np.zeros(len(ids1), bool)
    used2 = np.zeros(len(ids2), bool)
    used1[ka] = True
    used2[kb] = True
    h2 = np.column_stack([x2, np.ones(len(x2))])
    lines = np.column_stack([x1, np.ones(len(x1))]) @ F.F.T
    lines /= np.maximum(np.hypot(lines[:, 0], lines[:, 1]), 1e-300)[:, None]
    proposals = []
    for a in np.flatnonzero(~used1):
        near = np.flatnonzero((np.abs(h2 @ lines[a]) <= tau_e) & ~used2)
        near = [b for b in near if _mergeable(index, ids1[a], ids2[b])]
        if not near:
            continue
        dd = np.linalg.norm(d2[near] - d1[a], axis=1)
        order = np.argsort(dd, kind="stable")
        best = dd[order[0]]
        if best > max_distance or (len(near) > 1 and best >= ratio * dd[order[1]]):
            continue
        proposals.append((best, int(a), int(near[order[0]])))
    proposals.sort()
    new = []
    for _, a, b in proposals:
        if used1[a] or used2[b]:
            continue
        # the guided candidate must also pass the symmetric test used for the priors
        if symmetric_epipolar_distance(F, x1[a:a + 1], x2[b:b + 1])[0] > tau_e:
            continue
        used1[a] = used2[b] = True
        new.append((int(ids1[a]), int(ids2[b])))
    pairs = known + new
    inlier = np.concatenate([mask, np.ones(len(new), bool)])
    return FramePairMatch(t1, t2, pairs, inlier, F, mode)
