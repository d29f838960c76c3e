"""Track linking over pairwise matches and keyframe selection."""
from __future__ import annotations

import numpy as np

from ..features import FeatureTrack, update_track_descriptor


class _FrameSetUnion:
    """Union-find whose components carry their frame sets; unions that would
    put two observations of one frame in a component are refused."""

    def __init__(self):
        self.parent = {}
        self.frames = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        self.frames.setdefault(x, {x[0]})
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return True
        if self.frames[ra] & self.frames[rb]:
            return False
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.frames[ra] |= self.frames.pop(rb)
        return True


def link_tracks(results, frames=None, min_length=2):
    """Join pairwise matches into tracks.

    ``results`` is any iterable of PairMatchResult (consecutive and two-past
    pairs). Links are applied in a global order (first-pass before second-pass,
    then lower cost, then ids), so a feature claimed by two predecessors keeps
    the cheaper link and the output does not depend on the input order.
    ``frames`` maps frame id to FrameFeatures and enables mean descriptors.
    """
    links = []
    for r in results:
        for a, b, p, c in zip(r.idx_a, r.idx_b, r.passes, r.costs):
            links.append((int(p), float(c), r.frame_a, int(a), r.frame_b, int(b)))
    links.sort()
    uf = _FrameSetUnion()
    for _, _, fa, a, fb, b in links:
        uf.union((fa, a), (fb, b))
    groups = {}
    for node in list(uf.parent):
        groups.setdefault(uf.find(node), []).append(node)
    obs = [dict(sorted(g)) for g in groups.values() if len(g) >= min_length]
    obs.sort(key=lambda o: min(o.items()))
    tracks = []
    for tid, o in enumerate(obs):
        t = FeatureTrack(tid, o)
        if frames is not None:
            update_track_descriptor(t, frames)
        tracks.append(t)
    return tracks


def shared_counts(tracks, frame_ids):
    """Incidence matrix (frames x tracks) as a boolean array."""
    pos = {f: i for i, f in enumerate(frame_ids)}
    inc = np.zeros((len(frame_ids), len(tracks)), bool)
    for j, t in enumerate(tracks):
        for f in t.observations:
            if f in pos:
                inc[pos[f], j] = True
    return inc


def select_keyframes(tracks, frame_ids, m1=100, m2=50):
    """Keyframes from shared-track counts.

    The second keyframe is the last frame of the run starting after frame 1
    over which N1(1, i) >= m1. Each further keyframe is the farthest frame of
    the run after the latest keyframe i2 satisfying N1(i1, j) >= m1 and
    N2(i1, i2, j) >= m2. When the frame right after i2 already fails, it
    becomes the keyframe so the scan always advances.
    """
    if not m1 > m2 > 0:
        raise ValueError("need m1 > m2 > 0")
    frame_ids = sorted(frame_ids)
    n = len(frame_ids)
    if n == 0:
        return []
    inc = shared_counts(tracks, frame_ids).astype(np.int32)
    keys = [0]
    # second keyframe
    i = 1
    while i < n and inc[0] @ inc[i] >= m1:
        i += 1
    if n > 1:
        keys.append(max(i - 1, 1))
    while keys[-1] < n - 1:
        i1, i2 = keys[-2], keys[-1]
        both = inc[i1] & inc[i2]
        j = i2 + 1
        while j < n and inc[i1] @ inc[j] >= m1 and both @ inc[j] >= m2:
            j += 1
        keys.append(max(j - 1, i2 + 1))
    return [frame_ids[k] for k in keys]
