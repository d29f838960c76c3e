"""Match-matrix driven non-consecutive track matching."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import InsufficientMatches
from ..features import FeatureTrack, merge_tracks, update_track_descriptor
from .pairs import TrackIndex, match_frame_pair, pair_key
from .vocab import MatchMatrix

log = logging.getLogger(__name__)


@dataclass
class NCTMParams:
    min_confidence: float = 50.0
    region_floor_frac: float = 0.1
    s_vote: float = 2.0
    ratio: float = 0.8
    tau_e: float = 2.0
    min_inliers: int = 16
    max_distance: float = 0.9
    seed: int = 0


@dataclass
class TrackPairSet:
    """Matched track pairs with their inlier / outlier vote counters."""

    n_in: dict = field(default_factory=dict)
    n_out: dict = field(default_factory=dict)

    def vote(self, a, b, inlier):
        k = pair_key(a, b)
        d = self.n_in if inlier else self.n_out
        d[k] = d.get(k, 0) + 1
        self.n_in.setdefault(k, 0)
        self.n_out.setdefault(k, 0)

    def pairs(self):
        return sorted(self.n_in)

    def matched(self):
        """Pairs voted inlier at least once (the live set C_X)."""
        return [k for k in sorted(self.n_in) if self.n_in[k] > 0]


@dataclass
class NCTMResult:
    tracks: list
    accepted: list                       # surviving (track, track) pairs
    votes: TrackPairSet
    initial: MatchMatrix
    updating: MatchMatrix                # M* at the end of the run
    final: MatchMatrix                   # recomputed from accepted pairs
    processed: list = field(default_factory=list)  # (t1, t2, mode, ok)
    merge_groups: list = field(default_factory=list)  # original track ids per merged track

    @property
    def n_matchings(self):
        return len(self.processed)


def count_matrix(pairs, tracks_by_id, keyframes, band=1) -> MatchMatrix:
    """|C_X(t1, t2)| over the given pairs, recomputed from scratch."""
    M = MatchMatrix(keyframes, band=band)
    for a, b in pairs:
        M.add_block(tracks_by_id[a].observations, tracks_by_id[b].observations)
    M.zero_band()
    return M


def _argmax_upper(V):
    n = len(V)
    if n < 2:
        return None, 0.0
    iu = np.triu_indices(n, k=1)
    vals = V[iu]
    k = int(np.argmax(vals))       # first maximum = lowest (row, col)
    return (int(iu[0][k]), int(iu[1][k])), float(vals[k])


def nctm_main(M: MatchMatrix, tracks, frames, params: NCTMParams = NCTMParams()) -> NCTMResult:
    """Seed at the brightest entry of M, expand through M*, resolve votes, merge.

    ``tracks`` are the consecutive tracks; ``frames`` maps frame id to
    FrameFeatures. M is not modified.
    """
    for t in tracks:
        if t.descriptor_sum is None:
            update_track_descriptor(t, frames)
    index = TrackIndex.build(tracks, frames)
    by_id = index.tracks
    kf = M.keyframes
    n = len(kf)
    work = M.values.copy()
    Mstar = MatchMatrix(kf, band=M.band)
    done = np.zeros((n, n), bool)
    band = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= M.band
    done |= band
    votes = TrackPairSet()
    live = set()
    processed = []
    m_max = float(work.max()) if work.size else 0.0
    floor = params.region_floor_frac * m_max

    def process(i, j, mode):
        rng = np.random.default_rng([params.seed, kf[i], kf[j]])
        done[i, j] = done[j, i] = True
        work[i, j] = work[j, i] = 0.0
        Mstar.values[i, j] = Mstar.values[j, i] = 0.0
        try:
            res = match_frame_pair(index, kf[i], kf[j], mode, live, params.ratio, params.tau_e,
                                   params.min_inliers, params.max_distance, rng)
        except InsufficientMatches as e:
            processed.append((kf[i], kf[j], mode, False))
            log.debug("keyframes %d/%d skipped: %s", kf[i], kf[j], e)
            return
        processed.append((kf[i], kf[j], mode, True))
        for (a, b), ok in zip(res.pairs, res.inlier):
            votes.vote(a, b, bool(ok))
            k = pair_key(a, b)
            if ok and k not in live:
                live.add(k)
                _add_unprocessed(Mstar, done, by_id[a].observations, by_id[b].observations)

    while m_max > 0:
        seed, val = _argmax_upper(np.where(done, 0.0, work))
        if seed is None or val <= 0 or val < floor:
            break
        region = _region(work >= max(floor, 1e-300), seed)
        process(*seed, "fresh_2nn")
        while True:
            cand, v = _argmax_upper(np.where(done, 0.0, Mstar.values))
            if cand is None or v < params.min_confidence:
                break
            process(*cand, "guided")
        work[region] = 0.0
        work[region.T] = 0.0

    accepted, groups, merged = resolve_votes(votes, by_id, params.s_vote)
    final = count_matrix(accepted, by_id, kf, M.band)
    return NCTMResult(merged, accepted, votes, M, Mstar, final, processed, groups)


def _add_unprocessed(Mstar, done, obs1, obs2):
    idx = Mstar.index
    a = [idx[f] for f in obs1 if f in idx]
    b = [idx[f] for f in obs2 if f in idx]
    if not a or not b:
        return
    ia, ib = np.ix_(a, b)
    blk = ~done[ia, ib]
    Mstar.values[ia, ib] += blk
    Mstar.values[ib.T, ia.T] += blk.T


def _region(mask, seed):
    """8-connected component of ``mask`` containing ``seed``."""
    lab, _ = ndimage.label(mask, structure=np.ones((3, 3), int))
    return lab == lab[seed] if lab[seed] else np.zeros_like(mask)


def resolve_votes(votes: TrackPairSet, tracks_by_id, s_vote):
    """Keep pairs with N_I >= s * N_O, then merge greedily by N_I (descending)
    refusing merges that would put two observations in one frame."""
    cands = [k for k in votes.pairs()
             if votes.n_in[k] > 0 and votes.n_in[k] >= s_vote * votes.n_out[k]]
    cands.sort(key=lambda k: (-votes.n_in[k], votes.n_out[k], k))
    parent = {}
    frames = {}

    def find(x):
        parent.setdefault(x, x)
        frames.setdefault(x, set(tracks_by_id[x].observations))
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    accepted = []
    for a, b in cands:
        ra, rb = find(a), find(b)
        if ra == rb:
            accepted.append((a, b))
            continue
        if frames[ra] & frames[rb]:
            continue
        if rb < ra:
            ra, rb = rb, ra
        parent[rb] = ra
        frames[ra] |= frames.pop(rb)
        accepted.append((a, b))

    groups = {}
    for t in sorted(tracks_by_id):
        groups.setdefault(find(t) if t in parent else t, []).append(t)
    members = sorted(groups.values(), key=lambda g: g[0])
    merged, out_groups = [], []
    for new_id, g in enumerate(members):
        ts = [tracks_by_id[t] for t in g]
        if len(ts) == 1:
            t = ts[0]
            merged.append(FeatureTrack(new_id, dict(t.observations), t.mean_descriptor,
                                       t.descriptor_sum))
        else:
            merged.append(merge_tracks(ts, new_id))
        out_groups.append(g)
    return accepted, out_groups, merged
