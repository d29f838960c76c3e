"""Sequence driver: match each frame with its predecessor and one farther past frame."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import InsufficientMatches
from .linking import link_tracks
from .matching import MatchingWeights, match_pair

log = logging.getLogger(__name__)


@dataclass
class TrackingResult:
    tracks: list
    pairs: list                       # PairMatchResult for every matched pair
    failed: list = field(default_factory=list)   # (frame_a, frame_b, reason)
    second_pass_mode: str = "image"


def track_sequence(frames, weights: MatchingWeights = MatchingWeights(), seed=0, two_past=True,
                   window=50, min_shared=300, second_pass=True, ratio=0.8,
                   ransac_threshold=2.0) -> TrackingResult:
    """Consecutive tracking over an ordered list of FrameFeatures.

    Every frame t is matched with t-1. With ``two_past`` it is also matched
    with a farther frame t': the oldest frame within ``window`` that still
    shares at least ``min_shared`` consecutive-chain features with t-1, or
    t-2 when none does. Pair RANSAC streams are seeded from ``(seed, a, b)``.
    """
    frames = list(frames)
    fmap = {f.frame_id: f for f in frames}
    pairs, failed = [], []
    labels = []                        # per frame: feature index -> chain label
    next_label = 0
    modes = set()

    def run(a, b):
        A, B = frames[a], frames[b]
        rng = np.random.default_rng([seed, A.frame_id, B.frame_id])
        try:
            r = match_pair(A, B, weights, ratio, ransac_threshold, second_pass=second_pass, rng=rng)
        except InsufficientMatches as e:
            failed.append((A.frame_id, B.frame_id, str(e)))
            log.info("pair %d-%d skipped: %s", A.frame_id, B.frame_id, e)
            return None
        pairs.append(r)
        if r.homographies:
            modes.add(r.mode)
        return r

    for t, fr in enumerate(frames):
        r = run(t - 1, t) if t > 0 else None
        lab = np.full(len(fr), -1)
        if r is not None:
            lab[r.idx_b] = labels[t - 1][r.idx_a]
        if len(lab) and (lab < 0).any():
            k = int((lab < 0).sum())
            lab[lab < 0] = np.arange(next_label, next_label + k)
            next_label += k
        labels.append(lab)
        if two_past and t >= 2:
            run(far_frame(labels, t, window, min_shared), t)
        if len(fr) > len(labels[t]):
            # second pass may have appended features to this frame
            extra = len(fr) - len(labels[t])
            labels[t] = np.concatenate([labels[t], np.arange(next_label, next_label + extra)])
            next_label += extra
    tracks = link_tracks(pairs, fmap)
    mode = "geometric" if "geometric" in modes else "image"
    return TrackingResult(tracks, pairs, failed, mode)


def far_frame(labels, t, window, min_shared):
    """Oldest past frame (within ``window`` of t) sharing >= min_shared chains with t-1."""
    ref = set(labels[t - 1].tolist())
    best = t - 2
    for c in range(t - 2, max(-1, t - 1 - window), -1):
        if len(ref.intersection(labels[c].tolist())) >= min_shared:
            best = c
        else:
            break
    return best
