"""Cross-sequence registration and sequence construction."""
from __future__ import annotations

import logging

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree

from ..errors import DisconnectedSequences, EnftError
from ..geom import SimilarityTransform, estimate_similarity

log = logging.getLogger(__name__)


def shared_track_counts(submaps) -> np.ndarray:
    """Number of point ids common to each pair of submaps."""
    ids = [set(int(p) for p in sm.point_ids) for sm in submaps]
    n = len(ids)
    C = np.zeros((n, n), int)
    for i in range(n):
        for j in range(i + 1, n):
            C[i, j] = C[j, i] = len(ids[i] & ids[j])
    return C


def robust_similarity(src, dst, rounds=5, min_points=3) -> SimilarityTransform:
    """``dst ~ S(src)`` with Cauchy reweighting on the point residuals."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < min_points:
        raise EnftError(f"similarity needs {min_points} common points, got {len(src)}")
    S = estimate_similarity(src, dst)
    spread = np.linalg.norm(dst - dst.mean(axis=0), axis=1).mean()
    for _ in range(rounds):
        r = np.linalg.norm(S.apply(src) - dst, axis=1)
        c = max(2.5 * 1.4826 * np.median(r), 1e-12 * max(spread, 1e-300))
        w = 1.0 / (1.0 + (r / c) ** 2)
        S = estimate_similarity(src, dst, weights=w)
    return S


def register_submaps(submaps, counts=None) -> list:
    """``T_j`` (reference coordinates -> submap ``j`` coordinates) for every submap.

    Submaps share 3D points through common point ids (merged tracks). The
    reference is the submap with the most tracks shared with others; the rest
    are chained along a maximum spanning tree of the shared-track counts.
    """
    n = len(submaps)
    if n == 0:
        return []
    C = shared_track_counts(submaps) if counts is None else np.asarray(counts)
    usable = np.where(C >= 3, C, 0)
    ncomp, labels = connected_components(csr_matrix(usable > 0), directed=False)
    if ncomp > 1:
        comps = [[submaps[i].sequence_id for i in np.flatnonzero(labels == c)] for c in range(ncomp)]
        raise DisconnectedSequences(comps)
    merged = [len(set(map(int, sm.point_ids)) & set().union(
        *[set(map(int, o.point_ids)) for k, o in enumerate(submaps) if k != j]))
        for j, sm in enumerate(submaps)]
    ref = int(np.argmax(merged))
    T = [None] * n
    T[ref] = SimilarityTransform.identity()
    if n == 1:
        return T
    # maximum spanning tree = minimum spanning tree on (max + 1 - count)
    big = usable.max() + 1
    W = np.where(usable > 0, big - usable, 0).astype(float)
    tree = minimum_spanning_tree(csr_matrix(W)).toarray()
    adj = (tree + tree.T) > 0
    order, parent = [ref], {ref: None}
    for p in order:
        for c in np.flatnonzero(adj[p]):
            c = int(c)
            if c not in parent:
                parent[c] = p
                order.append(c)
    for c in order[1:]:
        p = parent[c]
        a, b = submaps[p], submaps[c]
        ia = a.point_index()
        ib = b.point_index()
        common = sorted(ia.keys() & ib.keys())
        Xp = a.points[[ia[k] for k in common]]
        Xc = b.points[[ib[k] for k in common]]
        S = robust_similarity(Xp, Xc)          # submap p coordinates -> submap c coordinates
        T[c] = S.compose(T[p])
        log.info("registered submap %d to %d on %d common points", c, p, len(common))
    return T


def _best_pair(C, alive):
    sub = np.where(np.outer(alive, alive), np.triu(C, 1), 0)
    k = int(np.argmax(sub))                     # row-major: lowest (i, j) among ties
    i, j = divmod(k, len(C))
    return (i, j) if sub[i, j] > 0 else None


def build_sequences_from_unordered(counts) -> list:
    """Greedy chains over a symmetric image match-count matrix.

    Seed each chain with the remaining pair sharing the most features, then
    repeatedly attach the remaining image with the largest count to the head
    or tail frame. Ties go to the lower image index (and the head before the
    tail). Images without any remaining partner become singletons.
    """
    C = np.asarray(counts)
    C = np.maximum(C, C.T)
    n = len(C)
    alive = np.ones(n, bool)
    out = []
    while alive.any():
        pair = _best_pair(C, alive)
        if pair is None:
            out.extend([int(i)] for i in np.flatnonzero(alive))
            break
        seq = list(pair)
        alive[list(pair)] = False
        while True:
            cand = np.flatnonzero(alive)
            if not len(cand):
                break
            head = C[seq[0], cand]
            tail = C[seq[-1], cand]
            best = max(head.max(), tail.max())
            if best <= 0:
                break
            kh = int(np.argmax(head == best)) if head.max() == best else None
            kt = int(np.argmax(tail == best)) if tail.max() == best else None
            if kt is None or (kh is not None and cand[kh] <= cand[kt]):
                seq.insert(0, int(cand[kh]))
                alive[cand[kh]] = False
            else:
                seq.append(int(cand[kt]))
                alive[cand[kt]] = False
        out.append(seq)
    return out


def split_long_sequence(frames, max_len=3000, min_len=1000) -> list:
    """Cut a sequence into near-equal consecutive chunks of at most ``max_len``.

    Chunks of a sequence longer than ``max_len`` are at least
    ``max_len / 2`` long, so they stay above ``min_len`` whenever
    ``max_len >= 2 * min_len``.
    """
    frames = list(frames)
    if max_len < 2 * min_len:
        raise ValueError(f"max_len {max_len} must be >= 2 * min_len {min_len}")
    if len(frames) <= max_len:
        return [frames]
    k = int(np.ceil(len(frames) / max_len))
    bounds = np.linspace(0, len(frames), k + 1).round().astype(int)
    return [frames[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
