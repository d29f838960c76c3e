"""Split-point detection from per-frame steepest-descent directions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom.twoview import skew_batch
from .projection import intrinsics_rows, project_rows


@dataclass
class SegmentPartition:
    """Per sequence: ordered frames and sorted split positions.

    A split at position ``k`` separates ``frames[k]`` from ``frames[k + 1]``.
    """

    sequences: list
    splits: list

    def __post_init__(self):
        self.sequences = [list(s) for s in self.sequences]
        self.splits = [sorted(int(k) for k in s) for s in self.splits]
        for seq, sp in zip(self.sequences, self.splits):
            if any(not 0 <= k < len(seq) - 1 for k in sp) or len(set(sp)) != len(sp):
                raise ValueError(f"split points {sp} not interior to a sequence of {len(seq)} frames")

    @classmethod
    def unsplit(cls, sequences):
        return cls(sequences, [[] for _ in sequences])

    def segments(self) -> list:
        """``(sequence index, frame list)`` for every segment, in order."""
        out = []
        for j, (seq, sp) in enumerate(zip(self.sequences, self.splits)):
            start = 0
            for k in sp + [len(seq) - 1]:
                out.append((j, seq[start:k + 1]))
                start = k + 1
        return out

    @property
    def n_segments(self) -> int:
        return sum(len(s) + 1 for s in self.splits)


def steepest_descent_directions(rec, frames=None) -> dict:
    """g_k for each frame: sum of A_i^T e_i with e_i = observed - projected.

    The per-frame similarity perturbation ``X -> c + exp(sigma) R(omega) (X - c) + v``
    acts about the centroid ``c`` of the frame's visible points with world-aligned
    axes and is evaluated at the identity, so split angles do not depend on
    where the world origin sits. Components are ``(omega, v, sigma)``. Frames
    without observations get the zero vector.
    """
    frames = rec.frames if frames is None else frames
    out = {f: np.zeros(7) for f in frames}
    if not rec.n_observations:
        return out
    fids, slot = np.unique(rec.obs_frame, return_inverse=True)
    X = rec.points[rec.obs_point]
    counts = np.bincount(slot, minlength=len(fids))
    cent = np.zeros((len(fids), 3))
    np.add.at(cent, slot, X)
    cent /= np.maximum(counts, 1)[:, None]
    Q = X - cent[slot]
    R = np.array([rec.poses[int(f)].R for f in fids])
    t = np.array([rec.poses[int(f)].t for f in fids])
    K6 = intrinsics_rows([rec.intrinsics[int(f)] for f in fids])
    Z = np.einsum("nij,nj->ni", R[slot], X) + t[slot]
    px, Jp = project_rows(Z, K6[slot], jacobian=True)
    e = rec.obs_px - px
    dX = np.zeros((len(X), 3, 7))
    dX[:, :, :3] = -skew_batch(Q)
    dX[:, :, 3:6] = np.eye(3)
    dX[:, :, 6] = Q
    A = Jp @ R[slot] @ dX
    g = np.zeros((len(fids), 7))
    np.add.at(g, slot, np.einsum("nki,nk->ni", A, e))
    for f, gk in zip(fids, g):
        if int(f) in out:
            out[int(f)] = gk
    return out


def direction_angles(g_seq, eps=1e-12) -> np.ndarray:
    """C(k, k+1) = angle between consecutive g; 0 where either vector vanishes."""
    G = np.asarray(g_seq, dtype=float)
    if len(G) < 2:
        return np.zeros(0)
    n = np.linalg.norm(G, axis=1)
    ok = (n[:-1] > eps) & (n[1:] > eps)
    c = np.zeros(len(G) - 1)
    dots = (G[:-1] * G[1:]).sum(axis=1)
    c[ok] = np.arccos(np.clip(dots[ok] / (n[:-1][ok] * n[1:][ok]), -1.0, 1.0))
    return c


def reprojection_joint_errors(rec, seq) -> np.ndarray:
    """Mean reprojection error of the points common to each consecutive frame pair,
    measured in both images (the criterion the angle test is compared against)."""
    e = rec.reprojection_errors()
    per = {}
    for f in seq:
        m = rec.obs_frame == f
        per[f] = dict(zip(rec.obs_point[m].tolist(), e[m].tolist()))
    out = np.zeros(max(len(seq) - 1, 0))
    for k in range(len(seq) - 1):
        a, b = per[seq[k]], per[seq[k + 1]]
        common = a.keys() & b.keys()
        if common:
            out[k] = np.mean([a[i] + b[i] for i in common]) / 2.0
    return out


def select_splits(C, count, window) -> list:
    """Greedy non-maximal suppression: take the largest C, drop candidates closer
    than ``window`` positions, repeat. Ties go to the lower position."""
    C = np.asarray(C, dtype=float)
    alive = np.ones(len(C), bool)
    pos = np.arange(len(C))
    picked = []
    order = np.argsort(-C, kind="stable")
    for k in order:
        if len(picked) >= count:
            break
        if not alive[k]:
            continue
        picked.append(int(k))
        alive[np.abs(pos - k) < window] = False
    return sorted(picked)


def split_scores(rec) -> list:
    """C(k, k+1) per sequence of ``rec``."""
    g = steepest_descent_directions(rec)
    return [direction_angles([g[f] for f in seq]) for seq in rec.sequences]


def detect_split_points(rec, t, count=None, scores=None) -> SegmentPartition:
    """Pick ``2^t - 1`` split points per sequence (or ``count[j]`` when given)
    with suppression window ``N_j / 2^t``."""
    if t < 1:
        raise ValueError("iteration index t starts at 1")
    scores = split_scores(rec) if scores is None else scores
    splits = []
    for j, (seq, C) in enumerate(zip(rec.sequences, scores)):
        want = 2 ** t - 1 if count is None else count[j]
        splits.append(select_splits(C, min(want, len(C)), len(seq) / 2.0 ** t))
    return SegmentPartition(rec.sequences, splits)


def detect_global_splits(rec, t, total, scores=None) -> SegmentPartition:
    """Capped mode: ``total`` split points shared by all sequences, chosen by
    descending C with per-sequence suppression windows ``N_j / 2^t``."""
    scores = split_scores(rec) if scores is None else scores
    cands = []
    for j, (seq, C) in enumerate(zip(rec.sequences, scores)):
        for k in select_splits(C, len(C), len(seq) / 2.0 ** t):
            cands.append((-C[k], j, k))
    cands.sort()
    splits = [[] for _ in rec.sequences]
    for _, j, k in cands[:max(total, 0)]:
        splits[j].append(k)
    return SegmentPartition(rec.sequences, splits)
