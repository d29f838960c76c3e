"""Hierarchical k-means vocabulary over track descriptors and the initial match matrix."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2


@dataclass
class VocabTree:
    branching: int
    depth: int
    leaves: dict = field(default_factory=dict)      # leaf path (tuple) -> sorted track ids
    leaf_of: dict = field(default_factory=dict)     # track id -> leaf path

    def __len__(self):
        return len(self.leaves)


def long_tracks(tracks, keyframes, min_span=5):
    """Tracks observed in at least ``min_span`` keyframes."""
    kf = set(keyframes)
    return [t for t in tracks if len(kf.intersection(t.observations)) >= min_span]


def build_vocab_tree(tracks, branching=8, depth=4, seed=0) -> VocabTree:
    """Cluster ``tracks`` by mean descriptor; deterministic for a given seed.

    Fewer than ``branching`` tracks (or zero descriptor spread) gives a single
    leaf. Empty k-means clusters are dropped.
    """
    tree = VocabTree(branching, depth)
    ids = np.array([t.track_id for t in tracks], dtype=int)
    if not len(ids):
        return tree
    desc = np.array([t.mean_descriptor for t in tracks], dtype=float)
    rng = np.random.default_rng(seed)
    stack = [((), np.arange(len(ids)))]
    while stack:
        path, members = stack.pop()
        spread = np.ptp(desc[members], axis=0).max() if len(members) else 0.0
        if len(path) >= depth or len(members) < branching or spread < 1e-12:
            tree.leaves[path] = sorted(ids[members].tolist())
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, label = kmeans2(desc[members], branching, iter=10, minit="++", rng=rng)
        children = [members[label == c] for c in range(branching)]
        children = [c for c in children if len(c)]
        if len(children) == 1:
            tree.leaves[path] = sorted(ids[members].tolist())
            continue
        for c in reversed(range(len(children))):
            stack.append((path + (c,), children[c]))
    tree.leaves = dict(sorted(tree.leaves.items()))
    for path, members in tree.leaves.items():
        for t in members:
            tree.leaf_of[t] = path
    return tree


class MatchMatrix:
    """Symmetric keyframe x keyframe confidence matrix with a zeroed diagonal band."""

    def __init__(self, keyframes, values=None, band=1):
        self.keyframes = list(keyframes)
        n = len(self.keyframes)
        self.index = {f: i for i, f in enumerate(self.keyframes)}
        self.values = np.zeros((n, n)) if values is None else np.array(values, dtype=float)
        self.band = band
        self.zero_band()

    @property
    def n(self):
        return len(self.keyframes)

    def zero_band(self):
        i, j = np.indices(self.values.shape)
        self.values[np.abs(i - j) <= self.band] = 0.0

    def add_block(self, frames1, frames2, amount=1.0):
        a = [self.index[f] for f in frames1 if f in self.index]
        b = [self.index[f] for f in frames2 if f in self.index]
        if a and b:
            ia, ib = np.ix_(a, b)
            self.values[ia, ib] += amount
            self.values[ib.T, ia.T] += amount

    def copy(self):
        return MatchMatrix(self.keyframes, self.values.copy(), self.band)

    def is_symmetric(self):
        return np.array_equal(self.values, self.values.T)

    def save_pgm(self, path):
        save_pgm(path, self.values)


def save_pgm(path, values):
    """8-bit binary PGM, linearly scaled so the maximum maps to 255."""
    v = np.asarray(values, dtype=float)
    vmax = v.max() if v.size else 0.0
    img = np.zeros(v.shape, np.uint8) if vmax <= 0 else np.round(255.0 * v / vmax).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def load_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w)


def spans_disjoint(t1, t2) -> bool:
    return not (t1.observations.keys() & t2.observations.keys())


def init_match_matrix(tree: VocabTree, tracks, keyframes, band=1, max_distance=0.5) -> MatchMatrix:
    """Count potentially matched co-leaf track pairs over their keyframe spans.

    A pair qualifies when the tracks share a leaf, observe disjoint frame sets
    and their descriptors are closer than ``max_distance``.
    """
    by_id = {t.track_id: t for t in tracks}
    M = MatchMatrix(keyframes, band=band)
    for members in tree.leaves.values():
        if len(members) < 2:
            continue
        D = np.array([by_id[t].mean_descriptor for t in members])
        dist = np.linalg.norm(D[:, None, :] - D[None, :, :], axis=2)
        a_idx, b_idx = np.nonzero(np.triu(dist < max_distance, k=1))
        for a, b in zip(a_idx, b_idx):
            t1, t2 = by_id[members[a]], by_id[members[b]]
            if spans_disjoint(t1, t2):
                M.add_block(t1.observations, t2.observations)
    M.zero_band()
    return M
