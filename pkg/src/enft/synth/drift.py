"""Accumulated similarity drift for refinement tests.

Frame k of a sequence is reconstructed in a world that has drifted by
``D_k = d^k``, where ``d`` is a fixed per-frame similarity increment. Its
camera center therefore moves to ``D_k(c_k)``; each point is placed using
the drift of the frame in the middle of its first visibility run, which is
what an incremental reconstruction that triangulates once would produce.
"""
from __future__ import annotations

import numpy as np

from ..geom import SimilarityTransform, estimate_similarity, rodrigues
from ..sfm.model import Submap


def drift_transforms(n, scale=0.02, rotation_deg=2.0, axis=(0.3, 1.0, 0.2)):
    """``[D_0 .. D_{n-1}]`` with ``D_{n-1}`` scaling by ``1 + scale`` and rotating by
    ``rotation_deg`` about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    steps = max(n - 1, 1)
    d = SimilarityTransform((1.0 + scale) ** (1.0 / steps),
                            rodrigues(axis * np.radians(rotation_deg) / steps), np.zeros(3))
    out = [SimilarityTransform.identity()]
    for _ in range(1, n):
        out.append(d.compose(out[-1]))
    return out


def ground_truth_submap(data, sequence=0, frames=None) -> Submap:
    """Exact poses and points of one synthetic sequence with all its observations."""
    seq = list(data.sequences[sequence]) if frames is None else list(frames)
    fm = data.frame_map()
    pid, fid, px = [], [], []
    for f in seq:
        fr = fm[f]
        ok = fr.gt_ids >= 0
        pid.append(fr.gt_ids[ok])
        fid.append(np.full(int(ok.sum()), f))
        px.append(fr.positions[ok])
    pid = np.concatenate(pid)
    ids, obs_point = np.unique(pid, return_inverse=True)
    return Submap([seq], {f: data.poses[f] for f in seq}, {f: data.intrinsics for f in seq},
                  ids, data.points[ids], obs_point, np.concatenate(fid), np.concatenate(px),
                  sequence_id=sequence)


def inject_drift(submap: Submap, scale=0.02, rotation_deg=2.0, axis=(0.3, 1.0, 0.2)) -> Submap:
    """Drifted copy of a single-sequence submap (see module docstring)."""
    seq = submap.sequences[0]
    D = drift_transforms(len(seq), scale, rotation_deg, axis)
    pos = {f: k for k, f in enumerate(seq)}
    out = submap.copy()
    out.poses = {f: submap.poses[f].after_similarity(D[pos[f]].inverse()) for f in seq}
    k_obs = np.array([pos[int(f)] for f in submap.obs_frame])
    pts = submap.points.copy()
    for i in range(len(pts)):
        ks = np.sort(k_obs[submap.obs_point == i])
        if not len(ks):
            continue
        brk = np.flatnonzero(np.diff(ks) > 1)
        first_run = ks[:brk[0] + 1] if len(brk) else ks
        pts[i] = D[int(first_run[len(first_run) // 2])].apply(pts[i])
    out.points = pts
    return out


def closure_gap(estimated: dict, truth: dict, frames, anchor_fraction=0.1) -> float:
    """End-of-sequence camera-center error after a 7-DoF fit on the first frames."""
    frames = list(frames)
    n = max(3, int(np.ceil(anchor_fraction * len(frames))))
    src = np.array([estimated[f].center for f in frames[:n]])
    dst = np.array([truth[f].center for f in frames[:n]])
    S = estimate_similarity(src, dst)
    last = frames[-1]
    return float(np.linalg.norm(S.apply(estimated[last].center) - truth[last].center))
