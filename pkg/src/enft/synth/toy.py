"""Small random segment-BA problems for solver cross-checks."""
from __future__ import annotations

import numpy as np

from ..geom import CameraIntrinsics, SimilarityTransform, rodrigues
from ..sfm.segba import SegmentBAProblem
from .scene import inward_pose


def random_segment_problem(seed, n_segments=4, frames_per_segment=3, n_points=40,
                           pixel_sigma=0.5, perturb=0.03, fixed=(0,)) -> SegmentBAProblem:
    """Cameras on an arc around a point cloud, grouped into ``n_segments`` segments.

    Every point is seen by every frame. The true transforms are the identity;
    the free ones start at a random similarity of size ``perturb`` and the
    points are jittered by the same amount.
    """
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
    n_frames = n_segments * frames_per_segment
    th = np.linspace(-0.7, 0.7, n_frames) + rng.uniform(-0.02, 0.02, n_frames)
    poses = [inward_pose(t, 6.0, rng.uniform(-0.3, 0.3)) for t in th]
    X = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    seg = np.repeat(np.arange(n_segments), frames_per_segment)
    op = np.tile(np.arange(n_points), n_frames)
    of = np.repeat(np.arange(n_frames), n_points)
    px = np.concatenate([K.to_pixels((X @ p.R.T + p.t)[:, :2] / (X @ p.R.T + p.t)[:, 2:])
                         for p in poses])
    px = px + rng.normal(scale=pixel_sigma, size=px.shape) if pixel_sigma > 0 else px
    T = []
    for j in range(n_segments):
        if j in fixed:
            T.append(SimilarityTransform.identity())
        else:
            T.append(SimilarityTransform(float(np.exp(rng.normal(scale=perturb))),
                                         rodrigues(rng.normal(scale=perturb, size=3)),
                                         rng.normal(scale=perturb, size=3)))
    X0 = X + rng.normal(scale=perturb, size=X.shape)
    return SegmentBAProblem(T, seg, poses, [K] * n_frames, X0, op, of, px, frozenset(fixed))
