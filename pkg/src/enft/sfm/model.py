"""Reconstructions: cameras, points and the observations tying them together."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geom import CameraIntrinsics, SimilarityTransform
from .projection import intrinsics_rows, pose_rows, project_rows


@dataclass
class Reconstruction:
    """Registered frames split into ordered sequences, shared 3D points, observations.

    Observations are stored column-wise: ``obs_point`` indexes ``points``,
    ``obs_frame`` holds frame ids and ``obs_px`` the measured pixels.
    ``poses`` are world-to-camera.
    """

    sequences: list                  # ordered frame ids per sequence
    poses: dict                      # frame id -> CameraPose
    intrinsics: dict                 # frame id -> CameraIntrinsics
    point_ids: np.ndarray
    points: np.ndarray
    obs_point: np.ndarray
    obs_frame: np.ndarray
    obs_px: np.ndarray

    def __post_init__(self):
        self.point_ids = np.asarray(self.point_ids, dtype=int).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.obs_point = np.asarray(self.obs_point, dtype=int).reshape(-1)
        self.obs_frame = np.asarray(self.obs_frame, dtype=int).reshape(-1)
        self.obs_px = np.asarray(self.obs_px, dtype=float).reshape(-1, 2)

    @property
    def frames(self) -> list:
        return [f for seq in self.sequences for f in seq]

    @property
    def n_observations(self) -> int:
        return len(self.obs_point)

    def copy(self) -> "Reconstruction":
        return Reconstruction([list(s) for s in self.sequences], dict(self.poses),
                              dict(self.intrinsics), self.point_ids.copy(), self.points.copy(),
                              self.obs_point.copy(), self.obs_frame.copy(), self.obs_px.copy())

    def point_index(self) -> dict:
        return {int(p): i for i, p in enumerate(self.point_ids)}

    def observations_of(self, frame):
        """``(point indices, pixels)`` observed in ``frame``."""
        m = self.obs_frame == frame
        return self.obs_point[m], self.obs_px[m]

    def residuals(self) -> np.ndarray:
        """Projected minus observed pixel per observation, (M, 2)."""
        if not self.n_observations:
            return np.zeros((0, 2))
        fids, slot = np.unique(self.obs_frame, return_inverse=True)
        R, t = pose_rows([self.poses[int(f)] for f in fids])
        K6 = intrinsics_rows([self.intrinsics[int(f)] for f in fids])
        Z = np.einsum("nij,nj->ni", R[slot], self.points[self.obs_point]) + t[slot]
        return project_rows(Z, K6[slot]) - self.obs_px

    def reprojection_errors(self) -> np.ndarray:
        return np.linalg.norm(self.residuals(), axis=1)

    def mean_reprojection_error(self) -> float:
        e = self.reprojection_errors()
        return float(e.mean()) if len(e) else 0.0

    def frame_errors(self) -> dict:
        """Mean reprojection error per frame."""
        e = self.reprojection_errors()
        fids, slot = np.unique(self.obs_frame, return_inverse=True)
        sums = np.bincount(slot, e, len(fids))
        counts = np.bincount(slot, minlength=len(fids))
        mean = {int(f): float(s / c) for f, s, c in zip(fids, sums, counts)}
        return {f: mean.get(f, 0.0) for f in self.frames}

    def transformed(self, S: SimilarityTransform) -> "Reconstruction":
        """The same reconstruction expressed in coordinates ``S(X)``."""
        Sinv = S.inverse()
        out = self.copy()
        out.points = S.apply(self.points)
        out.poses = {f: p.after_similarity(Sinv) for f, p in self.poses.items()}
        return out

    def centers(self) -> dict:
        return {f: p.center for f, p in self.poses.items()}

    def prune(self, max_error=3.0, min_views=2) -> int:
        """Drop observations above ``max_error`` px and points left with too few views."""
        keep = self.reprojection_errors() <= max_error
        removed = int((~keep).sum())
        self._select(keep)
        while True:
            views = np.bincount(self.obs_point, minlength=len(self.points))
            weak = views < min_views
            if not weak.any():
                break
            removed += int(weak[self.obs_point].sum())
            self._select(~weak[self.obs_point])
            alive = ~weak
            remap = np.cumsum(alive) - 1
            self.points = self.points[alive]
            self.point_ids = self.point_ids[alive]
            self.obs_point = remap[self.obs_point]
        return removed

    def _select(self, mask):
        self.obs_point = self.obs_point[mask]
        self.obs_frame = self.obs_frame[mask]
        self.obs_px = self.obs_px[mask]


@dataclass
class Submap(Reconstruction):
    """One sequence reconstructed in its own coordinate frame."""

    sequence_id: int = 0
    unregistered: list = field(default_factory=list)

    @classmethod
    def from_reconstruction(cls, rec: Reconstruction, sequence_id=0, unregistered=()):
        return cls(rec.sequences, rec.poses, rec.intrinsics, rec.point_ids, rec.points,
                   rec.obs_point, rec.obs_frame, rec.obs_px, sequence_id, list(unregistered))

    def copy(self) -> "Submap":
        return Submap.from_reconstruction(super().copy(), self.sequence_id, self.unregistered)

    def transformed(self, S: SimilarityTransform) -> "Submap":
        return Submap.from_reconstruction(super().transformed(S), self.sequence_id,
                                          self.unregistered)


def merge_submaps(submaps, transforms) -> Reconstruction:
    """Bring every submap into world coordinates and join shared point ids.

    ``transforms[j]`` maps world coordinates into submap ``j``'s frame. A point
    present in several submaps starts at the mean of its world positions.
    """
    sums, counts = {}, {}
    poses, intr, seqs = {}, {}, []
    obs = []
    for sm, T in zip(submaps, transforms):
        Tinv = T.inverse()
        Xw = Tinv.apply(sm.points)
        for pid, X in zip(sm.point_ids, Xw):
            p = int(pid)
            sums[p] = sums.get(p, 0.0) + X
            counts[p] = counts.get(p, 0) + 1
        for f, pose in sm.poses.items():
            poses[f] = pose.after_similarity(T)
        intr.update({f: sm.intrinsics[f] for f in sm.poses})
        seqs.extend(list(s) for s in sm.sequences)
        obs.append((sm.point_ids[sm.obs_point], sm.obs_frame, sm.obs_px))
    ids = np.array(sorted(sums), dtype=int)
    index = {p: i for i, p in enumerate(ids)}
    pts = np.array([sums[p] / counts[p] for p in ids]).reshape(-1, 3)
    op = np.concatenate([[index[int(p)] for p in o[0]] for o in obs]).astype(int) if obs else []
    of = np.concatenate([o[1] for o in obs]) if obs else []
    ox = np.concatenate([o[2] for o in obs]) if obs else np.zeros((0, 2))
    return Reconstruction(seqs, poses, intr, ids, pts, op, of, ox)


def split_reconstruction(rec: Reconstruction) -> list:
    """One Submap per sequence, all sharing the world frame of ``rec``."""
    out = []
    for j, seq in enumerate(rec.sequences):
        fs = set(seq)
        m = np.isin(rec.obs_frame, list(fs))
        used = np.unique(rec.obs_point[m])
        remap = np.full(len(rec.points), -1)
        remap[used] = np.arange(len(used))
        out.append(Submap([list(seq)], {f: rec.poses[f] for f in seq},
                          {f: rec.intrinsics[f] for f in seq}, rec.point_ids[used],
                          rec.points[used], remap[rec.obs_point[m]], rec.obs_frame[m],
                          rec.obs_px[m], sequence_id=j))
    return out


def observations_from_tracks(tracks, frames, registered=None):
    """Column-wise observations of ``tracks``; ``frames`` maps id to FrameFeatures."""
    pid, fid, px = [], [], []
    for k, t in enumerate(tracks):
        for f, i in sorted(t.observations.items()):
            if registered is not None and f not in registered:
                continue
            pid.append(k)
            fid.append(f)
            px.append(frames[f].positions[i])
    return np.array(pid, int), np.array(fid, int), np.array(px, float).reshape(-1, 2)


def intrinsics_map(intrinsics, frame_ids) -> dict:
    if isinstance(intrinsics, CameraIntrinsics):
        return {f: intrinsics for f in frame_ids}
    return dict(intrinsics)


def pose_errors(estimated: dict, truth: dict, S: SimilarityTransform = None):
    """Center and rotation errors after mapping the estimate by ``S`` (world_est -> world_true)."""
    out = {}
    for f, p in estimated.items():
        if f not in truth:
            continue
        q = p if S is None else p.after_similarity(S.inverse())
        dc = np.linalg.norm(q.center - truth[f].center)
        dR = np.linalg.norm(q.R - truth[f].R)
        out[f] = (float(dc), float(dR))
    return out
