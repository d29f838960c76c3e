"""Synthetic scenes: trajectories, points, noisy feature observations."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import SpecError
from ..features import FrameFeatures, normalize
from ..geom import CameraIntrinsics, CameraPose, project_points

SCENE_HEADER = "enft-scene"
SCENE_VERSION = 1


@dataclass
class SceneSpec:
    """Scene description; every field maps to a key of the text spec file."""

    trajectory: str = "loop"          # arc | loop | multi
    n_frames: int = 60                # per sequence
    n_points: int = 800
    n_sequences: int = 1
    width: int = 640
    height: int = 480
    focal: float = 500.0
    radius: float = 3.0               # camera circle radius (loop/multi) or orbit radius (arc)
    wall_radius: float = 10.0
    wall_depth: float = 2.0
    wall_height: float = 2.5
    loop_overlap: float = 0.1         # extra fraction of a revolution for loops
    arc_degrees: float = 60.0
    sequence_span: float = 0.5        # fraction of a revolution covered by each multi sequence
    pixel_sigma: float = 0.0
    descriptor_sigma: float = 0.05
    dropout: float = 0.0
    outlier_rate: float = 0.0
    margin: float = 12.0

    def validate(self):
        problems = []
        if self.trajectory not in ("arc", "loop", "multi"):
            problems.append(f"trajectory: unknown kind {self.trajectory!r}")
        if self.n_points < 10:
            problems.append(f"n_points: need >= 10, got {self.n_points}")
        if self.n_frames < 2:
            problems.append(f"n_frames: need >= 2, got {self.n_frames}")
        if self.n_sequences < 1:
            problems.append("n_sequences: need >= 1")
        for name in ("dropout", "outlier_rate"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                problems.append(f"{name}: must be in [0, 1), got {v}")
        for name in ("pixel_sigma", "descriptor_sigma"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        if self.focal <= 0:
            problems.append("focal: must be > 0")
        if problems:
            raise SpecError("invalid scene spec: " + "; ".join(problems))
        return self

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse ``key = value`` lines after an ``enft-scene 1`` header."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].split()[:1] != [SCENE_HEADER]:
        raise SpecError(f"line 1: expected header '{SCENE_HEADER} {SCENE_VERSION}'")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise SpecError("line 1: missing version number") from None
    if version != SCENE_VERSION:
        raise SpecError(f"line 1: unsupported scene spec version {version}")
    types = {f.name: f.type for f in fields(SceneSpec)}
    values = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise SpecError(f"malformed line {ln!r}: expected key = value")
        key, val = (s.strip() for s in ln.split("=", 1))
        if key not in types:
            raise SpecError(f"{key}: unknown key")
        kind = types[key]
        try:
            values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
        except ValueError:
            raise SpecError(f"{key}: cannot parse {val!r} as {kind}") from None
    return SceneSpec(**values).validate()


def load_scene_spec(path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text())


def format_scene_spec(spec: SceneSpec) -> str:
    out = [f"{SCENE_HEADER} {SCENE_VERSION}"]
    out += [f"{f.name} = {getattr(spec, f.name)}" for f in fields(SceneSpec)]
    return "\n".join(out) + "\n"


@dataclass
class SyntheticData:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    points: np.ndarray
    point_descriptors: np.ndarray
    poses: dict                 # frame_id -> CameraPose (ground truth)
    frames: list                # FrameFeatures with gt_ids
    sequences: list             # list of frame-id lists
    gt_tracks: dict = field(default_factory=dict)   # point id -> {frame_id: feature index}

    def frame_map(self) -> dict:
        return {f.frame_id: f for f in self.frames}


def outward_pose(theta, radius, height=0.0) -> CameraPose:
    """Camera on a circle looking radially outward (y axis down)."""
    c = np.array([radius * np.cos(theta), height, radius * np.sin(theta)])
    z = np.array([np.cos(theta), 0.0, np.sin(theta)])
    y = np.array([0.0, 1.0, 0.0])
    x = np.cross(y, z)
    return CameraPose.from_center(np.stack([x, y, z]), c)


def inward_pose(theta, radius, height=0.0, target=(0.0, 0.0, 0.0)) -> CameraPose:
    c = np.array([radius * np.sin(theta), height, -radius * np.cos(theta)])
    z = np.asarray(target) - c
    z /= np.linalg.norm(z)
    y0 = np.array([0.0, 1.0, 0.0])
    x = np.cross(y0, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose.from_center(np.stack([x, y, z]), c)


def trajectory_poses(spec: SceneSpec):
    """Ground-truth poses, one list per sequence."""
    seqs = []
    n = spec.n_frames
    if spec.trajectory == "arc":
        half = np.deg2rad(spec.arc_degrees) / 2.0
        th = np.linspace(-half, half, n)
        seqs.append([inward_pose(t, spec.radius * 2.5, 0.3 * np.sin(3 * t)) for t in th])
    elif spec.trajectory == "loop":
        th = np.linspace(0.0, 2 * np.pi * (1.0 + spec.loop_overlap), n)
        # slow radial growth keeps the revisit from reproducing identical poses
        seqs.append([outward_pose(t, spec.radius * (1.0 + 0.12 * t / (2 * np.pi)),
                                  0.25 * np.sin(t)) for t in th])
    else:
        span = 2 * np.pi * spec.sequence_span
        step = 2 * np.pi / max(spec.n_sequences, 1) * 0.5
        for s in range(spec.n_sequences):
            th = np.linspace(s * step, s * step + span, n)
            r = spec.radius * (1.0 + 0.1 * s)
            seqs.append([outward_pose(t, r, 0.2 * s - 0.2) for t in th])
    return seqs


def scene_points(spec: SceneSpec, rng) -> np.ndarray:
    m = spec.n_points
    if spec.trajectory == "arc":
        return rng.uniform(-2.0, 2.0, size=(m, 3))
    phi = rng.uniform(0, 2 * np.pi, m)
    r = spec.wall_radius + rng.uniform(-spec.wall_depth, spec.wall_depth, m)
    h = rng.uniform(-spec.wall_height, spec.wall_height, m)
    return np.column_stack([r * np.cos(phi), h, r * np.sin(phi)])


def generate(spec: SceneSpec, seed: int) -> SyntheticData:
    """Deterministic scene generation from ``spec`` and ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    K = spec.intrinsics
    points = scene_points(spec, rng)
    base_desc = normalize(rng.normal(size=(len(points), 64)))
    frames, poses, sequences = [], {}, []
    gt_tracks: dict = {}
    fid = 0
    for seq in trajectory_poses(spec):
        ids = []
        for pose in seq:
            px, z = project_points(K, pose, points)
            vis = ((z > 0.1) & (px[:, 0] >= spec.margin) & (px[:, 0] < spec.width - spec.margin)
                   & (px[:, 1] >= spec.margin) & (px[:, 1] < spec.height - spec.margin))
            pid = np.flatnonzero(vis)
            if spec.dropout > 0:
                pid = pid[rng.random(len(pid)) >= spec.dropout]
            pos = px[pid] + rng.normal(scale=spec.pixel_sigma, size=(len(pid), 2)) \
                if spec.pixel_sigma > 0 else px[pid].copy()
            desc = base_desc[pid] + rng.normal(scale=spec.descriptor_sigma, size=(len(pid), 64))
            gt = pid.copy()
            if spec.outlier_rate > 0:
                bad = rng.random(len(pid)) < spec.outlier_rate
                pos[bad] = rng.uniform([spec.margin, spec.margin],
                                       [spec.width - spec.margin, spec.height - spec.margin],
                                       size=(int(bad.sum()), 2))
                gt[bad] = -1
            order = np.lexsort((pos[:, 0], pos[:, 1]))
            fr = FrameFeatures(fid, pos[order], normalize(desc[order]), gt_ids=gt[order])
            for i, p in enumerate(fr.gt_ids):
                if p >= 0:
                    gt_tracks.setdefault(int(p), {})[fid] = i
            frames.append(fr)
            poses[fid] = pose
            ids.append(fid)
            fid += 1
        sequences.append(ids)
    return SyntheticData(spec, K, points, base_desc, poses, frames, sequences, gt_tracks)


def fragment_tracks(data: SyntheticData, max_gap=1, frames=None):
    """Ground-truth tracks split wherever a point is unobserved for more than
    ``max_gap`` consecutive frames (or crosses a sequence boundary).

    This is what an ideal consecutive tracker produces; returns
    ``(tracks, gt_point_of_track)``.
    """
    from ..features import FeatureTrack, update_track_descriptor
    fmap = data.frame_map()
    seq_of = {f: s for s, ids in enumerate(data.sequences) for f in ids}
    allowed = None if frames is None else set(frames)
    tracks, owner = [], []
    for p in sorted(data.gt_tracks):
        obs = sorted((f, i) for f, i in data.gt_tracks[p].items() if allowed is None or f in allowed)
        cur = {}
        prev = None
        for f, i in obs:
            if prev is not None and (f - prev > max_gap + 1 or seq_of[f] != seq_of[prev]):
                if len(cur) >= 2:
                    tracks.append(cur)
                    owner.append(p)
                cur = {}
            cur[f] = i
            prev = f
        if len(cur) >= 2:
            tracks.append(cur)
            owner.append(p)
    out = []
    for tid, obs in enumerate(tracks):
        t = FeatureTrack(tid, obs)
        update_track_descriptor(t, fmap)
        out.append(t)
    return out, np.asarray(owner)
