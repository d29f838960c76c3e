"""Feature observations, tracks, a simple built-in detector and binary file I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyImage, ParseError

DESCRIPTOR_DIM = 64
FEATURE_MAGIC = b"ENFTFEAT"
TRACK_MAGIC = b"ENFTTRAK"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Feature:
    position: np.ndarray
    scale: float
    orientation: float
    descriptor: np.ndarray


@dataclass
class FrameFeatures:
    """All features of one frame, stored column-wise.

    ``gt_ids`` is only populated by the synthetic generator and never written
    to disk. ``image`` is an optional grayscale array in [0, 1].
    """

    frame_id: int
    positions: np.ndarray
    descriptors: np.ndarray
    scales: np.ndarray = None
    orientations: np.ndarray = None
    image: np.ndarray = None
    gt_ids: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        n = len(self.positions)
        d = np.asarray(self.descriptors, dtype=float)
        self.descriptors = d if d.ndim == 2 else d.reshape(n, -1 if n else DESCRIPTOR_DIM)
        self.scales = np.ones(n) if self.scales is None else np.asarray(self.scales, dtype=float)
        self.orientations = (np.zeros(n) if self.orientations is None
                             else np.asarray(self.orientations, dtype=float))

    def __len__(self):
        return len(self.positions)

    @property
    def features(self) -> list[Feature]:
        return [Feature(self.positions[i], float(self.scales[i]), float(self.orientations[i]),
                        self.descriptors[i]) for i in range(len(self))]

    def append(self, positions, descriptors, scales=None, orientations=None, gt_ids=None):
        """Add features in place; returns the new indices."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        m = len(positions)
        start = len(self)
        self.positions = np.vstack([self.positions, positions])
        self.descriptors = np.vstack([self.descriptors, np.asarray(descriptors).reshape(m, -1)])
        self.scales = np.concatenate([self.scales, np.ones(m) if scales is None else scales])
        self.orientations = np.concatenate(
            [self.orientations, np.zeros(m) if orientations is None else orientations])
        if self.gt_ids is not None:
            self.gt_ids = np.concatenate([self.gt_ids, np.full(m, -1) if gt_ids is None else gt_ids])
        return np.arange(start, start + m)

    def equals(self, other: "FrameFeatures") -> bool:
        return (self.frame_id == other.frame_id
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.descriptors, other.descriptors)
                and np.array_equal(self.scales, other.scales)
                and np.array_equal(self.orientations, other.orientations))


@dataclass
class FeatureTrack:
    """One scene point's observations: ``frame_id -> feature index``."""

    track_id: int
    observations: dict
    mean_descriptor: np.ndarray = None
    descriptor_sum: np.ndarray = field(default=None, repr=False)

    @property
    def frames(self) -> list[int]:
        return sorted(self.observations)

    def __len__(self):
        return len(self.observations)

    def span(self) -> set:
        return set(self.observations)


def normalize(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def update_track_descriptor(track: FeatureTrack, frames) -> np.ndarray:
    """Mean of the member descriptors, re-normalized to unit length.

    ``frames`` maps frame id to :class:`FrameFeatures`. Also refreshes the
    cached running sum used for exact merging.
    """
    ids = sorted(track.observations)
    total = np.zeros(frames[ids[0]].descriptors.shape[1])
    for f in ids:
        total += frames[f].descriptors[track.observations[f]]
    track.descriptor_sum = total
    track.mean_descriptor = normalize(total / len(ids))
    return track.mean_descriptor


def merge_tracks(tracks, track_id) -> FeatureTrack:
    """Union of tracks with disjoint frame sets; descriptor from the exact sums."""
    obs = {}
    total = None
    for t in tracks:
        overlap = obs.keys() & t.observations.keys()
        if overlap:
            raise ValueError(f"tracks share frames {sorted(overlap)}")
        obs.update(t.observations)
        total = t.descriptor_sum.copy() if total is None else total + t.descriptor_sum
    return FeatureTrack(track_id, obs, normalize(total / len(obs)), total)


# ----------------------------------------------------------------------------- matching

def match_2nn(desc_a, desc_b, ratio=0.8, max_distance=np.inf):
    """Lowe-style ratio matching from ``a`` to ``b``, made one-to-one.

    Returns ``(idx_a, idx_b, distance)`` sorted by ``idx_a``. When several
    features of ``a`` pick the same feature of ``b`` only the closest survives.
    """
    desc_a = np.asarray(desc_a, dtype=float)
    desc_b = np.asarray(desc_b, dtype=float)
    empty = (np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    if len(desc_a) == 0 or len(desc_b) < 2:
        return empty
    d, j = cKDTree(desc_b).query(desc_a, k=2)
    ok = (d[:, 0] < ratio * d[:, 1]) & (d[:, 0] <= max_distance)
    ia = np.flatnonzero(ok)
    ib = j[ok, 0]
    dist = d[ok, 0]
    # keep the best claimant for each b (ties: lowest index in a)
    order = np.lexsort((ia, dist))
    _, first = np.unique(ib[order], return_index=True)
    keep = np.sort(order[first])
    return ia[keep], ib[keep], dist[keep]


# ----------------------------------------------------------------------------- detector

def extract_features(image, frame_id=0, max_features=1000, sigma=1.5, k=0.04,
                     rel_threshold=0.01, min_distance=3, border=9) -> FrameFeatures:
    """Harris corners with a 4x4x4 gradient-histogram descriptor.

    A deterministic stand-in for SIFT: good enough for textured synthetic
    imagery; real pipelines should ingest precomputed features instead.
    """
    img = np.asarray(image, dtype=float)
    if img.size == 0 or img.ndim != 2:
        raise EmptyImage("expected a non-empty 2-D grayscale image")
    gy, gx = np.gradient(img)
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    R = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    rmax = R.max()
    empty = FrameFeatures(frame_id, np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_DIM)), image=img)
    if rmax <= 1e-12:
        return empty
    peaks = (R == ndimage.maximum_filter(R, size=2 * min_distance + 1)) & (R > rel_threshold * rmax)
    peaks[:border] = peaks[-border:] = False
    peaks[:, :border] = peaks[:, -border:] = False
    ys, xs = np.nonzero(peaks)
    order = np.lexsort((xs, ys, -R[ys, xs]))
    taken = np.zeros_like(peaks)
    pts = []
    for i in order:
        y, x = ys[i], xs[i]
        if taken[y, x]:
            continue
        taken[max(0, y - min_distance):y + min_distance + 1,
              max(0, x - min_distance):x + min_distance + 1] = True
        pts.append((x, y))
        if len(pts) >= max_features:
            break
    if not pts:
        return empty
    pts = np.asarray(pts)
    pos = _subpixel(R, pts)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    desc, orient = _describe(mag, ang, pts)
    good = np.linalg.norm(desc, axis=1) > 0
    return FrameFeatures(frame_id, pos[good], normalize(desc[good]),
                         np.full(good.sum(), sigma), orient[good], image=img)


def _subpixel(R, pts):
    x, y = pts[:, 0], pts[:, 1]
    out = pts.astype(float)
    for axis, (dx, dy) in enumerate(((1, 0), (0, 1))):
        a = R[y - dy, x - dx]
        b = R[y, x]
        c = R[y + dy, x + dx]
        den = a - 2 * b + c
        off = np.where(den < 0, 0.5 * (a - c) / np.where(den < 0, den, -1.0), 0.0)
        out[:, axis] += np.clip(off, -0.5, 0.5)
    return out


def _describe(mag, ang, pts, cells=4, cell=4, bins=4):
    half = cells * cell // 2
    offs = np.arange(-half, half)
    yy, xx = np.meshgrid(offs, offs, indexing="ij")
    weight = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * half ** 2))
    cell_idx = ((yy + half) // cell) * cells + (xx + half) // cell
    desc = np.zeros((len(pts), cells * cells * bins))
    orient = np.zeros(len(pts))
    for n, (x, y) in enumerate(pts):
        m = mag[y + yy, x + xx] * weight
        a = ang[y + yy, x + xx]
        orient[n] = np.arctan2((m * np.sin(a)).sum(), (m * np.cos(a)).sum())
        b = ((a + np.pi) / (2 * np.pi) * bins).astype(int) % bins
        np.add.at(desc[n], (cell_idx * bins + b).ravel(), m.ravel())
    desc = normalize(desc)
    desc = normalize(np.minimum(desc, 0.2))
    return desc, orient


# ----------------------------------------------------------------------------- files

def save_features(path, frames) -> None:
    """Binary little-endian feature file (see README for the layout)."""
    frames = list(frames)
    dim = frames[0].descriptors.shape[1] if frames else DESCRIPTOR_DIM
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sIII", FEATURE_MAGIC, FORMAT_VERSION, len(frames), dim))
        for fr in frames:
            fh.write(struct.pack("<II", fr.frame_id, len(fr)))
            rec = np.column_stack([fr.positions, fr.scales, fr.orientations, fr.descriptors])
            fh.write(rec.astype("<f4").tobytes())


def load_features(path, expected_dim=DESCRIPTOR_DIM) -> list[FrameFeatures]:
    data = Path(path).read_bytes()
    head = struct.calcsize("<8sIII")
    if len(data) < head:
        raise ParseError(f"truncated header at byte offset {len(data)}")
    magic, version, n_frames, dim = struct.unpack_from("<8sIII", data, 0)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"bad magic {magic!r} at byte offset 0")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version} at byte offset 8")
    if expected_dim is not None and dim != expected_dim:
        raise ParseError(f"header record: descriptor dimension {dim}, expected {expected_dim}")
    off = head
    rec_size = 4 * (4 + dim)
    frames = []
    for fi in range(n_frames):
        if off + 8 > len(data):
            raise ParseError(f"truncated frame header for frame record {fi} at byte offset {off}")
        frame_id, n = struct.unpack_from("<II", data, off)
        off += 8
        end = off + n * rec_size
        if end > len(data):
            raise ParseError(f"truncated feature records for frame record {fi} "
                             f"(frame_id {frame_id}) at byte offset {len(data)}, expected {end}")
        rec = np.frombuffer(data, dtype="<f4", count=n * (4 + dim), offset=off)
        rec = rec.reshape(n, 4 + dim).astype(float)
        norms = np.linalg.norm(rec[:, 4:], axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-3)
        if len(bad):
            raise ParseError(f"frame record {fi} feature record {bad[0]}: descriptor is not unit "
                             f"length (norm {norms[bad[0]]:.4f})")
        frames.append(FrameFeatures(frame_id, rec[:, :2], rec[:, 4:], rec[:, 2], rec[:, 3]))
        off = end
    if off != len(data):
        raise ParseError(f"{len(data) - off} trailing bytes at byte offset {off}")
    return frames


def save_tracks(path, tracks) -> None:
    tracks = list(tracks)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", TRACK_MAGIC, FORMAT_VERSION, len(tracks)))
        for t in tracks:
            obs = sorted(t.observations.items())
            fh.write(struct.pack("<I", len(obs)))
            fh.write(np.asarray(obs, dtype="<u4").reshape(-1, 2).tobytes())
            fh.write(np.asarray(t.mean_descriptor, dtype="<f4").tobytes())


def load_tracks(path, dim=DESCRIPTOR_DIM) -> list[FeatureTrack]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ParseError(f"truncated header at byte offset {len(data)}")
    magic, version, count = struct.unpack_from("<8sII", data, 0)
    if magic != TRACK_MAGIC:
        raise ParseError(f"bad magic {magic!r} at byte offset 0")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version} at byte offset 8")
    off = 16
    tracks = []
    for ti in range(count):
        if off + 4 > len(data):
            raise ParseError(f"truncated track record {ti} at byte offset {off}")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        end = off + 8 * n + 4 * dim
        if end > len(data):
            raise ParseError(f"truncated track record {ti} at byte offset {len(data)}")
        obs = np.frombuffer(data, dtype="<u4", count=2 * n, offset=off).reshape(n, 2)
        desc = np.frombuffer(data, dtype="<f4", count=dim, offset=off + 8 * n).astype(float)
        tracks.append(FeatureTrack(ti, {int(f): int(i) for f, i in obs}, desc))
        off = end
    return tracks
