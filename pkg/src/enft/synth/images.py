"""Procedural imagery for intensity-based matching tests.

Two textured planes meeting at a vertical crease (an inside corner), seen
from two cameras. Texture is a smooth sum of sinusoids over world (x, y), so
intensities are analytic and bilinear interpolation error stays small.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..features import FrameFeatures, normalize
from ..geom import CameraIntrinsics, CameraPose, project_points, rodrigues


@dataclass
class Texture:
    freqs: np.ndarray      # (n, 2) spatial frequency, cycles per scene unit
    phases: np.ndarray
    amps: np.ndarray
    mean: float = 0.45
    contrast: float = 0.3

    @classmethod
    def random(cls, rng, n=14, fmin=0.8, fmax=6.0, mean=0.45, contrast=0.3):
        f = rng.uniform(fmin, fmax, n)
        ang = rng.uniform(0, np.pi, n)
        freqs = np.column_stack([f * np.cos(ang), f * np.sin(ang)])
        return cls(freqs, rng.uniform(0, 2 * np.pi, n), rng.uniform(0.5, 1.0, n), mean, contrast)

    def __call__(self, u, v):
        arg = 2 * np.pi * (np.multiply.outer(u, self.freqs[:, 0])
                           + np.multiply.outer(v, self.freqs[:, 1])) + self.phases
        s = (np.sin(arg) * self.amps).sum(axis=-1) / self.amps.sum()
        return self.mean + self.contrast * s


@dataclass
class Board:
    """Fronto-parallel textured rectangle at depth ``z``, optionally visible in one view only."""

    x0: float
    x1: float
    y0: float
    y1: float
    z: float
    texture: Texture
    only_in: int = -1      # -1 visible everywhere, else index of the only view showing it


@dataclass
class TwoPlaneScene:
    depth: float = 6.0
    slope: float = 0.5
    texture: Texture = None
    boards: list = field(default_factory=list)

    def surface_hit(self, C, d):
        """Ray parameter and hit point on the V-shaped surface ``z = depth - slope |x|``."""
        lam = np.full(len(d), np.inf)
        for left in (True, False):
            # left half: z - slope*x = depth, right half: z + slope*x = depth
            n = np.array([-self.slope if left else self.slope, 0.0, 1.0])
            with np.errstate(divide="ignore", invalid="ignore"):
                l = (self.depth - C @ n) / (d @ n)
            X = C + l[:, None] * d
            side = X[:, 0] < 0 if left else X[:, 0] >= 0
            ok = (l > 0) & side & np.isfinite(l)
            lam = np.where(ok & (l < lam), l, lam)
        return lam, C + lam[:, None] * d

    def depth_at(self, x):
        return self.depth - self.slope * np.abs(x)


def render(scene: TwoPlaneScene, K: CameraIntrinsics, pose: CameraPose, width, height, view=0):
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    pix = np.column_stack([xx.ravel(), yy.ravel()])
    rays = np.column_stack([(pix[:, 0] - K.cx) / K.fx, (pix[:, 1] - K.cy) / K.fy, np.ones(len(pix))])
    d = rays @ pose.R          # camera -> world directions (R^T applied row-wise)
    C = pose.center
    lam, X = scene.surface_hit(C, d)
    img = scene.texture(X[:, 0], X[:, 1])
    for b in scene.boards:
        if b.only_in not in (-1, view):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            l = (b.z - C[2]) / d[:, 2]
        P = C + l[:, None] * d
        hit = (l > 0) & (l < lam) & (P[:, 0] >= b.x0) & (P[:, 0] <= b.x1) \
            & (P[:, 1] >= b.y0) & (P[:, 1] <= b.y1)
        img = np.where(hit, b.texture(P[:, 0], P[:, 1]), img)
        lam = np.where(hit, l, lam)
    return img.reshape(height, width)


@dataclass
class ImagePair:
    A: FrameFeatures
    B: FrameFeatures
    K: CameraIntrinsics
    pose_a: CameraPose
    pose_b: CameraPose
    points: np.ndarray
    truth_b: np.ndarray        # true pixel of each A feature in B (nan when not visible)
    occluded: np.ndarray       # A features whose correspondence is hidden in B
    scene: TwoPlaneScene


def two_plane_pair(seed=0, n_points=400, brightness=1.1, descriptor_sigma=0.12, width=640,
                   height=480, focal=500.0, occluder=True, contrast=0.4, margin=16):
    """Rendered two-plane image pair with features at known surface points.

    Image B is ``brightness`` times brighter. With ``occluder`` a board that
    exists only in view B hides part of the right plane.
    """
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(focal, focal, width / 2.0, height / 2.0)
    scene = TwoPlaneScene(texture=Texture.random(rng, contrast=contrast))
    if occluder:
        scene.boards.append(Board(0.9, 1.9, -0.9, 0.3, 4.2,
                                  Texture.random(rng, contrast=contrast), only_in=1))
    pose_a = CameraPose.identity()
    pose_b = CameraPose.from_center(rodrigues(np.array([0.01, -0.035, 0.005])),
                                    np.array([0.35, 0.04, 0.15]))
    img_a = render(scene, K, pose_a, width, height, view=0)
    img_b = np.clip(brightness * render(scene, K, pose_b, width, height, view=1), 0.0, 1.0)

    # surface points sampled through random pixels of A
    px = rng.uniform([margin, margin], [width - margin, height - margin], size=(4 * n_points, 2))
    rays = np.column_stack([(px[:, 0] - K.cx) / focal, (px[:, 1] - K.cy) / focal, np.ones(len(px))])
    _, X = scene.surface_hit(pose_a.center, rays @ pose_a.R)
    pb, zb = project_points(K, pose_b, X)
    inside = (pb[:, 0] >= margin) & (pb[:, 0] < width - margin) & (pb[:, 1] >= margin) \
        & (pb[:, 1] < height - margin) & (zb > 0)
    X, px, pb = X[inside][:n_points], px[inside][:n_points], pb[inside][:n_points]
    m = len(X)

    # occlusion in B: board in front along the ray from B
    occ = np.zeros(m, bool)
    for b in scene.boards:
        C = pose_b.center
        d = X - C
        l = (b.z - C[2]) / d[:, 2]
        P = C + l[:, None] * d
        occ |= (l > 0) & (l < 1) & (P[:, 0] >= b.x0) & (P[:, 0] <= b.x1) \
            & (P[:, 1] >= b.y0) & (P[:, 1] <= b.y1)

    base = normalize(rng.normal(size=(m, 64)))
    da = normalize(base + rng.normal(scale=descriptor_sigma, size=base.shape))
    db = normalize(base + rng.normal(scale=descriptor_sigma, size=base.shape))
    ids = np.arange(m)
    A = FrameFeatures(0, px, da, image=img_a, gt_ids=ids)
    keep = ~occ
    B = FrameFeatures(1, pb[keep], db[keep], image=img_b, gt_ids=ids[keep])
    truth = np.where(occ[:, None], np.nan, pb)
    return ImagePair(A, B, K, pose_a, pose_b, X, truth, occ, scene)
