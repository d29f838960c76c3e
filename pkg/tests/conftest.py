import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from enft.geom import CameraIntrinsics, CameraPose


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera pose at ``center`` with the optical axis through ``target``."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose.from_center(np.stack([x, y, z]), center)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


@pytest.fixture
def two_view(rng, intrinsics):
    """Noise-free two-view scene with 100 points in front of both cameras."""
    X = rng.uniform([-2, -1.5, 4], [2, 1.5, 8], size=(100, 3))
    pose1 = look_at([0, 0, 0], [0, 0, 6])
    pose2 = look_at([0.8, 0.1, 0.2], [0, 0, 6])
    from enft.geom import project_points
    x1, _ = project_points(intrinsics, pose1, X)
    x2, _ = project_points(intrinsics, pose2, X)
    return X, pose1, pose2, x1, x2


def smooth_image(rng, h=96, w=96, scale=0.04):
    """Random band-limited image in roughly [0.15, 0.75]."""
    from enft.synth.images import Texture
    tex = Texture.random(rng, fmin=0.5, fmax=3.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return tex(xx * scale, yy * scale)


def random_cost(rng, w=5):
    """Matching cost on a random smooth image pair with a random epipolar line."""
    from enft.cpt import MatchingCost, MatchingWeights, sample_bilinear
    from enft.cpt.matching import window_offsets
    img = smooth_image(rng)
    shift = rng.uniform(-3, 3, size=2)
    x_true = rng.uniform(35, 60, size=2)
    x_hat = x_true + shift
    q = window_offsets(w) + x_true
    template = sample_bilinear(img, q[:, 0], q[:, 1]) + rng.normal(scale=0.005, size=len(q))
    ang = rng.uniform(0, np.pi)
    n = np.array([np.cos(ang), np.sin(ang)])
    line = np.array([n[0], n[1], -n @ x_true + rng.normal(scale=0.5)])
    return MatchingCost(template, img, line, x_hat, MatchingWeights(w=w)), x_true


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
