"""KITTI odometry and TUM RGB-D directory adapters."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import LayoutError, ParseError
from ..geom import CameraIntrinsics, CameraPose

TUM_MAX_DT = 0.02
# TUM documentation's default calibration, used when the directory has none
TUM_DEFAULT = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)


@dataclass
class Dataset:
    format: str
    intrinsics: CameraIntrinsics
    image_paths: dict                       # frame id -> image file
    ground_truth: dict = field(default_factory=dict)   # frame id -> CameraPose (world -> camera)
    timestamps: dict = field(default_factory=dict)

    @property
    def frame_ids(self) -> list:
        return sorted(self.image_paths)

    def image(self, frame_id) -> np.ndarray:
        """Grayscale image in [0, 1]."""
        from PIL import Image
        with Image.open(self.image_paths[frame_id]) as im:
            arr = np.asarray(im.convert("L"), dtype=float)
        return arr / 255.0


def import_dataset(fmt, path) -> Dataset:
    """``fmt`` is ``kitti`` / ``kitti_odometry`` or ``tum`` / ``tum_rgbd``."""
    path = Path(path)
    if not path.is_dir():
        raise LayoutError(f"{path} is not a directory", [str(path)])
    if fmt in ("kitti", "kitti_odometry"):
        return _kitti(path)
    if fmt in ("tum", "tum_rgbd"):
        return _tum(path)
    raise ValueError(f"unknown dataset format {fmt!r}")


def _numbers(path, n_expected=None):
    rows = []
    for k, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError:
            raise ParseError(f"{path}:{k}: non-numeric value") from None
        if n_expected is not None and len(vals) != n_expected:
            raise ParseError(f"{path}:{k}: expected {n_expected} values, got {len(vals)}")
        rows.append(vals)
    return rows


def _kitti(path: Path) -> Dataset:
    calib = path / "calib.txt"
    img_dir = next((path / d for d in ("image_0", "image_2") if (path / d).is_dir()), None)
    missing = [str(p) for p, ok in ((calib, calib.is_file()),
                                    (path / "image_0", img_dir is not None)) if not ok]
    if missing:
        raise LayoutError(f"{path} is not a KITTI odometry sequence", missing)
    P = None
    cam = "P0:" if img_dir.name == "image_0" else "P2:"
    for line in calib.read_text().splitlines():
        if line.startswith(cam):
            P = np.array([float(v) for v in line.split()[1:13]]).reshape(3, 4)
    if P is None:
        raise ParseError(f"{calib}: no {cam[:-1]} projection matrix")
    K = CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2])
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".pgm", ".jpg"))
    paths = {int(p.stem): p for p in images}
    gt = {}
    for cand in (path / "poses.txt", path.parent.parent / "poses" / f"{path.name}.txt"):
        if cand.is_file():
            for k, v in enumerate(_numbers(cand, 12)):
                T = np.array(v).reshape(3, 4)          # camera -> world
                gt[k] = CameraPose(T[:, :3].T, -T[:, :3].T @ T[:, 3])
            break
    times = {}
    if (path / "times.txt").is_file():
        times = {k: v[0] for k, v in enumerate(_numbers(path / "times.txt", 1))}
    return Dataset("kitti", K, paths, {k: p for k, p in gt.items() if k in paths}, times)


def _tum(path: Path) -> Dataset:
    rgb = path / "rgb.txt"
    gt_file = path / "groundtruth.txt"
    missing = [str(p) for p in (rgb, gt_file) if not p.is_file()]
    if missing:
        raise LayoutError(f"{path} is not a TUM RGB-D sequence", missing)
    K = TUM_DEFAULT
    for name in ("calibration.txt", "camera.txt"):
        if (path / name).is_file():
            vals = _numbers(path / name)[0]
            K = CameraIntrinsics(*vals[:6])
            break
    stamps, paths = [], {}
    for k, line in enumerate(l for l in rgb.read_text().splitlines()
                             if l.strip() and not l.startswith("#")):
        t, name = line.split()[:2]
        stamps.append(float(t))
        paths[k] = path / name
    absent = [str(p) for p in paths.values() if not p.is_file()]
    if absent:
        raise LayoutError(f"{path}: images listed in rgb.txt are missing", absent)
    rows = np.array(_numbers(gt_file, 8)).reshape(-1, 8)
    gt = {}
    if len(rows):
        order = np.argsort(rows[:, 0], kind="stable")
        rows = rows[order]
        for k, t in enumerate(stamps):
            i = int(np.searchsorted(rows[:, 0], t))
            cand = [j for j in (i - 1, i) if 0 <= j < len(rows)]
            j = min(cand, key=lambda j: (abs(rows[j, 0] - t), j))
            if abs(rows[j, 0] - t) <= TUM_MAX_DT:
                Rcw = Rotation.from_quat(rows[j, 4:8]).as_matrix()
                gt[k] = CameraPose.from_center(Rcw.T, rows[j, 1:4])
    return Dataset("tum", K, paths, gt, dict(enumerate(stamps)))
