"""Trajectory text files: ``frame_id tx ty tz qx qy qz qw`` (camera-to-world)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import ParseError
from ..geom import CameraPose


def format_trajectory(poses: dict) -> str:
    lines = []
    for f in sorted(poses):
        p = poses[f]
        q = Rotation.from_matrix(p.R.T).as_quat()
        c = p.center
        lines.append(f"{int(f)} " + " ".join(repr(float(v)) for v in (*c, *q)))
    return "\n".join(lines) + ("\n" if lines else "")


def write_trajectory(path, poses: dict):
    Path(path).write_text(format_trajectory(poses))


def parse_trajectory(text: str) -> dict:
    """Frame id -> world-to-camera CameraPose. Blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"line {n}: expected 8 fields, got {len(parts)}")
        try:
            f = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise ParseError(f"line {n}: non-numeric field") from None
        q = vals[3:]
        qn = np.linalg.norm(q)
        if not np.isfinite(vals).all() or qn == 0:
            raise ParseError(f"line {n}: invalid pose")
        if f in out:
            raise ParseError(f"line {n}: duplicate frame id {f}")
        Rcw = Rotation.from_quat(q / qn).as_matrix()
        out[f] = CameraPose.from_center(Rcw.T, vals[:3])
    return out


def read_trajectory(path) -> dict:
    return parse_trajectory(Path(path).read_text())
