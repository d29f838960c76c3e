"""Plot-ready CSV series and PGM match matrices (no rendering)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..nctm import save_pgm


def _csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(v if isinstance(v, str) else repr(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def emit_plots(artifacts, outdir) -> list:
    """Write every available series under ``outdir``; returns the file paths.

    ``artifacts`` is a mapping with optional keys ``trajectory`` (frame id ->
    CameraPose), ``frame_errors`` (frame id -> px), ``split_curves`` (list of
    ``(sequence, frames, C, joint_errors)``) and ``match_matrices`` (name ->
    array).
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    traj = artifacts.get("trajectory") or {}
    p = out / "trajectory_topdown.csv"
    _csv(p, ["frame_id", "x", "y", "z"],
         [(int(f), *map(float, traj[f].center)) for f in sorted(traj)])
    written.append(p)
    errs = artifacts.get("frame_errors") or {}
    p = out / "reprojection_error.csv"
    _csv(p, ["frame_id", "mean_error_px"], [(int(f), float(errs[f])) for f in sorted(errs)])
    written.append(p)
    curves = artifacts.get("split_curves") or []
    p = out / "split_angles.csv"
    rows = []
    for seq, frames, C, E in curves:
        for k in range(len(C)):
            rows.append((int(seq), k, int(frames[k]), int(frames[k + 1]), float(C[k]), float(E[k])))
    _csv(p, ["sequence", "k", "frame_a", "frame_b", "angle_rad", "joint_error_px"], rows)
    written.append(p)
    for name, M in sorted((artifacts.get("match_matrices") or {}).items()):
        p = out / f"match_matrix_{name}.pgm"
        save_pgm(p, np.asarray(M, dtype=float))
        written.append(p)
    return written
