"""Trajectory evaluation after a 7-DoF alignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InsufficientOverlap
from ..geom import SimilarityTransform, estimate_similarity


@dataclass
class EvalReport:
    rmse: float
    completeness: float
    errors: dict = field(default_factory=dict)      # frame id -> aligned center error
    alignment: SimilarityTransform = None           # estimate coordinates -> ground truth
    n_common: int = 0

    def format(self) -> str:
        S = self.alignment
        return (f"rmse {self.rmse!r}\ncompleteness {self.completeness!r}\n"
                f"common_frames {self.n_common}\nalignment_scale {S.s!r}\n")


def evaluate_trajectory(estimated: dict, truth: dict) -> EvalReport:
    """RMSE of camera centers after the best similarity alignment.

    Completeness is the fraction of ground-truth frames that the estimate
    registered.
    """
    common = sorted(set(estimated) & set(truth))
    if len(common) < 3:
        raise InsufficientOverlap(f"need 3 common frames, got {len(common)}")
    src = np.array([estimated[f].center for f in common])
    dst = np.array([truth[f].center for f in common])
    # a straight-line trajectory leaves the roll about the line free; it does not affect the error
    S = estimate_similarity(src, dst, collinear_ok=True)
    err = np.linalg.norm(S.apply(src) - dst, axis=1)
    return EvalReport(float(np.sqrt(np.mean(err ** 2))), len(common) / len(truth),
                      dict(zip(common, err.tolist())), S, len(common))
