"""Rotations, rigid camera poses and 7-DoF similarity transforms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


def skew(v):
    v = np.asarray(v)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=v.dtype)


def rodrigues(w):
    """Rotation matrix from an axis-angle vector.

    Written with plain arithmetic so it also works on complex input, which
    the complex-step Jacobian oracle relies on.
    """
    w = np.asarray(w)
    theta2 = (w * w).sum()
    K = skew(w)
    if abs(theta2) < 1e-16:
        # second-order series keeps the derivative exact around zero
        return np.eye(3, dtype=w.dtype) + K + 0.5 * K @ K
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3, dtype=w.dtype) + a * K + b * (K @ K)


def rotation_log(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def orthonormalize(R) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        Q = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return Q


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: ``x_cam = R @ X + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, R, center) -> "CameraPose":
        R = np.asarray(R, dtype=float)
        return cls(R, -R @ np.asarray(center, dtype=float))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def inverse(self) -> "CameraPose":
        return CameraPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self ∘ other`` (apply ``other`` first)."""
        return CameraPose(self.R @ other.R, self.R @ other.t + self.t)

    def after_similarity(self, S: "SimilarityTransform") -> "CameraPose":
        """Rigid pose equivalent to applying ``S`` then this pose.

        The composite ``X -> R (s Rs X + ts) + t`` is a similarity; dividing the
        camera coordinates by ``s`` leaves every projection unchanged, so the
        result is a proper rigid pose.
        """
        return CameraPose(self.R @ S.R, (self.R @ S.t + self.t) / S.s)

    def is_valid(self, tol=1e-9) -> bool:
        return bool(np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                    and abs(np.linalg.det(self.R) - 1.0) < tol)


@dataclass(frozen=True)
class SimilarityTransform:
    """``X -> s * R @ X + t``."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"similarity scale must be positive, got {self.s}")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.s * (X @ self.R.T) + self.t

    __call__ = apply

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other`` (apply ``other`` first)."""
        return SimilarityTransform(self.s * other.s, self.R @ other.R,
                                   self.s * self.R @ other.t + self.t)

    def inverse(self) -> "SimilarityTransform":
        Rinv = self.R.T
        return SimilarityTransform(1.0 / self.s, Rinv, -(Rinv @ self.t) / self.s)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.s * self.R
        T[:3, 3] = self.t
        return T

    def to_params(self) -> np.ndarray:
        """7-vector ``[rotvec(3), t(3), log s]``."""
        return np.concatenate([rotation_log(self.R), self.t, [np.log(self.s)]])

    @classmethod
    def from_params(cls, a) -> "SimilarityTransform":
        a = np.asarray(a, dtype=float)
        return cls(float(np.exp(a[6])), rodrigues(a[:3]), a[3:6])

    def is_identity(self) -> bool:
        return self.s == 1.0 and np.array_equal(self.R, np.eye(3)) and not self.t.any()


# A 7-vector is enough of a type; these names keep call sites readable.
def similarity_to_params(S: SimilarityTransform) -> np.ndarray:
    return S.to_params()


def params_to_similarity(a) -> SimilarityTransform:
    return SimilarityTransform.from_params(a)
