"""Rigid-motion algebra and pose error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SO3_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation matrix plus translation; maps p to ``rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform a single point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self.compose(other)`` applies ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_valid(self, tol: float = SO3_TOL) -> bool:
        return so3_defect(self.rotation) < tol and bool(np.all(np.isfinite(self.translation)))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class PoseError:
    re: float  # radians
    te: float

    @property
    def re_deg(self) -> float:
        return float(np.degrees(self.re))


def apply(tf: RigidTransform, p) -> np.ndarray:
    return tf.apply(p)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(tf: RigidTransform) -> RigidTransform:
    return tf.inverse()


def so3_defect(R) -> float:
    """max(||R^T R - I||_F, |det R - 1|); zero for an exact rotation."""
    R = np.asarray(R, dtype=np.float64)
    return max(
        float(np.linalg.norm(R.T @ R - np.eye(3))),
        abs(float(np.linalg.det(R)) - 1.0),
    )


def rotation_error(r_est, r_gt) -> float:
    """Angle in radians of the relative rotation ``r_est^-1 r_gt``.

    The cosine is ``(tr - 1) / 2`` clamped to [-1, 1]. The angle is recovered
    with atan2 against the sine taken from the skew part, which keeps full
    precision near zero where arccos alone bottoms out around 1e-8 rad.
    """
    rel = np.asarray(r_est, dtype=np.float64).T @ np.asarray(r_gt, dtype=np.float64)
    cos = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    sin = 0.5 * np.linalg.norm(skew)
    return float(np.arctan2(sin, cos))


def translation_error(t_est, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def pose_error(est: RigidTransform, gt: RigidTransform) -> PoseError:
    return PoseError(rotation_error(est.rotation, gt.rotation), translation_error(est.translation, gt.translation))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula."""
    u = np.asarray(axis, dtype=np.float64)
    u = u / np.linalg.norm(u)
    K = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    while np.linalg.norm(v) < 1e-12:
        v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform axis on the sphere, uniform angle in [0, 2*pi).

    Not Haar-uniform: small-angle motions are over-represented, so the mean of
    R v over draws is v / 3. ``random_rotation_haar`` samples SO(3) uniformly.
    """
    axis = random_axis(rng)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return axis_angle_matrix(axis, angle)


def random_rotation_haar(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a random unit quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng: np.random.Generator, translation_range: float = 1.0) -> RigidTransform:
    R = random_rotation(rng)
    t = rng.uniform(-translation_range, translation_range, size=3)
    return RigidTransform(R, t)
