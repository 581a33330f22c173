"""SO(3)/SE(3) helpers.

Rotations are plain ``(3, 3)`` numpy arrays. Quaternions use the scalar-last
``(x, y, z, w)`` order of the trajectory text format and are sign-normalized
to ``w >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Above this angle the axis is read from the symmetric part of R.
_NEAR_PI = np.pi - 1e-3


def skew(v):
    """Return the cross-product matrix ``[v]x`` (batched over leading axes)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(rotvec):
    """Rodrigues formula. Accepts ``(3,)`` or ``(..., 3)``."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    K = skew(v)
    K2 = K @ K
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    return np.eye(3) + a * K + b * K2


def _log_single(R):
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * np.linalg.norm(w)
    theta = np.arctan2(sin_t, cos_t)
    if theta < 1e-8:
        return 0.5 * w
    if theta < _NEAR_PI:
        return theta / (2.0 * np.sin(theta)) * w
    # Near the cut locus: R + R^T = 2 cos I + 2 (1 - cos) a a^T.
    S = 0.5 * (R + R.T) - cos_t * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, w) < 0.0:
        axis = -axis
    return theta * axis


def so3_log(R):
    """Principal rotation vector of ``R`` (norm in ``[0, pi]``).

    Batched over leading axes.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim == 2:
        return _log_single(R)
    flat = R.reshape(-1, 3, 3)
    cos_t = np.clip((np.trace(flat, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    w = np.stack(
        [flat[:, 2, 1] - flat[:, 1, 2], flat[:, 0, 2] - flat[:, 2, 0], flat[:, 1, 0] - flat[:, 0, 1]],
        axis=-1,
    )
    sin_t = 0.5 * np.linalg.norm(w, axis=-1)
    theta = np.arctan2(sin_t, cos_t)
    scale = np.where(theta < 1e-8, 0.5, theta / (2.0 * np.sin(np.maximum(theta, 1e-8))))
    out = scale[:, None] * w
    for idx in np.nonzero(theta >= _NEAR_PI)[0]:
        out[idx] = _log_single(flat[idx])
    return out.reshape(R.shape[:-2] + (3,))


def right_jacobian_inv(phi):
    """Inverse right Jacobian of SO(3), batched."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    small = theta < 1e-5
    th = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)),
    )
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def rotation_angle(R):
    return float(np.linalg.norm(so3_log(R)))


def rotation_angle_between(a, b):
    """Geodesic distance ``|Log(a^T b)|`` in radians."""
    return float(np.linalg.norm(so3_log(np.asarray(a).T @ np.asarray(b))))


def geodesic_midpoint(a, b):
    """Rotation halfway along the geodesic from ``a`` to ``b``."""
    a = np.asarray(a, dtype=float)
    rel = so3_log(a.T @ np.asarray(b, dtype=float))
    if np.linalg.norm(rel) >= np.pi - 1e-9:
        raise ValueError("antipodal rotations")
    return a @ so3_exp(0.5 * rel)


def rot_x(angle):
    return so3_exp([angle, 0.0, 0.0])


def rot_y(angle):
    return so3_exp([0.0, angle, 0.0])


def rot_z(angle):
    return so3_exp([0.0, 0.0, angle])


def project_to_so3(M):
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def is_rotation(R, tol=1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)


def quat_to_matrix(q):
    """Scalar-last quaternion ``(x, y, z, w)`` to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Rotation matrix to scalar-last quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 1e-300))
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q /= np.linalg.norm(q)
    return normalize_quat_sign(q)


def normalize_quat_sign(q):
    q = np.asarray(q, dtype=float)
    return -q if q[3] < 0.0 else q


def yaw_of(R) -> float:
    """Heading about the world z axis, radians in ``(-pi, pi]``."""
    R = np.asarray(R)
    return float(np.arctan2(R[1, 0], R[0, 0]))


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + p``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        if not np.all(np.isfinite(self.p)):
            raise ValueError("non-finite translation")

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.p + self.p)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.p)

    def apply(self, x):
        return np.asarray(x) @ self.R.T + self.p

    @property
    def quat(self):
        return matrix_to_quat(self.R)

    @classmethod
    def from_quat(cls, p, q) -> "Pose":
        return cls(quat_to_matrix(q), p)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.p, other.p))

    __hash__ = None


@dataclass(frozen=True)
class StampedPose:
    t: float
    pose: Pose

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError("non-finite stamp")


class Trajectory:
    """Time-ordered SE(3) poses stored as stacked arrays.

    ``stamps`` has shape ``(N,)`` and must be strictly increasing,
    ``rotations`` is ``(N, 3, 3)`` and ``positions`` is ``(N, 3)``.
    """

    def __init__(self, stamps, rotations, positions):
        self.stamps = np.asarray(stamps, dtype=float).reshape(-1)
        self.rotations = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(self.stamps)
        if len(self.rotations) != n or len(self.positions) != n:
            raise ValueError("stamps, rotations and positions differ in length")
        if n > 1 and np.any(np.diff(self.stamps) <= 0):
            raise ValueError("stamps must be strictly increasing")

    def __len__(self):
        return len(self.stamps)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return StampedPose(float(self.stamps[idx]), Pose(self.rotations[idx], self.positions[idx]))
        return Trajectory(self.stamps[idx], self.rotations[idx], self.positions[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __repr__(self):
        return f"Trajectory(n={len(self)})"

    @classmethod
    def from_poses(cls, poses) -> "Trajectory":
        poses = list(poses)
        if not poses:
            return cls(np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3)))
        return cls(
            [sp.t for sp in poses],
            np.stack([sp.pose.R for sp in poses]),
            np.stack([sp.pose.p for sp in poses]),
        )

    def to_poses(self) -> list[StampedPose]:
        return list(self)

    def transformed(self, T: Pose) -> "Trajectory":
        """Left-multiply every pose by ``T``."""
        return Trajectory(self.stamps, T.R @ self.rotations, self.positions @ T.R.T + T.p)

    def quats(self):
        return np.stack([matrix_to_quat(R) for R in self.rotations]) if len(self) else np.zeros((0, 4))
