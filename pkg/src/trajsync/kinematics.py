"""Motion signals for correlation: body rates, lever-arm velocities and
radar Doppler ego-velocity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Trajectory, so3_log
from .xcorr import TimedVec3Series


@dataclass(frozen=True)
class RadarScan:
    """One radar frame. ``points`` is ``(N, 3)`` in the radar frame,
    ``doppler`` the radial speed (m/s, negative when approaching)."""

    t: float
    points: np.ndarray
    doppler: np.ndarray
    intensity: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        dop = np.asarray(self.doppler, dtype=float).reshape(-1)
        inten = np.zeros(len(pts)) if self.intensity is None else np.asarray(self.intensity, dtype=float).reshape(-1)
        if not (len(pts) == len(dop) == len(inten)):
            raise ValueError("radar scan fields differ in length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(dop)) and np.all(np.isfinite(inten))):
            raise ValueError("non-finite radar point")
        if np.any(np.linalg.norm(pts, axis=1) <= 0):
            raise ValueError("radar point at zero range")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "doppler", dop)
        object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return len(self.doppler)

    @property
    def directions(self):
        return self.points / np.linalg.norm(self.points, axis=1, keepdims=True)


@dataclass(frozen=True)
class Extrinsics:
    """Sensor pose in the INS frame: rotation ``R_IS`` and lever arm ``p_IS``."""

    R_IS: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_IS: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _check_len(traj: Trajectory):
    if len(traj) < 3:
        raise ValueError("too short")


def angular_rate_central_diff(traj: Trajectory) -> TimedVec3Series:
    """Body-frame angular rate at every interior pose.

    ``w_i = R_i^T R_{i-1} Log(R_{i-1}^T R_{i+1}) / (t_{i+1} - t_{i-1})``.
    """
    _check_len(traj)
    R, t = traj.rotations, traj.stamps
    rel = np.einsum("nji,njk->nik", R[:-2], R[2:])
    rv = so3_log(rel) / (t[2:] - t[:-2])[:, None]
    # From the frame at i-1 into the frame at i.
    w = np.einsum("nji,njk,nk->ni", R[1:-1], R[:-2], rv)
    return TimedVec3Series(t[1:-1], w)


def lever_arm_velocity(traj: Trajectory, ext: Extrinsics | None = None) -> TimedVec3Series:
    """Velocity of the point ``p_IS`` (fixed in the INS body) expressed in the
    INS body frame at each interior stamp, by central difference."""
    _check_len(traj)
    lever = np.zeros(3) if ext is None else np.asarray(ext.p_IS, dtype=float)
    R, t = traj.rotations, traj.stamps
    p = traj.positions + R @ lever
    v_world = (p[2:] - p[:-2]) / (t[2:] - t[:-2])[:, None]
    v_body = np.einsum("nji,nj->ni", R[1:-1], v_world)
    return TimedVec3Series(t[1:-1], v_body)


def doppler_from_velocity(directions, v_ego):
    """Radial speeds of static targets seen from a sensor moving at ``v_ego``."""
    return -np.asarray(directions) @ np.asarray(v_ego)


def _weighted_ls(U, d, w):
    A = U * w[:, None]
    H = U.T @ A
    if np.linalg.cond(H) > 1e6:
        raise ValueError("degenerate geometry")
    return np.linalg.solve(H, -(A.T @ d))


def ego_velocity_gnc(
    scan: RadarScan,
    inlier_threshold: float = 0.1,
    mu_update: float = 1.4,
    max_iters: int = 100,
):
    """Ego velocity of the radar from one scan, robust to moving targets.

    Solves ``doppler_k = -u_k . v`` by graduated non-convexity with the
    truncated-least-squares surrogate: weighted least squares alternates with
    the closed-form GNC-TLS weight update while the control parameter ``mu``
    grows geometrically until all weights are binary.

    Returns ``(v, inlier_mask, converged)`` with ``v`` in the radar frame.
    """
    if len(scan) < 3:
        raise ValueError("need at least three radar points")
    U = scan.directions
    d = scan.doppler
    c2 = inlier_threshold**2
    w = np.ones(len(d))

    v = _weighted_ls(U, d, w)
    r2 = (d + U @ v) ** 2
    if r2.max() <= c2:
        return v, np.ones(len(d), dtype=bool), True

    mu = c2 / max(2.0 * r2.max() - c2, 1e-12)
    converged = False
    for _ in range(max_iters):
        upper = (mu + 1.0) / mu * c2
        lower = mu / (mu + 1.0) * c2
        w = np.where(
            r2 >= upper,
            0.0,
            np.where(r2 <= lower, 1.0, inlier_threshold * np.sqrt(mu * (mu + 1.0) / np.maximum(r2, 1e-300)) - mu),
        )
        if np.count_nonzero(w) < 3:
            break
        v = _weighted_ls(U, d, w)
        r2 = (d + U @ v) ** 2
        if np.all((w < 1e-6) | (w > 1.0 - 1e-6)):
            converged = True
            break
        mu *= mu_update

    inliers = r2 <= c2
    if inliers.sum() >= 3:
        try:
            v = _weighted_ls(U, d, inliers.astype(float))
            inliers = (d + U @ v) ** 2 <= c2
        except ValueError:
            pass
    return v, inliers, converged


def ego_velocity_series(scans, **gnc_kwargs) -> TimedVec3Series:
    """Per-scan GNC ego velocity; scans that fail to solve are skipped."""
    ts, vs = [], []
    for scan in scans:
        try:
            v, _, _ = ego_velocity_gnc(scan, **gnc_kwargs)
        except ValueError:
            continue
        ts.append(scan.t)
        vs.append(v)
    return TimedVec3Series(np.array(ts), np.array(vs).reshape(-1, 3))
