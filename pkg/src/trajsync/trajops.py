"""Trajectory averaging, deviation statistics and evaluation metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .assoc import associate_stamps
from .geom import Trajectory, geodesic_midpoint, so3_log, yaw_of


class WeakAlignmentWarning(UserWarning):
    """Rigid alignment is under-determined (reference points collinear)."""


def default_tolerance(traj: Trajectory) -> float:
    """Half the median stamp interval."""
    if len(traj) < 2:
        raise ValueError("need two poses to derive a tolerance")
    return 0.5 * float(np.median(np.diff(traj.stamps)))


def associate_by_time(a: Trajectory, b: Trajectory, tol: float | None = None) -> np.ndarray:
    """Index pairs ``(i, j)`` with ``|a.t[i] - b.t[j]| <= tol``, one-to-one."""
    if tol is None:
        tol = default_tolerance(a)
    pairs = associate_stamps(a.stamps, b.stamps, tol)
    if len(pairs) == 0:
        raise ValueError("no associations")
    return pairs


def average_trajectories(fwd: Trajectory, bwd: Trajectory, tol: float | None = None) -> Trajectory:
    """Average matched forward/backward poses.

    Positions are averaged arithmetically and rotations by their geodesic
    midpoint; output stamps are the forward ones.
    """
    pairs = associate_by_time(fwd, bwd, tol)
    i, j = pairs[:, 0], pairs[:, 1]
    R = np.stack([geodesic_midpoint(fwd.rotations[a], bwd.rotations[b]) for a, b in zip(i, j)])
    p = 0.5 * (fwd.positions[i] + bwd.positions[j])
    return Trajectory(fwd.stamps[i], R, p)


@dataclass
class DeviationStats:
    median_dp: float
    max_dp: float
    median_dR: float
    max_dR: float
    per_pose: np.ndarray = field(repr=False)  # columns: t, dp [m], dR [deg]

    def as_row(self):
        return [self.median_dp, self.max_dp, self.median_dR, self.max_dR]


def _stats(rows) -> DeviationStats:
    rows = np.asarray(rows, dtype=float).reshape(-1, 3)
    return DeviationStats(
        median_dp=float(np.median(rows[:, 1])),
        max_dp=float(rows[:, 1].max()),
        median_dR=float(np.median(rows[:, 2])),
        max_dR=float(rows[:, 2].max()),
        per_pose=rows,
    )


def deviation_stats(pass_: Trajectory, reference: Trajectory, tol: float | None = None) -> DeviationStats:
    """Position and rotation deviation magnitudes of ``pass_`` from ``reference``."""
    pairs = associate_by_time(pass_, reference, tol)
    i, j = pairs[:, 0], pairs[:, 1]
    dp = np.linalg.norm(pass_.positions[i] - reference.positions[j], axis=1)
    rel = np.einsum("nji,njk->nik", pass_.rotations[i], reference.rotations[j])
    dR = np.degrees(np.linalg.norm(so3_log(rel), axis=1))
    return _stats(np.column_stack([pass_.stamps[i], dp, dR]))


def forward_backward_report(fwd: Trajectory, bwd: Trajectory, tol: float | None = None):
    """Average the two passes and report deviations of each from the average.

    Returns ``(average, {"forward": ..., "backward": ..., "pooled": ...})``.
    """
    avg = average_trajectories(fwd, bwd, tol)
    f = deviation_stats(fwd, avg, tol)
    b = deviation_stats(bwd, avg, tol)
    pooled = _stats(np.vstack([f.per_pose, b.per_pose]))
    return avg, {"forward": f, "backward": b, "pooled": pooled}


def align_rigid(src, dst):
    """Least-squares ``R, t`` with ``dst ~= R src + t`` (no scale).

    Returns ``(R, t, weak)``; ``weak`` is set when the points are collinear,
    leaving rotation about the line undetermined.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xd, compute_uv=False)
    weak = len(src) < 3 or sv[1] <= 1e-9 * max(1.0, sv[0])
    U, _, Vt = np.linalg.svd(xd.T @ xs)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s, bool(weak)


def ate_rmse(
    estimate: Trajectory,
    reference: Trajectory,
    tol: float | None = None,
    align: str = "rigid",
) -> float:
    """Absolute trajectory error (RMSE of position residuals, meters)."""
    if align not in ("none", "rigid"):
        raise ValueError(f"unknown alignment {align!r}")
    if tol is None:
        tol = default_tolerance(reference)
    pairs = associate_by_time(estimate, reference, tol)
    est = estimate.positions[pairs[:, 0]]
    ref = reference.positions[pairs[:, 1]]
    if align == "rigid":
        if len(pairs) < 3:
            raise ValueError("rigid alignment needs at least three associations")
        R, t, weak = align_rigid(est, ref)
        if weak:
            warnings.warn("weak alignment", WeakAlignmentWarning, stacklevel=2)
        est = est @ R.T + t
    return float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


@dataclass
class PlaceQueryResult:
    rankings: np.ndarray  # (Q, |db|) database indices, nearest first
    recall_at: dict
    evaluable: np.ndarray  # bool per query


def heading_difference(a, b):
    """Absolute circular difference in degrees, in ``[0, 180]``."""
    d = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float) + 180.0) % 360.0 - 180.0
    return np.abs(d)


def heading_deg(R) -> float:
    return math.degrees(yaw_of(R))


def resolve_k(k, db_size: int) -> int:
    """``k`` is an int or ``"1%"`` (one percent of the database, rounded up)."""
    if isinstance(k, str):
        if k.strip() != "1%":
            raise ValueError(f"unsupported K {k!r}")
        return max(1, math.ceil(0.01 * db_size))
    k = int(k)
    if k < 1 or k > db_size:
        raise ValueError("K must lie in [1, database size]")
    return k


def recall_at_k(
    db,
    queries,
    K_list=(1, 5, 10),
    pos_threshold: float = 9.0,
    heading_threshold: float = 30.0,
) -> PlaceQueryResult:
    """Recall@K of descriptor retrieval.

    ``db`` and ``queries`` are ``(descriptors, positions, headings_deg)``
    triples of arrays. A database entry is a true positive for a query when it lies within
    ``pos_threshold`` meters and ``heading_threshold`` degrees. Queries with
    no true positive anywhere in the database are left out of the
    denominator. Distance ties rank the lower database index first.
    """
    db_desc, db_pos, db_heading = db
    q_desc, q_pos, q_heading = queries
    db_desc = np.asarray(db_desc, dtype=float)
    q_desc = np.asarray(q_desc, dtype=float)
    if db_desc.ndim != 2 or q_desc.ndim != 2 or db_desc.shape[1] != q_desc.shape[1]:
        raise ValueError("descriptor dimensions differ")
    db_pos = np.asarray(db_pos, dtype=float).reshape(len(db_desc), -1)
    q_pos = np.asarray(q_pos, dtype=float).reshape(len(q_desc), -1)

    dist = np.linalg.norm(q_desc[:, None, :] - db_desc[None, :, :], axis=2)
    rankings = np.argsort(dist, axis=1, kind="stable")
    near = np.linalg.norm(q_pos[:, None, :] - db_pos[None, :, :], axis=2) <= pos_threshold
    aligned = heading_difference(np.asarray(q_heading)[:, None], np.asarray(db_heading)[None, :]) <= heading_threshold
    positive = near & aligned
    evaluable = positive.any(axis=1)
    if not evaluable.any():
        raise ValueError("no evaluable queries")

    ranked_pos = np.take_along_axis(positive, rankings, axis=1)
    first_hit = np.where(ranked_pos.any(axis=1), ranked_pos.argmax(axis=1), len(db_desc))
    recall = {}
    for k in K_list:
        kk = resolve_k(k, len(db_desc))
        recall[k] = float(np.mean(first_hit[evaluable] < kk))
    return PlaceQueryResult(rankings=rankings, recall_at=recall, evaluable=evaluable)
