"""Time reversal of sensor message streams for backward localization.

Every stamp ``t`` becomes ``2 t_max - t``, gyro readings flip sign and
accelerometer readings stay as they are. A strapdown integrator fed the
reversed stream then retraces the forward path backwards in space, provided
it starts from the forward end state with its velocity negated (the caller's
job).

Stamps are held as integer nanoseconds so reversal is exact: reversing a
reversed stream about the same ``t_max`` restores every stamp bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Union

import numpy as np

from .geom import Pose, StampedPose

NS = 1_000_000_000
# Lidar point stamps lie within this window of their frame stamp.
POINT_WINDOW_NS = 200_000_000


def seconds_to_ns(t) -> int:
    """Nearest integer nanosecond to a float, ``Decimal`` or string value."""
    if isinstance(t, (int, np.integer)) and not isinstance(t, bool):
        return int(t) * NS
    with localcontext() as ctx:
        ctx.prec = 80
        return int((Decimal(t) * NS).to_integral_value())


def ns_to_seconds(ns: int) -> float:
    """Correctly rounded float seconds."""
    return float(Fraction(int(ns), NS))


def format_ns(ns: int) -> str:
    """Decimal seconds with exactly nine fractional digits."""
    sign = "-" if ns < 0 else ""
    q, r = divmod(abs(int(ns)), NS)
    return f"{sign}{q}.{r:09d}"


@dataclass(frozen=True)
class ImuRecord:
    t_ns: int
    gyro: tuple
    accel: tuple

    def __post_init__(self):
        object.__setattr__(self, "t_ns", int(self.t_ns))
        object.__setattr__(self, "gyro", tuple(float(x) for x in self.gyro))
        object.__setattr__(self, "accel", tuple(float(x) for x in self.accel))

    @property
    def t(self) -> float:
        return ns_to_seconds(self.t_ns)


@dataclass(frozen=True)
class CloudRecord:
    """Lidar frame. ``points`` optionally holds per-point attribute rows kept
    in step with ``point_stamps_ns``; ``payload`` is an opaque side-file
    reference carried through untouched except for the ``reversed`` flag."""

    t_ns: int
    point_stamps_ns: tuple = ()
    points: tuple | None = None
    payload: str | None = None
    reversed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "t_ns", int(self.t_ns))
        object.__setattr__(self, "point_stamps_ns", tuple(int(s) for s in self.point_stamps_ns))
        if self.points is not None:
            object.__setattr__(self, "points", tuple(tuple(float(x) for x in row) for row in self.points))

    @property
    def t(self) -> float:
        return ns_to_seconds(self.t_ns)


@dataclass(frozen=True)
class PoseRecord:
    t_ns: int
    position: tuple
    quat: tuple  # x, y, z, w

    def __post_init__(self):
        object.__setattr__(self, "t_ns", int(self.t_ns))
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        object.__setattr__(self, "quat", tuple(float(x) for x in self.quat))

    @property
    def t(self) -> float:
        return ns_to_seconds(self.t_ns)

    @property
    def pose(self) -> Pose:
        return Pose.from_quat(self.position, self.quat)


Record = Union[ImuRecord, CloudRecord, PoseRecord]


@dataclass(frozen=True)
class MessageStream:
    records: tuple = field(default_factory=tuple)

    def __post_init__(self):
        recs = tuple(self.records)
        object.__setattr__(self, "records", recs)
        stamps = [r.t_ns for r in recs]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("record times must be non-decreasing")
        for r in recs:
            if isinstance(r, CloudRecord):
                if r.points is not None and len(r.points) != len(r.point_stamps_ns):
                    raise ValueError("cloud points and point stamps differ in length")
                if any(abs(s - r.t_ns) > POINT_WINDOW_NS for s in r.point_stamps_ns):
                    raise ValueError("point stamp outside its frame window")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def max_stamp_ns(self) -> int:
        best = None
        for r in self.records:
            cand = r.t_ns
            if isinstance(r, CloudRecord) and r.point_stamps_ns:
                cand = max(cand, max(r.point_stamps_ns))
            best = cand if best is None else max(best, cand)
        if best is None:
            raise ValueError("empty stream")
        return best


def _reflect(t_ns: int, t_max_ns: int) -> int:
    return 2 * t_max_ns - t_ns


def _reverse_record(r: Record, t_max_ns: int) -> Record:
    t = _reflect(r.t_ns, t_max_ns)
    if isinstance(r, ImuRecord):
        return ImuRecord(t, tuple(-g for g in r.gyro), r.accel)
    if isinstance(r, CloudRecord):
        stamps = tuple(_reflect(s, t_max_ns) for s in reversed(r.point_stamps_ns))
        points = None if r.points is None else tuple(reversed(r.points))
        return replace(r, t_ns=t, point_stamps_ns=stamps, points=points, reversed=not r.reversed)
    if isinstance(r, PoseRecord):
        return replace(r, t_ns=t)
    raise TypeError(f"unknown record type {type(r).__name__}")


def reverse_stream(stream: MessageStream, t_max_ns: int | None = None):
    """Reverse ``stream`` in time. Returns ``(reversed_stream, t_max_ns)``.

    ``t_max_ns`` defaults to the largest message or point stamp. Passing the
    returned value back in undoes the reversal exactly.
    """
    if len(stream) == 0:
        raise ValueError("empty stream")
    if t_max_ns is None:
        t_max_ns = stream.max_stamp_ns()
    recs = tuple(_reverse_record(r, t_max_ns) for r in reversed(stream.records))
    return MessageStream(recs), t_max_ns


def restore_times(poses, t_max_ns: int) -> list[StampedPose]:
    """Map pose stamps from the reversed time base back to the original one.

    Stamps are rounded to the nanosecond before reflecting.
    """
    out = [StampedPose(ns_to_seconds(_reflect(seconds_to_ns(sp.t), t_max_ns)), sp.pose) for sp in poses]
    out.sort(key=lambda sp: sp.t)
    return out


def trim_tail(poses, duration: float) -> list[StampedPose]:
    """Drop poses later than ``last_stamp - duration``."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    poses = list(poses)
    if not poses:
        return []
    cutoff = poses[-1].t - duration
    return [sp for sp in poses if sp.t <= cutoff]


def imu_stream_from_arrays(t, gyro, accel) -> MessageStream:
    """Convenience constructor from float seconds and ``(N, 3)`` arrays."""
    recs = [
        ImuRecord(seconds_to_ns(float(ti)), tuple(map(float, g)), tuple(map(float, a)))
        for ti, g, a in zip(np.asarray(t, dtype=float), np.asarray(gyro), np.asarray(accel))
    ]
    return MessageStream(recs)


def imu_arrays(stream: MessageStream):
    """``(t, gyro, accel)`` arrays of the IMU records in ``stream``."""
    imu = [r for r in stream if isinstance(r, ImuRecord)]
    t = np.array([r.t for r in imu])
    g = np.array([r.gyro for r in imu], dtype=float).reshape(-1, 3)
    a = np.array([r.accel for r in imu], dtype=float).reshape(-1, 3)
    return t, g, a
