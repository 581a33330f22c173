"""Clock mapping from sensor time to host time and on to GNSS time.

Every message carries a sensor-clock stamp and a host-clock arrival stamp.
Transmission delay only ever adds to the host stamp, so the minimal-delay
envelope of the ``(sensor_time, host_time)`` scatter is its lower convex
hull. Evaluating that hull gives the de-jittered ("smooth") host time of a
message. A hardware-synchronized bridge stream (lidar stamped in GNSS time)
then maps smooth host time onto GNSS time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


@dataclass(frozen=True)
class ClockMap:
    """Monotone piecewise-linear map defined by its vertices.

    Outside the vertex span the first/last segment slopes are extended.
    """

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
            raise ValueError("a clock map needs at least two vertices")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("clock map vertices must have increasing x")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def vertices(self):
        return np.column_stack([self.xs, self.ys])

    @property
    def slopes(self):
        return np.diff(self.ys) / np.diff(self.xs)

    def __call__(self, x):
        return eval_map(self, x)


def eval_map(cmap: ClockMap, sensor_time):
    """Evaluate ``cmap`` at scalar or array ``sensor_time``."""
    x = np.asarray(sensor_time, dtype=float)
    xs, ys = cmap.xs, cmap.ys
    # Segment index per query, clamped so the end segments extrapolate.
    k = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    x0, x1 = xs[k], xs[k + 1]
    y0, y1 = ys[k], ys[k + 1]
    out = y0 + (y1 - y0) * ((x - x0) / (x1 - x0))
    # Exact at the vertices themselves.
    out = np.where(x == x1, y1, out)
    out = np.where(x == x0, y0, out)
    return float(out) if out.ndim == 0 else out


class HullBuilder:
    """Causal lower-hull construction, one ``(sensor, host)`` pair at a time.

    Sensor times must arrive strictly increasing. Each append pops only
    trailing vertices, so earlier vertices are final once a later vertex
    supports the hull (Andrew's monotone chain, lower half).
    """

    def __init__(self):
        self._xs: list[float] = []
        self._ys: list[float] = []
        self._last_x = -np.inf

    def __len__(self):
        return len(self._xs)

    def append(self, sensor_time: float, host_time: float) -> None:
        x, y = float(sensor_time), float(host_time)
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ValueError("non-finite time pair")
        if x <= self._last_x:
            raise ValueError("non-monotone sensor clock")
        self._last_x = x
        xs, ys = self._xs, self._ys
        while len(xs) >= 2 and _cross((xs[-2], ys[-2]), (xs[-1], ys[-1]), (x, y)) <= 0.0:
            xs.pop()
            ys.pop()
        xs.append(x)
        ys.append(y)

    def extend(self, pairs) -> None:
        for s, h in pairs:
            self.append(s, h)

    def to_map(self) -> ClockMap:
        if len(self._xs) < 2:
            raise ValueError("insufficient pairs")
        return ClockMap(np.array(self._xs), np.array(self._ys))


def build_hull_map(pairs) -> ClockMap:
    """Lower convex hull of ``(sensor_time, host_time)`` pairs.

    ``pairs`` is an ``(N, 2)`` array-like. Collinear interior points are
    dropped, so a zero-jitter stream yields just its two endpoints.
    """
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(pairs) < 2:
        raise ValueError("insufficient pairs")
    if np.any(np.diff(pairs[:, 0]) <= 0):
        raise ValueError("non-monotone sensor clock")
    builder = HullBuilder()
    builder.extend(pairs)
    return builder.to_map()


def build_bridge_map(lidar_smooth_host, lidar_gnss) -> ClockMap:
    """Piecewise-linear interpolant from smooth host time to GNSS time."""
    h = np.asarray(lidar_smooth_host, dtype=float).reshape(-1)
    g = np.asarray(lidar_gnss, dtype=float).reshape(-1)
    if h.shape != g.shape:
        raise ValueError("bridge inputs differ in length")
    if len(h) < 2:
        raise ValueError("insufficient pairs")
    if np.any(np.diff(h) <= 0) or np.any(np.diff(g) <= 0):
        raise ValueError("non-monotone bridge")
    return ClockMap(h, g)


def bridge_from_lidar_pairs(gnss_time, host_time) -> ClockMap:
    """Bridge map from a GNSS-stamped stream's own ``(gnss, host)`` pairs.

    The stream's host stamps are smoothed by its hull map first, then paired
    with the GNSS stamps.
    """
    gnss_time = np.asarray(gnss_time, dtype=float)
    hull = build_hull_map(np.column_stack([gnss_time, host_time]))
    return build_bridge_map(eval_map(hull, gnss_time), gnss_time)


def to_gnss_time(topic_map, bridge: ClockMap, sensor_time, host_time=None):
    """GNSS time of a message: ``bridge(topic_map(sensor_time))``.

    ``topic_map`` may be a finished :class:`ClockMap`, or a
    :class:`HullBuilder` fed causally. In the causal case the newest pair is
    always a hull vertex, so the smooth host time is taken from the hull
    built so far (extrapolated along its last segment), capped by the
    message's own host stamp; the pair is appended afterwards.
    """
    if isinstance(topic_map, HullBuilder):
        if host_time is None:
            raise ValueError("causal mapping needs the host time")
        smooth = float(host_time)
        if len(topic_map) >= 2:
            smooth = min(smooth, eval_map(topic_map.to_map(), sensor_time))
        topic_map.append(sensor_time, host_time)
        return eval_map(bridge, smooth)
    return eval_map(bridge, eval_map(topic_map, sensor_time))
