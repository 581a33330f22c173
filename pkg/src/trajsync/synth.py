"""Synthetic scenarios with closed-form ground truth.

Translation and ZYX Euler angles (roll, pitch, yaw) are sums of sinusoids
plus an optional constant-velocity term, so every derivative the kinematic
operators need exists analytically. Random draws use Philox, a
counter-based 64-bit generator, with one independent stream per
measurement channel so adding a channel never perturbs the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, Trajectory, rot_x, rot_y, rot_z, so3_exp
from .kinematics import Extrinsics, RadarScan
from .reversal import MessageStream, imu_stream_from_arrays

GRAVITY = 9.81

# Fixed per-channel stream ids so every channel draws from its own sequence.
_CHANNELS = {"imu": 1, "pose": 2, "radar": 3, "clock": 4}


def rng_for(seed: int, channel: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), _CHANNELS[channel]])))


def _zero_terms():
    return [[], [], []]


@dataclass
class ClockModel:
    offset: float = 0.0
    drift: float = 0.0
    jitter_mean: float = 0.0  # mean of the exponential delay, seconds


@dataclass
class ScenarioConfig:
    """Scenario description.

    ``translation`` and ``rotation`` hold, per axis, a list of
    ``(amplitude, frequency_hz, phase_rad)`` terms. Rotation axes are roll,
    pitch and yaw of a ZYX Euler parameterization.
    """

    duration: float = 20.0
    seed: int = 0
    translation: list = field(default_factory=_zero_terms)
    rotation: list = field(default_factory=_zero_terms)
    linear_velocity: tuple = (0.0, 0.0, 0.0)
    rates: dict = field(default_factory=lambda: {"imu": 100.0, "pose": 10.0, "radar": 10.0})
    clock: ClockModel = field(default_factory=ClockModel)
    noise: dict = field(default_factory=dict)
    outliers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if any(not r > 0 for r in self.rates.values()):
            raise ValueError("rates must be positive")
        if any(not 0.0 <= f < 1.0 for f in self.outliers.values()):
            raise ValueError("outlier fraction must lie in [0, 1)")
        if isinstance(self.clock, dict):
            self.clock = ClockModel(**self.clock)
        self.translation = [[tuple(map(float, term)) for term in axis] for axis in self.translation]
        self.rotation = [[tuple(map(float, term)) for term in axis] for axis in self.rotation]
        if len(self.translation) != 3 or len(self.rotation) != 3:
            raise ValueError("need sinusoid terms for three axes")

    def sigma(self, channel: str) -> float:
        return float(self.noise.get(channel, 0.0))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "clock" in d:
            d["clock"] = ClockModel(**d["clock"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "duration": self.duration,
            "seed": self.seed,
            "translation": [[list(t) for t in axis] for axis in self.translation],
            "rotation": [[list(t) for t in axis] for axis in self.rotation],
            "linear_velocity": list(self.linear_velocity),
            "rates": dict(self.rates),
            "clock": vars(self.clock).copy(),
            "noise": dict(self.noise),
            "outliers": dict(self.outliers),
        }


def _sum_sines(terms, t, order):
    """``order``-th time derivative of ``sum A sin(2 pi f t + phi)``."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for A, f, phi in terms:
        w = 2.0 * np.pi * f
        arg = w * t + phi
        # d^n/dt^n sin(x) = sin(x + n pi/2)
        out = out + A * w**order * np.sin(arg + order * np.pi / 2.0)
    return out


class AnalyticTrajectory:
    """Closed-form pose and derivatives of a :class:`ScenarioConfig`."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self._v0 = np.asarray(cfg.linear_velocity, dtype=float)

    def position(self, t):
        t = np.asarray(t, dtype=float)
        p = np.stack([_sum_sines(ax, t, 0) for ax in self.cfg.translation], axis=-1)
        return p + t[..., None] * self._v0

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([_sum_sines(ax, t, 1) for ax in self.cfg.translation], axis=-1) + self._v0

    def acceleration(self, t):
        return np.stack([_sum_sines(ax, t, 2) for ax in self.cfg.translation], axis=-1)

    def euler(self, t, order: int = 0):
        """Roll, pitch, yaw (or their ``order``-th derivatives)."""
        return np.stack([_sum_sines(ax, t, order) for ax in self.cfg.rotation], axis=-1)

    def rotation(self, t):
        e = np.atleast_2d(self.euler(np.atleast_1d(t)))
        R = np.stack([rot_z(y) @ rot_y(p) @ rot_x(r) for r, p, y in e])
        return R if np.ndim(t) else R[0]

    def angular_velocity(self, t):
        """Body-frame angular rate."""
        e = self.euler(t)
        ed = self.euler(t, 1)
        r, p = e[..., 0], e[..., 1]
        rd, pd, yd = ed[..., 0], ed[..., 1], ed[..., 2]
        return np.stack(
            [
                rd - yd * np.sin(p),
                pd * np.cos(r) + yd * np.sin(r) * np.cos(p),
                -pd * np.sin(r) + yd * np.cos(r) * np.cos(p),
            ],
            axis=-1,
        )

    def specific_force(self, t):
        """Accelerometer reading in the body frame (gravity along -z)."""
        R = self.rotation(np.atleast_1d(t))
        a = np.atleast_2d(self.acceleration(np.atleast_1d(t))) + np.array([0.0, 0.0, GRAVITY])
        f = np.einsum("nji,nj->ni", R, a)
        return f if np.ndim(t) else f[0]

    def sample(self, stamps) -> Trajectory:
        stamps = np.asarray(stamps, dtype=float)
        return Trajectory(stamps, self.rotation(stamps), self.position(stamps))


def generate_truth(cfg: ScenarioConfig) -> AnalyticTrajectory:
    return AnalyticTrajectory(cfg)


def sample_times(cfg: ScenarioConfig, channel: str, start: float = 0.0) -> np.ndarray:
    dt = 1.0 / cfg.rates[channel]
    n = int(np.floor((cfg.duration - start) / dt + 1e-9)) + 1
    return start + dt * np.arange(n)


def sample_imu(truth: AnalyticTrajectory, cfg: ScenarioConfig, stamp_offset: float = 0.0) -> MessageStream:
    """IMU stream; ``stamp_offset`` is added to the reported stamps."""
    t = sample_times(cfg, "imu")
    rng = rng_for(cfg.seed, "imu")
    gyro = truth.angular_velocity(t) + cfg.sigma("gyro") * rng.standard_normal((len(t), 3))
    accel = truth.specific_force(t) + cfg.sigma("accel") * rng.standard_normal((len(t), 3))
    return imu_stream_from_arrays(t + stamp_offset, gyro, accel)


def sample_poses(truth: AnalyticTrajectory, cfg: ScenarioConfig, stamp_offset: float = 0.0) -> Trajectory:
    """Noisy pose measurements; rotation noise is a left perturbation."""
    t = sample_times(cfg, "pose")
    rng = rng_for(cfg.seed, "pose")
    R = truth.rotation(t)
    p = truth.position(t)
    sr, sp_ = cfg.sigma("rotation"), cfg.sigma("position")
    if sr > 0:
        R = so3_exp(sr * rng.standard_normal((len(t), 3))) @ R
    if sp_ > 0:
        p = p + sp_ * rng.standard_normal((len(t), 3))
    return Trajectory(t + stamp_offset, R, p)


def sensor_velocity(truth: AnalyticTrajectory, t, ext: Extrinsics | None = None):
    """Velocity of a body-fixed sensor expressed in its own frame."""
    ext = ext or Extrinsics()
    R = truth.rotation(np.atleast_1d(t))
    v = np.einsum("nji,nj->ni", R, np.atleast_2d(truth.velocity(np.atleast_1d(t))))
    v = v + np.cross(np.atleast_2d(truth.angular_velocity(np.atleast_1d(t))), ext.p_IS)
    return v @ np.asarray(ext.R_IS)


def shell_points(rng, n: int, r_min: float = 5.0, r_max: float = 50.0):
    """Points uniform by volume in the spherical shell ``[r_min, r_max]``."""
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = np.cbrt(rng.uniform(r_min**3, r_max**3, n))
    return d * r[:, None]


def sample_radar(
    truth: AnalyticTrajectory,
    cfg: ScenarioConfig,
    landmark_count: int = 60,
    ext: Extrinsics | None = None,
) -> list[RadarScan]:
    """Radar scans of static landmarks plus returns from one moving object.

    A fraction ``outliers["doppler"]`` of the points per scan belongs to an
    object moving at 2-10 m/s in a random direction.
    """
    rng = rng_for(cfg.seed, "radar")
    t = sample_times(cfg, "radar")
    v_s = sensor_velocity(truth, t, ext)
    frac = float(cfg.outliers.get("doppler", 0.0))
    sigma = cfg.sigma("doppler")
    scans = []
    for k, tk in enumerate(t):
        pts = shell_points(rng, landmark_count)
        u = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        dop = -u @ v_s[k]
        n_out = int(round(frac * landmark_count))
        if n_out:
            obj = rng.standard_normal(3)
            obj *= rng.uniform(2.0, 10.0) / np.linalg.norm(obj)
            idx = rng.choice(landmark_count, n_out, replace=False)
            dop[idx] = -u[idx] @ (v_s[k] - obj)
        dop = dop + sigma * rng.standard_normal(landmark_count)
        scans.append(RadarScan(float(tk), pts, dop, rng.uniform(0.0, 1.0, landmark_count)))
    return scans


def sample_clock(truth_times, cfg: ScenarioConfig) -> np.ndarray:
    """``(N, 2)`` pairs ``(sensor_time, host_time)`` under the clock model.

    ``host = sensor (1 + drift) + offset + jitter`` with one-sided
    exponential jitter.
    """
    s = np.asarray(truth_times, dtype=float)
    c = cfg.clock
    jitter = np.zeros(len(s))
    if c.jitter_mean > 0:
        jitter = rng_for(cfg.seed, "clock").exponential(c.jitter_mean, len(s))
    return np.column_stack([s, s * (1.0 + c.drift) + c.offset + jitter])


def strapdown(t, gyro, accel, R0, p0, v0, gravity: float = GRAVITY):
    """Integrate IMU samples from an initial state.

    Second-order, time-symmetric scheme: rotation uses the interval mean
    rate, velocity and position the trapezoidal rule. Returns
    :class:`Trajectory` at the sample stamps.
    """
    t = np.asarray(t, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    accel = np.asarray(accel, dtype=float)
    g = np.array([0.0, 0.0, -gravity])
    n = len(t)
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    R[0], p[0] = R0, p0
    v = np.asarray(v0, dtype=float)
    a_prev = R[0] @ accel[0] + g
    for k in range(n - 1):
        dt = t[k + 1] - t[k]
        R[k + 1] = R[k] @ so3_exp(0.5 * (gyro[k] + gyro[k + 1]) * dt)
        a_next = R[k + 1] @ accel[k + 1] + g
        v_next = v + 0.5 * (a_prev + a_next) * dt
        p[k + 1] = p[k] + 0.5 * (v + v_next) * dt
        v, a_prev = v_next, a_next
    return Trajectory(t, R, p)


def pose_at(truth: AnalyticTrajectory, t: float) -> Pose:
    return Pose(truth.rotation(float(t)), truth.position(float(t)))


def default_scenario(seed: int = 0, duration: float = 20.0, **overrides) -> ScenarioConfig:
    """A moderately exciting vehicle-like scenario used by tests and the CLI."""
    base = dict(
        duration=duration,
        seed=seed,
        translation=[
            [(8.0, 0.05, 0.0), (0.5, 0.31, 1.0)],
            [(6.0, 0.07, 0.5), (0.4, 0.27, 0.3)],
            [(0.5, 0.11, 0.2)],
        ],
        rotation=[
            [(0.05, 0.37, 0.1), (0.02, 1.3, 0.7)],
            [(0.04, 0.29, 0.9), (0.02, 1.1, 0.2)],
            [(0.6, 0.06, 0.0), (0.1, 0.43, 1.2), (0.03, 1.7, 2.0)],
        ],
        linear_velocity=(2.0, 0.0, 0.0),
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def loop_pose_graph(
    n: int = 100,
    seed: int = 0,
    radius: float = 20.0,
    rot_sigma: float = np.radians(1.0),
    trans_sigma: float = 0.05,
    anchors=(0, -1),
    init: str = "odometry",
):
    """Pose graph on a circular loop with noisy odometry and absolute-pose anchors.

    Returns ``(graph, truth)``; the graph's nodes hold the initial guess,
    which is dead-reckoned odometry from the first anchor (``"odometry"``)
    or all-identity poses (``"identity"``).
    """
    from .pgo import AbsPoseEdge, PoseGraph, RelPoseEdge

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 5])))
    ang = np.linspace(0.0, 2.0 * np.pi * (n - 1) / n, n)
    pos = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), 0.5 * np.sin(3.0 * ang)])
    R = np.stack([rot_z(a + np.pi / 2) @ rot_x(0.05 * np.sin(5 * a)) for a in ang])
    truth = Trajectory(np.arange(n, dtype=float), R, pos)
    poses = [Pose(R[k], pos[k]) for k in range(n)]
    edges, odo = [], []
    for k in range(n - 1):
        rel = poses[k].inverse() @ poses[k + 1]
        noisy = Pose(so3_exp(rot_sigma * rng.standard_normal(3)) @ rel.R, rel.p + trans_sigma * rng.standard_normal(3))
        odo.append(noisy)
        edges.append(RelPoseEdge(k, k + 1, noisy))
    idx = [a % n for a in anchors]
    for a in idx:
        edges.append(AbsPoseEdge(a, poses[a]))
    if init == "odometry":
        T = poses[idx[0]] if idx else Pose()
        Rs, ps = [T.R], [T.p]
        for dT in odo:
            T = T @ dT
            Rs.append(T.R)
            ps.append(T.p)
        nodes = Trajectory(truth.stamps, np.stack(Rs), np.stack(ps))
    elif init == "identity":
        nodes = Trajectory(truth.stamps, np.tile(np.eye(3), (n, 1, 1)), np.zeros((n, 3)))
    else:
        raise ValueError(f"unknown init {init!r}")
    return PoseGraph(nodes, edges), truth
