"""Time offset and relative rotation between two 3D motion signals.

Pipeline: trim to the common span, Gaussian-smooth, resample both series on
a grid with the finer of the two mean intervals, cross-correlate the norm
sequences, refine the peak by a parabola, then associate the time-corrected
samples and refine the rotation with truncated least squares.

Sign convention: ``t_d`` is added to the stamps of series ``b`` to bring them
onto the time base of series ``a``. Equivalently, if ``b``'s clock lags
``a``'s by 0.2 s, ``t_d = +0.2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from .assoc import associate_stamps
from .geom import skew, so3_exp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimedVec3Series:
    stamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.stamps, dtype=float).reshape(-1)
        v = np.asarray(self.values, dtype=float).reshape(-1, 3)
        if len(t) != len(v):
            raise ValueError("stamps and values differ in length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("stamps must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("non-finite series entries")
        object.__setattr__(self, "stamps", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.stamps)

    @property
    def start(self) -> float:
        return float(self.stamps[0])

    @property
    def end(self) -> float:
        return float(self.stamps[-1])

    def mean_interval(self) -> float:
        if len(self) < 2:
            raise ValueError("need two samples for an interval")
        return (self.end - self.start) / (len(self) - 1)

    def norms(self):
        return np.linalg.norm(self.values, axis=1)

    def shifted(self, dt: float) -> "TimedVec3Series":
        return TimedVec3Series(self.stamps + dt, self.values)

    def rotated(self, R) -> "TimedVec3Series":
        return TimedVec3Series(self.stamps, self.values @ np.asarray(R).T)

    def between(self, lo: float, hi: float) -> "TimedVec3Series":
        m = (self.stamps >= lo) & (self.stamps <= hi)
        return TimedVec3Series(self.stamps[m], self.values[m])


@dataclass
class CorrelationConfig:
    M_a: int = 1
    M_b: int = 1
    tau: float | None = None  # None: half the resampling interval
    buffer: float = 1.0
    mask_first_peak: bool = False
    tls_threshold_scale: float = 3.0

    def __post_init__(self):
        for name in ("M_a", "M_b"):
            m = getattr(self, name)
            if int(m) != m or m < 1 or m % 2 == 0:
                raise ValueError(f"{name} must be an odd positive integer")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.buffer < 0:
            raise ValueError("buffer must be non-negative")


@dataclass
class CorrelationResult:
    t_d: float
    R_AB: np.ndarray
    peak_ratio: float
    per_axis_offsets: dict
    inlier_fraction: float
    delta_t: float
    d: float
    axes_consistent: bool = True
    warnings: list = field(default_factory=list)


def overlap_trim(a: TimedVec3Series, b: TimedVec3Series, buffer: float = 1.0):
    """Keep the common span of ``a`` and ``b`` plus ``buffer`` at both ends."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty series")
    start, end = max(a.start, b.start), min(a.end, b.end)
    if start > end:
        raise ValueError("no temporal overlap")
    lo, hi = start - buffer, end + buffer
    return a.between(lo, hi), b.between(lo, hi)


def gaussian_weights(window: int):
    if window == 1:
        return np.ones(1)
    sigma = (window - 1) / 4.0
    k = np.arange(window) - (window - 1) / 2.0
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth(s: TimedVec3Series, window: int) -> TimedVec3Series:
    """Trailing Gaussian-weighted moving average.

    Each output sample averages itself and the ``window - 1`` samples before
    it, so the smoothed signal lags by ``(window - 1) / 2`` samples; the
    correlation offset formula removes that lag. The first few samples use
    the truncated, renormalized window.
    """
    if int(window) != window or window < 1:
        raise ValueError("window must be a positive integer")
    if window % 2 == 0:
        raise ValueError("window must be odd")
    if window > len(s):
        raise ValueError("window longer than series")
    if window == 1:
        return s
    w = gaussian_weights(window)
    v = s.values
    out = np.zeros_like(v)
    norm = np.zeros(len(v))
    for k, wk in enumerate(w):
        lag = window - 1 - k
        out[lag:] += wk * v[: len(v) - lag]
        norm[lag:] += wk
    return TimedVec3Series(s.stamps, out / norm[:, None])


def resample_cubic(s: TimedVec3Series, sample_times) -> TimedVec3Series:
    """Cubic-spline interpolation of each component at ``sample_times``.

    Uses not-a-knot end conditions, which reproduce cubic polynomials exactly.
    """
    if len(s) < 4:
        raise ValueError("too few points for cubic fit")
    t = np.asarray(sample_times, dtype=float).reshape(-1)
    if len(t) and (t.min() < s.start or t.max() > s.end):
        raise ValueError("resample out of range")
    spline = CubicSpline(s.stamps, s.values, axis=0)
    return TimedVec3Series(t, spline(t))


def make_grid(start: float, end: float, dt: float):
    n = int(np.floor((end - start) / dt + 1e-9)) + 1
    # Clamp roundoff overshoot of the last sample.
    return np.minimum(start + dt * np.arange(n), end)


def _grid_step(s: TimedVec3Series) -> float:
    return s.mean_interval()


def _peak_lobe(c, k):
    half = 0.5 * c[k]
    lo = k
    while lo > 0 and c[lo - 1] >= half:
        lo -= 1
    hi = k
    while hi < len(c) - 1 and c[hi + 1] >= half:
        hi += 1
    return lo, hi


def _local_maxima(c, excluded):
    idx = np.arange(1, len(c) - 1)
    m = (c[idx] > c[idx - 1]) & (c[idx] >= c[idx + 1]) & ~excluded[idx]
    return idx[m]


def correlation_peak(x, y, mask_first_peak: bool = False):
    """Sub-sample lag ``d`` maximizing ``sum_n x[n + d] y[n]`` (zero-meaned).

    Returns ``(d, peak_ratio)`` where ``peak_ratio`` compares the chosen peak
    with the highest other local maximum outside its lobe.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x0 = x - x.mean()
    y0 = y - y.mean()
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0 or not np.any(x0) or not np.any(y0):
        raise ValueError("degenerate signal")
    c = signal.correlate(x0, y0, mode="full")
    lags = signal.correlation_lags(len(x0), len(y0), mode="full")

    excluded = np.zeros(len(c), dtype=bool)
    k = int(np.argmax(c))
    if mask_first_peak:
        lo, hi = _peak_lobe(c, k)
        excluded[lo : hi + 1] = True
        cands = _local_maxima(c, excluded)
        if len(cands) == 0:
            raise ValueError("no secondary peak to fall back on")
        k = int(cands[np.argmax(c[cands])])
    if k == 0 or k == len(c) - 1:
        raise ValueError("peak at edge")

    lo, hi = _peak_lobe(c, k)
    excluded[lo : hi + 1] = True
    others = _local_maxima(c, excluded)
    second = c[others].max() if len(others) else 0.0
    ratio = float(c[k] / second) if second > 0 else float("inf")

    denom = c[k - 1] - 2.0 * c[k] + c[k + 1]
    frac = 0.5 * (c[k - 1] - c[k + 1]) / denom if denom < 0 else 0.0
    return float(lags[k] + frac), ratio


def offset_from_lag(d, delta_t, s1, t1, M_a, M_b) -> float:
    """``t_d = d dt + s'_1 - t'_1 + (M_b - M_a) dt / 2``."""
    return d * delta_t + s1 - t1 + (M_b - M_a) * delta_t / 2


def correlate_offset(a: TimedVec3Series, b: TimedVec3Series, cfg: CorrelationConfig):
    """Offset from the norm cross-correlation of two resampled series.

    Both series must share the same sampling step. Returns
    ``(d, t_d, peak_ratio)``.
    """
    if len(a) < 3 or len(b) < 3:
        raise ValueError("series too short to correlate")
    dt = _grid_step(a)
    if not np.isclose(_grid_step(b), dt, rtol=1e-6, atol=0.0):
        raise ValueError("series are not on a common grid")
    d, ratio = correlation_peak(a.norms(), b.norms(), cfg.mask_first_peak)
    return d, offset_from_lag(d, dt, a.start, b.start, cfg.M_a, cfg.M_b), ratio


def associate_series(a: TimedVec3Series, b: TimedVec3Series, tau: float):
    pairs = associate_stamps(a.stamps, b.stamps, tau)
    return a.values[pairs[:, 0]], b.values[pairs[:, 1]]


def refine_rotation_tls(
    a: TimedVec3Series,
    b_corrected: TimedVec3Series,
    R0,
    tau: float,
    threshold_scale: float = 3.0,
    max_iters: int = 20,
):
    """Refine ``R_AB`` so that ``v_a ~= R_AB v_b`` over time-associated pairs.

    Each iteration keeps pairs whose residual norm is at most
    ``threshold_scale`` times the median, solves the linearized system for a
    left perturbation ``dtheta`` and applies ``R <- Exp(dtheta) R``.
    Returns ``(R_AB, inlier_fraction)``.
    """
    va, vb = associate_series(a, b_corrected, tau)
    if len(va) < 3:
        raise ValueError("insufficient associations")
    R = np.array(R0, dtype=float)
    for _ in range(max_iters):
        Rb = vb @ R.T
        res = va - Rb
        norms = np.linalg.norm(res, axis=1)
        inl = norms <= max(threshold_scale * np.median(norms), 1e-12)
        if inl.sum() < 3:
            raise ValueError("insufficient associations")
        # Exp(d) R v ~= R v - [R v]x d
        A = -skew(Rb[inl]).reshape(-1, 3)
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[-1] <= 1e-10 * sv[0]:
            raise ValueError("degenerate geometry")
        delta = np.linalg.lstsq(A, res[inl].reshape(-1), rcond=None)[0]
        R = so3_exp(delta) @ R
        if np.linalg.norm(delta) < 1e-8:
            break
    norms = np.linalg.norm(va - vb @ R.T, axis=1)
    inl = norms <= max(threshold_scale * np.median(norms), 1e-12)
    return R, float(inl.mean())


def run_correlation(
    a: TimedVec3Series,
    b: TimedVec3Series,
    R0=None,
    cfg: CorrelationConfig | None = None,
) -> CorrelationResult:
    """Estimate ``t_d`` and ``R_AB`` between ``a`` and ``b``.

    ``R0`` is the nominal rotation taking ``b``'s vectors into ``a``'s frame.
    Per-axis offsets (norm, x, y, z, with ``b`` rotated by ``R0``) are
    reported for failure screening; a spread above three resampling steps
    sets ``axes_consistent = False`` without raising.
    """
    cfg = cfg or CorrelationConfig()
    R0 = np.eye(3) if R0 is None else np.asarray(R0, dtype=float)

    a_t, b_t = overlap_trim(a, b, cfg.buffer)
    a_s = gaussian_smooth(a_t, cfg.M_a)
    b_s = gaussian_smooth(b_t, cfg.M_b)
    dt = min(a_t.mean_interval(), b_t.mean_interval())
    a_r = resample_cubic(a_s, make_grid(a_s.start, a_s.end, dt))
    b_r = resample_cubic(b_s, make_grid(b_s.start, b_s.end, dt))

    d, t_d, ratio = correlate_offset(a_r, b_r, cfg)

    axis_offsets = {"norm": t_d}
    b_rot = b_r.values @ R0.T
    for i, name in enumerate("xyz"):
        try:
            da, _ = correlation_peak(a_r.values[:, i], b_rot[:, i], cfg.mask_first_peak)
            axis_offsets[name] = offset_from_lag(da, dt, a_r.start, b_r.start, cfg.M_a, cfg.M_b)
        except ValueError:
            axis_offsets[name] = float("nan")

    warnings = []
    finite = np.array([v for v in axis_offsets.values() if np.isfinite(v)])
    consistent = bool(np.ptp(finite) <= 3.0 * dt)
    if not consistent:
        warnings.append("inconsistent axis offsets")
        log.warning("axis offsets disagree: %s", axis_offsets)

    tau = cfg.tau if cfg.tau is not None else dt / 2.0
    R, inlier_fraction = refine_rotation_tls(a_t, b_t.shifted(t_d), R0, tau, cfg.tls_threshold_scale)
    return CorrelationResult(
        t_d=t_d,
        R_AB=R,
        peak_ratio=ratio,
        per_axis_offsets=axis_offsets,
        inlier_fraction=inlier_fraction,
        delta_t=dt,
        d=d,
        axes_consistent=consistent,
        warnings=warnings,
    )
