"""Excitation input, evaluation trajectories, smoothing filter, noise and stencils."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .errors import DomainError, SNRUndefined
from .lti_core import StateSpace, Trajectory, sample_signal, simulate

CYCLE_DURATION = 10.0

# (frequency Hz, amplitude) per excitation cycle
TABLE1_CYCLES: tuple[tuple[float, float], ...] = (
    (6, 0.75), (3, 0.5), (2, 0.5), (0.5, 0.5), (0.5, 0.3),
    (0.3, 0.3), (0.1, 0.3), (0.5, -0.3), (0.3, -0.3), (0.1, -0.3),
    (1, 0.25), (0.5, 0.25), (1, -0.1), (0.5, -0.05), (0.5, 0.1),
    (0.5, -0.1), (2, 0.25), (1, 0.1), (0.5, 0.05), (1, 0.5),
)

DERIVATIVE_CHANNELS = ("y", "y_dot", "y_ddot", "y_3", "y_4")


@dataclass(frozen=True)
class ExcitationSpec:
    cycles: tuple[tuple[float, float], ...] = TABLE1_CYCLES
    cycle_duration: float = CYCLE_DURATION

    @property
    def duration(self) -> float:
        return self.cycle_duration * len(self.cycles)

    @classmethod
    def from_file(cls, path) -> "ExcitationSpec":
        """Load ``cycles: [[f, alpha], ...]`` (and optionally ``cycle_duration``) from YAML."""
        data = yaml.safe_load(Path(path).read_text())
        if isinstance(data, list):
            data = {"cycles": data}
        cycles = tuple((float(f), float(a)) for f, a in data["cycles"])
        if not cycles:
            raise DomainError("excitation spec lists no cycles")
        return cls(cycles, float(data.get("cycle_duration", CYCLE_DURATION)))


@dataclass
class FilteredTrajectory:
    """Smoothed desired output and its first four derivatives.

    ``stages`` holds the intermediate low-pass outputs ``y1, y2, y3`` and the
    raw nominal signal ``y0`` as channels of one trajectory.
    """

    y_d: Trajectory
    y_d_dot: Trajectory
    y_d_ddot: Trajectory
    y_d_3: Trajectory
    y_d_4: Trajectory
    cutoff_a: float
    stages: Trajectory | None = None

    def derivative(self, order: int) -> np.ndarray:
        return (self.y_d, self.y_d_dot, self.y_d_ddot, self.y_d_3, self.y_d_4)[order]["y"]

    def stack(self) -> Trajectory:
        """All five signals as channels ``y, y_dot, y_ddot, y_3, y_4``."""
        cols = np.column_stack([self.derivative(j) for j in range(5)])
        return Trajectory(self.y_d.dt, DERIVATIVE_CHANNELS, cols, self.y_d.t0)


def _s_term(t):
    return np.select([(t >= 2) & (t < 4), (t >= 4) & (t < 6), (t >= 6) & (t < 8)], [1.0, -0.9, 0.5], 0.0)


def _r_term(t):
    t = np.where(t >= 9, 10.0 - t, t)
    return np.where(t < 1, 0.4 * t, 0.4)


def excitation_cycle(f: float, alpha: float, t):
    """One 10 s excitation cycle: chirp plus steps plus a ramp-hold-ramp."""
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > CYCLE_DURATION)):
        raise DomainError("excitation cycle is defined on 0 <= t <= 10")
    c = f / 10.0
    out = alpha * (4.0 * np.sin(np.pi * c * t**2) + _s_term(t) + _r_term(t))
    return out if out.ndim else float(out)


def excitation_function(spec: ExcitationSpec = ExcitationSpec()) -> Callable:
    """Continuous-time excitation ``u(t)`` for ``0 <= t <= duration``.

    Interior cycle boundaries belong to the following cycle; both sides
    vanish there anyway.
    """
    cycles = np.asarray(spec.cycles, dtype=float)
    L = spec.cycle_duration
    scale = CYCLE_DURATION / L

    def u(t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.floor(t / L).astype(int), 0, len(cycles) - 1)
        local = np.clip((t - idx * L) * scale, 0.0, CYCLE_DURATION)
        f, a = cycles[idx, 0], cycles[idx, 1]
        inside = (t >= 0) & (t <= spec.duration)
        val = a * (4.0 * np.sin(np.pi * (f / 10.0) * local**2) + _s_term(local) + _r_term(local))
        out = np.where(inside, val, 0.0)
        return out if out.ndim else float(out)

    return u


def excitation_signal(spec: ExcitationSpec = ExcitationSpec(), dt: float = 0.01) -> Trajectory:
    steps = spec.cycle_duration / dt
    if abs(steps - round(steps)) > 1e-9:
        raise DomainError("dt must divide the cycle duration")
    n = int(round(spec.duration / dt)) + 1
    t = dt * np.arange(n)
    return Trajectory(dt, ("u",), excitation_function(spec)(t))


def _piecewise(t, pieces):
    conds = [(t >= lo) & (t < hi) for lo, hi, _ in pieces]
    vals = [fn(t) for _, _, fn in pieces]
    return np.select(conds, vals, 0.0)


_NOMINAL = {
    1: lambda t: _piecewise(t, [
        (1, 3, lambda t: 0.4 * (t - 1)), (3, 6, lambda t: 0.8 + 0 * t), (6, 8, lambda t: 0.4 * (8 - t))]),
    2: lambda t: _piecewise(t, [
        (2, 3, lambda t: t - 2), (3, 5, lambda t: 3.7 - 0.9 * t),
        (5, 7, lambda t: t - 5.8), (7, 8, lambda t: 1.2 * (8 - t))]),
    3: lambda t: _piecewise(t, [
        (2, 4, lambda t: 1 + 0 * t), (4, 6, lambda t: -1 + 0 * t), (6, 8, lambda t: 1 + 0 * t)]),
    4: lambda t: _piecewise(t, [
        (1, 2.5, lambda t: 2 * (t - 1) / 3), (2.5, 4, lambda t: 2 * (4 - t) / 3),
        (4, 5, lambda t: 8 * (t - 4) / 15), (5, 6, lambda t: 8 * (6 - t) / 15),
        (6, 7.5, lambda t: 0.4 * (t - 6)), (7.5, 9, lambda t: 0.4 * (9 - t))]),
    5: lambda t: 0.001 * (t**3.2 - t**2),
    6: lambda t: np.sin(0.4 * np.pi * t) - 0.9 * np.sin(0.6 * np.pi * t) + 0.2 * np.sin(np.pi * t),
    7: lambda t: 1.5 * np.sin(0.7 * np.pi * t) - 0.5 * np.sin(0.4 * np.pi * t),
    8: lambda t: -0.5 * np.sin(0.3 * np.pi * t) - 0.6 * np.sin(0.7 * np.pi * t) + 0.2 * np.sin(1.2 * np.pi * t),
    9: lambda t: 0.7 * np.sin(0.26 * np.pi * t) + 0.3 * np.sin(1.3 * np.pi * t) - 0.2 * np.sin(1.4 * np.pi * t),
    10: lambda t: 0.35 * np.sin(t**1.5),
}


def nominal_trajectory(k: int, t):
    """Nominal (unfiltered) evaluation trajectory number ``k`` on ``[0, 10]``."""
    if k not in _NOMINAL:
        raise DomainError(f"trajectory index must be 1..10, got {k}")
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 10)):
        raise DomainError("nominal trajectories are defined on 0 <= t <= 10")
    out = np.asarray(_NOMINAL[k](t), dtype=float)
    return out if out.ndim else float(out)


def nominal_function(k: int) -> Callable:
    """``y0_k`` extended by zero outside ``[0, 10]`` (usable as a simulation input)."""
    if k not in _NOMINAL:
        raise DomainError(f"trajectory index must be 1..10, got {k}")

    def y0(t):
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t <= 10)
        out = np.where(inside, _NOMINAL[k](np.clip(t, 0, 10)), 0.0)
        return out if out.ndim else float(out)

    return y0


# rows give [y_d, y', y'', y3, y4] as combinations of [y_d, y3, y2, y1, y0]
def derivative_map(a: float) -> np.ndarray:
    return np.array(
        [
            [1, 0, 0, 0, 0],
            [-a, a, 0, 0, 0],
            [a**2, -2 * a**2, a**2, 0, 0],
            [-a**3, 3 * a**3, -3 * a**3, a**3, 0],
            [a**4, -4 * a**4, 6 * a**4, -4 * a**4, a**4],
        ],
        dtype=float,
    )


def filter_chain(
    y0,
    a: float = 2 * np.pi,
    dt: float | None = None,
    duration: float | None = None,
) -> FilteredTrajectory:
    """Four cascaded ``a/(s+a)`` stages with derivatives read off the stage states.

    ``y0`` is a Trajectory (linearly interpolated) or a callable together
    with ``dt`` and ``duration``. Every stage starts at ``y0(t0)``.
    """
    if a <= 0:
        raise DomainError("cut-off a must be positive")
    if isinstance(y0, Trajectory):
        dt = y0.dt if dt is None else dt
        duration = y0.duration if duration is None else duration
        t0 = y0.t0
    else:
        if dt is None or duration is None:
            raise DomainError("dt and duration are required for callable inputs")
        t0 = 0.0
    start = float(sample_signal(y0, np.array([t0]))[0])
    # states (y1, y2, y3, y_d)
    A = np.array([[-a, 0, 0, 0], [a, -a, 0, 0], [0, a, -a, 0], [0, 0, a, -a]], dtype=float)
    cascade = StateSpace(A, [a, 0, 0, 0], [0, 0, 0, 1])
    sim = simulate(cascade, y0, np.full(4, start), dt, duration, t0)
    X = sim.samples[:, :4]
    raw = sample_signal(y0, sim.times)
    basis = np.column_stack([X[:, 3], X[:, 2], X[:, 1], X[:, 0], raw])
    D = basis @ derivative_map(a).T

    def one(col):
        return Trajectory(dt, ("y",), D[:, col], t0)

    stages = Trajectory(dt, ("y1", "y2", "y3", "y_d", "y0"), np.column_stack([X, raw]), t0)
    return FilteredTrajectory(one(0), one(1), one(2), one(3), one(4), a, stages)


def desired_trajectory(k: int, dt: float = 0.01, a: float = 2 * np.pi, duration: float = 10.0) -> FilteredTrajectory:
    """Filtered evaluation trajectory ``y_{d,k}`` with derivatives."""
    return filter_chain(nominal_function(k), a, dt, duration)


def add_awgn(
    y: Trajectory,
    snr_db: float,
    seed: int,
    channels: Sequence[str] | None = None,
    linear: bool = False,
) -> Trajectory:
    """Add white Gaussian noise independently per channel.

    Noise variance is the channel's mean-square value divided by the SNR.
    ``linear=True`` reads ``snr_db`` as a plain power ratio instead of dB.
    NaN samples (invalid stencil edges) are ignored for the power estimate
    and stay NaN.
    """
    names = y.channels if channels is None else tuple(channels)
    out = y.samples.copy()
    if np.isinf(snr_db):
        return Trajectory(y.dt, y.channels, out, y.t0, dict(y.meta))
    ratio = snr_db if linear else 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(seed)
    for name in names:
        j = y.channels.index(name)
        col = out[:, j]
        power = np.nanmean(col**2)
        if not power > 0:
            raise SNRUndefined(f"SNR undefined: channel {name!r} has zero power")
        out[:, j] = col + rng.normal(0.0, np.sqrt(power / ratio), size=col.shape)
    return Trajectory(y.dt, y.channels, out, y.t0, dict(y.meta))


def finite_difference_34(yddot: Trajectory, channel: int = 0) -> tuple[Trajectory, Trajectory]:
    """Third and fourth derivatives from second-derivative samples.

    Five-point central stencils; the two samples at each end are NaN.
    """
    f = yddot.samples[:, channel]
    if len(f) < 5:
        raise DomainError("the stencil needs at least 5 samples")
    h = yddot.dt
    y3 = np.full_like(f, np.nan)
    y4 = np.full_like(f, np.nan)
    p2, p1, c, m1, m2 = f[4:], f[3:-1], f[2:-2], f[1:-3], f[:-4]
    y3[2:-2] = (-p2 + 8 * p1 - 8 * m1 + m2) / (12 * h)
    y4[2:-2] = (-p2 + 16 * p1 - 30 * c + 16 * m1 - m2) / (12 * h * h)
    return Trajectory(h, ("y",), y3, yddot.t0), Trajectory(h, ("y",), y4, yddot.t0)
