"""Continuous-time SISO LTI systems: analysis, normal form and simulation.

The normal form splits the state into output-derivative coordinates
``xi = (y, y', ..., y^(r-1))`` and hidden coordinates ``eta`` that are driven
by the output alone::

    xi'  = A1 xi + A2 eta + B1 u
    eta' = A3 y  + A4 eta

with ``A4`` the companion matrix of the numerator polynomial.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import (
    DegenerateSystemError,
    DomainError,
    IdentificationInconclusive,
    IllConditionedRealization,
    NormalFormError,
    SimulationDiverged,
    SpectralFailure,
)

DEFAULT_TOL = 1e-9

Signal = Union["Trajectory", Callable[[float], float], float, np.ndarray]


@dataclass(frozen=True)
class StateSpace:
    """Single-input single-output plant ``x' = A x + B u``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(-1, 1)
        C = np.asarray(self.C, dtype=float).reshape(1, -1)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DomainError(f"A must be square, got {A.shape}")
        if B.shape != (n, 1) or C.shape != (1, n):
            raise DomainError(
                f"inconsistent dimensions: A {A.shape}, B {B.shape}, C {C.shape}"
            )
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B)) and np.all(np.isfinite(C))):
            raise DomainError("system matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def markov(self, i: int) -> float:
        """Return ``C A^i B``."""
        return (self.C @ np.linalg.matrix_power(self.A, i) @ self.B).item()


@dataclass(frozen=True)
class TransferFunction:
    """``num(s)/den(s)`` with coefficient arrays in ascending powers of s.

    ``den`` is monic of degree n and ``num`` has degree ``n - r``.
    """

    num: np.ndarray
    den: np.ndarray
    r: int

    def __post_init__(self):
        num = np.atleast_1d(np.asarray(self.num, dtype=float))
        den = np.atleast_1d(np.asarray(self.den, dtype=float))
        if num[-1] == 0:
            raise DomainError("leading numerator coefficient must be nonzero")
        if (len(den) - 1) - (len(num) - 1) != self.r:
            raise DomainError("degree(den) - degree(num) must equal r")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    def __call__(self, s):
        return np.polynomial.polynomial.polyval(s, self.num) / np.polynomial.polynomial.polyval(
            s, self.den
        )

    def zeros(self) -> np.ndarray:
        return polynomial_roots(self.num)

    def poles(self) -> np.ndarray:
        return polynomial_roots(self.den)

    @property
    def dc_gain(self) -> float:
        return float(self.num[0] / self.den[0])


@dataclass(frozen=True)
class NormalForm:
    """Coordinates ``[xi; eta] = S x`` and the blocks of the transformed dynamics."""

    S: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    A3: np.ndarray
    A4: np.ndarray
    A_xi: np.ndarray
    A_eta: np.ndarray
    b_lead: float
    r: int

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.n - self.r

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map states (``n`` or ``(..., n)``) to ``(xi, eta)``."""
        z = np.asarray(x) @ self.S.T
        return z[..., : self.r], z[..., self.r :]

    def as_state_space(self) -> StateSpace:
        """The plant expressed in ``(xi, eta)`` coordinates."""
        n, r = self.n, self.r
        A = np.zeros((n, n))
        A[:r, :r] = self.A1
        A[:r, r:] = self.A2
        A[r:, 0] = self.A3.ravel()
        A[r:, r:] = self.A4
        B = np.zeros((n, 1))
        B[:r] = self.B1
        C = np.zeros((1, n))
        C[0, 0] = 1.0
        return StateSpace(A, B, C)


@dataclass
class Trajectory:
    """Uniformly sampled multi-channel time series.

    ``samples`` has one row per time instant and one column per channel.
    """

    dt: float
    channels: tuple[str, ...]
    samples: np.ndarray
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] < 1:
            raise DomainError("a trajectory needs at least one sample")
        if samples.shape[1] != len(self.channels):
            raise DomainError(
                f"{samples.shape[1]} columns but {len(self.channels)} channel names"
            )
        if self.dt <= 0:
            raise DomainError("dt must be positive")
        self.samples = samples

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.samples[:, self.channels.index(name)]
        except ValueError:
            raise KeyError(name) from None

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def duration(self) -> float:
        return self.dt * (len(self) - 1)

    def select(self, *names: str) -> "Trajectory":
        return Trajectory(self.dt, names, np.column_stack([self[n] for n in names]), self.t0)

    def with_channels(self, names: Sequence[str], columns: Sequence[np.ndarray]) -> "Trajectory":
        """Return a copy with extra channels appended."""
        cols = np.column_stack([self.samples] + [np.asarray(c, dtype=float) for c in columns])
        return Trajectory(self.dt, self.channels + tuple(names), cols, self.t0, dict(self.meta))

    def interpolate(self, t, channel: int = 0):
        """Linear interpolation of one channel; held constant outside the record."""
        return np.interp(t, self.times, self.samples[:, channel])

    def to_csv(self, path=None, header_comments: Sequence[str] = ()) -> str:
        buf = io.StringIO(newline="")
        for line in header_comments:
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("t",) + self.channels)
        for t, row in zip(self.times, self.samples):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, newline="")
        return text

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        if not header or header[0] != "t":
            raise DomainError(f"{path}: first column must be 't'")
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
        if data.shape[0] < 1:
            raise DomainError(f"{path}: no samples")
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        if len(t) > 2 and not np.allclose(np.diff(t), dt, rtol=1e-9, atol=1e-12):
            raise DomainError(f"{path}: samples are not uniformly spaced")
        return cls(dt, tuple(header[1:]), data[:, 1:], float(t[0]))


def polynomial_roots(coeffs_ascending) -> np.ndarray:
    """Roots via eigenvalues of the companion matrix of the monic polynomial."""
    c = np.asarray(coeffs_ascending, dtype=float)
    if len(c) <= 1:
        return np.zeros(0, dtype=complex)
    return np.linalg.eigvals(companion(c)).astype(complex)


def companion(coeffs_ascending) -> np.ndarray:
    """Bottom-row companion matrix of ``sum c_i s^i``.

    Ones on the superdiagonal, last row ``-c[:-1] / c[-1]``; this is the
    layout of the zero-dynamics matrix A4.
    """
    c = np.asarray(coeffs_ascending, dtype=float)
    m = len(c) - 1
    M = np.zeros((m, m))
    if m == 0:
        return M
    M[:-1, 1:] = np.eye(m - 1)
    M[-1, :] = -c[:-1] / c[-1]
    return M


def relative_degree(sys: StateSpace, tol: float = DEFAULT_TOL) -> int:
    """Smallest ``i`` with ``|C A^(i-1) B| > tol * ||C|| * ||A^(i-1) B||``."""
    nC = np.linalg.norm(sys.C)
    Ak_B = sys.B
    for i in range(1, sys.n + 1):
        if abs((sys.C @ Ak_B).item()) > tol * nC * np.linalg.norm(Ak_B):
            return i
        Ak_B = sys.A @ Ak_B
    raise DegenerateSystemError("degenerate system: C A^(i-1) B vanishes for all i <= n")


def _faddeev_leverrier(A: np.ndarray):
    """Characteristic polynomial and adjugate coefficient matrices of ``sI - A``.

    Returns ``(den, Ms)`` with ``den`` ascending and monic, and
    ``adj(sI - A) = sum_k Ms[k-1] s^(n-k)``.
    """
    n = A.shape[0]
    coeffs = np.zeros(n + 1)
    coeffs[n] = 1.0
    Ms = []
    M = np.zeros_like(A)
    for k in range(1, n + 1):
        M = A @ M + coeffs[n - k + 1] * np.eye(n)
        Ms.append(M)
        coeffs[n - k] = -np.trace(A @ M) / k
    return coeffs, Ms


def transfer_function(sys: StateSpace, tol: float = DEFAULT_TOL) -> TransferFunction:
    r = relative_degree(sys, tol)
    n = sys.n
    den, Ms = _faddeev_leverrier(sys.A)
    # coefficient of s^(n-k) is C M_k B
    full = np.array([(sys.C @ Ms[n - 1 - j] @ sys.B).item() for j in range(n)])
    num = full[: n - r + 1].copy()
    num[-1] = sys.markov(r - 1)
    if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
        raise IllConditionedRealization("ill-conditioned realization: non-finite coefficients")

    # cross-check against the resolvent on the imaginary axis just beyond the spectral radius
    s0 = 1j * (1.0 + np.max(np.abs(np.linalg.eigvals(sys.A))))
    R = s0 * np.eye(n) - sys.A
    direct = (sys.C @ np.linalg.solve(R, sys.B.astype(complex))).item()
    poly = np.polynomial.polynomial.polyval(s0, num) / np.polynomial.polynomial.polyval(s0, den)
    if abs(direct - poly) > 1e-6 * max(abs(direct), abs(poly), 1e-300):
        raise IllConditionedRealization(
            f"ill-conditioned realization: resolvent {direct} vs polynomial {poly}"
        )
    return TransferFunction(num, den, r)


def is_hurwitz(M, tol: float = DEFAULT_TOL) -> bool:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return True
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise SpectralFailure(f"spectral failure: {exc}") from exc
    return bool(np.max(eig.real) < -tol)


def is_minimum_phase(tf: TransferFunction, tol: float = DEFAULT_TOL) -> bool:
    z = tf.zeros()
    return bool(z.size == 0 or np.max(z.real) < -tol)


def normal_form(sys: StateSpace, tol: float = DEFAULT_TOL, check_tol: float = 1e-6) -> NormalForm:
    """Build the ``(xi, eta)`` normal form of ``sys``.

    The xi rows of S are ``C A^(i-1)``. The eta rows are the first ``n - r``
    controller-canonical coordinates ``q, qA, ...`` where ``q`` is the last
    row of the inverse controllability matrix; in those coordinates the
    eta block is exactly the numerator companion form.
    """
    A, B, C = sys.A, sys.B, sys.C
    n = sys.n
    tf = transfer_function(sys, tol)
    r = tf.r
    b = tf.num
    b_lead = float(b[-1])
    rows = [C.ravel()]
    for _ in range(r - 1):
        rows.append(rows[-1] @ A)
    if r < n:
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.cond(ctrb) * tol > 1.0:
            raise NormalFormError("transform construction failed: (A, B) not controllable")
        q = np.linalg.solve(ctrb.T, np.eye(n)[:, -1])
        eta_rows = [q]
        for _ in range(n - r - 1):
            eta_rows.append(eta_rows[-1] @ A)
        rows.extend(eta_rows)
    S = np.vstack(rows)
    if np.linalg.cond(S) * tol > 1.0:
        raise NormalFormError("transform construction failed: S is singular")

    Abar = np.linalg.solve(S.T, (S @ A).T).T
    Bbar = S @ B

    A4 = companion(b)
    A3 = np.zeros((n - r, 1))
    if r < n:
        A3[-1, 0] = 1.0 / b_lead
    A1 = np.zeros((r, r))
    A1[:-1, 1:] = np.eye(r - 1)
    A1[-1] = Abar[r - 1, :r]
    A2 = np.zeros((r, n - r))
    A2[-1] = Abar[r - 1, r:]
    B1 = np.zeros((r, 1))
    B1[-1, 0] = b_lead

    expected = NormalForm(S, A1, A2, B1, A3, A4, A1[-1].copy(), A2[-1].copy(), b_lead, r)
    ref = expected.as_state_space()
    scale = 1.0 + np.linalg.norm(Abar, 2)
    mismatch_A = np.max(np.abs(Abar - ref.A)) / scale
    mismatch_B = np.max(np.abs(Bbar - ref.B)) / (1.0 + abs(b_lead))
    if mismatch_A > check_tol or mismatch_B > check_tol:
        raise NormalFormError(
            f"normal form mismatch: |dA|={mismatch_A:.3g}, |dB|={mismatch_B:.3g}"
        )
    return expected


def rk4_step_matrices(A: np.ndarray, B: np.ndarray, h: float):
    """Classical RK4 applied to ``x' = A x + B u(t)``, collapsed to matrices.

    One step is ``x+ = P x + G0 u(t) + Gh u(t + h/2) + G1 u(t + h)``.
    """
    n = A.shape[0]
    I = np.eye(n)
    hA = h * A
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    P = I + hA + hA2 / 2 + hA3 / 6 + hA3 @ hA / 24
    Bv = B.reshape(n, -1)
    G0 = (h / 6) * (I + hA + hA2 / 2 + hA3 / 4) @ Bv
    Gh = (h / 6) * (4 * I + 2 * hA + hA2 / 2) @ Bv
    G1 = (h / 6) * Bv
    return P, G0, Gh, G1


def sample_signal(u: Signal, t: np.ndarray) -> np.ndarray:
    """Evaluate an input at times ``t``.

    Trajectories are linearly interpolated between grid points; callables are
    evaluated directly (vectorised if they accept arrays).
    """
    t = np.asarray(t, dtype=float)
    if isinstance(u, Trajectory):
        return u.interpolate(t)
    if callable(u):
        try:
            out = np.asarray(u(t), dtype=float)
            if out.shape == t.shape:
                return out
        except (TypeError, ValueError):
            pass
        return np.array([float(u(ti)) for ti in t.ravel()]).reshape(t.shape)
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 0:
        return np.full(t.shape, float(arr))
    raise DomainError("raw arrays are ambiguous as inputs; wrap them in a Trajectory")


def integrate_lti(A, B, u_grid, u_half, x0, dt) -> np.ndarray:
    """March RK4 over precomputed input samples.

    ``u_grid`` holds ``u`` at the K+1 grid points (shape ``(K+1,)`` or
    ``(K+1, m)``), ``u_half`` the K midpoints. Returns states ``(K+1, n)``.
    """
    A = np.atleast_2d(A)
    n = A.shape[0]
    u_grid = np.asarray(u_grid, dtype=float).reshape(len(u_grid), -1)
    u_half = np.asarray(u_half, dtype=float).reshape(len(u_half), -1)
    P, G0, Gh, G1 = rk4_step_matrices(A, np.asarray(B, dtype=float).reshape(n, -1), dt)
    forcing = u_grid[:-1] @ G0.T + u_half @ Gh.T + u_grid[1:] @ G1.T
    X = np.empty((len(u_grid), n))
    x = np.asarray(x0, dtype=float).reshape(n)
    X[0] = x
    PT = P.T
    for k in range(len(forcing)):
        x = x @ PT + forcing[k]
        X[k + 1] = x
    if not np.all(np.isfinite(X)):
        raise SimulationDiverged("simulation diverged: non-finite state")
    return X


def simulate(
    sys: StateSpace,
    u: Signal,
    x0=None,
    dt: float = 0.01,
    duration: float | None = None,
    t0: float = 0.0,
) -> Trajectory:
    """Fixed-step RK4 simulation; returns channels ``x1..xn, y``.

    ``duration`` defaults to the length of ``u`` when ``u`` is a Trajectory.
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    if duration is None:
        if not isinstance(u, Trajectory):
            raise DomainError("duration is required unless u is a Trajectory")
        duration = u.t0 + u.duration - t0
    steps = int(round(duration / dt))
    if steps < 1:
        raise DomainError("duration must be at least dt")
    t = t0 + dt * np.arange(steps + 1)
    ug = sample_signal(u, t)
    uh = sample_signal(u, t[:-1] + dt / 2)
    x0 = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float)
    X = integrate_lti(sys.A, sys.B, ug, uh, x0, dt)
    y = X @ sys.C.ravel()
    names = tuple(f"x{i + 1}" for i in range(sys.n)) + ("y",)
    return Trajectory(dt, names, np.column_stack([X, y]), t0)


def output_derivatives(sys: StateSpace, X: np.ndarray, u: np.ndarray, order: int, r: int | None = None):
    """``y^(i)`` for ``i = 0..order`` (``order <= r``) from states and input.

    Below the relative degree ``y^(i) = C A^i x``; at ``i = r`` the input
    enters through ``C A^(r-1) B u``.
    """
    r = relative_degree(sys) if r is None else r
    if order > r:
        raise DomainError("derivatives above the relative degree depend on input derivatives")
    out = []
    CAi = sys.C.ravel()
    for i in range(order + 1):
        d = X @ CAi
        if i == r:
            d = d + sys.markov(r - 1) * np.asarray(u, dtype=float)
        out.append(d)
        CAi = CAi @ sys.A
    return out


def identify_relative_degree_from_step(
    sys: StateSpace,
    dt: float = 1e-3,
    jump_ratio: float = 10.0,
    window: int = 50,
) -> int:
    """Relative degree from the first discontinuous derivative of a step response.

    The plant rests for t < 0 and sees a unit step at t = 0. For each order
    j the j-th backward difference of y is formed; its change across the
    step (over the j samples the stencil needs) is compared with its largest
    change over j samples in the following ``window`` samples. A
    discontinuity shows up as a ratio of order 1/dt; continuous derivatives
    give a ratio of order one.
    """
    n = sys.n
    pad = n + 1
    horizon = (window + 2 * n + 2) * dt
    post = simulate(sys, 1.0, None, dt, horizon)["y"]
    y = np.concatenate([np.zeros(pad), post])
    m0 = pad  # index of t = 0
    d = y.copy()
    for j in range(1, n + 1):
        d = np.concatenate([[0.0], np.diff(d) / dt])
        jump = abs(d[m0 + j] - d[m0 - 1])
        later = d[m0 + j : m0 + j + window + j]
        variation = np.max(np.abs(later[j:] - later[:-j]))
        if jump > jump_ratio * variation:
            return j
    raise IdentificationInconclusive("identification inconclusive: no jump up to order n")


def build_example_system(
    m1: float = 10.0,
    m2: float = 5.0,
    k1: float = 110.0,
    c1: float = 68.0,
    k2: float = 75.0,
    c2: float = 60.0,
    a: float | None = None,
) -> StateSpace:
    """Two-mass spring-damper; force on mass 2, output its displacement.

    State ordering is ``(x1, x1', x2, x2')``. The actuator gain defaults to
    ``k1 / 2``.
    """
    a = k1 / 2 if a is None else a
    A = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [-(k1 + k2) / m1, -(c1 + c2) / m1, k2 / m1, c2 / m1],
            [0.0, 0.0, 0.0, 1.0],
            [k2 / m2, c2 / m2, -k2 / m2, -c2 / m2],
        ]
    )
    B = np.array([0.0, 0.0, 0.0, a / m2])
    C = np.array([0.0, 0.0, 1.0, 0.0])
    return StateSpace(A, B, C)
