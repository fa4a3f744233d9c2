"""Model-based hidden-state operators and the exact inverse input.

These are the analytic references the learned operators are measured
against: the hidden state reconstructed from the full output history, its
finite-window approximation, the inverse input, and the constants of the
exponential error bounds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import NoExponentialBound, OperatorUnstable
from .lti_core import NormalForm, Trajectory, is_hurwitz, rk4_step_matrices

ALPHA_MARGIN = 0.02


@dataclass(frozen=True)
class HiddenStateEstimate:
    eta: np.ndarray
    window_T: float
    method: str  # "full-history" or "finite-window"


@dataclass(frozen=True)
class DecayBound:
    """``||exp(A4 t)|| <= kappa1 exp(-alpha1 t)`` and ``beta1 = M ||A3|| kappa1 / alpha1``."""

    kappa1: float
    alpha1: float
    beta1: float
    M: float

    def __call__(self, T):
        return self.beta1 * np.exp(-self.alpha1 * np.asarray(T, dtype=float))


def _require_min_phase(nf: NormalForm):
    if nf.n_hidden and not is_hurwitz(nf.A4, 0.0):
        raise OperatorUnstable("operator unstable: zero dynamics are not Hurwitz")


def _output_column(y) -> np.ndarray:
    if isinstance(y, Trajectory):
        return y["y"] if "y" in y.channels else y.samples[:, 0]
    return np.asarray(y, dtype=float).ravel()


def _eta_march(nf: NormalForm, y: np.ndarray, dt: float, eta0=None) -> np.ndarray:
    """RK4 on ``eta' = A3 y + A4 eta`` with y linearly interpolated between samples."""
    m = nf.n_hidden
    P, G0, Gh, G1 = rk4_step_matrices(nf.A4, nf.A3, dt)
    forcing = np.outer(y[:-1], G0[:, 0]) + np.outer(0.5 * (y[:-1] + y[1:]), Gh[:, 0]) + np.outer(y[1:], G1[:, 0])
    E = np.empty((len(y), m))
    eta = np.zeros(m) if eta0 is None else np.asarray(eta0, dtype=float)
    E[0] = eta
    PT = P.T
    for k in range(len(forcing)):
        eta = eta @ PT + forcing[k]
        E[k + 1] = eta
    return E


def hidden_state_full(nf: NormalForm, y) -> Trajectory:
    """Hidden state along a record that starts from rest.

    Integrating the zero dynamics from ``eta = 0`` at the first sample is the
    full-history convolution when the output was identically zero before.
    """
    _require_min_phase(nf)
    yv = _output_column(y)
    dt = y.dt if isinstance(y, Trajectory) else 1.0
    t0 = y.t0 if isinstance(y, Trajectory) else 0.0
    names = tuple(f"eta{i + 1}" for i in range(nf.n_hidden))
    if nf.n_hidden == 0:
        return Trajectory(dt, names, np.zeros((len(yv), 0)), t0)
    return Trajectory(dt, names, _eta_march(nf, yv, dt), t0)


def hidden_state_window(nf: NormalForm, y_window, dt: float) -> HiddenStateEstimate:
    """Hidden-state estimate from the window ``y(t-T) ... y(t)`` only.

    The zero dynamics are integrated across the window from a zero initial
    condition at its first sample.
    """
    _require_min_phase(nf)
    yv = _output_column(y_window)
    T = max(len(yv) - 1, 0) * dt
    if len(yv) < 2 or nf.n_hidden == 0:
        return HiddenStateEstimate(np.zeros(nf.n_hidden), T, "finite-window")
    return HiddenStateEstimate(_eta_march(nf, yv, dt)[-1], T, "finite-window")


def hidden_state_window_series(nf: NormalForm, y: Trajectory, T: float) -> np.ndarray:
    """Finite-window estimates at every sample of ``y`` (rows), window length ``T``.

    Uses linearity: the windowed estimate is the full-record state minus the
    free response of the state at the window start. Samples closer than T
    to the record start use the whole available history.
    """
    _require_min_phase(nf)
    eta = hidden_state_full(nf, y).samples
    w = int(round(T / y.dt))
    if nf.n_hidden == 0 or w == 0:
        return np.zeros_like(eta) if w == 0 else eta
    P, *_ = rk4_step_matrices(nf.A4, nf.A3, y.dt)
    Pw = np.linalg.matrix_power(P, w)
    est = eta.copy()
    est[w:] -= eta[:-w] @ Pw.T
    return est


def decay_bound(nf: NormalForm, M: float, t_grid, margin: float = ALPHA_MARGIN) -> DecayBound:
    if nf.n_hidden == 0:
        return DecayBound(1.0, np.inf, 0.0, float(M))
    eig = np.linalg.eigvals(nf.A4)
    abscissa = float(np.max(eig.real))
    if abscissa >= 0:
        raise NoExponentialBound("no exponential bound: A4 is not Hurwitz")
    alpha1 = abs(abscissa) * (1.0 - margin)
    t_grid = np.asarray(t_grid, dtype=float)
    kappa1 = max(np.linalg.norm(expm(nf.A4 * t), 2) * np.exp(alpha1 * t) for t in t_grid)
    beta1 = M * np.linalg.norm(nf.A3, 2) * kappa1 / alpha1
    return DecayBound(float(kappa1), alpha1, float(beta1), float(M))


def exact_inverse_input(nf: NormalForm, xi_d, yr_d, eta_d):
    """``u = (y^(r) - A_xi xi - A_eta eta) / b_lead``; rows of xi/eta broadcast."""
    xi_d = np.asarray(xi_d, dtype=float)
    eta_d = np.asarray(eta_d, dtype=float)
    rhs = np.asarray(yr_d, dtype=float) - xi_d @ nf.A_xi
    if nf.n_hidden:
        rhs = rhs - eta_d @ nf.A_eta
    return rhs / nf.b_lead


def windowed_inverse_input(nf: NormalForm, y_history, xi_d, yr_d, dt: float) -> float:
    est = hidden_state_window(nf, y_history, dt)
    return float(exact_inverse_input(nf, xi_d, yr_d, est.eta))


def inverse_error_constants(nf: NormalForm, bound: DecayBound) -> tuple[float, float, float]:
    """``(L1, L2, L3)`` of the inverse-input error bound."""
    L1 = 1.0 / abs(nf.b_lead)
    L2 = L1 * np.linalg.norm(nf.A_xi)
    L3 = L1 * np.linalg.norm(nf.A_eta) * bound.beta1 if nf.n_hidden else 0.0
    return L1, float(L2), float(L3)
