import numpy as np
import pytest
from hypothesis import assume, strategies as st

from koopinv.lti_core import StateSpace, build_example_system, normal_form


@pytest.fixture(scope="session")
def example():
    return build_example_system()


@pytest.fixture(scope="session")
def example_nf(example):
    return normal_form(example)


def controller_canonical(num, den):
    """Realization of num/den (ascending coefficients, monic den) in controller form."""
    n = len(den) - 1
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1] = -np.asarray(den[:-1])
    B = np.zeros(n)
    B[-1] = 1.0
    C = np.zeros(n)
    C[: len(num)] = num
    return A, B, C


@st.composite
def min_phase_systems(draw, max_n=6):
    """Random stable minimum-phase SISO plants with well separated poles and zeros.

    Returns ``(sys, zeros, poles)``; the realization is scrambled by a random
    well-conditioned similarity transform.
    """
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(0, n - 1))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)

    def spaced(count, lo, hi):
        base = np.linspace(lo, hi, count + 2)[1:-1] if count else np.array([])
        return -(base + rng.uniform(-0.1, 0.1, count) * (hi - lo) / (count + 1))

    poles = spaced(n, 0.5, 6.0)
    zeros = spaced(m, 0.4, 5.0)
    # near pole-zero cancellations make the zeros ill-conditioned
    if m:
        assume(np.min(np.abs(zeros[:, None] - poles[None, :])) > 0.25)
    gain = draw(st.floats(0.5, 5.0)) * draw(st.sampled_from([-1.0, 1.0]))
    den = np.poly(poles)[::-1]
    num = gain * np.poly(zeros)[::-1] if m else np.array([gain])
    A, B, C = controller_canonical(num, den)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    T = Q @ np.diag(rng.uniform(0.5, 2.0, n))
    Ti = np.linalg.inv(T)
    return StateSpace(Ti @ A @ T, Ti @ B, C @ T), zeros, poles


def match_roots(a, b):
    """Max relative distance after pairing each root of ``a`` with its nearest in ``b``."""
    a, b = list(np.asarray(a, dtype=complex)), list(np.asarray(b, dtype=complex))
    assert len(a) == len(b)
    worst = 0.0
    for z in a:
        j = int(np.argmin([abs(z - w) for w in b]))
        worst = max(worst, abs(z - b[j]) / max(abs(z), 1e-300))
        b.pop(j)
    return worst
