import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopinv.errors import DomainError, SNRUndefined
from koopinv.lti_core import Trajectory
from koopinv.signals import (
    TABLE1_CYCLES, ExcitationSpec, add_awgn, derivative_map, desired_trajectory,
    excitation_cycle, excitation_function, excitation_signal, filter_chain,
    finite_difference_34, nominal_function, nominal_trajectory,
)

BREAKS = np.array([1, 2, 2.5, 3, 4, 5, 6, 7, 7.5, 8, 9, 10])


class TestExcitation:
    def test_vanishes_at_zero(self):
        for f, a in TABLE1_CYCLES:
            assert excitation_cycle(f, a, 0.0) == 0.0

    def test_hand_value(self):
        assert excitation_cycle(1.0, 1.0, 5.0) == pytest.approx(3.5)

    def test_reflection(self):
        # chirp and step terms known; isolate the ramp term
        v = excitation_cycle(1.0, 1.0, 9.5)
        chirp = 4 * np.sin(np.pi * 0.1 * 9.5**2)
        assert v - chirp == pytest.approx(0.2)

    def test_domain(self):
        with pytest.raises(DomainError):
            excitation_cycle(1.0, 1.0, 10.5)

    def test_table_rows(self):
        assert TABLE1_CYCLES[0] == (6, 0.75)
        assert TABLE1_CYCLES[12] == (1, -0.1)
        assert len(TABLE1_CYCLES) == 20

    def test_signal_length(self):
        u = excitation_signal()
        assert len(u) == 20001
        assert u.duration == pytest.approx(200.0)

    def test_cycles_follow_table(self):
        u = excitation_function()
        t = np.linspace(0, 10, 1001)
        for i, (f, a) in enumerate(TABLE1_CYCLES):
            np.testing.assert_allclose(u(10 * i + t[:-1]), excitation_cycle(f, a, t[:-1]), atol=1e-12)

    def test_amplitude_linear_in_alpha(self):
        t = np.linspace(0, 10, 2001)
        base = np.max(np.abs(excitation_cycle(0.5, 1.0, t)))
        for a in (0.05, -0.3, 0.75):
            assert np.max(np.abs(excitation_cycle(0.5, a, t))) == pytest.approx(abs(a) * base)

    def test_spec_from_file(self, tmp_path):
        p = tmp_path / "exc.yaml"
        p.write_text("cycles:\n  - [1, 0.5]\n  - [2, -0.25]\n")
        spec = ExcitationSpec.from_file(p)
        assert spec.cycles == ((1.0, 0.5), (2.0, -0.25))
        assert spec.duration == 20.0


class TestNominal:
    def test_values(self):
        assert nominal_trajectory(1, 4.0) == pytest.approx(0.8)
        assert nominal_trajectory(3, 5.0) == pytest.approx(-1.0)
        assert nominal_trajectory(5, 0.0) == 0.0

    def test_bad_index(self):
        with pytest.raises(DomainError):
            nominal_trajectory(11, 1.0)

    @pytest.mark.parametrize("k", range(1, 11))
    def test_bounded(self, k):
        y = nominal_trajectory(k, np.linspace(0, 10, 1001))
        assert np.all(np.isfinite(y)) and np.max(np.abs(y)) < 10

    def test_zero_outside(self):
        f = nominal_function(6)
        assert f(-1.0) == 0.0 and f(11.0) == 0.0


class TestFilter:
    def test_constant_input(self):
        ft = filter_chain(lambda t: 0.0 * t + 2.5, dt=0.01, duration=3.0)
        np.testing.assert_allclose(ft.derivative(0), 2.5, atol=1e-12)
        for j in range(1, 5):
            np.testing.assert_allclose(ft.derivative(j), 0.0, atol=1e-9)

    def test_row_two_identity(self):
        ft = desired_trajectory(6)
        a = ft.cutoff_a
        np.testing.assert_allclose(ft.derivative(1), -a * ft.derivative(0) + a * ft.stages["y3"], atol=1e-12)

    def test_map_rows(self):
        a = 3.0
        M = derivative_map(a)
        np.testing.assert_allclose(M[1], [-a, a, 0, 0, 0])
        np.testing.assert_allclose(M.sum(axis=1), [1, 0, 0, 0, 0])

    @staticmethod
    def _max_consistency_error(k, dt):
        ft = desired_trajectory(k, dt)
        t = ft.y_d.times
        # away from kinks/jumps of the nominal signal and the start, where y0_10 has a t^1.5 singularity
        mask = np.min(np.abs(t[:, None] - BREAKS[None, :]), axis=1) > 3 * dt
        mask &= t > 0.5
        errs = []
        for j in range(4):
            num = np.gradient(ft.derivative(j), dt)
            errs.append(np.max(np.abs(num - ft.derivative(j + 1))[mask]) / np.max(np.abs(ft.derivative(j + 1))))
        return np.array(errs)

    @pytest.mark.parametrize("k", range(1, 11))
    def test_derivative_consistency_second_order(self, k):
        coarse = self._max_consistency_error(k, 0.005)
        fine = self._max_consistency_error(k, 0.0025)
        assert np.all(fine < 5e-3)
        assert np.all(coarse / fine > 3.0), coarse / fine

    def test_needs_grid_for_callable(self):
        with pytest.raises(DomainError):
            filter_chain(lambda t: t)


class TestNoise:
    def _signal(self):
        t = np.arange(20000) * 0.01
        return Trajectory(0.01, ("y", "z"), np.column_stack([np.sin(t), 3 * np.cos(0.3 * t)]))

    def test_infinite_snr(self):
        y = self._signal()
        np.testing.assert_array_equal(add_awgn(y, np.inf, 1).samples, y.samples)

    def test_measured_snr(self):
        y = self._signal()
        noisy = add_awgn(y, 20.0, 5)
        for j in range(2):
            p_s = np.mean(y.samples[:, j] ** 2)
            p_n = np.mean((noisy.samples[:, j] - y.samples[:, j]) ** 2)
            assert abs(10 * np.log10(p_s / p_n) - 20.0) < 0.5

    def test_linear_ratio(self):
        y = self._signal()
        noisy = add_awgn(y, 20.0, 5, linear=True)
        p_s = np.mean(y.samples[:, 0] ** 2)
        p_n = np.mean((noisy.samples[:, 0] - y.samples[:, 0]) ** 2)
        assert p_s / p_n == pytest.approx(20.0, rel=0.05)

    def test_deterministic(self):
        y = self._signal()
        np.testing.assert_array_equal(add_awgn(y, 20, 9).samples, add_awgn(y, 20, 9).samples)
        assert not np.array_equal(add_awgn(y, 20, 9).samples, add_awgn(y, 20, 10).samples)

    def test_selected_channels_only(self):
        y = self._signal()
        noisy = add_awgn(y, 20, 1, channels=("z",))
        np.testing.assert_array_equal(noisy["y"], y["y"])

    def test_zero_power(self):
        with pytest.raises(SNRUndefined):
            add_awgn(Trajectory(0.01, ("y",), np.zeros(10)), 20, 0)


class TestStencils:
    def test_cubic(self):
        h = 0.01
        t = np.arange(100) * h
        y3, _ = finite_difference_34(Trajectory(h, ("y",), t**3))
        np.testing.assert_allclose(y3["y"][2:-2], 3 * t[2:-2] ** 2, atol=1e-9)
        assert np.isnan(y3["y"][:2]).all() and np.isnan(y3["y"][-2:]).all()

    def test_quadratic_fourth(self):
        h = 0.01
        t = np.arange(50) * h
        _, y4 = finite_difference_34(Trajectory(h, ("y",), t**2))
        np.testing.assert_allclose(y4["y"][2:-2], 2.0, rtol=1e-6)

    def test_constant(self):
        y3, y4 = finite_difference_34(Trajectory(0.01, ("y",), np.full(20, 4.0)))
        np.testing.assert_allclose(y3["y"][2:-2], 0.0, atol=1e-10)
        np.testing.assert_allclose(y4["y"][2:-2], 0.0, atol=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.sampled_from([0.01, 0.05, 0.1]))
    def test_polynomial_exactness(self, c, h):
        # first derivative exact through degree 4, second through degree 5
        t = (np.arange(40) - 20) * h
        p4 = np.polynomial.Polynomial(c[:5])
        p5 = np.polynomial.Polynomial(c)
        y3, _ = finite_difference_34(Trajectory(h, ("y",), p4(t)))
        _, y4 = finite_difference_34(Trajectory(h, ("y",), p5(t)))
        scale1 = 1 + np.max(np.abs(p4.deriv()(t)))
        scale2 = 1 + np.max(np.abs(p5.deriv(2)(t)))
        np.testing.assert_allclose(y3["y"][2:-2], p4.deriv()(t[2:-2]), atol=1e-9 * scale1 / h)
        np.testing.assert_allclose(y4["y"][2:-2], p5.deriv(2)(t[2:-2]), atol=1e-9 * scale2 / h**2)
