from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopinv.config import RunConfig, load_config
from koopinv.errors import DomainError, NormalizationUndefined
from koopinv.eval_harness import (
    Experiment, cell_seed, collect_training_data, derivative_specs, fit_exponential_decay,
    ideal_inverse_suite, metric_report, normalized_errors, sweep_derivatives, sweep_history,
    table2_csv, table3_csv, decay_fit_csv,
)
from koopinv.learner import TrainConfig
from koopinv.lti_core import Trajectory
from koopinv.signals import ExcitationSpec, desired_trajectory, filter_chain, nominal_function

TINY = RunConfig(
    T_list=(0.2, 0.4), dt_list=(0.1,), N_pool=(5, 10), seeds=1, l_list=(0, 2),
    T_star=0.4, dt_star=0.1, train=TrainConfig(max_iter=15, patience=10),
)


@pytest.fixture(scope="module")
def tiny_exp():
    return Experiment.build(TINY)


class TestNormalizedErrors:
    def setup_method(self):
        t = np.linspace(0, 10, 1001)
        self.ud = np.sin(t) + 0.3 * np.cos(3 * t)

    def test_identity(self):
        assert normalized_errors(self.ud, self.ud) == 0.0

    def test_offset(self):
        peak = np.max(np.abs(self.ud))
        assert normalized_errors(self.ud + 0.01 * peak, self.ud) == pytest.approx(1.0)

    def test_scaled(self):
        assert normalized_errors(1.02 * self.ud, self.ud) == pytest.approx(2.0)

    def test_trajectories(self):
        tr = Trajectory(0.01, ("u",), self.ud)
        assert normalized_errors(tr, tr) == 0.0

    def test_zero_reference(self):
        with pytest.raises(NormalizationUndefined):
            normalized_errors(np.ones(5), np.zeros(5))

    def test_misaligned(self):
        with pytest.raises(DomainError):
            normalized_errors(np.ones(4), np.ones(5))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3))
    def test_common_scaling_invariant(self, c):
        u_hat = self.ud + 0.05 * np.cos(7 * np.arange(len(self.ud)))
        assert normalized_errors(c * u_hat, c * self.ud) == pytest.approx(normalized_errors(u_hat, self.ud))


class TestMetricReport:
    def test_constant(self):
        rep = metric_report({5: [0.3] * 10, 10: [0.3] * 10})
        assert rep.e_uN[5] == pytest.approx(0.3) and rep.e_bar_uN[5] == pytest.approx(0.3)
        assert rep.N_star == 5

    def test_table2_style_reference(self):
        errs = [0.005] * 5 + [0.015] * 4 + [0.02]
        rep = metric_report({10: errs})
        assert rep.e_uN[10] == pytest.approx(0.0105)
        assert rep.e_bar_uN[10] == pytest.approx(0.02)

    @settings(max_examples=80, deadline=None)
    @given(st.dictionaries(st.sampled_from([5, 10, 20, 40, 80]),
                           st.lists(st.floats(0, 200), min_size=10, max_size=10), min_size=1))
    def test_identities(self, table):
        rep = metric_report(table)
        for N in table:
            assert 0 <= rep.e_uN[N] <= rep.e_bar_uN[N] + 1e-12
            assert rep.e_u <= rep.e_uN[N]
        assert rep.e_u == min(rep.e_uN.values())
        assert rep.e_bar_u >= rep.e_u - 1e-12

    def test_empty(self):
        with pytest.raises(DomainError):
            metric_report({})


class TestDecayFit:
    def test_exact_recovery(self):
        T = np.array([0.1, 0.2, 0.4, 0.8, 1.6, 3.2])
        fit = fit_exponential_decay(T, 1.88 * np.exp(-2.18 * T))
        assert fit.alpha == pytest.approx(2.18) and fit.beta == pytest.approx(1.88)
        assert fit.residual < 1e-12 and fit.n_points == 6

    def test_floor_excluded(self):
        T = np.array([0.1, 0.8, 1.6, 3.2])
        e = 2.0 * np.exp(-2.0 * T)
        e[-1] = 0.001
        fit = fit_exponential_decay(T, e, floor=0.005)
        assert fit.n_points == 3 and fit.alpha == pytest.approx(2.0)

    def test_too_few_points(self):
        assert np.isnan(fit_exponential_decay([1.0], [0.5]).alpha)


class TestReferences:
    def test_zero_suite(self, example_nf):
        ft = filter_chain(lambda t: 0.0 * t, dt=0.01, duration=5.0)
        ud = ideal_inverse_suite(example_nf, [ft])[0]
        assert np.all(ud["u"] == 0.0)

    def test_linear_in_scaling(self, example_nf):
        f = nominal_function(7)
        one = filter_chain(f, dt=0.01, duration=10.0)
        two = filter_chain(lambda t: 2 * f(t), dt=0.01, duration=10.0)
        a, b = ideal_inverse_suite(example_nf, [one, two])
        np.testing.assert_allclose(b["u"], 2 * a["u"], rtol=1e-12, atol=1e-12)

    def test_training_record(self, example):
        spec = ExcitationSpec(((1.0, 0.5),))
        rec = collect_training_data(example, spec)
        assert rec.channels == ("u", "y", "y_dot", "y_ddot", "y_3", "y_4")
        assert len(rec) == 1001
        assert np.isnan(rec["y_3"][:2]).all() and np.isfinite(rec["y_3"][2:-2]).all()
        # y_3 is the centred derivative of y_ddot away from the input's steps and kinks
        d = np.gradient(rec["y_ddot"], 0.01)
        t = rec.times
        mask = np.min(np.abs(t[:, None] - np.array([0, 1, 2, 4, 6, 8, 9, 10])[None, :]), axis=1) > 0.05
        np.testing.assert_allclose(rec["y_3"][mask], d[mask], atol=1e-2 * np.max(np.abs(d[mask])))


class TestSeeds:
    def test_stable_and_distinct(self):
        assert cell_seed(0, 1, 2) == cell_seed(0, 1, 2)
        assert len({cell_seed(0, 1, N) for N in (5, 10, 20, 40, 80)}) == 5
        assert cell_seed(0, 1, 2) != cell_seed(1, 1, 2)


class TestSweeps:
    def test_history_reproducible_and_order_free(self, tiny_exp):
        a = sweep_history(TINY, tiny_exp)
        b = sweep_history(TINY, tiny_exp)
        c = sweep_history(replace(TINY, jobs=2), tiny_exp)
        ta, tb, tc = (table2_csv(s, 0.1) for s in (a, b, c))
        assert ta == tb == tc
        assert ta.splitlines()[0] == "T,N,e_uN_pct,e_bar_uN_pct,dt"
        assert len(ta.splitlines()) == 1 + 2 * 2
        assert decay_fit_csv(a, 0.1).splitlines()[-2] == "beta,alpha,residual"

    def test_grid_skips_non_integral_pairs(self):
        cfg = replace(TINY, T_list=(0.1, 0.2), dt_list=(0.05, 0.2))
        assert cfg.grid_pairs() == [(0.1, 0.05), (0.2, 0.05), (0.2, 0.2)]

    def test_derivative_sweep(self, tiny_exp):
        cfg = replace(TINY, N_pool=(5,))
        rep = sweep_derivatives(cfg, tiny_exp, variants=["G_d0", "NARX*"])
        rows = rep.table()
        assert [(r["operator"], r["regime"]) for r in rows] == [
            ("G_d0", "noise-free"), ("NARX*", "noise-free"), ("G_d0", "noisy"), ("NARX*", "noisy")]
        assert table3_csv(rep).splitlines()[0] == "operator,regime,e_u_pct,e_bar_u_pct"
        for r in rows:
            assert 0 <= r["e_u_pct"] <= r["e_bar_u_pct"]

    def test_seven_operators(self):
        assert [s.label for s in derivative_specs(RunConfig())] == [
            "G_d0", "G_d1", "G_d2", "G_d3", "G_d4", "NARX", "NARX*"]
        with pytest.raises(DomainError):
            derivative_specs(RunConfig(), ["G_d9"])


class TestConfig:
    def test_defaults_valid(self):
        cfg = RunConfig().validate()
        assert cfg.base_dt == pytest.approx(0.01)

    def test_bad_tap_spacing(self):
        with pytest.raises(DomainError):
            RunConfig(dt_list=(0.015,)).validate()

    def test_yaml_and_env(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("T_list: [0.4, 0.8]\nseeds: 2\ntrain:\n  max_iter: 12\n")
        cfg = load_config(p, env={"KOOPINV_SEED": "42", "KOOPINV_OUT": "elsewhere"})
        assert cfg.T_list == (0.4, 0.8) and cfg.seeds == 2 and cfg.train.max_iter == 12
        assert cfg.master_seed == 42 and cfg.out == "elsewhere"

    def test_unknown_keys(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("bogus: 1\n")
        with pytest.raises(DomainError):
            load_config(p, env={})

    def test_round_trip(self):
        cfg = RunConfig(seeds=5)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg
