import numpy as np
import pytest

from koopinv import cli
from koopinv.config import load_config
from koopinv.errors import TrainingFailed
from koopinv.eval_harness import Experiment, sweep_history, table2_csv
from koopinv.lti_core import Trajectory

TINY_YAML = """\
T_list: [0.2, 0.4]
dt_list: [0.1]
N_pool: [5]
seeds: 1
l_list: [0, 2]
T_star: 0.4
dt_star: 0.1
train:
  max_iter: 10
  patience: 5
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_YAML)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_excitation(tmp_path):
    assert run("simulate", "--system", "example", "--input", "excitation", "--out", tmp_path) == 0
    tr = Trajectory.from_csv(tmp_path / "simulate_excitation.csv")
    assert len(tr) == 20001 and tr.duration == pytest.approx(200.0)
    assert tr.channels[:3] == ("u", "y", "y_dot")
    text = (tmp_path / "simulate_excitation.csv").read_text()
    assert "# master_seed=0" in text


def test_simulate_step_shows_jump_in_second_derivative(tmp_path):
    assert run("simulate", "--input", "step", "--out", tmp_path) == 0
    tr = Trajectory.from_csv(tmp_path / "simulate_step.csv")
    assert tr["y_dot"][0] == 0.0
    assert tr["y_ddot"][0] == pytest.approx(11.0)


def test_simulate_zero(tmp_path):
    assert run("simulate", "--input", "zero", "--out", tmp_path) == 0
    tr = Trajectory.from_csv(tmp_path / "simulate_zero.csv")
    finite = tr.samples[np.isfinite(tr.samples)]
    assert np.all(finite == 0.0)


def test_invert_analytic(tmp_path, capsys):
    assert run("invert", "--model", "analytic", "--trajectory", 6, "--out", tmp_path) == 0
    text = (tmp_path / "invert_analytic_traj6.csv").read_text()
    line = [l for l in text.splitlines() if "closed_loop_tracking_error_pct" in l][0]
    assert float(line.split("=")[1]) < 0.1


def test_invert_bad_index(tmp_path):
    assert run("invert", "--trajectory", 11, "--out", tmp_path) == 2


def test_bad_config(tmp_path):
    assert run("decay", "--config", tmp_path / "missing.yaml", "--out", tmp_path) == 2


def test_bad_flag():
    assert run("simulate", "--no-such-flag") == 2


def test_train_then_invert(tmp_path):
    out = tmp_path / "o"
    assert run("train", "--T", 3.2, "--dt", 0.05, "--l", 2, "--N", 20, "--out", out) == 0
    model = out / "model_G_d2.json"
    assert run("invert", "--model", model, "--trajectory", 6, "--out", out) == 0
    text = (out / "invert_G_d2_traj6.csv").read_text()
    err = float([l for l in text.splitlines() if "normalized_max_error_pct" in l][0].split("=")[1])
    assert err <= 0.1
    assert run("invert", "--model", model, "--trajectory", 6, "--T", 1.6, "--out", out) == 3
    assert run("invert", "--model", model, "--trajectory", 6, "--mode", "narx", "--l", 0, "--out", out) == 3


def test_collect(tmp_path):
    assert run("collect", "--T", 0.2, "--dt", 0.1, "--l", 1, "--out", tmp_path) == 0
    path = tmp_path / "dataset_G_d1_T0.2_dt0.1_noise-free.csv"
    lines = path.read_text().splitlines()
    header = [l for l in lines if not l.startswith("#")][0]
    assert header == "t,y[m-2],y[m-1],y[m],y[m],y_dot[m],u[m]"


def test_reproduce_deterministic_and_matches_library(tmp_path, tiny):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("reproduce", "table2", "--dt", 0.1, "--config", tiny, "--out", a, "--quiet") == 0
    assert run("reproduce", "table2", "--dt", 0.1, "--config", tiny, "--out", b, "--quiet") == 0
    assert (a / "table2.csv").read_bytes() == (b / "table2.csv").read_bytes()
    assert (a / "decay_fit.csv").read_bytes() == (b / "decay_fit.csv").read_bytes()

    cfg = load_config(tiny, env={})
    sweep = sweep_history(cfg, Experiment.build(cfg), [0.1])
    lib = table2_csv(sweep, 0.1, cli._header(cfg, "reproduce table2 dt=0.1"))
    assert (a / "table2.csv").read_text() == lib


def test_reproduce_table3_regime(tmp_path, tiny):
    assert run("reproduce", "table3", "--regime", "noisy", "--config", tiny, "--out", tmp_path, "--quiet") == 0
    rows = [l for l in (tmp_path / "table3.csv").read_text().splitlines() if not l.startswith("#")]
    assert rows[0] == "operator,regime,e_u_pct,e_bar_u_pct"
    assert [r.split(",")[0] for r in rows[1:]] == ["G_d0", "G_d2", "NARX", "NARX*"]
    assert all(r.split(",")[1] == "noisy" for r in rows[1:])


def test_seed_flag_recorded(tmp_path, tiny):
    assert run("reproduce", "table3", "--regime", "noise-free", "--variants", "G_d2", "--seed", 17,
               "--config", tiny, "--out", tmp_path, "--quiet") == 0
    assert "# master_seed=17" in (tmp_path / "table3.csv").read_text()


def test_no_cell_completes(tmp_path, tiny, monkeypatch):
    import koopinv.eval_harness as eh

    def boom(*a, **k):
        raise TrainingFailed("training failed: loss diverged")

    monkeypatch.setattr(eh, "train_mlp", boom)
    assert run("reproduce", "table3", "--variants", "G_d2", "--config", tiny, "--out", tmp_path, "--quiet") == 4


def test_decay(tmp_path):
    assert run("decay", "--out", tmp_path) == 0
    lines = [l for l in (tmp_path / "decay.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "T,measured,bound"
    for row in lines[1:]:
        T, meas, bound = map(float, row.split(","))
        assert meas <= bound
