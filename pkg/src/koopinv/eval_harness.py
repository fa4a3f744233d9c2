"""Metrics, ideal-inverse references and the two headline sweeps.

The history sweep trains a pool of networks for every ``(T, dt)`` cell and
fits ``e_u(T) = beta * exp(-alpha * T)``; the derivative sweep compares
feature layouts at a fixed window in a noise-free and a noisy regime. Each
training job gets a seed derived from the master seed and the job's
coordinates, so results do not depend on execution order or ``jobs``.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import RunConfig
from .errors import DomainError, KoopinvError, NormalizationUndefined
from .exact_inverse import (
    DecayBound, decay_bound, exact_inverse_input, hidden_state_full, hidden_state_window_series,
)
from .learner import (
    Dataset, FeatureSpec, MlpModel, build_dataset, predict, train_mlp,
)
from .lti_core import (
    NormalForm, StateSpace, Trajectory, build_example_system, normal_form,
    output_derivatives, relative_degree, simulate,
)
from .signals import (
    DERIVATIVE_CHANNELS, ExcitationSpec, FilteredTrajectory, add_awgn,
    desired_trajectory, excitation_function, excitation_signal, finite_difference_34,
)

_REGIME_CODE = {"noise-free": 0, "noisy": 1}
_MODE_CODE = {"history-derivatives": 0, "narx": 1, "narx-star": 2}


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricReport:
    per_N: dict            # N -> tuple of per-trajectory errors (%)
    e_uN: dict             # N -> mean
    e_bar_uN: dict         # N -> max
    N_star: int
    e_u: float
    e_bar_u: float


def normalized_errors(u_hat, u_d) -> float:
    """``max |u_hat - u_d| / max |u_d|`` in percent."""
    uh = u_hat["u"] if isinstance(u_hat, Trajectory) else np.asarray(u_hat, dtype=float).ravel()
    ud = u_d["u"] if isinstance(u_d, Trajectory) else np.asarray(u_d, dtype=float).ravel()
    if uh.shape != ud.shape:
        raise DomainError(f"grids differ: {uh.shape} vs {ud.shape}")
    peak = float(np.max(np.abs(ud))) if ud.size else 0.0
    if peak == 0.0:
        raise NormalizationUndefined("normalization undefined: reference input is identically zero")
    return float(np.max(np.abs(uh - ud)) / peak * 100.0)


def metric_report(per_k_errors: dict) -> MetricReport:
    """Mean/max over trajectories per N; ``N*`` minimises the mean, ties to the smaller N."""
    per = {}
    for N, errs in per_k_errors.items():
        e = np.asarray(errs, dtype=float)
        if e.size == 0:
            raise DomainError(f"no trajectory errors for N={N}")
        per[int(N)] = tuple(float(v) for v in e)
    if not per:
        raise DomainError("empty error table")
    mean = {N: float(np.mean(v)) for N, v in per.items()}
    worst = {N: float(np.max(v)) for N, v in per.items()}
    N_star = min(per, key=lambda N: (mean[N], N))
    return MetricReport(per, mean, worst, N_star, mean[N_star], worst[N_star])


@dataclass(frozen=True)
class DecayFit:
    beta: float
    alpha: float
    residual: float
    n_points: int


def fit_exponential_decay(T, e_u, floor: float = 0.0) -> DecayFit:
    """Least squares of ``log e_u`` on ``T``; points at or below ``floor`` are left out.

    ``residual`` is the RMS of the log residuals.
    """
    T = np.asarray(T, dtype=float)
    e = np.asarray(e_u, dtype=float)
    keep = np.isfinite(e) & (e > floor) & (e > 0)
    if keep.sum() < 2:
        return DecayFit(math.nan, math.nan, math.nan, int(keep.sum()))
    slope, icpt = np.polyfit(T[keep], np.log(e[keep]), 1)
    res = np.log(e[keep]) - (icpt + slope * T[keep])
    return DecayFit(float(np.exp(icpt)), float(-slope), float(np.sqrt(np.mean(res**2))), int(keep.sum()))


# ------------------------------------------------------- reference data

def load_system(name: str) -> StateSpace:
    """``"example"`` or a YAML file with ``A``, ``B``, ``C`` entries."""
    if name == "example":
        return build_example_system()
    try:
        data = yaml.safe_load(Path(name).read_text())
        return StateSpace(data["A"], data["B"], data["C"])
    except (OSError, yaml.YAMLError, KeyError, TypeError) as exc:
        raise DomainError(f"cannot load system {name!r}: {exc}") from exc


def ideal_inverse_suite(nf: NormalForm, trajectories: Sequence[FilteredTrajectory]) -> list[Trajectory]:
    """Exact inverse input for each filtered trajectory, with the hidden state from the full record."""
    if nf.r > 4:
        raise DomainError("filtered trajectories carry derivatives up to order 4 only")
    out = []
    for ft in trajectories:
        xi = np.column_stack([ft.derivative(j) for j in range(nf.r)])
        eta = hidden_state_full(nf, ft.y_d).samples
        ud = exact_inverse_input(nf, xi, ft.derivative(nf.r), eta)
        out.append(Trajectory(ft.y_d.dt, ("u",), np.asarray(ud).reshape(-1, 1), ft.y_d.t0))
    return out


def closed_loop_tracking_error(sys: StateSpace, u: Trajectory, y_d) -> float:
    """Normalized max error (%) of the plant output under ``u`` against ``y_d``, from rest."""
    yd = y_d["y"] if isinstance(y_d, Trajectory) else np.asarray(y_d, dtype=float).ravel()
    sim = simulate(sys, u, None, u.dt, u.duration, u.t0)
    return normalized_errors(sim["y"][: len(yd)], yd[: len(sim)])


def derivative_stack(sys: StateSpace, sim: Trajectory, u: np.ndarray) -> Trajectory:
    """Output and derivatives 0..4 from a simulated record.

    Orders up to ``min(r, 2)`` come from the states; the third and fourth are
    five-point stencils of the second. Orders beyond 2 that the states
    provide exactly (``r >= 3``) are taken from the states instead.
    """
    r = relative_degree(sys)
    X = sim.samples[:, : sys.n]
    exact = output_derivatives(sys, X, u, min(r, 4), r)
    cols = [np.full(len(X), np.nan)] * 5
    for j, c in enumerate(exact):
        cols[j] = np.asarray(c, dtype=float)
    if 2 <= r < 4:
        y3, y4 = finite_difference_34(Trajectory(sim.dt, ("y",), cols[2], sim.t0))
        if r < 3:
            cols[3] = y3["y"]
        cols[4] = y4["y"]
    return Trajectory(sim.dt, DERIVATIVE_CHANNELS, np.column_stack(cols), sim.t0)


def collect_training_data(sys: StateSpace, spec: ExcitationSpec = ExcitationSpec(),
                          dt: float = 0.01) -> Trajectory:
    """Plant response to the excitation: channels ``u`` then the derivative stack."""
    u = excitation_signal(spec, dt)
    sim = simulate(sys, excitation_function(spec), None, dt, spec.duration)
    stack = derivative_stack(sys, sim, u["u"])
    return Trajectory(dt, ("u",) + stack.channels, np.column_stack([u["u"], stack.samples]))


@dataclass
class Experiment:
    """Training record plus evaluation references for one plant."""

    sys: StateSpace
    nf: NormalForm
    train: Trajectory                  # u + derivative stack
    eval_stacks: list[Trajectory]
    eval_u: list[Trajectory]
    trajectories: tuple[int, ...]

    @classmethod
    def build(cls, cfg: RunConfig) -> "Experiment":
        sys = load_system(cfg.system)
        nf = normal_form(sys)
        spec = ExcitationSpec.from_file(cfg.excitation) if cfg.excitation else ExcitationSpec()
        train = collect_training_data(sys, spec, cfg.base_dt)
        fts = [desired_trajectory(k, cfg.base_dt, cfg.cutoff_a) for k in cfg.trajectories]
        return cls(sys, nf, train, [ft.stack() for ft in fts], ideal_inverse_suite(nf, fts),
                   tuple(cfg.trajectories))

    def training_stack(self, regime: str, snr_db: float, seed: int, linear: bool = False) -> Trajectory:
        if regime == "noise-free":
            return self.train
        return add_awgn(self.train, snr_db, seed, channels=DERIVATIVE_CHANNELS, linear=linear)


def evaluate_model(model: MlpModel, exp: Experiment, spec: FeatureSpec) -> list[float]:
    """Per-trajectory normalized errors on rows with a full window (``t >= T``)."""
    errs = []
    for st, ud in zip(exp.eval_stacks, exp.eval_u):
        ds = build_dataset(st, ud, spec)
        errs.append(normalized_errors(predict(model, ds.X), ds.y_target))
    return errs


@dataclass(frozen=True)
class DecayMeasurement:
    T: tuple[float, ...]
    measured: tuple[float, ...]      # max_t ||eta - eta_hat|| over t >= T
    bound: DecayBound
    fit: DecayFit

    def rows(self) -> list[dict]:
        return [{"T": T, "measured": m, "bound": float(self.bound(T))} for T, m in zip(self.T, self.measured)]


def hidden_state_decay(nf: NormalForm, y: Trajectory, T_list: Sequence[float]) -> DecayMeasurement:
    """Finite-window hidden-state error on a record, against the exponential bound.

    The bound uses ``M = max |y|`` over the record and ``kappa1`` taken over
    the record's time grid.
    """
    eta = hidden_state_full(nf, y).samples
    measured = []
    for T in T_list:
        w = int(round(T / y.dt))
        est = hidden_state_window_series(nf, y, T)
        measured.append(float(np.max(np.linalg.norm((eta - est)[w:], axis=1))) if nf.n_hidden else 0.0)
    yv = y["y"] if "y" in y.channels else y.samples[:, 0]
    bound = decay_bound(nf, float(np.max(np.abs(yv))), y.times - y.t0)
    fit = fit_exponential_decay(T_list, measured)
    return DecayMeasurement(tuple(float(T) for T in T_list), tuple(measured), bound, fit)


# --------------------------------------------------------------- jobs

def cell_seed(master: int, *coords) -> int:
    """Deterministic 32-bit seed from the master seed and integer job coordinates."""
    ints = [int(master)] + [int(c) for c in coords]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _ms(x: float) -> int:
    return int(round(x * 1000))


@dataclass(frozen=True)
class Job:
    spec: FeatureSpec
    N: int
    regime: str
    replicate: int
    seed: int
    noise_seed: int


@dataclass
class JobResult:
    job: Job
    per_k: tuple[float, ...] | None
    error: str | None = None
    history: dict = field(default_factory=dict)


_WORKER_EXP: dict = {}


def _run_job(job: Job, cfg: RunConfig, exp: Experiment | None = None) -> JobResult:
    exp = exp if exp is not None else _WORKER_EXP["exp"]
    stack = exp.training_stack(job.regime, cfg.snr_db, job.noise_seed, cfg.snr_linear)
    ds = build_dataset(stack, stack, job.spec)
    try:
        model = train_mlp(ds, job.N, job.seed, cfg.train)
        return JobResult(job, tuple(evaluate_model(model, exp, job.spec)), None, model.history)
    except KoopinvError as exc:
        return JobResult(job, None, str(exc))


def _init_worker(exp):
    _WORKER_EXP["exp"] = exp


def run_jobs(jobs: Sequence[Job], cfg: RunConfig, exp: Experiment, progress=None) -> list[JobResult]:
    """Run jobs serially or in a process pool; output order follows ``jobs``."""
    if cfg.jobs <= 1 or len(jobs) <= 1:
        out = []
        for j in jobs:
            out.append(_run_job(j, cfg, exp))
            if progress:
                progress(out[-1])
        return out
    with ProcessPoolExecutor(cfg.jobs, initializer=_init_worker, initargs=(exp,)) as pool:
        out = []
        for res in pool.map(_run_job, jobs, [cfg] * len(jobs)):
            out.append(res)
            if progress:
                progress(res)
        return out


def _noise_seed(cfg: RunConfig, replicate: int) -> int:
    return cell_seed(cfg.master_seed, 7, replicate)


# ------------------------------------------------------- history sweep

@dataclass
class SweepResult:
    """History sweep over ``(T, dt, N)`` and replicates.

    ``cells[(T, dt, replicate)]`` is the :class:`MetricReport` of one pool;
    summaries take medians over replicates.
    """

    cells: dict
    fits: dict                       # dt -> DecayFit
    failures: list = field(default_factory=list)
    floor_pct: float = 0.0

    def grid(self, dt: float) -> list[float]:
        return sorted({T for (T, d, _) in self.cells if d == dt})

    def replicates(self) -> list[int]:
        return sorted({r for (_, _, r) in self.cells})

    def e_u(self, dt: float) -> dict:
        """Median over replicates of ``e_u`` per ``T``."""
        return {T: float(np.median([self.cells[(T, dt, r)].e_u for r in self.replicates()
                                    if (T, dt, r) in self.cells])) for T in self.grid(dt)}

    def table(self, dt: float) -> list[dict]:
        rows = []
        for T in self.grid(dt):
            reps = [self.cells[(T, dt, r)] for r in self.replicates() if (T, dt, r) in self.cells]
            for N in sorted(reps[0].e_uN):
                rows.append({
                    "T": T, "N": N,
                    "e_uN_pct": float(np.median([c.e_uN[N] for c in reps if N in c.e_uN])),
                    "e_bar_uN_pct": float(np.median([c.e_bar_uN[N] for c in reps if N in c.e_bar_uN])),
                    "dt": dt,
                })
        return rows


def _assemble(results: Sequence[JobResult], key):
    grouped, failures = {}, []
    for res in results:
        if res.per_k is None:
            failures.append((res.job, res.error))
            continue
        grouped.setdefault(key(res.job), {})[res.job.N] = res.per_k
    return {k: metric_report(v) for k, v in grouped.items()}, failures


def history_jobs(cfg: RunConfig, dt_list=None) -> list[Job]:
    jobs = []
    for rep in range(cfg.seeds):
        for T, dt in cfg.grid_pairs(dt_list):
            spec = FeatureSpec(T, dt, 2)
            for N in cfg.N_pool:
                seed = cell_seed(cfg.master_seed, 1, rep, _ms(T), _ms(dt), N)
                jobs.append(Job(spec, N, "noise-free", rep, seed, _noise_seed(cfg, rep)))
    return jobs


def sweep_history(cfg: RunConfig, exp: Experiment | None = None, dt_list=None,
                  progress=None) -> SweepResult:
    exp = exp if exp is not None else Experiment.build(cfg)
    results = run_jobs(history_jobs(cfg, dt_list), cfg, exp, progress)
    cells, failures = _assemble(results, lambda j: (j.spec.T, j.spec.dt_tap, j.replicate))
    sweep = SweepResult(cells, {}, failures, cfg.decay_floor_pct)
    for dt in sorted({d for (_, d, _) in cells}):
        eu = sweep.e_u(dt)
        sweep.fits[dt] = fit_exponential_decay(list(eu), list(eu.values()), cfg.decay_floor_pct)
    return sweep


# ---------------------------------------------------- derivative sweep

@dataclass
class DerivativeReport:
    """Feature-layout comparison; ``cells[(label, regime, replicate)]`` are pool reports."""

    cells: dict
    failures: list = field(default_factory=list)

    def labels(self) -> list[str]:
        seen = []
        for (lab, _, _) in self.cells:
            if lab not in seen:
                seen.append(lab)
        return seen

    def summary(self, label: str, regime: str) -> tuple[float, float]:
        """Medians over replicates of ``(e_u, e_bar_u)``."""
        reps = [c for (lab, reg, _), c in self.cells.items() if lab == label and reg == regime]
        if not reps:
            raise KeyError((label, regime))
        return float(np.median([c.e_u for c in reps])), float(np.median([c.e_bar_u for c in reps]))

    def table(self) -> list[dict]:
        rows = []
        regimes = []
        for (_, reg, _) in self.cells:
            if reg not in regimes:
                regimes.append(reg)
        for reg in regimes:
            for lab in self.labels():
                try:
                    e, eb = self.summary(lab, reg)
                except KeyError:
                    continue
                rows.append({"operator": lab, "regime": reg, "e_u_pct": e, "e_bar_u_pct": eb})
        return rows


def derivative_specs(cfg: RunConfig, variants: Sequence[str] | None = None) -> list[FeatureSpec]:
    specs = [FeatureSpec(cfg.T_star, cfg.dt_star, l) for l in cfg.l_list]
    if cfg.include_narx:
        specs += [FeatureSpec.narx(cfg.T_star, cfg.dt_star), FeatureSpec.narx_star(cfg.T_star, cfg.dt_star)]
    if variants is not None:
        wanted = set(variants)
        unknown = wanted - {s.label for s in specs}
        if unknown:
            raise DomainError(f"unknown operator variants {sorted(unknown)}")
        specs = [s for s in specs if s.label in wanted]
    return specs


def derivative_jobs(cfg: RunConfig, variants=None) -> list[Job]:
    jobs = []
    for rep in range(cfg.seeds):
        for regime in cfg.regimes:
            for spec in derivative_specs(cfg, variants):
                for N in cfg.N_pool:
                    seed = cell_seed(cfg.master_seed, 2, rep, _REGIME_CODE[regime],
                                     _MODE_CODE[spec.mode], spec.l, N)
                    jobs.append(Job(spec, N, regime, rep, seed, _noise_seed(cfg, rep)))
    return jobs


def sweep_derivatives(cfg: RunConfig, exp: Experiment | None = None, variants=None,
                      progress=None) -> DerivativeReport:
    exp = exp if exp is not None else Experiment.build(cfg)
    results = run_jobs(derivative_jobs(cfg, variants), cfg, exp, progress)
    cells, failures = _assemble(results, lambda j: (j.spec.label, j.regime, j.replicate))
    return DerivativeReport(cells, failures)


# -------------------------------------------------------------- output

def rows_to_csv(rows: Sequence[dict], columns: Sequence[str], header_comments=()) -> str:
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "%.10g" % v
    return v


TABLE2_COLUMNS = ("T", "N", "e_uN_pct", "e_bar_uN_pct", "dt")
TABLE3_COLUMNS = ("operator", "regime", "e_u_pct", "e_bar_u_pct")
DECAY_COLUMNS = ("beta", "alpha", "residual")


def table2_csv(sweep: SweepResult, dt: float, header_comments=()) -> str:
    return rows_to_csv(sweep.table(dt), TABLE2_COLUMNS, header_comments)


def decay_fit_csv(sweep: SweepResult, dt: float, header_comments=()) -> str:
    f = sweep.fits[dt]
    notes = list(header_comments) + [
        f"log-linear least squares on median e_u over replicates; cells with e_u <= {sweep.floor_pct:g}% excluded",
        f"points_used={f.n_points}",
    ]
    return rows_to_csv([{"beta": f.beta, "alpha": f.alpha, "residual": f.residual}], DECAY_COLUMNS, notes)


def table3_csv(report: DerivativeReport, header_comments=()) -> str:
    return rows_to_csv(report.table(), TABLE3_COLUMNS, header_comments)


def plot_history(sweep: SweepResult, path) -> None:
    """Log-scale ``e_u`` against ``T`` per tap spacing, with the fitted curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for dt, fit in sorted(sweep.fits.items()):
        eu = sweep.e_u(dt)
        Ts = np.array(list(eu))
        (line,) = ax.semilogy(Ts, list(eu.values()), "o", label=f"dt = {dt:g} s")
        if np.isfinite(fit.alpha):
            grid = np.linspace(Ts.min(), Ts.max(), 100)
            ax.semilogy(grid, fit.beta * np.exp(-fit.alpha * grid), "-", color=line.get_color(), lw=0.8)
    ax.set_xlabel("T [s]")
    ax.set_ylabel("e_u [%]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
