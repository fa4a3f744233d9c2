"""Command-line front end: ``koopinv <command> [options]``.

Every command composes library calls and writes CSV files into the output
directory. Each file starts with ``#`` comment lines recording the command
and the master seed. Exit codes: 0 success, 2 input or config error,
3 model/request incompatibility, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import REGIMES, RunConfig, load_config
from .errors import CompatibilityError, DomainError, KoopinvError
from .eval_harness import (
    Experiment, cell_seed, closed_loop_tracking_error, collect_training_data, decay_fit_csv, derivative_stack,
    evaluate_model, hidden_state_decay, ideal_inverse_suite, load_system, normalized_errors,
    plot_history, rows_to_csv, sweep_derivatives, sweep_history, table2_csv, table3_csv,
)
from .exact_inverse import exact_inverse_input, hidden_state_full
from .learner import FeatureSpec, MlpModel, ModelPool, build_dataset, predict, select_best, train_mlp
from .lti_core import Trajectory, normal_form, simulate
from .signals import DERIVATIVE_CHANNELS, ExcitationSpec, add_awgn, desired_trajectory

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4


def write_atomic(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _header(cfg: RunConfig, command: str) -> list[str]:
    return [f"koopinv {__version__} {command}", f"master_seed={cfg.master_seed}", f"system={cfg.system}"]


def _say(msg: str) -> None:
    print(msg, flush=True)


# ----------------------------------------------------------- commands

def cmd_simulate(cfg: RunConfig, args) -> int:
    plant = load_system(cfg.system)
    dt = cfg.base_dt
    src = args.input
    if src == "excitation":
        spec = ExcitationSpec.from_file(cfg.excitation) if cfg.excitation else ExcitationSpec()
        rec = collect_training_data(plant, spec, dt)
        name = "simulate_excitation.csv"
    else:
        if src == "step":
            u, duration = 1.0, args.duration or 5.0
        elif src == "zero":
            u, duration = 0.0, args.duration or 10.0
        elif src.isdigit():
            k = int(src)
            if not 1 <= k <= 10:
                raise DomainError(f"trajectory index {k} is outside 1..10")
            nf = normal_form(plant)
            u = ideal_inverse_suite(nf, [desired_trajectory(k, dt, cfg.cutoff_a)])[0]
            duration = args.duration or u.duration
        else:
            u = Trajectory.from_csv(src)
            if "u" not in u.channels:
                raise DomainError(f"{src} has no 'u' column")
            u = u.select("u")
            duration = args.duration or u.duration
        sim = simulate(plant, u, None, dt, duration)
        uv = u["u"] if isinstance(u, Trajectory) else np.full(len(sim), float(u))
        uv = uv[: len(sim)]
        stack = derivative_stack(plant, sim, uv)
        states = sim.select(*[f"x{i + 1}" for i in range(plant.n)])
        rec = Trajectory(dt, ("u",) + states.channels + stack.channels,
                         np.column_stack([uv, states.samples, stack.samples]))
        name = f"simulate_{Path(src).stem if not src.isdigit() else 'traj' + src}.csv"
    out = write_atomic(Path(cfg.out) / name, rec.to_csv(header_comments=_header(cfg, f"simulate {src}")))
    _say(f"wrote {out} ({len(rec)} samples)")
    return EXIT_OK


def _feature_spec(cfg: RunConfig, args) -> FeatureSpec:
    T = cfg.T_star if args.T is None else args.T
    dt = cfg.dt_star if args.dt is None else args.dt
    if args.mode == "narx":
        return FeatureSpec.narx(T, dt)
    if args.mode == "narx-star":
        return FeatureSpec.narx_star(T, dt)
    return FeatureSpec(T, dt, 2 if args.l is None else args.l)


def _training_record(cfg: RunConfig, rec: Trajectory, regime: str) -> Trajectory:
    if regime == "noise-free":
        return rec
    return add_awgn(rec, cfg.snr_db, cell_seed(cfg.master_seed, 7, 0), DERIVATIVE_CHANNELS, cfg.snr_linear)


def cmd_collect(cfg: RunConfig, args) -> int:
    spec = _feature_spec(cfg, args)
    plant = load_system(cfg.system)
    exc = ExcitationSpec.from_file(cfg.excitation) if cfg.excitation else ExcitationSpec()
    rec = _training_record(cfg, collect_training_data(plant, exc, cfg.base_dt), args.regime)
    ds = build_dataset(rec, rec, spec)
    out = Path(cfg.out) / f"dataset_{spec.label}_T{spec.T:g}_dt{spec.dt_tap:g}_{args.regime}.csv"
    hdr = _header(cfg, f"collect {spec.label} T={spec.T:g} dt={spec.dt_tap:g} regime={args.regime}")
    write_atomic(out, "".join(f"# {h}\n" for h in hdr) + ds.to_csv())
    _say(f"wrote {out} ({len(ds)} rows, {spec.width} features)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    spec = _feature_spec(cfg, args)
    exp = Experiment.build(cfg)
    rec = _training_record(cfg, exp.train, args.regime)
    ds = build_dataset(rec, rec, spec)
    sizes = tuple(args.N) if args.N else cfg.N_pool
    models, errors, rows = {}, {}, []
    for N in sizes:
        seed = cell_seed(cfg.master_seed, 3, N)
        try:
            m = train_mlp(ds, N, seed, cfg.train)
        except KoopinvError as exc:
            _say(f"N={N}: {exc}")
            continue
        per_k = evaluate_model(m, exp, spec)
        models[N], errors[N] = m, float(np.mean(per_k))
        rows.append({"N": N, "seed": seed, "e_uN_pct": errors[N], "e_bar_uN_pct": float(np.max(per_k))})
        m.save(Path(cfg.out) / f"model_{spec.label}_N{N}.json")
        _say(f"N={N}: e_uN={errors[N]:.4g}%")
    if not models:
        _say("no network trained")
        return EXIT_NUMERIC
    N_star, best = select_best(ModelPool(models, errors))
    best.save(Path(cfg.out) / f"model_{spec.label}.json")
    write_atomic(Path(cfg.out) / f"pool_{spec.label}.csv",
                 rows_to_csv(rows, ("N", "seed", "e_uN_pct", "e_bar_uN_pct"),
                             _header(cfg, f"train {spec.label} T={spec.T:g} dt={spec.dt_tap:g}")))
    _say(f"N*={N_star} e_u={errors[N_star]:.4g}% -> {Path(cfg.out) / f'model_{spec.label}.json'}")
    return EXIT_OK


def _eval_reference(cfg: RunConfig, nf, source: str):
    """Derivative stack and reference input for a trajectory index or a CSV file."""
    if source.isdigit():
        k = int(source)
        if not 1 <= k <= 10:
            raise DomainError(f"trajectory index {k} is outside 1..10")
        ft = desired_trajectory(k, cfg.base_dt, cfg.cutoff_a)
        return ft.stack(), ideal_inverse_suite(nf, [ft])[0], f"traj{k}"
    rec = Trajectory.from_csv(source)
    missing = [c for c in DERIVATIVE_CHANNELS[: nf.r + 1] if c not in rec.channels]
    if missing:
        raise DomainError(f"{source} lacks channels {missing}")
    cols = [rec[c] if c in rec.channels else np.full(len(rec), np.nan) for c in DERIVATIVE_CHANNELS]
    stack = Trajectory(rec.dt, DERIVATIVE_CHANNELS, np.column_stack(cols), rec.t0)
    ref = rec.select("u") if "u" in rec.channels else None
    return stack, ref, Path(source).stem


def cmd_invert(cfg: RunConfig, args) -> int:
    plant = load_system(cfg.system)
    nf = normal_form(plant)
    stack, ref, tag = _eval_reference(cfg, nf, args.trajectory)
    track = None
    if args.model == "analytic":
        xi = np.column_stack([stack.samples[:, j] for j in range(nf.r)])
        eta = hidden_state_full(nf, stack.select("y")).samples
        u_hat = np.asarray(exact_inverse_input(nf, xi, stack.samples[:, nf.r], eta))
        times, target = stack.times, None if ref is None else ref["u"]
        label = "analytic"
        track = closed_loop_tracking_error(plant, Trajectory(stack.dt, ("u",), u_hat, stack.t0), stack["y"])
    else:
        model = MlpModel.load(args.model)
        if model.spec is None:
            raise CompatibilityError("model file does not record its feature layout")
        if any(v is not None for v in (args.T, args.dt, args.l, args.mode)):
            want = _feature_spec(cfg, args)
            if want != model.spec:
                raise CompatibilityError(f"model expects {model.spec}, request is {want}")
        u_src = ref if ref is not None else Trajectory(stack.dt, ("u",), np.zeros(len(stack)), stack.t0)
        if model.spec.uses_inputs and ref is None:
            raise DomainError("operators with input taps need a reference input channel 'u'")
        ds = build_dataset(stack, u_src, model.spec)
        u_hat = predict(model, ds.X)
        times = ds.sample_times
        target = ds.y_target if ref is not None else None
        label = model.spec.label
    cols, names = [u_hat], ["u_hat"]
    if target is not None:
        cols.append(target)
        names.append("u_d")
    hdr = _header(cfg, f"invert {label} {args.trajectory}")
    err = None
    if target is not None:
        err = normalized_errors(u_hat, target)
        hdr.append(f"normalized_max_error_pct={err:.10g}")
    if track is not None:
        hdr.append(f"closed_loop_tracking_error_pct={track:.10g}")
    dt = float(times[1] - times[0]) if len(times) > 1 else stack.dt
    out_traj = Trajectory(dt, tuple(names), np.column_stack(cols), float(times[0]))
    out = write_atomic(Path(cfg.out) / f"invert_{label}_{tag}.csv", out_traj.to_csv(header_comments=hdr))
    _say(f"wrote {out}" + ("" if err is None else f"; normalized max error {err:.4g}%")
         + ("" if track is None else f"; closed-loop tracking error {track:.4g}%"))
    return EXIT_OK


def _progress(res):
    j = res.job
    status = f"e_uN={np.mean(res.per_k):.4g}%" if res.per_k is not None else f"failed: {res.error}"
    print(f"  {j.spec.label} T={j.spec.T:g} dt={j.spec.dt_tap:g} N={j.N} {j.regime} rep={j.replicate} {status}",
          file=sys.stderr, flush=True)


def cmd_reproduce(cfg: RunConfig, args) -> int:
    exp = Experiment.build(cfg)
    out_dir = Path(cfg.out)
    prog = None if args.quiet else _progress
    if args.which in ("table2", "decay-fit"):
        dts = [args.dt] if args.dt is not None else list(cfg.dt_list)
        sweep = sweep_history(cfg, exp, dts, prog)
        for job, msg in sweep.failures:
            _say(f"cell T={job.spec.T:g} dt={job.spec.dt_tap:g} N={job.N}: {msg}")
        if not sweep.cells:
            return EXIT_NUMERIC
        for dt in sorted(sweep.fits):
            sfx = "" if len(sweep.fits) == 1 else f"_dt{dt:g}"
            hdr = _header(cfg, f"reproduce {args.which} dt={dt:g}")
            if args.which == "table2":
                write_atomic(out_dir / f"table2{sfx}.csv", table2_csv(sweep, dt, hdr))
            write_atomic(out_dir / f"decay_fit{sfx}.csv", decay_fit_csv(sweep, dt, hdr))
            f = sweep.fits[dt]
            _say(f"dt={dt:g}: e_u(T) = {f.beta:.4g} exp(-{f.alpha:.4g} T), log-residual {f.residual:.3g}")
        if args.plot:
            plot_history(sweep, out_dir / "history_sweep.png")
    else:
        if args.regime:
            cfg = replace(cfg, regimes=(args.regime,))
        report = sweep_derivatives(cfg, exp, args.variants, prog)
        for job, msg in report.failures:
            _say(f"cell {job.spec.label} {job.regime} N={job.N}: {msg}")
        if not report.cells:
            return EXIT_NUMERIC
        write_atomic(out_dir / "table3.csv", table3_csv(report, _header(cfg, "reproduce table3")))
        for row in report.table():
            _say(f"{row['regime']:>10} {row['operator']:>6}: e_u={row['e_u_pct']:.4g}% e_bar_u={row['e_bar_u_pct']:.4g}%")
    return EXIT_OK


def cmd_decay(cfg: RunConfig, args) -> int:
    exp = Experiment.build(cfg)
    T_list = args.T_list or list(cfg.T_list)
    meas = hidden_state_decay(exp.nf, exp.train.select("y"), T_list)
    hdr = _header(cfg, "decay") + [
        f"kappa1={meas.bound.kappa1:.10g} alpha1={meas.bound.alpha1:.10g} beta1={meas.bound.beta1:.10g} M={meas.bound.M:.10g}",
        f"fitted_rate={meas.fit.alpha:.10g}",
    ]
    out = write_atomic(Path(cfg.out) / "decay.csv", rows_to_csv(meas.rows(), ("T", "measured", "bound"), hdr))
    _say(f"wrote {out}; fitted rate {meas.fit.alpha:.4g} 1/s, bound rate {meas.bound.alpha1:.4g} 1/s")
    return EXIT_OK


# ------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config and KOOPINV_SEED)")
    common.add_argument("--jobs", type=int, help="parallel training jobs")
    common.add_argument("--out", help="output directory")
    common.add_argument("--system", help='"example" or a YAML file with A, B, C')

    feat = argparse.ArgumentParser(add_help=False)
    feat.add_argument("--T", type=float, help="history window [s]")
    feat.add_argument("--dt", type=float, help="tap spacing [s]")
    feat.add_argument("--l", type=int, choices=range(5), help="highest output derivative")
    feat.add_argument("--mode", choices=("history-derivatives", "narx", "narx-star"))

    p = argparse.ArgumentParser(prog="koopinv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate the plant and write its derivative channels")
    s.add_argument("--input", default="excitation",
                   help="excitation | step | zero | trajectory index 1..10 | CSV file with a 'u' column")
    s.add_argument("--duration", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("collect", parents=[common, feat], help="write a feature dataset CSV")
    s.add_argument("--regime", choices=REGIMES, default="noise-free")
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("train", parents=[common, feat], help="train a network pool and keep the best")
    s.add_argument("--regime", choices=REGIMES, default="noise-free")
    s.add_argument("--N", type=int, nargs="+", help="hidden widths (default: config pool)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("invert", parents=[common, feat], help="predict the inverse input for a trajectory")
    s.add_argument("--model", default="analytic", help='model JSON file or "analytic"')
    s.add_argument("--trajectory", required=True, help="index 1..10 or CSV with y, y_dot, ... columns")
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("reproduce", parents=[common], help="run a headline sweep")
    s.add_argument("which", choices=("table2", "table3", "decay-fit"))
    s.add_argument("--dt", type=float, help="single tap spacing for the history sweep")
    s.add_argument("--regime", choices=REGIMES)
    s.add_argument("--variants", nargs="+", help="operator labels, e.g. G_d0 G_d2 NARX NARX*")
    s.add_argument("--plot", action="store_true")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_reproduce)

    s = sub.add_parser("decay", parents=[common], help="finite-window hidden-state error against its bound")
    s.add_argument("--T-list", dest="T_list", type=float, nargs="+")
    s.set_defaults(func=cmd_decay)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if args.out is not None:
        over["out"] = args.out
    if args.system is not None:
        over["system"] = args.system
    return replace(cfg, **over).validate() if over else cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (DomainError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KoopinvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
