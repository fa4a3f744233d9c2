"""Regression datasets for the inverse operators and a one-hidden-layer network.

Features for row ``m`` (100 Hz base grid) are the output taps
``y[m - m_T*s], ..., y[m - s], y[m]`` at tap spacing ``dt_tap = s * base_dt``,
then ``y^(0..l)[m]``, and for the NARX variants the past inputs
``u[m - m_T*s], ..., u[m - s]``. The target is ``u[m]``.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import CompatibilityError, DomainError, TrainingFailed
from .lti_core import Trajectory
from .signals import DERIVATIVE_CHANNELS

MODES = ("history-derivatives", "narx", "narx-star")
DEFAULT_POOL = (5, 10, 20, 40, 80)


def _as_int_ratio(a: float, b: float, what: str) -> int:
    q = a / b
    k = int(round(q))
    if k < 0 or abs(q - k) > 1e-9 * max(1.0, abs(q)):
        raise DomainError(f"{what} must be an integer multiple ({a} / {b} = {q})")
    return k


@dataclass(frozen=True)
class FeatureSpec:
    T: float
    dt_tap: float
    l: int = 2
    mode: str = "history-derivatives"

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.m_T < 1:
            raise DomainError("T / dt_tap must be a positive integer")
        if not 0 <= self.l <= 4:
            raise DomainError("derivative order l must lie in 0..4")
        if self.mode == "narx" and self.l != 0:
            raise DomainError("narx uses l = 0")
        if self.mode == "narx-star" and self.l != 2:
            raise DomainError("narx-star uses l = 2")

    @classmethod
    def narx(cls, T: float, dt_tap: float) -> "FeatureSpec":
        return cls(T, dt_tap, 0, "narx")

    @classmethod
    def narx_star(cls, T: float, dt_tap: float) -> "FeatureSpec":
        return cls(T, dt_tap, 2, "narx-star")

    @property
    def m_T(self) -> int:
        return _as_int_ratio(self.T, self.dt_tap, "T")

    @property
    def uses_inputs(self) -> bool:
        return self.mode != "history-derivatives"

    @property
    def width(self) -> int:
        return (self.m_T + 1) + (self.l + 1) + (self.m_T if self.uses_inputs else 0)

    @property
    def label(self) -> str:
        if self.mode == "narx":
            return "NARX"
        if self.mode == "narx-star":
            return "NARX*"
        return f"G_d{self.l}"

    def feature_names(self) -> list[str]:
        names = [f"y[m-{k}]" for k in range(self.m_T, 0, -1)] + ["y[m]"]
        names += [f"{DERIVATIVE_CHANNELS[j]}[m]" for j in range(self.l + 1)]
        if self.uses_inputs:
            names += [f"u[m-{k}]" for k in range(self.m_T, 0, -1)]
        return names


@dataclass
class Dataset:
    spec: FeatureSpec
    X: np.ndarray
    y_target: np.ndarray
    sample_times: np.ndarray

    def __len__(self) -> int:
        return len(self.y_target)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.spec, self.X[mask], self.y_target[mask], self.sample_times[mask])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + self.spec.feature_names() + ["u[m]"])
        for t, row, u in zip(self.sample_times, self.X, self.y_target):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row] + [f"{u:.17g}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, newline="")
        return text


def build_dataset(y_stack: Trajectory, u, spec: FeatureSpec) -> Dataset:
    """Assemble regression rows from aligned output/derivative channels and input.

    ``y_stack`` carries channels named as in ``DERIVATIVE_CHANNELS`` (only
    the ones up to order ``l`` are needed). ``u`` is a Trajectory or array on
    the same grid. Rows whose window reaches before the record or whose
    derivative values are NaN are skipped.
    """
    base_dt = y_stack.dt
    stride = _as_int_ratio(spec.dt_tap, base_dt, "dt_tap")
    if stride < 1:
        raise DomainError("dt_tap must be at least the base sample period")
    uv = u["u"] if isinstance(u, Trajectory) and "u" in u.channels else (
        u.samples[:, 0] if isinstance(u, Trajectory) else np.asarray(u, dtype=float)
    )
    if len(uv) != len(y_stack):
        raise DomainError("input and output channels are not aligned")
    y = y_stack["y"]
    derivs = [y_stack[DERIVATIVE_CHANNELS[j]] for j in range(spec.l + 1)]
    reach = spec.m_T * stride
    m = np.arange(reach, len(y))
    lags = np.arange(spec.m_T, -1, -1) * stride  # oldest tap first
    cols = [y[m[:, None] - lags[None, :]]]
    cols.append(np.column_stack([d[m] for d in derivs]))
    if spec.uses_inputs:
        cols.append(uv[m[:, None] - lags[None, :-1]])
    X = np.hstack(cols)
    target = uv[m]
    ok = np.all(np.isfinite(X), axis=1) & np.isfinite(target)
    if not np.any(ok):
        raise DomainError("no valid samples: record shorter than the history window")
    times = y_stack.times[m]
    return Dataset(spec, X[ok], target[ok], times[ok])


@dataclass(frozen=True)
class TrainConfig:
    """Training budget and split.

    ``method="varpro"`` (default) runs L-BFGS on the hidden layer with the
    output layer solved in closed form at every evaluation; ``"adam"`` is
    plain full-batch Adam on all weights. Both work in whitened input
    coordinates and keep the weights with the lowest validation loss. The
    last ``val_fraction`` of every ``cycle_duration`` block of sample times
    is held out for validation.
    """

    method: str = "varpro"
    max_iter: int = 300
    patience: int = 40
    ridge: float = 1e-10
    whiten_rel: float = 1e-10
    row_stride: int = 1
    lr: float = 0.01
    lr_final: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.15
    cycle_duration: float = 10.0
    linear_unit: bool = True
    linear_gain: float = 0.05


@dataclass
class MlpModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    x_min: np.ndarray
    x_max: np.ndarray
    t_min: float
    t_max: float
    seed: int
    spec: FeatureSpec | None = None
    activation: str = "tanh"
    history: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.W1.shape[0]

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    def normalize(self, X):
        return _to_unit(X, self.x_min, self.x_max)

    def denormalize(self, Xn):
        return _from_unit(Xn, self.x_min, self.x_max)

    def save(self, path) -> None:
        doc = {
            "format": "koopinv-mlp/1",
            "N": self.N,
            "d": self.d,
            "activation": self.activation,
            "seed": self.seed,
            "spec": asdict(self.spec) if self.spec else None,
            "input_norm": {"min": self.x_min.tolist(), "max": self.x_max.tolist()},
            "output_norm": {"min": self.t_min, "max": self.t_max},
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.tolist(),
            "b2": self.b2,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "MlpModel":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise CompatibilityError(f"{path}: not a koopinv model file ({exc})") from exc
        if not isinstance(doc, dict) or doc.get("format") != "koopinv-mlp/1":
            raise CompatibilityError(f"{path}: not a koopinv model file")
        try:
            spec = FeatureSpec(**doc["spec"]) if doc.get("spec") else None
            model = cls(
                W1=np.array(doc["W1"], dtype=float).reshape(doc["N"], doc["d"]),
                b1=np.array(doc["b1"], dtype=float),
                W2=np.array(doc["W2"], dtype=float).reshape(1, doc["N"]),
                b2=float(doc["b2"]),
                x_min=np.array(doc["input_norm"]["min"], dtype=float),
                x_max=np.array(doc["input_norm"]["max"], dtype=float),
                t_min=float(doc["output_norm"]["min"]),
                t_max=float(doc["output_norm"]["max"]),
                seed=int(doc["seed"]),
                spec=spec,
                activation=doc.get("activation", "tanh"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CompatibilityError(f"{path}: malformed model file ({exc})") from exc
        if spec is not None and spec.width != model.d:
            raise CompatibilityError(f"{path}: feature layout has width {spec.width}, weights expect {model.d}")
        return model


def _span(lo, hi):
    span = np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)
    return np.where(span > 0, span, 2.0)


def _to_unit(x, lo, hi):
    return 2.0 * (np.asarray(x, dtype=float) - lo) / _span(lo, hi) - 1.0


def _from_unit(z, lo, hi):
    return (np.asarray(z, dtype=float) + 1.0) * _span(lo, hi) / 2.0 + lo


def _forward(params, Xn):
    W1, b1, W2, b2 = params
    H = np.tanh(Xn @ W1.T + b1)
    return H, H @ W2[0] + b2


def validation_mask(sample_times, config: TrainConfig) -> np.ndarray:
    phase = np.mod(np.asarray(sample_times) + 1e-9, config.cycle_duration)
    return phase >= (1.0 - config.val_fraction) * config.cycle_duration


def _whitening(Xn: np.ndarray, rel: float):
    """Mean and projection that decorrelate the columns of ``Xn``.

    Directions with variance below ``rel`` times the largest are dropped.
    """
    mu = Xn.mean(axis=0)
    lam, V = np.linalg.eigh(np.cov(Xn, rowvar=False).reshape(Xn.shape[1], Xn.shape[1]))
    keep = lam > rel * max(lam.max(), 1e-300)
    if not keep.any():
        keep = lam >= lam.max()
    return mu, V[:, keep] / np.sqrt(lam[keep])


def _output_layer(H: np.ndarray, t: np.ndarray, ridge: float) -> np.ndarray:
    """Ridge-stabilised least-squares output weights ``[W2, b2]`` for hidden activations."""
    Hb = np.column_stack([H, np.ones(len(H))])
    G = Hb.T @ Hb
    G[np.diag_indices_from(G)] += ridge * np.trace(G) / len(G)
    try:
        return cho_solve(cho_factor(G, check_finite=False), Hb.T @ t, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(Hb, t, rcond=None)[0]


def _check_loss(loss, where, N, seed):
    if not np.isfinite(loss) or loss > 1e6:
        raise TrainingFailed("training failed: loss diverged",
                             {"where": where, "loss": loss, "N": N, "seed": seed})


def _fit_varpro(Z, t, Zv, tv, W1, b1, budget, N, seed):
    n, k = Z.shape
    state = {"best": np.inf, "since": 0, "it": 0, "theta": None, "beta": None, "last": None}

    def unpack(theta):
        return theta[: N * k].reshape(N, k), theta[N * k:]

    def objective(theta):
        W1, b1 = unpack(theta)
        H = np.tanh(Z @ W1.T + b1)
        beta = _output_layer(H, t, budget.ridge)
        e = H @ beta[:N] + beta[N] - t
        loss = float(e @ e) / n
        _check_loss(loss, f"iteration {state['it']}", N, seed)
        state["last"] = (theta.copy(), beta)
        g = 2.0 * e / n
        gA = np.outer(g, beta[:N]) * (1.0 - H * H)
        return loss, np.concatenate([(gA.T @ Z).ravel(), gA.sum(axis=0)])

    def val_loss(theta, beta):
        if not len(tv):
            return objective(theta)[0]
        W1, b1 = unpack(theta)
        H = np.tanh(Zv @ W1.T + b1)
        return float(np.mean((H @ beta[:N] + beta[N] - tv) ** 2))

    def callback(intermediate_result):
        theta = intermediate_result.x
        state["it"] += 1
        cached, beta = state["last"]
        if not np.array_equal(cached, theta):
            objective(theta)
            beta = state["last"][1]
        v = val_loss(theta, beta)
        if v < state["best"]:
            state.update(best=v, since=0, theta=theta.copy(), beta=beta.copy(), best_it=state["it"])
        else:
            state["since"] += 1
            if state["since"] >= budget.patience:
                raise StopIteration

    theta0 = np.concatenate([W1.ravel(), b1])
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": budget.max_iter, "maxcor": 30, "ftol": 0.0, "gtol": 0.0})
    if state["theta"] is None:
        objective(res.x)
        theta, beta = state["last"]
        state.update(theta=theta, beta=beta, best=val_loss(theta, beta), best_it=0)
    W1, b1 = unpack(state["theta"])
    beta = state["beta"]
    return W1, b1, beta[:N], float(beta[N]), {
        "best_iteration": state["best_it"], "best_val_mse": state["best"], "iterations": state["it"]}


def _fit_adam(Z, t, Zv, tv, W1, b1, W2, b2, budget, N, seed):
    params = [W1, b1, W2, np.array(b2)]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    n = len(t)
    decay = (budget.lr_final / budget.lr) ** (1.0 / max(budget.max_iter - 1, 1))
    best, best_val, best_epoch = [p.copy() for p in params], np.inf, 0
    lr = budget.lr
    epoch = 0
    for epoch in range(1, budget.max_iter + 1):
        H = np.tanh(Z @ params[0].T + params[1])
        err = H @ params[2] + params[3] - t
        _check_loss(float(err @ err) / n, f"epoch {epoch}", N, seed)
        g = 2.0 * err / n
        gA = np.outer(g, params[2]) * (1.0 - H * H)
        grads = [gA.T @ Z, gA.sum(axis=0), g @ H, np.array(g.sum())]
        c1, c2 = 1.0 - budget.beta1**epoch, 1.0 - budget.beta2**epoch
        for p, gr, mi, vi in zip(params, grads, m, v):
            mi *= budget.beta1
            mi += (1 - budget.beta1) * gr
            vi *= budget.beta2
            vi += (1 - budget.beta2) * gr * gr
            p -= lr * (mi / c1) / (np.sqrt(vi / c2) + budget.eps)
        lr *= decay
        if len(tv):
            Hv = np.tanh(Zv @ params[0].T + params[1])
            vl = float(np.mean((Hv @ params[2] + params[3] - tv) ** 2))
        else:
            vl = float(err @ err) / n
        if vl < best_val:
            best, best_val, best_epoch = [p.copy() for p in params], vl, epoch
        elif epoch - best_epoch >= budget.patience:
            break
    W1, b1, W2, b2 = best
    return W1, b1, W2, float(b2), {"best_iteration": best_epoch, "best_val_mse": best_val, "iterations": epoch}


def train_mlp(ds: Dataset, N: int, seed: int, budget: TrainConfig = TrainConfig()) -> MlpModel:
    """Fit a tanh-hidden, linear-output network to the dataset by MSE.

    Inputs and target are mapped to [-1, 1] with ranges frozen from the
    training split. Optimisation runs in whitened coordinates of the
    normalised inputs (delay taps are nearly collinear, which stalls
    first-order methods); the whitening is folded into ``W1`` afterwards,
    so the returned model acts on normalised inputs directly.
    """
    if len(ds) == 0:
        raise DomainError("empty dataset")
    if N < 1:
        raise DomainError("hidden width must be positive")
    if budget.method not in ("varpro", "adam"):
        raise DomainError(f"unknown training method {budget.method!r}")
    val = validation_mask(ds.sample_times, budget)
    if val.all() or not val.any():
        val = np.zeros(len(ds), dtype=bool)
        val[int(len(ds) * (1 - budget.val_fraction)):] = True
    Xtr, ttr = ds.X[~val], ds.y_target[~val]
    Xva, tva = ds.X[val], ds.y_target[val]
    x_min, x_max = Xtr.min(axis=0), Xtr.max(axis=0)
    t_min, t_max = float(ttr.min()), float(ttr.max())
    if budget.row_stride > 1:
        Xtr, ttr = Xtr[:: budget.row_stride], ttr[:: budget.row_stride]
    Xn, Xvn = _to_unit(Xtr, x_min, x_max), _to_unit(Xva, x_min, x_max)
    tn, tvn = _to_unit(ttr, t_min, t_max), _to_unit(tva, t_min, t_max)
    mu, Wz = _whitening(Xn, budget.whiten_rel)
    Z, Zv = (Xn - mu) @ Wz, (Xvn - mu) @ Wz

    rng = np.random.default_rng(seed)
    k = Z.shape[1]
    lim1, lim2 = 1.0 / np.sqrt(k), 1.0 / np.sqrt(N)
    W1 = rng.uniform(-lim1, lim1, (N, k))
    b1 = rng.uniform(-lim1, lim1, N)
    W2 = rng.uniform(-lim2, lim2, N)
    b2 = rng.uniform(-lim2, lim2)
    if budget.linear_unit:
        w = np.linalg.lstsq(np.column_stack([Z, np.ones(len(Z))]), tn, rcond=None)[0][:k]
        scale = np.std(Z @ w)
        if scale > 0:
            W1[0] = w * (budget.linear_gain / scale)
            b1[0] = 0.0
    if budget.method == "varpro":
        W1, b1, W2, b2, info = _fit_varpro(Z, tn, Zv, tvn, W1, b1, budget, N, seed)
    else:
        W1, b1, W2, b2, info = _fit_adam(Z, tn, Zv, tvn, W1, b1, W2, b2, budget, N, seed)

    W1n = W1 @ Wz.T
    b1n = b1 - W1n @ mu
    return MlpModel(
        W1=W1n, b1=b1n, W2=np.asarray(W2).reshape(1, N), b2=float(b2),
        x_min=x_min, x_max=x_max, t_min=t_min, t_max=t_max,
        seed=seed, spec=ds.spec, history=dict(info, method=budget.method),
    )


def predict(model: MlpModel, features) -> np.ndarray | float:
    """Network output in target units; accepts one feature vector or a matrix of rows."""
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.d:
        raise CompatibilityError(f"feature width {X.shape[1]} does not match model width {model.d}")
    _, out = _forward((model.W1, model.b1, model.W2, model.b2), model.normalize(X))
    u = _from_unit(out, model.t_min, model.t_max)
    return float(u[0]) if single else u


@dataclass
class ModelPool:
    models: dict[int, MlpModel]
    errors: dict[int, float] = field(default_factory=dict)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(sorted(self.models))


def train_pool(ds: Dataset, sizes: Sequence[int] = DEFAULT_POOL, seed: int = 0,
               budget: TrainConfig = TrainConfig()) -> ModelPool:
    return ModelPool({N: train_mlp(ds, N, seed + i, budget) for i, N in enumerate(sizes)})


def select_best(pool: ModelPool, errors: dict[int, float] | None = None):
    """``(N*, model)`` with the smallest error; ties go to the smaller N."""
    errors = pool.errors if errors is None else errors
    N_star = min(pool.models, key=lambda N: (errors[N], N))
    return N_star, pool.models[N_star]
