"""Run configuration shared by the harness and the command line.

Configs are YAML mappings whose keys mirror :class:`RunConfig`; a nested
``train:`` mapping sets :class:`~koopinv.learner.TrainConfig` fields. The
environment variables ``KOOPINV_SEED`` and ``KOOPINV_OUT`` override the
master seed and output directory.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import DomainError
from .learner import DEFAULT_POOL, TrainConfig

DEFAULT_T_LIST = (0.1, 0.2, 0.4, 0.8, 1.6, 3.2)
DEFAULT_DT_LIST = (0.05, 0.1, 0.2)
REGIMES = ("noise-free", "noisy")


def _is_multiple(a: float, b: float) -> bool:
    q = a / b
    return abs(q - round(q)) <= 1e-9 * max(1.0, abs(q)) and round(q) >= 1


@dataclass(frozen=True)
class RunConfig:
    system: str = "example"
    base_rate: float = 100.0
    T_list: tuple[float, ...] = DEFAULT_T_LIST
    dt_list: tuple[float, ...] = DEFAULT_DT_LIST
    N_pool: tuple[int, ...] = DEFAULT_POOL
    l_list: tuple[int, ...] = (0, 1, 2, 3, 4)
    include_narx: bool = True
    T_star: float = 3.2
    dt_star: float = 0.05
    regimes: tuple[str, ...] = REGIMES
    snr_db: float = 20.0
    snr_linear: bool = False
    seeds: int = 3
    master_seed: int = 0
    cutoff_a: float = 2 * np.pi
    trajectories: tuple[int, ...] = tuple(range(1, 11))
    decay_floor_pct: float = 0.005
    jobs: int = 1
    out: str = "results"
    excitation: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def base_dt(self) -> float:
        return 1.0 / self.base_rate

    def validate(self) -> "RunConfig":
        if self.base_rate <= 0:
            raise DomainError("base_rate must be positive")
        for dt in tuple(self.dt_list) + (self.dt_star,):
            if not _is_multiple(dt, self.base_dt):
                raise DomainError(f"tap spacing {dt} is not a multiple of the base period {self.base_dt}")
        for T in tuple(self.T_list) + (self.T_star,):
            if not _is_multiple(T, self.base_dt):
                raise DomainError(f"history length {T} is not a multiple of the base period")
        if not _is_multiple(self.T_star, self.dt_star):
            raise DomainError("T_star / dt_star must be integral")
        if not self.N_pool or min(self.N_pool) < 1:
            raise DomainError("N_pool must list positive widths")
        if any(not 0 <= l <= 4 for l in self.l_list):
            raise DomainError("l values must lie in 0..4")
        bad = set(self.regimes) - set(REGIMES)
        if bad:
            raise DomainError(f"unknown regimes {sorted(bad)}")
        if self.seeds < 1:
            raise DomainError("seeds must be at least 1")
        if any(k not in range(1, 11) for k in self.trajectories):
            raise DomainError("trajectory indices must lie in 1..10")
        return self

    def grid_pairs(self, dt_list=None):
        """``(T, dt)`` pairs of the history sweep with ``T / dt`` integral."""
        dts = self.dt_list if dt_list is None else dt_list
        return [(T, dt) for dt in dts for T in self.T_list if _is_multiple(T, dt)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        train = data.pop("train", None) or {}
        tknown = {f.name for f in fields(TrainConfig)}
        if set(train) - tknown:
            raise DomainError(f"unknown train keys: {sorted(set(train) - tknown)}")
        for k, v in list(data.items()):
            if isinstance(v, list):
                data[k] = tuple(v)
        return cls(**data, train=TrainConfig(**train))


def load_config(path=None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise DomainError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise DomainError(f"config {path} must be a mapping")
    cfg = RunConfig.from_dict(data)
    if env.get("KOOPINV_SEED"):
        cfg = replace(cfg, master_seed=int(env["KOOPINV_SEED"]))
    if env.get("KOOPINV_OUT"):
        cfg = replace(cfg, out=env["KOOPINV_OUT"])
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
