"""Experiment configuration and the jobs the CLI fans out.

Everything here is deterministic given the resolved :class:`ExperimentConfig`:
worker processes rebuild the federation from the config instead of
receiving it, and results are ordered by job key before anything is
written.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__, kernels
from .datasets import (FederationSpec, load_csv, normalize_unit_ball, partition,
                       partition_manifest, split_train_val_test, with_batch_size)
from .engine import RunConfig, TrainTrace, mean_accuracy, run_dp_pasgd
from .errors import ConfigurationError, DivergenceError
from .models import LossKernel, ProbeConfig, ProblemConstants, add_bias, estimate_constants
from .planner import Budgets, Plan, make_plan, planning_learning_rate, solve, _largest_multiple
from .rng import default_seed

DEFAULT_LR_GRID = (1.0, 2.0, 4.0, 8.0, 16.0)
# execution-only settings, never part of a manifest
RUNTIME_KEYS = ("jobs", "out", "config")


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    label_col: str | None = None
    categorical_cols: list[str] = field(default_factory=list)
    feature_cols: list[str] | None = None
    exclude_cols: list[str] = field(default_factory=list)
    positive_label: str | None = None
    partition: str = "iid"
    devices: int = 16
    kernel: str = "logistic"
    l2: float = 0.001
    clip: float = 1.0
    c1: float = 100.0
    c2: float = 1.0
    cth: float = 1000.0
    eps: float = 10.0
    delta: float = 1e-4
    tau: int | None = None
    iters: int | None = None
    tau_max: int = 50
    lr: list[float] | None = None
    batch: int = 64
    seed: int = field(default_factory=default_seed)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_every: int = 10
    probe_draws: int = 256
    constants: dict | None = None
    plan: str | None = None
    axis: str | None = None
    values: list[float] | None = None
    cth_values: list[float] | None = None
    eps_values: list[float] | None = None
    tau_range: list[int] | None = None
    empirical: bool = False
    jobs: int = 1
    out: str = "out"

    @classmethod
    def from_sources(cls, path: str | None = None, overrides: dict | None = None) -> "ExperimentConfig":
        """Defaults, then a JSON file (a plain config or a manifest), then flags."""
        data: dict[str, Any] = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
            data.update(loaded.get("config", loaded))
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {unknown}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.kernel not in ("logistic", "svm"):
            raise ConfigurationError(f"--kernel must be logistic or svm, got {self.kernel!r}")
        FederationSpec.parse(self.partition, self.devices, self.seed)
        self.budgets()
        if self.dataset is None and self.constants is None and self.plan is None:
            raise ConfigurationError("need --dataset (or inline constants / a plan file)")
        if self.dataset is not None and not self.label_col:
            raise ConfigurationError("--label-col is required with --dataset")
        if self.tau is not None and self.tau < 1:
            raise ConfigurationError("--tau must be >= 1")
        if self.iters is not None and self.iters < 1:
            raise ConfigurationError("--iters must be >= 1")
        if self.lr is not None and (not self.lr or any(v <= 0 for v in self.lr)):
            raise ConfigurationError("--lr values must be positive")
        if not self.seeds:
            raise ConfigurationError("--seeds must name at least one seed")
        if self.eval_every < 1 or self.batch < 1 or self.tau_max < 1:
            raise ConfigurationError("--eval-every, --batch and tau_max must be >= 1")

    def budgets(self) -> Budgets:
        return Budgets(self.cth, self.eps, self.delta, self.c1, self.c2)

    def loss_kernel(self) -> LossKernel:
        return LossKernel(self.kernel, self.l2)

    def learning_rates(self) -> list[float]:
        return list(self.lr) if self.lr else list(DEFAULT_LR_GRID)

    def resolved(self) -> dict:
        data = asdict(self)
        for key in RUNTIME_KEYS:
            data.pop(key, None)
        return data


def _config_key(cfg: ExperimentConfig) -> str:
    keys = ("dataset", "label_col", "categorical_cols", "feature_cols", "exclude_cols",
            "positive_label", "partition", "devices", "batch", "seed")
    return json.dumps({k: getattr(cfg, k) for k in keys}, sort_keys=True)


@lru_cache(maxsize=4)
def _federation(key: str):
    spec = json.loads(key)
    table = load_csv(spec["dataset"], spec["label_col"], spec["categorical_cols"],
                     feature_columns=spec["feature_cols"], exclude_columns=spec["exclude_cols"],
                     positive_label=spec["positive_label"])
    table = normalize_unit_ball(table)
    table = replace(table, features=add_bias(table.features))
    fed = FederationSpec.parse(spec["partition"], spec["devices"], spec["seed"])
    devices = [split_train_val_test(dev, spec["seed"]) for dev in partition(table, fed)]
    return with_batch_size(devices, spec["batch"]), table.dropped_rows


def build_federation(cfg: ExperimentConfig):
    if cfg.dataset is None:
        raise ConfigurationError("this command needs --dataset")
    devices, _ = _federation(_config_key(cfg))
    return devices


def federation_manifest(cfg: ExperimentConfig) -> dict:
    devices, dropped = _federation(_config_key(cfg))
    out = partition_manifest(devices)
    out["dropped_rows"] = dropped
    return out


def problem_constants(cfg: ExperimentConfig) -> ProblemConstants:
    if cfg.constants is not None:
        return ProblemConstants.from_dict(dict(cfg.constants))
    devices = build_federation(cfg)
    probe = ProbeConfig(draws=cfg.probe_draws, seed=cfg.seed)
    return estimate_constants(cfg.loss_kernel(), devices, cfg.clip, probe)


def plan_for(cfg: ExperimentConfig, constants: ProblemConstants) -> Plan:
    """Plan from a file, from fixed --tau/--iters, or from the solver."""
    budgets = cfg.budgets()
    if cfg.plan is not None:
        with open(cfg.plan, encoding="utf-8") as fh:
            data = json.load(fh)
        data = data.get("plan", data)
        return make_plan(constants, budgets, int(data["tau"]), int(data["K"]), float(data["eta"]))
    if cfg.tau is not None:
        budgets.check_feasible()
        eta = planning_learning_rate(constants, cfg.tau)
        K = cfg.iters if cfg.iters is not None else _largest_multiple(10**12, cfg.tau, budgets)
        if K < 1:
            raise ConfigurationError(f"tau = {cfg.tau} does not fit a single round in C_th = {cfg.cth:g}")
        if K % cfg.tau:
            raise ConfigurationError(f"--iters {K} is not a multiple of --tau {cfg.tau}")
        return make_plan(constants, budgets, cfg.tau, K, eta)
    return solve(constants, budgets, tau_max=cfg.tau_max)


@dataclass
class RunResult:
    seed: int
    eta: float | None
    trace: TrainTrace | None
    val_accuracy: float
    error: str | None = None
    tried: dict = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.trace.final["mean_test_accuracy"] if self.trace and self.trace.rows else math.nan


def train_seed(cfg: ExperimentConfig, tau: int, K: int, sigma: Sequence[float], seed: int) -> RunResult:
    """Train once per candidate learning rate and keep the best on validation.

    Ties go to the earlier rate; a diverged candidate is skipped.
    """
    devices = build_federation(cfg)
    kernel = cfg.loss_kernel()
    best, tried, last_error = None, {}, None
    for eta in cfg.learning_rates():
        run = RunConfig(tau=tau, K=K, eta=eta, sigma=list(sigma), seed=seed, G=cfg.clip,
                        eval_every=cfg.eval_every, c1=cfg.c1, c2=cfg.c2, delta=cfg.delta)
        try:
            trace = run_dp_pasgd(devices, kernel, run)
        except DivergenceError as exc:
            tried[repr(eta)] = None
            last_error = exc
            continue
        val = mean_accuracy(kernel, trace.theta_final, devices, "val")
        tried[repr(eta)] = val
        if best is None or val > best.val_accuracy:
            best = RunResult(seed, eta, trace, val)
    if best is None:
        partial = last_error.trace if last_error is not None else None
        return RunResult(seed, None, partial, math.nan, error=str(last_error), tried=tried)
    best.tried = tried
    return best


def run_jobs(cfg: ExperimentConfig, fn: Callable, args: Sequence[tuple]) -> list:
    """Map ``fn(cfg, *a)`` over ``args``; results come back in input order."""
    if cfg.jobs <= 1 or len(args) <= 1:
        return [fn(cfg, *a) for a in args]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        futures = [pool.submit(fn, cfg, *a) for a in args]
        return [f.result() for f in futures]


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dump_json(data) -> str:
    return json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    if isinstance(value, np.integer):
        return int(value)
    return value


def manifest_header(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "artifact": "dppasgd",
        "version": __version__,
        "command": command,
        "kernel_backend": kernels.BACKEND,
        "config": cfg.resolved(),
        "assumptions": {
            "sensitivity": "2G/X_m per step; mini-batch resampling not credited",
            "log_base": "natural",
        },
    }
