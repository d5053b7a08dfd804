"""Single-process simulator of DP-PASGD and the DP-SGD baseline.

Every device starts from the same model, takes ``tau`` noisy clipped SGD
steps on its own data, and then all local models are replaced by their
unweighted mean. Mini-batches are drawn uniformly with replacement. All
randomness comes from per-(device, iteration) counter streams, so the
result does not depend on the order devices are processed in.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels as default_kernels
from .datasets import DeviceDataset
from .errors import ConfigurationError, DivergenceError
from .models import LossKernel, accuracy, global_loss
from .privacy import sample_noise, total_epsilon
from .rng import Purpose, stream

TRACE_COLUMNS = ("iteration", "global_loss", "mean_test_accuracy", "cumulative_cost", "epsilon_spent")


@dataclass
class RunConfig:
    tau: int
    K: int
    eta: float
    sigma: list[float]
    seed: int = 0
    G: float = 1.0
    eval_every: int = 10
    c1: float = 100.0
    c2: float = 1.0
    delta: float = 1e-4

    def validate(self, M: int) -> None:
        if self.tau < 1 or self.K < 1:
            raise ConfigurationError("tau and K must be >= 1")
        if self.K % self.tau != 0:
            raise ConfigurationError(f"K = {self.K} is not a multiple of tau = {self.tau}")
        if self.eta <= 0:
            raise ConfigurationError("learning rate must be positive")
        if len(self.sigma) != M:
            raise ConfigurationError(f"need {M} noise levels, got {len(self.sigma)}")
        if any(s < 0 for s in self.sigma):
            raise ConfigurationError("noise levels must be non-negative")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        if self.G <= 0:
            raise ConfigurationError("clip norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    rows: list[dict] = field(default_factory=list)
    theta_star: np.ndarray | None = None
    star_iteration: int | None = None
    theta_final: np.ndarray | None = None
    epsilons: list[float] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in self.rows:
            writer.writerow([row["iteration"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])
        return buf.getvalue()


def cumulative_cost(k: int, tau: int, c1: float, c2: float) -> float:
    return c1 * (k // tau) + c2 * k


def batch_indices(seed: int, device_id: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    rng = stream(seed, device_id, iteration, Purpose.BATCH)
    return rng.integers(0, n, size=batch_size, dtype=np.int64)


def step_noise(seed: int, device_id: int, iteration: int, d: int, sigma: float) -> np.ndarray:
    return sample_noise(stream(seed, device_id, iteration, Purpose.NOISE), d, sigma)


def local_update(device: DeviceDataset, kernel: LossKernel, theta_in, eta: float, G: float,
                 sigma: float, seed: int, iteration: int, backend=None) -> np.ndarray:
    """One noisy local step ``theta - eta (g + b)`` at the given iteration."""
    impl = backend or default_kernels
    X, y = device.train
    batch = batch_indices(seed, device.device_id, iteration, len(y), device.batch_size or len(y))
    noise = step_noise(seed, device.device_id, iteration, X.shape[1], sigma)
    theta, done = impl.local_steps(kernel.code, np.ascontiguousarray(theta_in, dtype=np.float64),
                                   X, y, batch[None, :], noise[None, :], eta, G, kernel.l2)
    if done < 1:
        raise DivergenceError(f"device {device.device_id} diverged at iteration {iteration}")
    return theta


def global_aggregate(models: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {np.shape(m) for m in models}
    if len(shapes) != 1:
        raise ValueError(f"cannot average models of shapes {sorted(shapes)}")
    return np.mean(np.stack(models), axis=0)


def mean_accuracy(kernel: LossKernel, theta, devices: Sequence[DeviceDataset], split: str = "test") -> float:
    scores = [accuracy(kernel, theta, *getattr(dev, split)) for dev in devices if len(getattr(dev, split))]
    return float(np.mean(scores)) if scores else math.nan


def _snapshot(k, theta, devices, kernel, config) -> dict:
    eps = [total_epsilon(k, config.G, dev.batch_size, s, config.delta) if s > 0 else
           (0.0 if k == 0 else math.inf) for dev, s in zip(devices, config.sigma)]
    return {
        "iteration": k,
        "global_loss": global_loss(kernel, theta, devices),
        "mean_test_accuracy": mean_accuracy(kernel, theta, devices, "test"),
        "cumulative_cost": cumulative_cost(k, config.tau, config.c1, config.c2),
        "epsilon_spent": max(eps),
        "epsilons": eps,
    }


def _prepare(devices: Sequence[DeviceDataset]) -> list[DeviceDataset]:
    out = []
    for dev in devices:
        if len(dev.train) == 0:
            raise ConfigurationError(f"device {dev.device_id} has no training data")
        X = np.ascontiguousarray(dev.train.X, dtype=np.float64)
        y = np.ascontiguousarray(dev.train.y, dtype=np.float64)
        out.append(replace(dev, train=type(dev.train)(X, y), batch_size=dev.batch_size or len(y)))
    return out


def run_dp_pasgd(devices: Sequence[DeviceDataset], kernel: LossKernel, config: RunConfig,
                 theta0=None, backend=None) -> TrainTrace:
    """Simulate K iterations with averaging every ``tau`` steps.

    Snapshots are taken at iteration 0, every ``eval_every`` iterations and
    at K. Between averaging points the snapshot model is the mean of the
    local models. ``theta_star`` is the snapshot (k >= 1) with the lowest
    global training loss.
    """
    impl = backend or default_kernels
    devices = _prepare(devices)
    M = len(devices)
    config.validate(M)
    d = devices[0].dim
    theta0 = np.zeros(d) if theta0 is None else np.array(theta0, dtype=np.float64)
    local = [theta0.copy() for _ in devices]
    trace = TrainTrace()
    trace.rows.append(_snapshot(0, theta0, devices, kernel, config))

    stops = sorted(set(range(config.tau, config.K + 1, config.tau))
                   | set(range(config.eval_every, config.K + 1, config.eval_every)) | {config.K})
    start = 0
    for stop in stops:
        iters = range(start + 1, stop + 1)
        for m, dev in enumerate(devices):
            X, y = dev.train
            batches = np.stack([batch_indices(config.seed, dev.device_id, k, len(y), dev.batch_size)
                                for k in iters])
            noise = np.stack([step_noise(config.seed, dev.device_id, k, d, config.sigma[m]) for k in iters])
            local[m], done = impl.local_steps(kernel.code, local[m], X, y, batches, noise,
                                              config.eta, config.G, kernel.l2)
            if done < len(iters):
                trace.theta_final = local[m]
                raise DivergenceError(
                    f"device {dev.device_id} diverged at iteration {start + done + 1} "
                    f"(eta = {config.eta:g})", trace)
        if stop % config.tau == 0:
            avg = global_aggregate(local)
            local = [avg.copy() for _ in devices]
        if stop % config.eval_every == 0 or stop == config.K:
            model = global_aggregate(local)
            trace.rows.append(_snapshot(stop, model, devices, kernel, config))
            if trace.star_iteration is None or trace.rows[-1]["global_loss"] < best_loss:
                best_loss = trace.rows[-1]["global_loss"]
                trace.star_iteration, trace.theta_star = stop, model
        start = stop

    trace.theta_final = global_aggregate(local)
    trace.epsilons = trace.rows[-1]["epsilons"]
    return trace


def run_dp_sgd_baseline(devices: Sequence[DeviceDataset], kernel: LossKernel, config: RunConfig,
                        theta0=None, backend=None) -> TrainTrace:
    """DP-SGD: one local step per round, i.e. DP-PASGD with tau = 1."""
    return run_dp_pasgd(devices, kernel, replace(config, tau=1), theta0=theta0, backend=backend)
