"""Loss kernels, clipped gradients and problem-constant estimation.

Two binary linear models share a parameter vector ``theta`` of length d:

* ``logistic``: two-class softmax cross-entropy, which for one weight
  vector is ``log(1 + exp(-y <theta, x>))``;
* ``svm``: hinge loss ``max(0, 1 - y <theta, x>)``.

Both carry an L2 term ``l2/2 |theta|^2`` which also fixes the PL constant
used by the planner. Labels are in {-1, +1}.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from . import kernels
from .errors import ConfigurationError
from .rng import Purpose, stream

BIAS_SCALE = 1.0 / math.sqrt(2.0)
KINDS = {"logistic": kernels.LOGISTIC, "svm": kernels.HINGE}


@dataclass(frozen=True)
class LossKernel:
    kind: str = "logistic"
    l2: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kernel must be one of {sorted(KINDS)}, got {self.kind!r}")
        if self.l2 < 0:
            raise ConfigurationError("l2 regularisation must be non-negative")

    @property
    def code(self) -> int:
        return KINDS[self.kind]


@dataclass
class ProblemConstants:
    G: float
    L: float
    lam: float
    xi_sq: float
    alpha: float
    d: int
    M: int
    batch_sizes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.batch_sizes) != self.M:
            raise ConfigurationError("need one batch size per device")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemConstants":
        return cls(**data)


@dataclass(frozen=True)
class ProbeConfig:
    """How ``estimate_constants`` probes gradient variance and the loss gap."""

    draws: int = 256
    replace: bool = True
    seed: int = 0
    # "initial-loss" takes alpha = L(theta0); "gap" subtracts a numerically
    # minimised global loss.
    alpha_mode: str = "initial-loss"


def add_bias(X: np.ndarray) -> np.ndarray:
    """Append a constant bias feature, keeping rows inside the unit ball."""
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X * BIAS_SCALE, np.full((X.shape[0], 1), BIAS_SCALE)])


def _check(theta, X):
    if X.ndim != 2 or theta.shape != (X.shape[1],):
        raise ValueError(f"dimension mismatch: theta {theta.shape} vs samples {X.shape}")


def sample_losses(kernel: LossKernel, theta, X, y) -> np.ndarray:
    """Unregularised per-sample losses."""
    theta = np.asarray(theta, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check(theta, X)
    margins = np.asarray(y, dtype=np.float64) * (X @ theta)
    if kernel.kind == "logistic":
        return np.logaddexp(0.0, -margins)
    return np.maximum(0.0, 1.0 - margins)


def loss(kernel: LossKernel, theta, X, y) -> float:
    """Mean sample loss plus ``l2/2 |theta|^2``."""
    theta = np.asarray(theta, dtype=np.float64)
    data = sample_losses(kernel, theta, X, y).mean()
    return float(data + 0.5 * kernel.l2 * theta @ theta)


def per_sample_gradient(kernel: LossKernel, theta, x, y) -> np.ndarray:
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    X = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    _check(theta, X)
    yy = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return kernels.per_sample_gradients(kernel.code, theta, X, yy, kernel.l2)[0]


def full_gradient(kernel: LossKernel, theta, X, y) -> np.ndarray:
    """Unclipped gradient of :func:`loss`."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    _check(theta, X)
    coef = kernels.sample_coefficients(kernel.code, theta, X, np.ascontiguousarray(y, dtype=np.float64))
    return X.T @ coef / len(coef) + kernel.l2 * theta


def clipped_minibatch_gradient(kernel: LossKernel, theta, X, y, G: float) -> np.ndarray:
    """Mean of per-sample gradients, each first rescaled to norm at most G."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty mini-batch")
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    _check(theta, X)
    idx = np.arange(X.shape[0], dtype=np.int64)
    return kernels.clipped_gradient(
        kernel.code, theta, X, np.ascontiguousarray(y, dtype=np.float64), idx, float(G), kernel.l2
    )


def predict(theta, X) -> np.ndarray:
    """Sign predictions; a zero score goes to +1."""
    return np.where(np.asarray(X) @ np.asarray(theta) >= 0.0, 1.0, -1.0)


def accuracy(kernel: LossKernel, theta, X, y) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty sample set")
    return float(np.mean(predict(theta, X) == np.asarray(y)))


def global_loss(kernel: LossKernel, theta, devices) -> float:
    """Device-averaged empirical risk over the training splits."""
    return float(np.mean([loss(kernel, theta, dev.train.X, dev.train.y) for dev in devices]))


def smoothness_bound(kernel: LossKernel, max_norm_sq: float) -> float:
    """Curvature scale L on data with squared norms at most ``max_norm_sq``.

    Exact for logistic (sigmoid slope at most 1/4). Hinge is not smooth, so
    ``max_norm_sq + l2`` is a surrogate scale.
    """
    if kernel.kind == "logistic":
        return max_norm_sq / 4.0 + kernel.l2
    return max_norm_sq + kernel.l2


def minimize_global_loss(kernel: LossKernel, devices, theta0=None) -> tuple[np.ndarray, float]:
    d = devices[0].dim
    theta0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=np.float64)

    def fun(theta):
        value = global_loss(kernel, theta, devices)
        grad = np.mean([full_gradient(kernel, theta, dev.train.X, dev.train.y) for dev in devices], axis=0)
        return value, grad

    res = optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 5000, "gtol": 1e-10, "ftol": 1e-15})
    return res.x, float(res.fun)


def gradient_variance(kernel: LossKernel, theta, device, G: float, probe: ProbeConfig) -> float:
    """Mean squared deviation of clipped mini-batch gradients from their mean."""
    X = np.ascontiguousarray(device.train.X)
    y = np.ascontiguousarray(device.train.y)
    n = len(y)
    batch = device.batch_size or n
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    all_idx = np.arange(n, dtype=np.int64)
    expected = kernels.clipped_gradient(kernel.code, theta, X, y, all_idx, G, kernel.l2)
    total = 0.0
    for draw in range(probe.draws):
        rng = stream(probe.seed, device.device_id, draw, Purpose.PROBE)
        if probe.replace:
            idx = rng.integers(0, n, size=batch)
        else:
            idx = np.sort(rng.choice(n, size=batch, replace=False))
        g = kernels.clipped_gradient(kernel.code, theta, X, y, idx.astype(np.int64), G, kernel.l2)
        diff = g - expected
        total += float(diff @ diff)
    return total / probe.draws


def estimate_constants(kernel: LossKernel, devices: Sequence, G: float = 1.0,
                       probe: ProbeConfig = ProbeConfig(), theta0=None) -> ProblemConstants:
    if kernel.l2 <= 0:
        raise ConfigurationError("planner constants need l2 > 0 (strong convexity)")
    if G <= 0:
        raise ConfigurationError("clip norm G must be positive")
    d = devices[0].dim
    theta0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    max_norm_sq = max(float(np.max(np.einsum("ij,ij->i", dev.train.X, dev.train.X))) for dev in devices)
    L = smoothness_bound(kernel, max_norm_sq)
    xi_sq = max(gradient_variance(kernel, theta0, dev, G, probe) for dev in devices)
    alpha = global_loss(kernel, theta0, devices)
    if probe.alpha_mode == "gap":
        alpha -= minimize_global_loss(kernel, devices, theta0)[1]
    elif probe.alpha_mode != "initial-loss":
        raise ConfigurationError(f"unknown alpha mode {probe.alpha_mode!r}")
    return ProblemConstants(
        G=float(G), L=L, lam=kernel.l2, xi_sq=xi_sq, alpha=alpha, d=d, M=len(devices),
        batch_sizes=[int(dev.batch_size or len(dev.train)) for dev in devices],
    )
