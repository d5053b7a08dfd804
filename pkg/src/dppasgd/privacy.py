"""zCDP accounting for the noisy mini-batch gradient mechanism.

Each local step releases a clipped mini-batch gradient with L2 sensitivity
``2G / X_m`` plus isotropic Gaussian noise. The per-step zCDP cost is
``sensitivity**2 / (2 sigma**2)``; costs add over steps, and the total is
converted to (epsilon, delta)-DP with ``rho + 2 sqrt(rho ln(1/delta))``.
Logs are natural throughout. Mini-batch subsampling is not credited: every
step pays the full sensitivity.
"""

from __future__ import annotations

import math
from typing import Iterable, NamedTuple

import numpy as np


class DpGuarantee(NamedTuple):
    epsilon: float
    delta: float


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def sensitivity(G: float, batch_size: float) -> float:
    """L2 sensitivity of a mean of per-sample gradients clipped to norm G."""
    return 2.0 * G / batch_size


def gaussian_step_rho(sensitivity: float, sigma: float) -> float:
    if sensitivity <= 0 or sigma <= 0:
        raise ValueError("sensitivity and sigma must be positive")
    return sensitivity * sensitivity / (2.0 * sigma * sigma)


def compose(rhos: Iterable[float]) -> float:
    return math.fsum(rhos)


def zcdp_to_dp(rho: float, delta: float) -> DpGuarantee:
    _check_delta(delta)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    return DpGuarantee(rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta)), delta)


def total_epsilon(K: int, G: float, batch_size: float, sigma: float, delta: float) -> float:
    """Privacy loss of one device after K noisy steps (closed form).

    ``2KG^2/(X^2 sigma^2) + 2G/(X sigma) * sqrt(2K ln(1/delta))``; an infinite
    sigma or K = 0 costs nothing.
    """
    _check_delta(delta)
    if K < 0 or G <= 0 or batch_size <= 0 or sigma <= 0:
        raise ValueError("K must be >= 0 and G, batch_size, sigma positive")
    if K == 0 or math.isinf(sigma):
        return 0.0
    ratio = G / (batch_size * sigma)
    return 2.0 * K * ratio * ratio + 2.0 * ratio * math.sqrt(2.0 * K * math.log(1.0 / delta))


def privacy_constant(epsilon_th: float, delta: float) -> float:
    """Value of ``2KG^2/(X^2 sigma^2)`` at which the budget is spent exactly.

    Root of the quadratic in ``1/sigma``:
    ``eps + 2 ln(1/delta) - 2 sqrt(ln(1/delta)^2 + eps ln(1/delta))``, evaluated
    as ``eps^2 / (sqrt(ln(1/delta) + eps) + sqrt(ln(1/delta)))^2`` to avoid
    cancellation.
    """
    _check_delta(delta)
    if epsilon_th <= 0:
        raise ValueError("epsilon_th must be positive")
    log_inv = math.log(1.0 / delta)
    root = math.sqrt(log_inv + epsilon_th) + math.sqrt(log_inv)
    return epsilon_th * epsilon_th / (root * root)


def calibrate_sigma(K: float, G: float, batch_size: float, epsilon_th: float, delta: float) -> float:
    """Smallest noise std-dev that spends exactly ``epsilon_th`` over K steps."""
    if K < 1 or G <= 0 or batch_size <= 0 or epsilon_th <= 0:
        raise ValueError("need K >= 1 and positive G, batch_size, epsilon_th")
    Z = privacy_constant(epsilon_th, delta)
    return math.sqrt(2.0 * K * G * G / (batch_size * batch_size * Z))


def sample_noise(rng: np.random.Generator, d: int, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.zeros(d)
    return rng.normal(0.0, sigma, size=d)
