"""Pure numpy implementation of the training kernels.

Mirrors ``_kernels.pyx`` one for one; selected when the compiled module is
missing or ``DPPASGD_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

LOGISTIC = 0
HINGE = 1
DIVERGENCE_LIMIT = 1e8


def sample_coefficients(kind, theta, X, y):
    """Scalar c_i such that the unregularised gradient of sample i is c_i * x_i."""
    margins = y * (X @ theta)
    if kind == LOGISTIC:
        return -y * expit(-margins)
    # hinge: active branch includes the kink y<theta,x> == 1
    return np.where(margins <= 1.0, -y, 0.0)


def per_sample_gradients(kind, theta, X, y, l2):
    coef = sample_coefficients(kind, theta, X, y)
    return coef[:, None] * X + l2 * theta[None, :]


def clipped_gradient(kind, theta, X, y, idx, clip, l2):
    grads = per_sample_gradients(kind, theta, X[idx], y[idx], l2)
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    scale = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
    return (scale[:, None] * grads).mean(axis=0)


def local_steps(kind, theta, X, y, batches, noise, eta, clip, l2):
    """Run ``len(batches)`` noisy clipped SGD steps from ``theta``.

    Returns ``(theta_out, completed)``; ``completed`` is smaller than the
    number of steps when the iterate left the finite/bounded region.
    """
    theta = np.array(theta, dtype=np.float64, copy=True)
    for step in range(batches.shape[0]):
        g = clipped_gradient(kind, theta, X, y, batches[step], clip, l2)
        theta -= eta * (g + noise[step])
        if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > DIVERGENCE_LIMIT:
            return theta, step
    return theta, batches.shape[0]
