"""Backend selection for the training kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise, or
when ``DPPASGD_PURE_PYTHON=1`` is set, the numpy fallback takes over.
"""

from __future__ import annotations

import os

from . import _kernels_py

PURE_ENV = "DPPASGD_PURE_PYTHON"

_impl = _kernels_py
BACKEND = "python"
if os.environ.get(PURE_ENV, "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

LOGISTIC = _kernels_py.LOGISTIC
HINGE = _kernels_py.HINGE
DIVERGENCE_LIMIT = _kernels_py.DIVERGENCE_LIMIT

sample_coefficients = _impl.sample_coefficients
per_sample_gradients = _impl.per_sample_gradients
clipped_gradient = _impl.clipped_gradient
local_steps = _impl.local_steps


def get_backend(name: str):
    """Return a specific backend module (``"python"`` or ``"cython"``)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
