from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from dppasgd.datasets import DeviceDataset, Split
from dppasgd.models import ProblemConstants

ROOT = Path(__file__).resolve().parents[1]
ADULT = ROOT / "data" / "adult.csv"
ADULT_CATEGORICAL = ["workclass", "education", "marital-status", "occupation",
                     "relationship", "race", "sex", "native-country"]


def unit_rows(rng, n, d):
    X = rng.normal(size=(n, d))
    return X / np.maximum(1.0, np.linalg.norm(X, axis=1))[:, None]


def toy_devices(M=4, n=40, d=5, batch=8, seed=0) -> list[DeviceDataset]:
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    devices = []
    for m in range(M):
        X = unit_rows(rng, n + 10, d)
        y = np.where(X @ w + 0.3 * rng.normal(size=n + 10) >= 0, 1.0, -1.0)
        devices.append(DeviceDataset(m, Split(X[:n], y[:n]), Split(X[n:n + 5], y[n:n + 5]),
                                     Split(X[n + 5:], y[n + 5:]), batch_size=batch))
    return devices


def paper_constants(M=16, d=100, batch=64, **kw) -> ProblemConstants:
    base = dict(G=1.0, L=0.26, lam=0.01, xi_sq=0.004, alpha=0.69, d=d, M=M, batch_sizes=[batch] * M)
    base.update(kw)
    return ProblemConstants(**base)


@pytest.fixture
def devices():
    return toy_devices()


@pytest.fixture
def constants():
    return paper_constants()


@pytest.fixture(scope="session")
def adult_args():
    cats = ",".join(ADULT_CATEGORICAL)
    return ["--dataset", str(ADULT), "--label-col", "income",
            "--categorical-cols", cats, "--feature-cols", cats]


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
