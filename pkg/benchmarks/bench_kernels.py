"""Compare the compiled and pure-Python training kernels.

    python benchmarks/bench_kernels.py [--n 2000] [--d 103] [--batch 64] [--tau 10] [--repeat 20]

Both backends run the same local-step workload (same batches, same noise)
and the script reports wall time per call, the speed-up, and the largest
coordinate difference between the two results.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from dppasgd.kernels import HINGE, LOGISTIC, get_backend


def workload(n, d, batch, tau, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X /= np.maximum(1.0, np.linalg.norm(X, axis=1))[:, None]
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    batches = rng.integers(0, n, size=(tau, batch), dtype=np.int64)
    noise = rng.normal(scale=0.1, size=(tau, d))
    return X, y, batches, noise, np.zeros(d)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=103)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--tau", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    X, y, batches, noise, theta = workload(args.n, args.d, args.batch, args.tau)
    try:
        compiled = get_backend("cython")
    except ImportError:
        print("compiled backend not built; only the python backend is available")
        return 1
    python = get_backend("python")
    print(f"local_steps: n={args.n} d={args.d} batch={args.batch} tau={args.tau}")
    print(f"{'kernel':<10}{'python ms':>12}{'cython ms':>12}{'speed-up':>10}{'max |diff|':>14}")
    for name, code in (("logistic", LOGISTIC), ("hinge", HINGE)):
        times, outs = {}, {}
        for label, impl in (("python", python), ("cython", compiled)):
            call = lambda: impl.local_steps(code, theta, X, y, batches, noise, 0.5, 1.0, 0.001)
            outs[label] = call()[0]
            times[label] = min(timeit.repeat(call, number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(outs["python"] - outs["cython"])))
        print(f"{name:<10}{times['python']:>12.3f}{times['cython']:>12.3f}"
              f"{times['python'] / times['cython']:>9.1f}x{diff:>14.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
