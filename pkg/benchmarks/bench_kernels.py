"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--n 5000] [--d 32] [--repeat 20]

Each kernel is called once untimed (numba compiles or loads its cache), then
``repeat`` times; the best wall time is reported.
"""

import argparse
import sys
import timeit

import numpy as np

from fedgmm import _kernels


def cases(n, d, k, rng):
    x = rng.normal(size=(n, d))
    a = rng.normal(size=(d, d))
    chol = np.linalg.cholesky(a @ a.T / d + np.eye(d))
    mu = rng.normal(size=d)
    logits = rng.normal(size=(n, 9))
    w = rng.normal(size=(k, d))
    b = rng.normal(size=k)
    y = rng.integers(0, k, n)
    sw = rng.random(n)
    return {
        "gaussian_logpdf": (x, mu, chol),
        "log_normalize_rows": (logits,),
        "log_softmax": (x, w, b),
        "weighted_ce_grad": (x, y, sw, w, b),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    if _kernels.numba_backend is None:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"n={args.n} d={args.d} K={args.k} repeat={args.repeat}")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, inputs in cases(args.n, args.d, args.k, rng).items():
        times = {}
        for be in (_kernels.numpy_backend, _kernels.numba_backend):
            fn = getattr(be, name)
            fn(*inputs)
            times[be.name] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat))
        print(
            f"{name:<20} {times['numpy'] * 1e3:>10.3f} {times['numba'] * 1e3:>10.3f} "
            f"{times['numpy'] / times['numba']:>7.2f}x"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
