"""Time the compiled fixed-point kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 200] [--resolution 32]

Both backends are imported directly, so the comparison does not depend on
GECOLAB_PURE_PYTHON. Results agree to 1e-10 or the run aborts.
"""
import argparse
import timeit

import numpy as np

from gecolab import _kernels_py
from gecolab.datasets import mixture_of_lines
from gecolab.tiling import LatentGrid

try:
    from gecolab import _kernels as _compiled
except ImportError:
    _compiled = None


def _cases(X, psi, prior, beta):
    M = _kernels_py.posterior(X, psi, prior, beta)
    return {
        "sq_distances": (X, psi),
        "posterior": (X, psi, prior, beta),
        "centroids": (M, X, psi),
        "fixed_point_map": (X, psi, prior, beta),
    }


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--beta", type=float, default=1e-2)
    args = ap.parse_args(argv)

    X = np.ascontiguousarray(mixture_of_lines(args.n, seed=1).points)
    grid = LatentGrid(resolution=args.resolution)
    rng = np.random.default_rng(0)
    psi = np.ascontiguousarray(grid.centers + 0.01 * rng.standard_normal(grid.centers.shape))
    prior = np.ascontiguousarray(grid.prior)
    cases = _cases(X, psi, prior, args.beta)

    print(f"n={args.n} cells={grid.size} beta={args.beta:g} best of {args.repeat}")
    if _compiled is None:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'kernel':<16}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, call_args in cases.items():
        py_fn = getattr(_kernels_py, name)
        loops = max(1, int(0.2 / max(timeit.timeit(lambda: py_fn(*call_args), number=1), 1e-6)))
        t_py = min(timeit.repeat(lambda: py_fn(*call_args), number=loops, repeat=args.repeat)) / loops
        if _compiled is None:
            print(f"{name:<16}{t_py * 1e3:>12.3f}{'-':>12}{'-':>10}")
            continue
        c_fn = getattr(_compiled, name)
        diff = _max_diff(c_fn(*call_args), py_fn(*call_args))
        if diff > 1e-10:
            raise SystemExit(f"{name}: backends disagree by {diff:.2e}")
        t_c = min(timeit.repeat(lambda: c_fn(*call_args), number=loops, repeat=args.repeat)) / loops
        print(f"{name:<16}{t_py * 1e3:>12.3f}{t_c * 1e3:>12.3f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
