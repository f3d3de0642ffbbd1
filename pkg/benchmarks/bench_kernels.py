"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py --repeat 5

Both variants are imported directly, so ``FLOWSMP_NUMBA`` does not matter
here.  The first numba call (compilation or cache load) is excluded.
"""

import argparse
import timeit

import numpy as np

from flowsmp import kernels
from flowsmp._backend import HAVE_NUMBA


def cases(paths, n, M, K):
    rng = np.random.default_rng(0)
    w = np.full(n, 1.0 / n)
    x0 = rng.normal(size=n)
    coef = np.array([-0.5, 0.3, 0.8, 0.3, 0.2, 0.4])
    alpha = np.ascontiguousarray(np.broadcast_to(rng.normal(size=M), (paths, M)))
    xi = rng.normal(0, np.sqrt(1.0 / M), (paths, M))
    x = rng.normal(size=(paths, n))
    c = rng.normal(size=paths * n)
    wa = rng.dirichlet(np.ones(n))
    wb = rng.dirichlet(np.ones(n + 3))
    return {
        "euler_affine": ((x0, w, coef, alpha, xi, 1.0 / M), kernels.euler_affine_np, kernels.euler_affine_nb),
        "gaussian_mix": ((x, x, w, 0.5), kernels.gaussian_mix_np, kernels.gaussian_mix_nb),
        "bump_loadings": ((c, 1.0, K), kernels.bump_loadings_np, kernels.bump_loadings_nb),
        "quantile_plan": ((wa, wb), kernels.quantile_plan_np, kernels.quantile_plan_nb),
    }


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    if any(np.shape(u) != np.shape(v) for u, v in zip(a, b)):
        return float("nan")
    return max(float(np.max(np.abs(np.asarray(u, float) - np.asarray(v, float)))) for u, v in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=4000)
    ap.add_argument("--atoms", type=int, default=8)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--modes", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 0
    print(f"{'kernel':15s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}  max|diff|")
    for name, (a, f_np, f_nb) in cases(args.paths, args.atoms, args.steps, args.modes).items():
        r_nb = f_nb(*a)  # compile or load from cache
        r_np = f_np(*a)
        diff = _max_diff(r_np, r_nb)
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:15s} {t_np:11.3f} {t_nb:11.3f} {t_np / t_nb:8.1f}  {diff:.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
