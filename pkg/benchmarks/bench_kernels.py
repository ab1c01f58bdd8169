"""Compiled kernels against the pure-Python fallback.

Times the state/adjoint sweeps of one gradient evaluation, the counter-based
normal generator and a direct Monte Carlo batch on the two-dimensional model,
and checks that both backends agree.

    python3 benchmarks/bench_kernels.py [--n-t 2000] [--samples 20000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from sharptail import _backend
from sharptail.core import Path
from sharptail.instanton import make_grid
from sharptail.problems import make_model2d
from sharptail.propagators import IntegratorConfig, gradient
from sharptail.rng import counter_normals
from sharptail.sampling import McConfig, direct_tail_mc


def best_of(fn, repeat):
    out, times = None, []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n_t, samples):
    spec = make_model2d()
    grid = make_grid(1.0, n_t, "euler_if")
    integ = IntegratorConfig("euler_if")
    eta = Path(grid, 0.5 * np.sin(np.outer(grid.nodes, [3.0, 5.0])))
    mc = McConfig(eps=0.5, sample_count=samples, z=3.0, dt=1.0 / n_t, seed=7, threads=1)
    return {
        "gradient sweep": lambda: gradient(spec, eta, 1.3, integ).values,
        "counter normals (1e6)": lambda: counter_normals(11, 0, 1000, 1000),
        f"direct MC ({samples} paths)": lambda: np.array([direct_tail_mc(spec, mc).hits]),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-t", type=int, default=2000)
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    if not _backend.available():
        print(f"compiled kernels unavailable ({_backend.IMPORT_ERROR}); nothing to compare")
        return
    print(f"{'case':28s} {'native [s]':>11s} {'python [s]':>11s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases(a.n_t, a.samples).items():
        tn, rn = best_of(fn, a.repeat)
        with _backend.force_python():
            tp, rp = best_of(fn, max(1, a.repeat - 2))
        diff = float(np.max(np.abs(np.asarray(rn, float) - np.asarray(rp, float))))
        print(f"{name:28s} {tn:11.4f} {tp:11.4f} {tp / tn:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
