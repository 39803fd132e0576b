"""Compare the numba and numpy kernels on Swendsen-Wang sweeps and block statistics.

Usage: python3 benchmarks/bench_kernels.py [--N 16 32 64] [--sweeps 200] [--repeat 3]

Both backends consume the same uniforms, so the script also checks that their
outputs agree bit for bit before reporting timings.
"""

import argparse
import time

import numpy as np

from fklab import kernels
from fklab.coarsegrain import BlockWindow, classify_grid, sample_configs
from fklab.fkcore import BoundaryCondition
from fklab.sampler import box_graph


def sweep_inputs(N, beta, sweeps, seed=0):
    g = box_graph(N, 2, beta, BoundaryCondition.wired())
    rng = np.random.default_rng(seed)
    U = rng.random((sweeps, g.n_vertices + g.n_dynamic))
    return g, U


def run_sweeps(backend, g, U):
    n = U.shape[0]
    omega = np.zeros(g.n_dynamic, dtype=np.bool_)
    labels = np.empty((n, g.n_vertices), dtype=np.int64)
    omegas = np.empty((0, 0), dtype=np.bool_)
    backend.sw_chunk(g.n_vertices, g.eu, g.ev, g.prob, g.fu, g.fv, omega, U, labels, omegas, False)
    return labels, omega


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--sweeps", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--beta", type=float, default=0.6)
    args = ap.parse_args()
    backends = [b for b in (kernels.numba_impl, kernels.numpy_impl) if b is not None]
    if len(backends) < 2:
        print("numba unavailable: timing the numpy backend only")

    print(f"{'kernel':<14}{'N':>5}{'backend':>9}{'ms/call':>12}{'speedup':>9}")
    for N in args.N:
        g, U = sweep_inputs(N, args.beta, args.sweeps)
        outs, times = [], []
        for b in backends:
            run_sweeps(b, g, U[:2])  # compile / warm up
            outs.append(run_sweeps(b, g, U))
            times.append(best_time(lambda: run_sweeps(b, g, U), args.repeat) / args.sweeps)
        for o in outs[1:]:
            assert np.array_equal(o[0], outs[0][0]) and np.array_equal(o[1], outs[0][1]), "backends disagree"
        for b, t in zip(backends, times):
            print(f"{'sw_sweep':<14}{N:>5}{b.name:>9}{1e3 * t:>12.3f}{times[-1] / t:>9.1f}")

    w = BlockWindow(16, 2, 5)
    omega = next(iter(sample_configs(w, 0.8, 1, burn_in=50, seed=1)))
    reference = None
    for b in backends:
        saved = kernels.region_stats
        kernels.region_stats = b.region_stats
        try:
            grid = classify_grid(omega, w)
            t = best_time(lambda: classify_grid(omega, w), args.repeat)
        finally:
            kernels.region_stats = saved
        if reference is None:
            reference = grid.conditions
        assert np.array_equal(reference, grid.conditions), "backends disagree on block classification"
        print(f"{'classify_grid':<14}{w.box.N:>5}{b.name:>9}{1e3 * t:>12.3f}{'':>9}")


if __name__ == "__main__":
    main()
