#!/usr/bin/env python3
"""Benchmark the per-voxel penalty kernel: compiled extension vs numpy.

Times accumulate_penalties (value + gradient) on synthetic section layouts
of increasing size, and a full smoothed objective/gradient evaluation which
adds the sparse matvecs. Run:

    python3 benchmarks/bench_kernels.py [--sizes 1e4,1e5,1e6] [--repeats 20]
"""

import argparse
import time

import numpy as np

from quadlin import kernels
from quadlin.kernels import numpy_backend


def make_inputs(n_voxels, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(n_voxels).astype(np.int64)
    n_ptv = n_voxels // 3
    n_oar = n_voxels // 3
    n_max = n_voxels - n_ptv - n_oar
    ptv_idx = np.sort(ids[:n_ptv])
    oar_idx = np.sort(ids[n_ptv:n_ptv + n_oar])
    max_idx = np.sort(ids[n_ptv + n_oar:])

    def weights(n):
        w = rng.uniform(0.5, 1.5, size=n)
        return w / w.sum()

    pres = np.full(n_ptv, 70.0)
    pred = rng.uniform(60.0, 75.0, size=n_ptv)
    max_p = rng.uniform(20.0, 40.0, size=n_max)
    return dict(
        d=rng.uniform(0.0, 80.0, size=n_voxels),
        delta=0.01,
        psi1=2e6, psi2=5e5, psi3=2e5, psi4=2e5,
        xi1=2e4, xi2=2e2, xi3=1e3,
        ptv_idx=ptv_idx, ptv_w=weights(n_ptv),
        ptv_lo=np.minimum(pred, pres), ptv_up=np.maximum(pred, pres),
        ptv_pres=pres,
        oar_idx=oar_idx, oar_w=weights(n_oar),
        oar_pred=rng.uniform(5.0, 45.0, size=n_oar),
        max_idx=max_idx, max_w=weights(n_max),
        max_ref=max_p, max_lo=0.9 * max_p, max_span=0.1 * max_p,
    )


def time_backend(fn, inputs, repeats):
    args = dict(inputs)
    d = args.pop("d")
    delta = args.pop("delta")
    grad = np.zeros(len(d))
    fn(d, grad, delta, **args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        grad[:] = 0.0
        t0 = time.perf_counter()
        fn(d, grad, delta, **args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="1e4,1e5,1e6",
                        help="comma-separated voxel counts")
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    sizes = [int(float(s)) for s in args.sizes.split(",")]

    backends = [("numpy", numpy_backend.accumulate_penalties)]
    try:
        backends.append(("cython", kernels.get_backend("cython")))
    except ImportError:
        print("compiled extension unavailable; benchmarking numpy only")

    print(f"active import-time backend: {kernels.BACKEND}")
    print(f"{'voxels':>10} {'backend':>8} {'best (ms)':>10} {'speedup':>8}")
    for n in sizes:
        inputs = make_inputs(n)
        base = None
        for name, fn in backends:
            best = time_backend(fn, inputs, args.repeats)
            if base is None:
                base = best
            print(f"{n:>10d} {name:>8} {best * 1e3:>10.3f} {base / best:>7.2f}x")


if __name__ == "__main__":
    main()
