"""Compiled kernels vs the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0]

Prints best-of-N wall time per kernel and backend, plus the speedup. The
numpy timings are always available; compiled timings need the extension
(``pip install --no-build-isolation -e .``).
"""

import argparse
import time

import numpy as np

from eandt import _kernels
from eandt.cloud import voxel_keys
from eandt.ndt import NdtMap, accumulate_groups


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def make_map(rng, n, size):
    P = rng.uniform(0, 60, (n, 3))
    P[:, 2] *= 0.1
    _, inv = voxel_keys(P, size)
    counts, sums, cov = accumulate_groups(P, inv, int(inv.max()) + 1)
    keep = counts >= 6
    return NdtMap(np.zeros(keep.sum()), counts[keep], sums[keep], cov[keep], size)


def cases(rng, scale):
    X = rng.normal(size=(int(200_000 * scale), 3))
    C = rng.normal(size=(64, 3))
    P = rng.random((int(100_000 * scale), 3)) * 20
    m = make_map(rng, int(400_000 * scale), 1.0)
    Q = rng.uniform(0, 60, (int(200_000 * scale), 3))
    Q[:, 2] *= 0.1
    mu, _, prec, lognorm = m.gaussians()
    tree = m.index
    o = tree.order
    bd_args = (Q, np.ascontiguousarray(mu[o]), np.ascontiguousarray(prec[o]), np.ascontiguousarray(lognorm[o]),
               np.ascontiguousarray(o), tree.codes, tree.origin, tree.leaf_size, tree.level_for_radius(2.0),
               tree.max_coord, 2.0)
    return {
        "assign_nearest": ((X, C), _kernels.py_assign_nearest,
                           getattr(_kernels._native, "assign_nearest", None)),
        "threshold_components": ((P, 0.15), "components", None),
        "best_density": (bd_args, _kernels.py_best_density,
                         getattr(_kernels._native, "best_density", None)),
    }


def run_components(native, P, r):
    saved = _kernels._native
    if not native:
        _kernels._native = None
    try:
        return _kernels.threshold_components(P, r)
    finally:
        _kernels._native = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0, help="problem size multiplier")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"backend at import: {_kernels.BACKEND}")
    print(f"{'kernel':<22}{'numpy [s]':>12}{'native [s]':>12}{'speedup':>10}")
    for name, (a, py, nat) in cases(rng, args.scale).items():
        if py == "components":
            t_py = best_of(lambda: run_components(False, *a), args.repeat)
            t_nat = best_of(lambda: run_components(True, *a), args.repeat) if _kernels._native else None
        else:
            t_py = best_of(lambda: py(*a), args.repeat)
            t_nat = best_of(lambda: nat(*a), args.repeat) if nat is not None else None
        nat_s = f"{t_nat:12.4f}" if t_nat is not None else f"{'n/a':>12}"
        speed = f"{t_py / t_nat:9.1f}x" if t_nat else f"{'-':>10}"
        print(f"{name:<22}{t_py:12.4f}{nat_s}{speed}")


if __name__ == "__main__":
    main()
