"""Compiled kernels against the numpy fallback and brute-force oracles."""

import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from eandt import _kernels
from eandt.ndt import NdtMap, accumulate_groups

native = pytest.mark.skipif(_kernels._native is None, reason="compiled kernels not built")


def brute_components(P, r):
    adj = cdist(P, P) <= r
    return connected_components(adj, directed=False)[1]


def same_partition(a, b):
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def small_map(rng, n=4000, size=1.0):
    P = rng.uniform(0, 12, (n, 3))
    P[:, 2] *= 0.2
    key = np.floor(P / size).astype(np.int64)
    _, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    counts, sums, cov = accumulate_groups(P, inv, int(inv.max()) + 1)
    keep = counts >= 6
    return NdtMap(np.zeros(keep.sum()), counts[keep], sums[keep], cov[keep], size)


def test_assign_nearest_matches_brute_force(rng):
    X = rng.normal(size=(777, 3))
    C = rng.normal(size=(13, 3))
    labels, d2 = _kernels.assign_nearest(X, C)
    D = ((X[:, None, :] - C[None]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(labels, D.argmin(axis=1))
    np.testing.assert_allclose(d2, D.min(axis=1), rtol=1e-12)


def test_assign_nearest_ties_go_low():
    labels, _ = _kernels.assign_nearest(np.zeros((1, 3)), np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    assert labels[0] == 0


@pytest.mark.parametrize("r", [0.05, 0.3, 1.0])
def test_threshold_components_match_brute_force(rng, r):
    P = rng.random((600, 3)) * 4
    comp = _kernels.threshold_components(P, r)
    assert same_partition(comp, brute_components(P, r))


def test_threshold_components_edge_distance():
    P = np.array([[0, 0, 0], [0.3, 0, 0], [0.6000001, 0, 0]])
    comp = _kernels.threshold_components(P, 0.3)
    assert comp[0] == comp[1] != comp[2]


def test_best_density_matches_linear_scan(rng):
    m = small_map(rng)
    mu, _, prec, lognorm = m.gaussians()
    Q = rng.uniform(-1, 13, (400, 3))
    best, arg = m.best_density(Q, 2.0)
    for i, q in enumerate(Q):
        d = q - mu
        ok = np.flatnonzero((d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2] <= 4.0)
        if ok.size == 0:
            assert best[i] == 0 and arg[i] == -1
            continue
        dd, p = d[ok], prec[ok]
        maha = ((p[:, 0] * dd[:, 0] * dd[:, 0] + p[:, 3] * dd[:, 1] * dd[:, 1] + p[:, 5] * dd[:, 2] * dd[:, 2])
                + 2.0 * (p[:, 1] * dd[:, 0] * dd[:, 1] + p[:, 2] * dd[:, 0] * dd[:, 2] + p[:, 4] * dd[:, 1] * dd[:, 2]))
        e = lognorm[ok] - 0.5 * maha
        j = int(np.argmax(e))
        assert arg[i] == ok[j]
        assert best[i] == pytest.approx(np.exp(e[j]), rel=1e-12)


@native
def test_native_and_numpy_agree_bitwise(rng):
    X = rng.normal(size=(3000, 3))
    C = rng.normal(size=(40, 3))
    a = _kernels._native.assign_nearest(X, C)
    b = _kernels.py_assign_nearest(X, C)
    assert np.array_equal(a[0], b[0]) and a[1].tobytes() == b[1].tobytes()

    P = rng.random((3000, 3)) * 6
    saved = _kernels._native
    try:
        c_native = _kernels.threshold_components(P, 0.25)
        _kernels._native = None
        c_py = _kernels.threshold_components(P, 0.25)
    finally:
        _kernels._native = saved
    np.testing.assert_array_equal(c_native, c_py)

    m = small_map(rng)
    Q = rng.uniform(-1, 13, (5000, 3))
    tree = m.index
    mu, _, prec, lognorm = m.gaussians()
    o = tree.order
    args = (np.ascontiguousarray(Q), np.ascontiguousarray(mu[o]), np.ascontiguousarray(prec[o]),
            np.ascontiguousarray(lognorm[o]), np.ascontiguousarray(o), tree.codes, tree.origin,
            tree.leaf_size, tree.level_for_radius(2.0), tree.max_coord, 2.0)
    n_best, n_arg = _kernels._native.best_density(*args)
    p_best, p_arg = _kernels.py_best_density(*args)
    assert n_best.tobytes() == p_best.tobytes()
    assert np.array_equal(n_arg, p_arg)


def test_pure_python_switch():
    env = dict(os.environ, EANDT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import eandt; print(eandt.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_morton_interleave():
    code = _kernels.morton3(np.array([1, 0, 0, 3]), np.array([0, 1, 0, 3]), np.array([0, 0, 1, 3]))
    np.testing.assert_array_equal(code, [1, 2, 4, 63])
