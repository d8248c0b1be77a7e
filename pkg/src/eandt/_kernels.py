"""Hot inner loops with a compiled backend and a numpy fallback.

The compiled module ``eandt._native`` is used when it imports; set
``EANDT_PURE_PYTHON=1`` to force the fallback. Both backends give the same
answers: identical labels and components, densities equal up to libm vs numpy
``exp`` rounding (last ulp).
"""

from __future__ import annotations

import logging
import math
import os

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

_native = None
if not os.environ.get("EANDT_PURE_PYTHON"):
    try:
        from eandt import _native  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _native = None

BACKEND = "native" if _native is not None else "numpy"

_ASSIGN_CHUNK = 1 << 21  # distance-matrix entries per block
_DENSITY_CHUNK = 1 << 15  # points per block


def morton3(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray) -> np.ndarray:
    """Interleave three non-negative 21-bit integer coordinates."""

    def part(v):
        x = np.asarray(v).astype(np.uint64) & np.uint64(0x1FFFFF)
        x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
        x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
        x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
        x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
        x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
        return x

    code = part(ix) | (part(iy) << np.uint64(1)) | (part(iz) << np.uint64(2))
    return code.astype(np.int64)


# ---------------------------------------------------------------------------
# nearest centroid

def py_assign_nearest(X: np.ndarray, C: np.ndarray):
    n, d = X.shape
    k = C.shape[0]
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    step = max(1, _ASSIGN_CHUNK // max(k, 1))
    for s in range(0, n, step):
        xs = X[s:s + step]
        acc = np.zeros((xs.shape[0], k))
        # accumulate dimension by dimension, same order as the compiled loop
        for t in range(d):
            diff = xs[:, t, None] - C[None, :, t]
            acc = acc + diff * diff
        lab = acc.argmin(axis=1)
        labels[s:s + step] = lab
        d2[s:s + step] = acc[np.arange(xs.shape[0]), lab]
    return labels, d2


def assign_nearest(X: np.ndarray, C: np.ndarray):
    """Index of and squared distance to the nearest row of ``C`` for each row of ``X``.

    Ties resolve to the lowest centroid index.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    if _native is not None:
        return _native.assign_nearest(X, C)
    return py_assign_nearest(X, C)


# ---------------------------------------------------------------------------
# threshold connectivity

def _neighbor_offsets(reach: int, cell: float, threshold: float) -> np.ndarray:
    rng = np.arange(-reach, reach + 1)
    off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
    # keep one of each +/- pair
    positive = (off[:, 0] > 0) | ((off[:, 0] == 0) & (off[:, 1] > 0)) | (
        (off[:, 0] == 0) & (off[:, 1] == 0) & (off[:, 2] > 0))
    off = off[positive]
    gap = np.maximum(np.abs(off) - 1, 0) * cell
    reachable = (gap ** 2).sum(axis=1) <= threshold ** 2
    return np.ascontiguousarray(off[reachable], dtype=np.int64)


def py_cell_components(pts, start, coords, keys, dims, offsets, threshold):
    ncell = keys.shape[0]
    sizes = np.diff(start)
    cell_of_point = np.repeat(np.arange(ncell), sizes)
    t2 = threshold * threshold
    bound = threshold * (1.0 + 1e-9) + 1e-12
    spacing = 10.0 * threshold + 1.0
    rows, cols = [], []
    for off in offsets:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        a_cells = np.nonzero(ok)[0]
        if a_cells.size == 0:
            continue
        nb = nb[ok]
        nkey = (nb[:, 0] * dims[1] + nb[:, 1]) * dims[2] + nb[:, 2]
        pos = np.searchsorted(keys, nkey)
        pos[pos >= ncell] = 0
        hit = keys[pos] == nkey
        a_cells, b_cells = a_cells[hit], pos[hit]
        if a_cells.size == 0:
            continue
        tag_a = np.full(ncell, -1, dtype=np.int64)
        tag_b = np.full(ncell, -1, dtype=np.int64)
        tag_a[a_cells] = np.arange(a_cells.size)
        tag_b[b_cells] = np.arange(b_cells.size)
        qa = tag_a[cell_of_point]
        tb = tag_b[cell_of_point]
        qmask, tmask = qa >= 0, tb >= 0
        # a fourth coordinate separates the cell pairs so one tree serves them all
        tree = cKDTree(np.column_stack([pts[tmask], tb[tmask] * spacing]))
        query = np.column_stack([pts[qmask], qa[qmask] * spacing])
        dist, j = tree.query(query, k=1, distance_upper_bound=bound)
        found = np.isfinite(dist)
        if not found.any():
            continue
        qi = np.nonzero(qmask)[0][found]
        ti = np.nonzero(tmask)[0][j[found]]
        diff = pts[qi] - pts[ti]
        d2 = (diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]) + diff[:, 2] * diff[:, 2]
        good = d2 <= t2
        rows.append(cell_of_point[qi[good]])
        cols.append(cell_of_point[ti[good]])
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.empty(0, dtype=np.int64)
    graph = coo_matrix((np.ones(r.size), (r, c)), shape=(ncell, ncell))
    _, comp = connected_components(graph, directed=False)
    return comp.astype(np.int64)


def threshold_components(points: np.ndarray, threshold: float) -> np.ndarray:
    """Connected components of the graph linking points at distance <= threshold.

    Returns one component id per point, numbered 0.. in order of each
    component's lowest point index.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    # any two points sharing a cell of this size are within the threshold
    cell = threshold / np.sqrt(3.0) * (1.0 - 1e-9)
    lo = pts.min(axis=0)
    ijk = np.floor((pts - lo) / cell).astype(np.int64)
    dims = ijk.max(axis=0) + 1
    if float(np.prod(dims.astype(np.float64))) > 2.0 ** 62:
        raise ValueError("point extent too large for the connectivity grid")
    key = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    order = np.argsort(key, kind="stable")
    skey = key[order]
    keys, first = np.unique(skey, return_index=True)
    start = np.append(first, n).astype(np.int64)
    coords = np.ascontiguousarray(ijk[order][first])
    spts = np.ascontiguousarray(pts[order])
    offsets = _neighbor_offsets(2, cell, threshold)
    dims = np.ascontiguousarray(dims, dtype=np.int64)
    if _native is not None:
        root = _native.cell_components(spts, start, coords, keys, dims, offsets, float(threshold))
    else:
        root = py_cell_components(spts, start, coords, keys, dims, offsets, float(threshold))
    cell_root = np.repeat(root, np.diff(start))
    point_root = np.empty(n, dtype=np.int64)
    point_root[order] = cell_root
    # renumber by first appearance in original point order
    _, first_idx, inverse = np.unique(point_root, return_index=True, return_inverse=True)
    rank = np.empty(first_idx.size, dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(first_idx.size)
    return rank[inverse.ravel()]


# ---------------------------------------------------------------------------
# best-cell density

def py_best_density(pts, mu, prec, lognorm, orig, codes, origin, leaf, shift, max_coord, radius):
    n = pts.shape[0]
    best = np.zeros(n)
    arg = np.full(n, -1, dtype=np.int64)
    r2 = radius * radius
    sh = np.int64(shift)
    for s in range(0, n, _DENSITY_CHUNK):
        P = pts[s:s + _DENSITY_CHUNK]
        m = P.shape[0]
        lo = np.floor((P - radius - origin) / leaf)
        lo = np.where(lo < 0, 0, lo)
        lo = np.where(lo > max_coord, max_coord + 1, lo).astype(np.int64) >> sh
        hi = np.floor((P + radius - origin) / leaf)
        empty = np.any(hi < 0, axis=1)
        hi = np.minimum(np.maximum(hi, 0), max_coord).astype(np.int64) >> sh
        empty |= np.any(lo > hi, axis=1)
        span = int((hi - lo)[~empty].max()) + 1 if np.any(~empty) else 0
        pid_l, lo_l, hi_l = [], [], []
        for ox in range(span):
            for oy in range(span):
                for oz in range(span):
                    node = lo + np.array([ox, oy, oz], dtype=np.int64)
                    ok = ~empty & np.all(node <= hi, axis=1)
                    if not ok.any():
                        continue
                    nd = node[ok]
                    code = morton3(nd[:, 0], nd[:, 1], nd[:, 2])
                    a = np.searchsorted(codes, code << np.int64(3 * shift))
                    b = np.searchsorted(codes, (code + 1) << np.int64(3 * shift))
                    pid_l.append(np.nonzero(ok)[0])
                    lo_l.append(a)
                    hi_l.append(b)
        if not pid_l:
            continue
        pid = np.concatenate(pid_l)
        a = np.concatenate(lo_l)
        b = np.concatenate(hi_l)
        cnt = b - a
        keep = cnt > 0
        pid, a, cnt = pid[keep], a[keep], cnt[keep]
        if pid.size == 0:
            continue
        pp = np.repeat(pid, cnt)
        offs = np.cumsum(cnt) - cnt
        q = np.arange(cnt.sum()) - np.repeat(offs - a, cnt)
        dx = P[pp, 0] - mu[q, 0]
        dy = P[pp, 1] - mu[q, 1]
        dz = P[pp, 2] - mu[q, 2]
        d2 = (dx * dx + dy * dy) + dz * dz
        inr = d2 <= r2
        pp, q, dx, dy, dz = pp[inr], q[inr], dx[inr], dy[inr], dz[inr]
        if pp.size == 0:
            continue
        pr = prec[q]
        maha = ((pr[:, 0] * dx * dx + pr[:, 3] * dy * dy + pr[:, 5] * dz * dz)
                + 2.0 * (pr[:, 1] * dx * dy + pr[:, 2] * dx * dz + pr[:, 4] * dy * dz))
        f = lognorm[q] - 0.5 * maha
        oq = orig[q]
        order = np.lexsort((oq, -f, pp))
        pp_s = pp[order]
        firsts = np.ones(pp_s.size, dtype=bool)
        firsts[1:] = pp_s[1:] != pp_s[:-1]
        sel = order[firsts]
        # libm exp, matching the compiled kernel bit for bit
        best[s + pp[sel]] = [math.exp(v) for v in f[sel].tolist()]
        arg[s + pp[sel]] = oq[sel]
    return best, arg


def best_density(pts, mu, prec, lognorm, orig, codes, origin, leaf, shift, max_coord, radius):
    """Per point: the highest cell density among cells with mean within ``radius``.

    Returns ``(density, cell_index)``; points without candidates get ``(0, -1)``.
    """
    args = (
        np.ascontiguousarray(pts, dtype=np.float64),
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(prec, dtype=np.float64),
        np.ascontiguousarray(lognorm, dtype=np.float64),
        np.ascontiguousarray(orig, dtype=np.int64),
        np.ascontiguousarray(codes, dtype=np.int64),
        np.ascontiguousarray(origin, dtype=np.float64),
        float(leaf), int(shift), int(max_coord), float(radius),
    )
    if _native is not None:
        return _native.best_density(*args)
    return py_best_density(*args)
