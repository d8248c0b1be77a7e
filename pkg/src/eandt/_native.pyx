# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Every function here has a numpy twin in ``_kernels``
that produces identical results; keep the floating-point evaluation order in sync."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()

ctypedef cnp.int64_t i64
ctypedef cnp.uint64_t u64


def assign_nearest(const double[:, ::1] X, const double[:, ::1] C):
    cdef Py_ssize_t n = X.shape[0], k = C.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double acc, diff, best
    cdef i64 arg
    labels_arr = np.empty(n, dtype=np.int64)
    d2_arr = np.empty(n, dtype=np.float64)
    cdef i64[::1] labels = labels_arr
    cdef double[::1] d2 = d2_arr
    with nogil:
        for i in range(n):
            best = 0.0
            arg = -1
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = X[i, t] - C[j, t]
                    acc = acc + diff * diff
                if arg < 0 or acc < best:
                    best = acc
                    arg = j
            labels[i] = arg
            d2[i] = best
    return labels_arr, d2_arr


cdef inline i64 _find(i64[::1] parent, i64 a) noexcept nogil:
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


cdef inline Py_ssize_t _bisect(const i64[::1] keys, i64 key) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


def cell_components(const double[:, ::1] pts, const i64[::1] start,
                    const i64[:, ::1] coords, const i64[::1] keys,
                    const i64[::1] dims, const i64[:, ::1] offsets,
                    double threshold):
    """Union occupied cells that hold a point pair within ``threshold``.

    ``pts`` is sorted by cell; cell ``c`` owns rows ``start[c]:start[c+1]``.
    Returns the union-find root of every cell.
    """
    cdef Py_ssize_t ncell = keys.shape[0], noff = offsets.shape[0]
    cdef Py_ssize_t a, b, o, i, j
    cdef i64 cx, cy, cz, key, ra, rb
    cdef double t2 = threshold * threshold, dx, dy, dz, d2
    cdef bint linked
    parent_arr = np.arange(ncell, dtype=np.int64)
    cdef i64[::1] parent = parent_arr
    with nogil:
        for a in range(ncell):
            for o in range(noff):
                cx = coords[a, 0] + offsets[o, 0]
                cy = coords[a, 1] + offsets[o, 1]
                cz = coords[a, 2] + offsets[o, 2]
                if cx < 0 or cy < 0 or cz < 0 or cx >= dims[0] or cy >= dims[1] or cz >= dims[2]:
                    continue
                key = (cx * dims[1] + cy) * dims[2] + cz
                b = _bisect(keys, key)
                if b >= ncell or keys[b] != key:
                    continue
                ra = _find(parent, a)
                rb = _find(parent, b)
                if ra == rb:
                    continue
                linked = False
                for i in range(start[a], start[a + 1]):
                    for j in range(start[b], start[b + 1]):
                        dx = pts[i, 0] - pts[j, 0]
                        dy = pts[i, 1] - pts[j, 1]
                        dz = pts[i, 2] - pts[j, 2]
                        d2 = (dx * dx + dy * dy) + dz * dz
                        if d2 <= t2:
                            linked = True
                            break
                    if linked:
                        break
                if linked:
                    if ra < rb:
                        parent[rb] = ra
                    else:
                        parent[ra] = rb
        for a in range(ncell):
            parent[a] = _find(parent, a)
    return parent_arr


cdef inline u64 _part1by2(u64 x) noexcept nogil:
    x &= 0x1fffffULL
    x = (x | (x << 32)) & 0x1f00000000ffffULL
    x = (x | (x << 16)) & 0x1f0000ff0000ffULL
    x = (x | (x << 8)) & 0x100f00f00f00f00fULL
    x = (x | (x << 4)) & 0x10c30c30c30c30c3ULL
    x = (x | (x << 2)) & 0x1249249249249249ULL
    return x


def best_density(const double[:, ::1] pts, const double[:, ::1] mu,
                 const double[:, ::1] prec, const double[::1] lognorm,
                 const i64[::1] orig, const i64[::1] codes,
                 const double[::1] origin, double leaf, int shift,
                 i64 max_coord, double radius):
    """Best Gaussian density among cells whose mean lies within ``radius``.

    Cells are given in Morton order (``codes`` ascending); ``orig`` maps them
    back to their map index. Ties go to the lowest map index.
    """
    cdef Py_ssize_t n = pts.shape[0], m = codes.shape[0]
    cdef Py_ssize_t p, q, lo_i, hi_i
    cdef int ax
    cdef i64 lo[3]
    cdef i64 hi[3]
    cdef i64 nx, ny, nz, arg
    cdef u64 node, base
    cdef double r2 = radius * radius, best, dx, dy, dz, d2, maha, f, x0, x1, x2
    cdef double v
    best_arr = np.zeros(n, dtype=np.float64)
    arg_arr = np.full(n, -1, dtype=np.int64)
    cdef double[::1] out_best = best_arr
    cdef i64[::1] out_arg = arg_arr
    cdef bint empty
    with nogil:
        for p in range(n):
            x0 = pts[p, 0]
            x1 = pts[p, 1]
            x2 = pts[p, 2]
            empty = False
            for ax in range(3):
                v = floor((pts[p, ax] - radius - origin[ax]) / leaf)
                if v < 0:
                    v = 0
                elif v > max_coord:
                    v = max_coord + 1
                lo[ax] = (<i64>v) >> shift
                v = floor((pts[p, ax] + radius - origin[ax]) / leaf)
                if v < 0:
                    empty = True
                    break
                if v > max_coord:
                    v = max_coord
                hi[ax] = (<i64>v) >> shift
                if lo[ax] > hi[ax]:
                    empty = True
                    break
            if empty:
                continue
            best = -1.0
            arg = -1
            for nx in range(lo[0], hi[0] + 1):
                for ny in range(lo[1], hi[1] + 1):
                    for nz in range(lo[2], hi[2] + 1):
                        node = (_part1by2(<u64>nx) | (_part1by2(<u64>ny) << 1)
                                | (_part1by2(<u64>nz) << 2))
                        base = node << (3 * shift)
                        lo_i = _bisect(codes, <i64>base)
                        hi_i = _bisect(codes, <i64>((node + 1) << (3 * shift)))
                        for q in range(lo_i, hi_i):
                            dx = x0 - mu[q, 0]
                            dy = x1 - mu[q, 1]
                            dz = x2 - mu[q, 2]
                            d2 = (dx * dx + dy * dy) + dz * dz
                            if d2 > r2:
                                continue
                            maha = ((prec[q, 0] * dx * dx + prec[q, 3] * dy * dy + prec[q, 5] * dz * dz)
                                    + 2.0 * (prec[q, 1] * dx * dy + prec[q, 2] * dx * dz
                                             + prec[q, 4] * dy * dz))
                            # rank by exponent; exp is applied once to the winner
                            f = lognorm[q] - 0.5 * maha
                            if arg < 0 or f > best or (f == best and orig[q] < arg):
                                best = f
                                arg = orig[q]
            if arg >= 0:
                out_best[p] = exp(best)
                out_arg[p] = arg
    return best_arr, arg_arr
