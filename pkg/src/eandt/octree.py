"""Linear octree over a fixed set of 3D points (NDT cell means).

Leaves are cubes of ``leaf_size``; items are kept in Morton order so every
octree node at every level owns a contiguous slice of them. Radius queries
pick the coarsest level whose node size still covers the radius, visit the
(at most 27) nodes that touch the query box, and filter by exact distance.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from eandt import _kernels

logger = logging.getLogger(__name__)

MAX_DEPTH = 20


class Octree:
    def __init__(self, points: np.ndarray, leaf_size: float):
        if not leaf_size > 0:
            raise ValueError("leaf_size must be positive")
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        n = self.points.shape[0]
        self.origin = self.points.min(axis=0) if n else np.zeros(3)
        extent = float(np.ptp(self.points, axis=0).max()) if n else 0.0
        if extent / leaf_size >= 2 ** MAX_DEPTH - 1:
            new_leaf = extent / (2 ** MAX_DEPTH - 2)
            logger.debug("octree leaf %.4g too fine for extent %.4g, using %.4g", leaf_size, extent, new_leaf)
            leaf_size = new_leaf
        self.leaf_size = float(leaf_size)
        self.depth = max(1, int(math.ceil(math.log2(extent / leaf_size + 1.0)))) if n else 1
        self.depth = min(self.depth, MAX_DEPTH)
        self.max_coord = 2 ** self.depth - 1
        ijk = np.floor((self.points - self.origin) / self.leaf_size)
        ijk = np.clip(ijk, 0, self.max_coord).astype(np.int64)
        codes = _kernels.morton3(ijk[:, 0], ijk[:, 1], ijk[:, 2])
        self.order = np.argsort(codes, kind="stable")
        self.codes = np.ascontiguousarray(codes[self.order])

    def __len__(self):
        return self.points.shape[0]

    def level_for_radius(self, r: float) -> int:
        """Smallest node level (counted up from the leaves) with node size >= r."""
        if r <= self.leaf_size:
            return 0
        return min(self.depth, int(math.ceil(math.log2(r / self.leaf_size))))

    def _node_slices(self, x: np.ndarray, r: float):
        shift = self.level_for_radius(r)
        lo = np.floor((x - r - self.origin) / self.leaf_size)
        hi = np.floor((x + r - self.origin) / self.leaf_size)
        if np.any(hi < 0) or np.any(lo > self.max_coord):
            return
        lo = (np.clip(lo, 0, self.max_coord).astype(np.int64)) >> shift
        hi = (np.clip(hi, 0, self.max_coord).astype(np.int64)) >> shift
        for nx in range(lo[0], hi[0] + 1):
            for ny in range(lo[1], hi[1] + 1):
                for nz in range(lo[2], hi[2] + 1):
                    node = int(_kernels.morton3(np.int64(nx), np.int64(ny), np.int64(nz)))
                    a = np.searchsorted(self.codes, node << (3 * shift))
                    b = np.searchsorted(self.codes, (node + 1) << (3 * shift))
                    if b > a:
                        yield a, b

    def query_radius(self, x, r: float) -> np.ndarray:
        """Sorted indices of points with ``|p - x| <= r``."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        x = np.asarray(x, dtype=np.float64).reshape(3)
        if len(self) == 0:
            return np.empty(0, dtype=np.int64)
        hits = []
        r2 = r * r
        for a, b in self._node_slices(x, r):
            idx = self.order[a:b]
            d = x - self.points[idx]
            d2 = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]
            hits.append(idx[d2 <= r2])
        if not hits:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(hits))
