"""Planar and cylindrical primitive extraction.

Planes come from weighted normal-plane RANSAC on a voxel-subsampled instance
(buildings, fences), from K-means pre-clustering plus a coarse plane filter
(ground), or from a single least-squares fit (traffic signs). Poles and tree
trunks become one cylinder each.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from eandt.cloud import NeighborIndex, voxel_keys
from eandt.clustering import Instance, kmeans_pp, substream
from eandt.labels import SemanticLabel

logger = logging.getLogger(__name__)

_SIGN_EPS = 1e-12


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip vectors so that z >= 0 (ties: y >= 0, then x >= 0). Works row-wise."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1, 3)
    x, y, z = flat[:, 0], flat[:, 1], flat[:, 2]
    key = np.where(np.abs(z) > _SIGN_EPS, z, np.where(np.abs(y) > _SIGN_EPS, y, x))
    sign = np.where(key < 0, -1.0, 1.0)
    return (flat * sign[:, None]).reshape(v.shape)


@dataclass
class PCAResult:
    mean: np.ndarray
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, right-handed

    @property
    def normal(self) -> np.ndarray:
        return self.eigenvectors[:, 2]


def pca(points) -> PCAResult:
    """Eigen-decomposition of the 1/(N-1) sample covariance.

    The first and last eigenvectors are sign-canonicalized; the middle one
    completes a right-handed frame.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if P.shape[0] < 3:
        raise ValueError("PCA needs at least 3 points")
    mean = P.mean(axis=0)
    Q = P - mean
    cov = Q.T @ Q / (P.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals[::-1], 0.0)
    e1 = canonical_sign(vecs[:, 2])
    e3 = canonical_sign(vecs[:, 0])
    e2 = np.cross(e3, e1)
    e2 /= np.linalg.norm(e2)
    return PCAResult(mean, vals, np.column_stack([e1, e2, e3]))


def fit_plane(points) -> tuple[np.ndarray, float, PCAResult]:
    """Total least-squares plane ``n . x + d = 0``."""
    res = pca(points)
    n = res.normal
    return n, float(-n @ res.mean), res


def estimate_normals(points, k: int = 26) -> np.ndarray:
    """Unit normal per point from the scatter of its ``k`` nearest neighbors
    (the point itself included)."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if P.shape[0] < k:
        raise ValueError(f"need at least k={k} points for normal estimation, got {P.shape[0]}")
    idx = NeighborIndex(P).k_nearest_all(k)
    nb = P[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return canonical_sign(normals)


@dataclass
class PlaneFitConfig:
    """Normal-plane RANSAC settings.

    ``normal_weight`` is the angular tolerance in radians: a point whose
    normal matches the plane is an inlier up to ``distance_threshold``; the
    distance budget shrinks linearly to zero at ``normal_weight`` radians of
    normal deviation. Zero disables the normal test.
    """

    distance_threshold: float = 0.15
    normal_weight: float = math.pi / 4
    max_iterations: int = 1000
    min_inliers: int = 50
    voxel_subsample: float = 0.10
    normal_k: int = 26
    min_width: float = 0.30
    max_planes: int = 64

    def __post_init__(self):
        if self.distance_threshold <= 0 or self.voxel_subsample <= 0:
            raise ValueError("plane-fit thresholds must be positive")
        if not 0 <= self.normal_weight <= 1:
            raise ValueError("normal_weight must lie in [0, 1]")
        if self.max_iterations < 1 or self.min_inliers < 3 or self.normal_k < 3:
            raise ValueError("invalid plane-fit counts")


@dataclass
class PlaneFit:
    normal: np.ndarray
    offset: float
    inliers: np.ndarray


def _inlier_mask(points, normals, n, d, cfg: PlaneFitConfig) -> np.ndarray:
    """Inlier test for one or many planes; ``n`` is (3,) or (H, 3)."""
    dist = np.abs(points @ np.atleast_2d(n).T + np.atleast_1d(d))  # (N, H)
    score = dist / cfg.distance_threshold
    if cfg.normal_weight > 0:
        cosang = np.clip(np.abs(normals @ np.atleast_2d(n).T), 0.0, 1.0)
        score = score + np.arccos(cosang) / cfg.normal_weight
    mask = score <= 1.0
    return mask[:, 0] if np.ndim(n) == 1 else mask


def _hypotheses(points, count, rng, max_draws):
    n = points.shape[0]
    normals, offsets = [], []
    draws = 0
    while len(normals) < count and draws < max_draws:
        batch = min(max(2 * (count - len(normals)), 64), 4096)
        draws += batch
        tri = rng.integers(n, size=(batch, 3))
        p1, p2, p3 = points[tri[:, 0]], points[tri[:, 1]], points[tri[:, 2]]
        u, v = p2 - p1, p3 - p1
        c = np.cross(u, v)
        cn = np.linalg.norm(c, axis=1)
        scale = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        ok = (tri[:, 0] != tri[:, 1]) & (tri[:, 0] != tri[:, 2]) & (tri[:, 1] != tri[:, 2])
        ok &= cn > 1e-9 * scale
        ok &= scale > 0
        nrm = c[ok] / cn[ok, None]
        normals.extend(nrm)
        offsets.extend(-np.einsum("ij,ij->i", nrm, p1[ok]))
    return np.asarray(normals[:count]).reshape(-1, 3), np.asarray(offsets[:count])


def ransac_plane(points, normals, cfg: PlaneFitConfig, seed: int | np.random.Generator = 0):
    """Weighted normal-plane RANSAC followed by a least-squares refit.

    Returns:
        PlaneFit with the refit plane and its inlier indices, or None when no
        hypothesis reaches ``cfg.min_inliers``.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    N = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if P.shape[0] < 3:
        raise ValueError("RANSAC needs at least 3 points")
    if P.shape[0] < cfg.min_inliers:
        return None
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, 0x5253)
    hn, hd = _hypotheses(P, cfg.max_iterations, rng, 100 * cfg.max_iterations)
    if hn.shape[0] == 0:
        return None
    counts = np.empty(hn.shape[0], dtype=np.int64)
    step = max(1, (1 << 22) // P.shape[0])
    for s in range(0, hn.shape[0], step):
        counts[s:s + step] = _inlier_mask(P, N, hn[s:s + step], hd[s:s + step], cfg).sum(axis=0)
    best = int(np.argmax(counts))
    if counts[best] < cfg.min_inliers:
        return None
    inl = np.flatnonzero(_inlier_mask(P, N, hn[best], hd[best], cfg))
    n, d, _ = fit_plane(P[inl])
    refined = np.flatnonzero(_inlier_mask(P, N, n, d, cfg))
    if refined.size < cfg.min_inliers:
        return None
    return PlaneFit(n, d, refined)


# ---------------------------------------------------------------------------
# primitive types

@dataclass
class PlanarPrimitive:
    label: SemanticLabel
    point_ids: np.ndarray
    normal: np.ndarray
    offset: float
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    area_count: int
    kind: str = "planar"

    def plane_distance(self, points) -> np.ndarray:
        return np.abs(np.asarray(points) @ self.normal + self.offset)


@dataclass
class CylindricalPrimitive:
    label: SemanticLabel
    point_ids: np.ndarray
    axis_point: np.ndarray
    axis_dir: np.ndarray
    length: float
    kind: str = field(default="cylindrical")


def projected_area_count(points, mean=None, basis=None, grid: float = 0.10) -> int:
    """Occupied ``grid`` squares after projecting onto the two dominant PCA axes."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if P.shape[0] == 0:
        raise ValueError("empty primitive")
    if P.shape[0] < 3:
        # too few points for a covariance frame: project onto the segment direction
        d = P[-1] - P[0]
        length = float(np.linalg.norm(d))
        t = (P - P.mean(axis=0)) @ (d / length) if length > 0 else np.zeros(P.shape[0])
        return _occupied(np.column_stack([t, np.zeros_like(t)]), grid)
    if mean is None or basis is None:
        res = pca(P)
        mean, basis = res.mean, res.eigenvectors
    uv = (P - mean) @ basis[:, :2]
    return _occupied(uv, grid)


def _occupied(uv, grid):
    cells = np.floor(uv / grid).astype(np.int64)
    return int(np.unique(cells, axis=0).shape[0])


def make_planar_primitive(positions, ids, label, kind="planar", plane=None, area_grid=0.10):
    ids = np.asarray(ids, dtype=np.int64)
    P = positions[ids]
    res = pca(P)
    if plane is None:
        n, d = res.normal, float(-res.normal @ res.mean)
    else:
        n, d = plane
    return PlanarPrimitive(SemanticLabel(label), ids, np.asarray(n, dtype=np.float64), float(d),
                           res.mean, res.eigenvectors, res.eigenvalues,
                           projected_area_count(P, res.mean, res.eigenvectors, area_grid), kind)


def _line_like(points, min_width) -> bool:
    if points.shape[0] < 3:
        return True
    lam = pca(points).eigenvalues
    return math.sqrt(12.0 * lam[1]) < min_width


def extract_planar_primitives(positions, instance: Instance, cfg: PlaneFitConfig | None = None,
                              seed: int = 0) -> list[PlanarPrimitive]:
    """Peel planes off a building or fence instance.

    The instance is averaged onto a ``cfg.voxel_subsample`` grid, normals are
    estimated there, and RANSAC is repeated on the remaining voxels until no
    plane reaches ``cfg.min_inliers``. Each plane then claims the original
    points of its inlier voxels that lie within ``cfg.distance_threshold`` of
    it; everything else is left out of the map. Inlier sets too narrow to be
    a surface (``cfg.min_width``) are discarded rather than kept as planes.
    """
    cfg = cfg or PlaneFitConfig()
    ids = np.asarray(instance.point_ids, dtype=np.int64)
    P = positions[ids]
    first, inverse = voxel_keys(P, cfg.voxel_subsample)
    nvox = first.size
    if nvox < max(cfg.min_inliers, cfg.normal_k, 3):
        return []
    counts = np.bincount(inverse, minlength=nvox).astype(np.float64)
    sub = np.column_stack([np.bincount(inverse, weights=P[:, j], minlength=nvox) / counts
                           for j in range(3)])
    normals = estimate_normals(sub, cfg.normal_k)
    remaining = np.arange(nvox)
    owner = np.full(nvox, -1, dtype=np.int64)
    planes = []
    rejected = 0
    attempt = 0
    while remaining.size >= cfg.min_inliers and len(planes) < cfg.max_planes:
        fit = ransac_plane(sub[remaining], normals[remaining], cfg, substream(seed, 0x504C, attempt))
        attempt += 1
        if fit is None:
            break
        members = remaining[fit.inliers]
        if _line_like(sub[members], cfg.min_width):
            rejected += 1
            remaining = np.delete(remaining, fit.inliers)
            if rejected > cfg.max_planes:
                break
            continue
        owner[members] = len(planes)
        planes.append((fit.normal, fit.offset))
        remaining = np.delete(remaining, fit.inliers)
    out = []
    point_owner = owner[inverse]
    for j, (n, d) in enumerate(planes):
        sel = (point_owner == j) & (np.abs(P @ n + d) <= cfg.distance_threshold)
        if np.count_nonzero(sel) < 3:
            continue
        out.append(make_planar_primitive(positions, ids[sel], instance.label, "planar", (n, d)))
    return out


def footprint_area(points, grid: float = 1.0) -> int:
    """Number of occupied horizontal ``grid`` squares."""
    cells = np.floor(np.asarray(points)[:, :2] / grid).astype(np.int64)
    return int(np.unique(cells, axis=0).shape[0])


def plane_filter(points, threshold: float, refits: int = 1):
    """Least-squares plane fit, dropping points farther than ``threshold``.

    Returns the kept row indices and the final plane ``(n, d)``.
    """
    keep = np.arange(points.shape[0])
    n, d, _ = fit_plane(points)
    keep = keep[np.abs(points @ n + d) <= threshold]
    for _ in range(refits):
        if keep.size < 3:
            break
        n, d, _ = fit_plane(points[keep])
        keep = keep[np.abs(points[keep] @ n + d) <= threshold]
    return keep, (n, d)


def extract_ground_primitives(positions, instance: Instance, seed: int = 0,
                              target_area: float = 100.0, coarse_threshold: float = 0.30,
                              max_iter: int = 100, tol: float = 1e-4) -> list[PlanarPrimitive]:
    """Cut a ground instance into ~``target_area`` m² patches with K-means++,
    then drop points farther than ``coarse_threshold`` from each patch plane."""
    ids = np.asarray(instance.point_ids, dtype=np.int64)
    P = positions[ids]
    if P.shape[0] < 3:
        return []
    area = footprint_area(P)
    k = max(1, int(math.floor(area / target_area + 0.5)))
    k = min(k, P.shape[0])
    km = kmeans_pp(P, k, seed=seed, max_iter=max_iter, tol=tol)
    out = []
    for c in range(k):
        rows = np.flatnonzero(km.assignments == c)
        if rows.size < 3:
            continue
        keep, plane = plane_filter(P[rows], coarse_threshold)
        if keep.size < 3:
            continue
        out.append(make_planar_primitive(positions, ids[rows[keep]], instance.label, "ground", plane))
    return out


def make_cylindrical_primitive(positions, instance: Instance) -> CylindricalPrimitive:
    ids = np.asarray(instance.point_ids, dtype=np.int64)
    P = positions[ids]
    if P.shape[0] < 3:
        raise ValueError("a cylindrical primitive needs at least 3 points")
    res = pca(P)
    axis = res.eigenvectors[:, 0]
    proj = (P - res.mean) @ axis
    return CylindricalPrimitive(instance.label, ids, res.mean, axis, float(proj.max() - proj.min()))


def traffic_sign_primitive(positions, instance: Instance) -> PlanarPrimitive:
    ids = np.asarray(instance.point_ids, dtype=np.int64)
    if ids.size < 3:
        raise ValueError("a traffic-sign primitive needs at least 3 points")
    return make_planar_primitive(positions, ids, instance.label, "single-planar")
