"""NDT cell statistics, grid-NDT baseline, the octree-indexed map container
and its binary file format."""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from eandt import _kernels
from eandt.cloud import LabeledCloud, voxel_keys
from eandt.labels import MAP_LABELS, SemanticLabel
from eandt.octree import Octree

logger = logging.getLogger(__name__)

MIN_CELL_POINTS = 6
EIG_RATIO = 1e-3
EIG_FLOOR = 1e-9

#: on-board sizes used by the compression ratio: point = 3 x f32 + f32
#: intensity; cell = u32 count + 3 x f32 sum + 6 x f32 covariance + u8 label,
#: padded to 4-byte alignment
SIGMA_P = 16
SIGMA_C = 44

MAP_MAGIC = b"EANDT1\0\0"
MAP_VERSION = 1
METHODS = ("grid-ndt", "ea-ndt")
_HEADER = struct.Struct("<8sHBdQI")
CELL_DTYPE = np.dtype([("label", "<u1"), ("count", "<u4"), ("sum", "<f8", (3,)),
                       ("cov", "<f8", (6,))])
CELL_RECORD_SIZE = CELL_DTYPE.itemsize

_UPPER = (np.array([0, 0, 0, 1, 1, 2]), np.array([0, 1, 2, 1, 2, 2]))


class MapFormatError(ValueError):
    """Raised when map bytes cannot be decoded."""


def upper_to_matrix(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    m = np.empty(u.shape[:-1] + (3, 3))
    m[..., 0, 0], m[..., 0, 1], m[..., 0, 2] = u[..., 0], u[..., 1], u[..., 2]
    m[..., 1, 0], m[..., 1, 1], m[..., 1, 2] = u[..., 1], u[..., 3], u[..., 4]
    m[..., 2, 0], m[..., 2, 1], m[..., 2, 2] = u[..., 2], u[..., 4], u[..., 5]
    return m


def matrix_to_upper(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return m[..., _UPPER[0], _UPPER[1]]


@dataclass
class NdtCell:
    """Point counter, coordinate sum and upper-triangle covariance
    (xx, xy, xz, yy, yz, zz), normalized by 1/(N-1)."""

    count: int
    sum: np.ndarray
    cov_upper: np.ndarray
    label: SemanticLabel = SemanticLabel.OTHER

    @property
    def mean(self) -> np.ndarray:
        return self.sum / self.count

    @property
    def covariance(self) -> np.ndarray:
        return upper_to_matrix(self.cov_upper)

    def merge(self, other: "NdtCell") -> "NdtCell":
        """Statistics of the union of both point sets (pairwise update)."""
        n = self.count + other.count
        delta = other.mean - self.mean
        m2 = (self.covariance * max(self.count - 1, 0) + other.covariance * max(other.count - 1, 0)
              + np.outer(delta, delta) * (self.count * other.count / n))
        cov = m2 / (n - 1) if n > 1 else np.zeros((3, 3))
        return NdtCell(n, self.sum + other.sum, matrix_to_upper(cov), self.label)


def accumulate_cell(points, label: SemanticLabel = SemanticLabel.OTHER) -> NdtCell:
    """Two-pass mean/covariance of a point set."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = P.shape[0]
    if n == 0:
        raise ValueError("cannot accumulate an empty cell")
    s = P.sum(axis=0)
    if n == 1:
        return NdtCell(1, s, np.zeros(6), SemanticLabel(label))
    Q = P - s / n
    cov = Q.T @ Q / (n - 1)
    return NdtCell(n, s, matrix_to_upper(cov), SemanticLabel(label))


def accumulate_groups(points: np.ndarray, group: np.ndarray, ngroups: int):
    """Vectorized two-pass statistics for many cells at once.

    Returns ``(counts, sums, cov_upper)`` indexed by group number.
    """
    counts = np.bincount(group, minlength=ngroups)
    sums = np.column_stack([np.bincount(group, weights=points[:, j], minlength=ngroups)
                            for j in range(3)])
    safe = np.maximum(counts, 1)
    means = sums / safe[:, None]
    Q = points - means[group]
    denom = np.maximum(counts - 1, 1).astype(np.float64)
    cov = np.column_stack([
        np.bincount(group, weights=Q[:, a] * Q[:, b], minlength=ngroups) / denom
        for a, b in zip(*_UPPER)
    ])
    cov[counts < 2] = 0.0
    return counts, sums, cov


# ---------------------------------------------------------------------------
# Gaussians

@dataclass
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray
    precision_upper: np.ndarray
    log_norm: float


def regularize_covariance(cov: np.ndarray) -> np.ndarray:
    """Clamp eigenvalues to at least ``max(1e-3 * lambda_max, 1e-9)``.

    Matrices that need no clamping are returned unchanged.
    """
    cov = np.asarray(cov, dtype=np.float64)
    single = cov.ndim == 2
    C = cov.reshape(-1, 3, 3).copy()
    if C.shape[0] == 0:
        return cov.copy()
    vals, vecs = np.linalg.eigh(C)
    floor = np.maximum(EIG_RATIO * vals[:, -1], EIG_FLOOR)
    bad = np.any(vals < floor[:, None], axis=1)
    if np.any(bad):
        v = np.maximum(vals[bad], floor[bad, None])
        R = np.einsum("nij,nj,nkj->nik", vecs[bad], v, vecs[bad])
        C[bad] = 0.5 * (R + np.swapaxes(R, 1, 2))
    return C[0] if single else C


def gaussian_arrays(counts, sums, cov_upper):
    """Means, regularized covariances, precision upper triangles and log
    normalizers for a batch of cells."""
    counts = np.asarray(counts)
    mu = np.asarray(sums, dtype=np.float64) / counts[:, None]
    sigma = regularize_covariance(upper_to_matrix(cov_upper))
    if sigma.shape[0] == 0:
        return mu, sigma, np.zeros((0, 6)), np.zeros(0)
    prec = np.linalg.inv(sigma)
    prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
    _, logdet = np.linalg.slogdet(sigma)
    log_norm = -0.5 * (3.0 * math.log(2.0 * math.pi) + logdet)
    return mu, sigma, matrix_to_upper(prec), log_norm


def cell_gaussian(cell: NdtCell) -> GaussianParams:
    if cell.count < MIN_CELL_POINTS:
        raise ValueError(f"cell has {cell.count} points; at least {MIN_CELL_POINTS} required")
    mu, sigma, prec, lognorm = gaussian_arrays(np.array([cell.count]), cell.sum[None], cell.cov_upper[None])
    return GaussianParams(mu[0], sigma[0], prec[0], float(lognorm[0]))


# ---------------------------------------------------------------------------
# map container

@dataclass
class NdtMap:
    """Immutable collection of NDT cells with a centroid octree.

    Cells are stored column-wise: ``labels`` (M,), ``counts`` (M,), ``sums``
    (M, 3) and ``cov_upper`` (M, 6).
    """

    labels: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    cov_upper: np.ndarray
    cell_size: float
    method: str = "grid-ndt"
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        m = self.labels.size
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64).reshape(m)
        self.sums = np.ascontiguousarray(self.sums, dtype=np.float64).reshape(m, 3)
        self.cov_upper = np.ascontiguousarray(self.cov_upper, dtype=np.float64).reshape(m, 6)
        if self.method not in METHODS:
            raise ValueError(f"unknown map method {self.method!r}")

    @classmethod
    def empty(cls, cell_size: float, method: str = "grid-ndt", seed: int = 0) -> "NdtMap":
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 6)), cell_size, method, seed)

    @classmethod
    def from_cells(cls, cells, cell_size: float, method: str = "ea-ndt", seed: int = 0) -> "NdtMap":
        cells = list(cells)
        if not cells:
            return cls.empty(cell_size, method, seed)
        return cls(np.array([int(c.label) for c in cells]), np.array([c.count for c in cells]),
                   np.array([c.sum for c in cells]), np.array([c.cov_upper for c in cells]),
                   cell_size, method, seed)

    @classmethod
    def concatenate(cls, maps, cell_size: float, method: str, seed: int = 0) -> "NdtMap":
        maps = [m for m in maps if len(m)]
        if not maps:
            return cls.empty(cell_size, method, seed)
        return cls(np.concatenate([m.labels for m in maps]), np.concatenate([m.counts for m in maps]),
                   np.concatenate([m.sums for m in maps]), np.concatenate([m.cov_upper for m in maps]),
                   cell_size, method, seed)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def cells(self) -> list[NdtCell]:
        return [NdtCell(int(self.counts[i]), self.sums[i].copy(), self.cov_upper[i].copy(),
                        SemanticLabel(int(self.labels[i]))) for i in range(len(self))]

    @property
    def label_set(self) -> set[SemanticLabel]:
        return {SemanticLabel(int(v)) for v in np.unique(self.labels)}

    @property
    def means(self) -> np.ndarray:
        return self.sums / self.counts[:, None]

    def subset(self, mask) -> "NdtMap":
        mask = np.asarray(mask)
        return NdtMap(self.labels[mask], self.counts[mask], self.sums[mask], self.cov_upper[mask],
                      self.cell_size, self.method, self.seed)

    def select_label(self, label: SemanticLabel | int) -> "NdtMap":
        return self.subset(self.labels == int(label))

    def gaussians(self):
        """Cached ``(mu, sigma, precision_upper, log_norm)`` arrays."""
        if "gauss" not in self._cache:
            if np.any(self.counts < MIN_CELL_POINTS):
                raise ValueError("map holds cells below the minimum point count")
            self._cache["gauss"] = gaussian_arrays(self.counts, self.sums, self.cov_upper)
        return self._cache["gauss"]

    @property
    def index(self) -> Octree:
        """Octree over cell means with leaf size ``cell_size / 4``."""
        if "octree" not in self._cache:
            self._cache["octree"] = Octree(self.means, self.cell_size / 4.0)
        return self._cache["octree"]

    def radius_query(self, x, r: float) -> np.ndarray:
        """Indices of cells whose mean lies within ``r`` of ``x``."""
        return self.index.query_radius(x, r)

    def best_density(self, points, radius: float):
        """Best cell density per point among cells within ``radius``; see
        :func:`eandt._kernels.best_density`."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self) == 0:
            return np.zeros(pts.shape[0]), np.full(pts.shape[0], -1, dtype=np.int64)
        mu, _, prec, lognorm = self.gaussians()
        tree = self.index
        o = tree.order
        return _kernels.best_density(pts, mu[o], prec[o], lognorm[o], o, tree.codes, tree.origin,
                                     tree.leaf_size, tree.level_for_radius(radius), tree.max_coord, radius)

    def equals(self, other: "NdtMap") -> bool:
        return (self.method == other.method and self.cell_size == other.cell_size
                and self.seed == other.seed and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.counts, other.counts) and np.array_equal(self.sums, other.sums)
                and np.array_equal(self.cov_upper, other.cov_upper))


def build_grid_ndt(cloud: LabeledCloud, cell_size: float, labels=MAP_LABELS,
                   ids_per_label: dict | None = None) -> NdtMap:
    """Standard NDT: bucket each label's points by ``floor(x / cell_size)``.

    Buckets with fewer than 6 points are ignored. Cells are ordered by
    label, then bucket key.
    """
    if not cell_size > 0:
        raise ValueError(f"cell size must be positive, got {cell_size}")
    parts = []
    for label in labels:
        label = SemanticLabel.parse(label)
        ids = ids_per_label[label] if ids_per_label is not None else cloud.label_ids(label)
        if len(ids) == 0:
            continue
        P = cloud.positions[ids]
        _, inverse = voxel_keys(P, cell_size)
        ngroups = int(inverse.max()) + 1
        counts, sums, cov = accumulate_groups(P, inverse, ngroups)
        keep = counts >= MIN_CELL_POINTS
        parts.append(NdtMap(np.full(int(keep.sum()), int(label)), counts[keep], sums[keep], cov[keep],
                            cell_size, "grid-ndt"))
    return NdtMap.concatenate(parts, cell_size, "grid-ndt")


def grid_cell_count(positions: np.ndarray, cell_size: float) -> int:
    """Number of admitted grid cells for one label's points."""
    if len(positions) == 0:
        return 0
    _, inverse = voxel_keys(positions, cell_size)
    return int(np.count_nonzero(np.bincount(inverse) >= MIN_CELL_POINTS))


# ---------------------------------------------------------------------------
# serialization

def serialize_map(ndt_map: NdtMap) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAP_MAGIC, MAP_VERSION, METHODS.index(ndt_map.method), float(ndt_map.cell_size),
                           int(ndt_map.seed) & 0xFFFFFFFFFFFFFFFF, len(ndt_map)))
    rec = np.empty(len(ndt_map), dtype=CELL_DTYPE)
    rec["label"] = ndt_map.labels
    rec["count"] = ndt_map.counts
    rec["sum"] = ndt_map.sums
    rec["cov"] = ndt_map.cov_upper
    buf.write(rec.tobytes())
    return buf.getvalue()


def deserialize_map(data: bytes) -> NdtMap:
    if len(data) < _HEADER.size:
        if data[:len(MAP_MAGIC)] != MAP_MAGIC[:len(data)]:
            raise MapFormatError("bad magic: not an EANDT1 map")
        raise MapFormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes")
    magic, version, method, cell_size, seed, ncell = _HEADER.unpack_from(data, 0)
    if magic != MAP_MAGIC:
        raise MapFormatError("bad magic: not an EANDT1 map")
    if version != MAP_VERSION:
        raise MapFormatError(f"unsupported map version {version}")
    if method >= len(METHODS):
        raise MapFormatError(f"unknown method code {method}")
    body = len(data) - _HEADER.size
    need = ncell * CELL_RECORD_SIZE
    if body < need:
        raise MapFormatError(f"truncated cell table: {body // CELL_RECORD_SIZE} of {ncell} cells present")
    if body > need:
        raise MapFormatError("trailing bytes after cell table")
    rec = np.frombuffer(data, dtype=CELL_DTYPE, count=ncell, offset=_HEADER.size)
    return NdtMap(rec["label"].copy(), rec["count"].astype(np.int64), rec["sum"].copy(), rec["cov"].copy(),
                  cell_size, METHODS[method], seed)


def save_map(ndt_map: NdtMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_map(ndt_map))


def load_map(path) -> NdtMap:
    with open(path, "rb") as fh:
        return deserialize_map(fh.read())


def sweep_sizes(lo: float = 0.2, hi: float = 10.0, count: int = 30, log: bool = True) -> np.ndarray:
    """Cell sizes for a sweep; endpoints are exact."""
    if count < 1 or not 0 < lo <= hi:
        raise ValueError("invalid sweep range")
    if count == 1:
        return np.array([lo])
    sizes = np.geomspace(lo, hi, count) if log else np.linspace(lo, hi, count)
    sizes[0], sizes[-1] = lo, hi
    return sizes
