"""Labeled point clouds: data model, file IO, preprocessing filters and
exact neighbor queries."""

from __future__ import annotations

import io
import logging
import os
import struct
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree

from eandt.labels import DEFAULT_MERGE_MAP, SemanticLabel

logger = logging.getLogger(__name__)

CLOUD_MAGIC = b"EACLOUD1"
UNLABELED = -1


class CloudFormatError(ValueError):
    """Raised when a cloud file cannot be parsed."""


class ConfigurationError(ValueError):
    """Raised on inconsistent label / pipeline configuration."""


class LabeledPoint(NamedTuple):
    position: np.ndarray
    intensity: float
    label_probs: np.ndarray
    label: int


@dataclass
class LabeledCloud:
    """Column-oriented labeled point cloud.

    Attributes:
        positions: (N, 3) float64 coordinates in meters.
        intensity: (N,) float32.
        probs: (N, C) float32 label probabilities, one column per class name.
        class_names: source class names, in column order.
        labels: (N,) int8 hard ``SemanticLabel`` codes, ``UNLABELED`` (-1)
            before :func:`assign_hard_labels`.
        frame_id: name of the coordinate frame.
    """

    positions: np.ndarray
    intensity: np.ndarray
    probs: np.ndarray
    class_names: list[str]
    labels: np.ndarray | None = None
    frame_id: str = "map"

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float32).reshape(n)
        self.class_names = list(self.class_names)
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float32).reshape(n, len(self.class_names))
        if self.labels is None:
            self.labels = np.full(n, UNLABELED, dtype=np.int8)
        else:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int8).reshape(n)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> LabeledPoint:
        return LabeledPoint(self.positions[i], float(self.intensity[i]), self.probs[i], int(self.labels[i]))

    @classmethod
    def empty(cls, class_names: Sequence[str], frame_id: str = "map") -> "LabeledCloud":
        c = len(class_names)
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, c)), list(class_names), frame_id=frame_id)

    def subset(self, ids) -> "LabeledCloud":
        ids = np.asarray(ids)
        return LabeledCloud(self.positions[ids], self.intensity[ids], self.probs[ids],
                            self.class_names, self.labels[ids], self.frame_id)

    def label_ids(self, label: SemanticLabel | int) -> np.ndarray:
        return np.flatnonzero(self.labels == int(label))

    def validate(self, atol: float = 1e-4) -> None:
        """Check the probability simplex invariant."""
        if len(self) == 0:
            return
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("label probabilities outside [0, 1]")
        sums = self.probs.astype(np.float64).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > atol):
            raise ValueError("label probabilities do not sum to one")


# ---------------------------------------------------------------------------
# IO

def _read_text(path) -> LabeledCloud:
    class_names: list[str] | None = None
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("classes:"):
                if class_names is not None:
                    raise CloudFormatError(f"line {lineno}: duplicate classes header")
                class_names = line[len("classes:"):].split()
                if not class_names:
                    raise CloudFormatError(f"line {lineno}: empty classes header")
                continue
            if class_names is None:
                raise CloudFormatError(f"line {lineno}: data row before 'classes:' header")
            parts = line.split()
            expected = 4 + len(class_names)
            if len(parts) < 4:
                raise CloudFormatError(f"line {lineno}: expected x y z intensity and "
                                       f"{len(class_names)} probabilities, got {len(parts)} fields")
            if len(parts) != expected:
                raise CloudFormatError(f"line {lineno}: probability row has {len(parts) - 4} "
                                       f"entries, expected {len(class_names)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise CloudFormatError(f"line {lineno}: {exc}") from None
    if class_names is None:
        # an empty file carries no header; nothing to parse
        return LabeledCloud.empty([])
    c = len(class_names)
    if not rows:
        return LabeledCloud.empty(class_names)
    arr = np.asarray(rows, dtype=np.float64)
    return LabeledCloud(arr[:, :3], arr[:, 3], arr[:, 4:4 + c], class_names)


def _write_text(cloud: LabeledCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("classes: " + " ".join(cloud.class_names) + "\n")
        for i in range(len(cloud)):
            vals = [repr(float(v)) for v in cloud.positions[i]]
            vals.append(repr(float(cloud.intensity[i])))
            vals.extend(repr(float(v)) for v in cloud.probs[i])
            fh.write(" ".join(vals) + "\n")


def _point_dtype(c: int) -> np.dtype:
    return np.dtype([("pos", "<f8", (3,)), ("intensity", "<f4"), ("probs", "<f4", (c,))])


def encode_cloud(cloud: LabeledCloud) -> bytes:
    """Serialize to the little-endian ``EACLOUD1`` binary layout."""
    buf = io.BytesIO()
    buf.write(CLOUD_MAGIC)
    buf.write(struct.pack("<I", len(cloud.class_names)))
    for name in cloud.class_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<Q", len(cloud)))
    rec = np.empty(len(cloud), dtype=_point_dtype(len(cloud.class_names)))
    rec["pos"] = cloud.positions
    rec["intensity"] = cloud.intensity
    rec["probs"] = cloud.probs
    buf.write(rec.tobytes())
    return buf.getvalue()


def decode_cloud(data: bytes) -> LabeledCloud:
    view = memoryview(data)
    if len(data) < 12 or bytes(view[:8]) != CLOUD_MAGIC:
        raise CloudFormatError("bad magic: not an EACLOUD1 file")
    pos = 8
    (c,) = struct.unpack_from("<I", data, pos)
    pos += 4
    names = []
    for k in range(c):
        if pos + 4 > len(data):
            raise CloudFormatError(f"truncated class name table at entry {k}")
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + ln > len(data):
            raise CloudFormatError(f"truncated class name table at entry {k}")
        names.append(bytes(view[pos:pos + ln]).decode("utf-8"))
        pos += ln
    if pos + 8 > len(data):
        raise CloudFormatError("truncated header: missing point count")
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    dt = _point_dtype(c)
    need = n * dt.itemsize
    if len(data) - pos < need:
        got = (len(data) - pos) // dt.itemsize
        raise CloudFormatError(f"truncated point table: record {got} of {n} incomplete")
    if len(data) - pos > need:
        raise CloudFormatError("trailing bytes after point table")
    rec = np.frombuffer(data, dtype=dt, count=n, offset=pos)
    return LabeledCloud(rec["pos"].copy(), rec["intensity"].copy(), rec["probs"].copy(), names)


def load_cloud(path, format: str | None = None) -> LabeledCloud:
    """Read a cloud in ``text-xyzilp`` or ``binary-native`` format.

    The format is guessed from the file's magic bytes when not given.
    Point order is preserved.
    """
    path = os.fspath(path)
    if format is None:
        with open(path, "rb") as fh:
            head = fh.read(8)
        format = "binary-native" if head == CLOUD_MAGIC else "text-xyzilp"
    if format == "text-xyzilp":
        return _read_text(path)
    if format == "binary-native":
        with open(path, "rb") as fh:
            return decode_cloud(fh.read())
    raise ValueError(f"unknown cloud format {format!r}")


def save_cloud(cloud: LabeledCloud, path, format: str = "binary-native") -> None:
    path = os.fspath(path)
    if format == "text-xyzilp":
        _write_text(cloud, path)
    elif format == "binary-native":
        with open(path, "wb") as fh:
            fh.write(encode_cloud(cloud))
    else:
        raise ValueError(f"unknown cloud format {format!r}")


# ---------------------------------------------------------------------------
# filters

def voxel_keys(positions: np.ndarray, size: float) -> tuple[np.ndarray, np.ndarray]:
    """Group points by ``floor(p / size)``.

    Returns:
        (first, inverse): index of one member per occupied voxel (voxels in
        ascending key order) and the voxel number of every point.
    """
    ijk = np.floor(positions / size).astype(np.int64)
    if len(ijk) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    lo = ijk.min(axis=0)
    rel = ijk - lo
    dims = rel.max(axis=0) + 1
    if float(np.prod(dims.astype(np.float64))) < 2.0 ** 62:
        key = (rel[:, 0] * dims[1] + rel[:, 1]) * dims[2] + rel[:, 2]
        _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    else:
        _, first, inverse = np.unique(rel, axis=0, return_index=True, return_inverse=True)
    return first, inverse.ravel()


def _group_mean(values: np.ndarray, inverse: np.ndarray, counts: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return np.bincount(inverse, weights=values, minlength=counts.size) / counts
    out = np.empty((counts.size, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(inverse, weights=values[:, j], minlength=counts.size) / counts
    return out


def _renormalize(probs: np.ndarray) -> np.ndarray:
    s = probs.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return probs / s


def voxel_average_filter(cloud: LabeledCloud, voxel_size: float) -> LabeledCloud:
    """Replace the points of every occupied voxel by their average.

    Position, intensity and label probabilities are averaged; probabilities
    are renormalized. Output voxels come in ascending voxel-key order.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return cloud.subset(np.empty(0, dtype=np.int64))
    first, inverse = voxel_keys(cloud.positions, voxel_size)
    counts = np.bincount(inverse).astype(np.float64)
    pos = _group_mean(cloud.positions, inverse, counts)
    inten = _group_mean(cloud.intensity, inverse, counts)
    probs = _renormalize(_group_mean(cloud.probs, inverse, counts))
    return LabeledCloud(pos, inten, probs, cloud.class_names, frame_id=cloud.frame_id)


def smooth_label_probs(cloud: LabeledCloud, radius: float) -> LabeledCloud:
    """Average label probabilities over each point's ``radius`` neighborhood.

    Uses the original probabilities for every point (no sequential update);
    positions and intensity are untouched.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    n = len(cloud)
    if n == 0:
        return cloud.subset(np.empty(0, dtype=np.int64))
    index = NeighborIndex(cloud.positions)
    pairs = index.pairs_within(radius)
    rows = np.concatenate([np.arange(n), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(n), pairs[:, 1], pairs[:, 0]])
    adj = csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    counts = np.asarray(adj.sum(axis=1)).ravel()
    probs = (adj @ cloud.probs.astype(np.float64)) / counts[:, None]
    probs = _renormalize(probs)
    return LabeledCloud(cloud.positions, cloud.intensity, probs, cloud.class_names,
                        cloud.labels, cloud.frame_id)


def assign_hard_labels(cloud: LabeledCloud,
                       merge_map: Mapping[str, SemanticLabel | str] | None = None) -> LabeledCloud:
    """Set each point's label to the merged label of its most probable class.

    Ties go to the lowest class index. Classes merged to ``OTHER`` stay in
    the cloud but are ignored by the map builders.

    Raises:
        ConfigurationError: a class of the cloud is missing from ``merge_map``.
    """
    merge_map = DEFAULT_MERGE_MAP if merge_map is None else merge_map
    missing = [name for name in cloud.class_names if name not in merge_map]
    if missing:
        raise ConfigurationError(f"classes missing from merge map: {', '.join(missing)}")
    table = np.array([int(SemanticLabel.parse(merge_map[name])) for name in cloud.class_names],
                     dtype=np.int8)
    if len(cloud) == 0 or not cloud.class_names:
        labels = np.full(len(cloud), UNLABELED, dtype=np.int8)
    else:
        labels = table[np.argmax(cloud.probs, axis=1)]
    return LabeledCloud(cloud.positions, cloud.intensity, cloud.probs, cloud.class_names,
                        labels, cloud.frame_id)


def preprocess(cloud: LabeledCloud, voxel_size: float = 0.01, smooth_radius: float = 0.05,
               merge_map: Mapping[str, SemanticLabel | str] | None = None) -> LabeledCloud:
    """Voxel averaging, neighborhood label smoothing, then hard labels."""
    out = voxel_average_filter(cloud, voxel_size)
    if smooth_radius > 0:
        out = smooth_label_probs(out, smooth_radius)
    return assign_hard_labels(out, merge_map)


# ---------------------------------------------------------------------------
# neighbor queries

def _sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


class NeighborIndex:
    """Exact radius and k-nearest queries over a fixed point set.

    Backed by a k-d tree; candidate sets are re-checked with the same
    squared-distance expression a brute-force scan would use, so results are
    identical to one.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return self.points.shape[0]

    @staticmethod
    def _slack(r: float) -> float:
        return r * (1.0 + 1e-9) + 1e-12

    def radius_neighbors(self, query, r: float) -> np.ndarray:
        """Sorted ids of points with ``|p - query| <= r``."""
        if self._tree is None:
            raise ValueError("neighbor index is empty")
        if r < 0:
            raise ValueError("radius must be non-negative")
        q = np.asarray(query, dtype=np.float64)
        cand = np.asarray(self._tree.query_ball_point(q, self._slack(r)), dtype=np.int64)
        if cand.size == 0:
            return cand
        keep = _sqdist(self.points[cand], q) <= r * r
        return np.sort(cand[keep])

    def k_nearest(self, query, k: int) -> np.ndarray:
        """Ids of the ``k`` nearest points, by distance then id."""
        n = len(self)
        if self._tree is None:
            raise ValueError("neighbor index is empty")
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        q = np.asarray(query, dtype=np.float64)
        dist, _ = self._tree.query(q, k=k)
        far = float(np.atleast_1d(dist)[-1])
        cand = np.asarray(self._tree.query_ball_point(q, self._slack(far)), dtype=np.int64)
        d2 = _sqdist(self.points[cand], q)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    def k_nearest_all(self, k: int) -> np.ndarray:
        """k-nearest ids (including the point itself) for every indexed point."""
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        # one spare neighbor so ties at the k-th distance can be broken by id
        kk = min(n, k + 1)
        _, idx = self._tree.query(self.points, k=kk)
        idx = idx.reshape(n, kk)
        d2 = _sqdist(self.points[idx], self.points[:, None, :])
        order = np.lexsort((idx, d2), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        out = np.ascontiguousarray(idx[:, :k])
        if kk > k:
            for i in np.flatnonzero(d2[:, k] <= d2[:, k - 1] * (1.0 + 1e-9)):
                out[i] = self.k_nearest(self.points[i], k)
        return out

    def pairs_within(self, r: float) -> np.ndarray:
        """All unordered pairs ``(i, j), i < j`` with distance <= r."""
        if self._tree is None:
            return np.empty((0, 2), dtype=np.int64)
        pairs = self._tree.query_pairs(self._slack(r), output_type="ndarray").astype(np.int64)
        if pairs.size == 0:
            return pairs.reshape(0, 2)
        d = self.points[pairs[:, 0]] - self.points[pairs[:, 1]]
        keep = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2] <= r * r
        return pairs[keep]


def radius_neighbors(index: NeighborIndex, query, r: float) -> np.ndarray:
    return index.radius_neighbors(query, r)


def k_nearest(index: NeighborIndex, query, k: int) -> np.ndarray:
    return index.k_nearest(query, k)
