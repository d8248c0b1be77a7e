"""EA-NDT map construction: instances, primitives, per-primitive cell counts,
K-means cells, plus fitting of the per-label scaling parameters."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from scipy.optimize import minimize

from eandt.cloud import UNLABELED, ConfigurationError, LabeledCloud
from eandt.clustering import Instance, derive_seed, kmeans_pp, region_grow
from eandt.labels import MAP_LABELS, SemanticLabel
from eandt.ndt import MIN_CELL_POINTS, NdtCell, NdtMap, accumulate_cell, grid_cell_count
from eandt.primitives import (
    CylindricalPrimitive,
    PlanarPrimitive,
    PlaneFitConfig,
    extract_ground_primitives,
    extract_planar_primitives,
    make_cylindrical_primitive,
    plane_filter,
    traffic_sign_primitive,
)

logger = logging.getLogger(__name__)

KINDS = ("planar", "cylindrical", "ground-planar", "single-planar")
AREA_GRID = 0.10

# task-key tags for derived seeds
_TAG_PRIMITIVES = 0x5052
_TAG_CELLS = 0x434C


@dataclass
class LabelConfig:
    label: SemanticLabel
    f: float
    g: float
    kind: str
    grow_threshold: float = 0.30
    grow_min_points: int = 10

    def __post_init__(self):
        self.label = SemanticLabel.parse(self.label)
        self.f = float(self.f)
        self.g = float(self.g)
        if not (self.f > 0 and math.isfinite(self.f)):
            raise ConfigurationError(f"{self.label.key}: f must be positive, got {self.f}")
        if not math.isfinite(self.g):
            raise ConfigurationError(f"{self.label.key}: g must be finite")
        if self.kind not in KINDS:
            raise ConfigurationError(f"{self.label.key}: unknown primitive kind {self.kind!r}")
        if not self.grow_threshold > 0 or int(self.grow_min_points) < 1:
            raise ConfigurationError(f"{self.label.key}: invalid region-grow settings")
        self.grow_min_points = int(self.grow_min_points)


DEFAULT_LABEL_CONFIGS = (
    LabelConfig(SemanticLabel.GROUND, 1.6803924146591254, 0.08305231866698243, "ground-planar", 0.50, 3000),
    LabelConfig(SemanticLabel.BUILDING, 2.7078758377808536, 0.13722034139500836, "planar"),
    LabelConfig(SemanticLabel.FENCE, 2.2479127883095584, -0.7883008443523578, "planar"),
    LabelConfig(SemanticLabel.POLE, 1.6874096382321715, -0.31506643695059683, "cylindrical"),
    LabelConfig(SemanticLabel.TRAFFIC_SIGN, 3.9231919696267386, 0.3165458127096211, "single-planar"),
    LabelConfig(SemanticLabel.TREE_TRUNK, 4.17948650640806, 0.31843996435228533, "cylindrical"),
)


@dataclass
class PipelineConfig:
    """Everything that determines an EA-NDT build.

    ``labels`` maps each processed label to its settings; a cloud point
    carrying any other map label is a configuration error.
    """

    labels: dict = field(default_factory=lambda: {c.label: replace(c) for c in DEFAULT_LABEL_CONFIGS})
    cell_size: float = 1.0
    seed: int = 0
    min_cell_points: int = MIN_CELL_POINTS
    threads: int = 1
    plane_fit: PlaneFitConfig = field(default_factory=PlaneFitConfig)
    ground_patch_area: float = 100.0
    ground_coarse_threshold: float = 0.30
    ground_cell_threshold: float = 0.15
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-4
    kmeans_restarts: int = 1

    def __post_init__(self):
        if isinstance(self.labels, (list, tuple)):
            self.labels = {c.label: c for c in self.labels}
        self.labels = {SemanticLabel.parse(k): v for k, v in self.labels.items()}
        for key, cfg in self.labels.items():
            if cfg.label != key:
                raise ConfigurationError(f"label entry {key.key} holds settings for {cfg.label.key}")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ConfigurationError(f"cell_size must be positive, got {self.cell_size}")
        if self.min_cell_points < 1:
            raise ConfigurationError("min_cell_points must be >= 1")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)

    def restrict(self, labels) -> "PipelineConfig":
        wanted = [SemanticLabel.parse(v) for v in labels]
        missing = [v.key for v in wanted if v not in self.labels]
        if missing:
            raise ConfigurationError(f"labels not configured: {', '.join(missing)}")
        return replace(self, labels={v: self.labels[v] for v in wanted})

    def to_dict(self) -> dict:
        return {
            "cell_size": float(self.cell_size),
            "seed": int(self.seed),
            "min_cell_points": int(self.min_cell_points),
            "threads": int(self.threads),
            "ground_patch_area": float(self.ground_patch_area),
            "ground_coarse_threshold": float(self.ground_coarse_threshold),
            "ground_cell_threshold": float(self.ground_cell_threshold),
            "kmeans": {"max_iter": int(self.kmeans_max_iter), "tol": float(self.kmeans_tol),
                       "restarts": int(self.kmeans_restarts)},
            "plane_fit": {k: (float(v) if isinstance(v, float) else int(v))
                          for k, v in asdict(self.plane_fit).items()},
            "labels": {
                label.key: {"f": c.f, "g": c.g, "kind": c.kind,
                            "region_grow": {"threshold": c.grow_threshold, "min_points": c.grow_min_points}}
                for label, c in sorted(self.labels.items())
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc or {})
        known = {"cell_size", "seed", "min_cell_points", "threads", "ground_patch_area",
                 "ground_coarse_threshold", "ground_cell_threshold", "kmeans", "plane_fit", "labels"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = {k: doc[k] for k in ("cell_size", "seed", "min_cell_points", "threads", "ground_patch_area",
                                  "ground_coarse_threshold", "ground_cell_threshold") if k in doc}
        km = doc.get("kmeans") or {}
        for src, dst in (("max_iter", "kmeans_max_iter"), ("tol", "kmeans_tol"), ("restarts", "kmeans_restarts")):
            if src in km:
                kw[dst] = km[src]
        if "plane_fit" in doc:
            try:
                kw["plane_fit"] = PlaneFitConfig(**doc["plane_fit"])
            except TypeError as exc:
                raise ConfigurationError(f"plane_fit: {exc}") from None
        if "labels" in doc:
            labels = {}
            for name, entry in doc["labels"].items():
                try:
                    label = SemanticLabel.parse(name)
                except ValueError as exc:
                    raise ConfigurationError(str(exc)) from None
                entry = dict(entry)
                grow = entry.pop("region_grow", {}) or {}
                missing = {"f", "g", "kind"} - set(entry)
                if missing:
                    raise ConfigurationError(f"{name}: missing {', '.join(sorted(missing))}")
                labels[label] = LabelConfig(label, entry["f"], entry["g"], entry["kind"],
                                            grow.get("threshold", 0.30), grow.get("min_points", 10))
            kw["labels"] = labels
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(str(exc)) from None


def load_config(path) -> PipelineConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    return PipelineConfig.from_dict(doc or {})


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


# ---------------------------------------------------------------------------
# cell counts

def primitive_measure(primitive, cell_size: float) -> float:
    """Scale of a primitive in cells: axial length over ``cell_size`` for
    cylinders, occupied area over ``cell_size**2`` for planes."""
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    if isinstance(primitive, CylindricalPrimitive):
        return primitive.length / cell_size
    if isinstance(primitive, PlanarPrimitive):
        return primitive.area_count * AREA_GRID * AREA_GRID / (cell_size * cell_size)
    raise TypeError(f"not a primitive: {type(primitive).__name__}")


def cell_count(n: float, cfg: LabelConfig) -> int:
    """``ceil(f * n**g)``, never less than one."""
    if not n > 0:
        raise ValueError(f"primitive measure must be positive, got {n}")
    return max(1, math.ceil(cfg.f * n ** cfg.g))


# ---------------------------------------------------------------------------
# primitives and cells

@dataclass
class PrimitiveRecord:
    """A primitive together with its place in the canonical build order."""

    label: SemanticLabel
    instance_index: int
    primitive_index: int
    primitive: PlanarPrimitive | CylindricalPrimitive

    @property
    def point_ids(self) -> np.ndarray:
        return self.primitive.point_ids


@dataclass
class CellCluster:
    primitive: PrimitiveRecord
    cluster_index: int
    point_ids: np.ndarray
    cell: NdtCell


def _map(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def label_instances(cloud: LabeledCloud, lcfg: LabelConfig) -> list[Instance]:
    ids = cloud.label_ids(lcfg.label)
    if ids.size == 0:
        return []
    return region_grow(cloud.positions, ids, lcfg.grow_threshold, lcfg.grow_min_points, lcfg.label)


def instance_primitives(cloud: LabeledCloud, instance: Instance, lcfg: LabelConfig,
                        cfg: PipelineConfig, seed: int) -> list:
    pos = cloud.positions
    if lcfg.kind == "ground-planar":
        return extract_ground_primitives(pos, instance, seed=seed, target_area=cfg.ground_patch_area,
                                         coarse_threshold=cfg.ground_coarse_threshold,
                                         max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol)
    if lcfg.kind == "planar":
        return extract_planar_primitives(pos, instance, cfg.plane_fit, seed=seed)
    if len(instance) < 3:
        return []
    if lcfg.kind == "single-planar":
        return [traffic_sign_primitive(pos, instance)]
    return [make_cylindrical_primitive(pos, instance)]


def extract_label_primitives(cloud: LabeledCloud, label, cfg: PipelineConfig) -> list[PrimitiveRecord]:
    """Instances and primitives of one label, in canonical order.

    Nothing here depends on the cell size, so the result can be reused for
    every size of a sweep.
    """
    label = SemanticLabel.parse(label)
    if label not in cfg.labels:
        raise ConfigurationError(f"label {label.key} is not configured")
    lcfg = cfg.labels[label]
    instances = label_instances(cloud, lcfg)

    def work(item):
        i, inst = item
        return instance_primitives(cloud, inst, lcfg, cfg, derive_seed(cfg.seed, int(label), i, _TAG_PRIMITIVES))

    per_instance = _map(work, enumerate(instances), cfg.threads)
    out = []
    for i, prims in enumerate(per_instance):
        out.extend(PrimitiveRecord(label, i, j, p) for j, p in enumerate(prims))
    logger.debug("%s: %d instances, %d primitives", label.key, len(instances), len(out))
    return out


def extract_primitives(cloud: LabeledCloud, cfg: PipelineConfig) -> dict:
    """Primitives for every configured label present in the cloud."""
    check_labels(cloud, cfg)
    return {label: extract_label_primitives(cloud, label, cfg) for label in sorted(cfg.labels)}


def check_labels(cloud: LabeledCloud, cfg: PipelineConfig) -> None:
    if len(cloud) == 0:
        return
    present = np.unique(cloud.labels)
    if UNLABELED in present:
        raise ConfigurationError("cloud has points without hard labels; run preprocessing first")
    for v in present:
        label = SemanticLabel(int(v))
        if label in MAP_LABELS and label not in cfg.labels:
            raise ConfigurationError(f"cloud contains label {label.key}, which is not configured")


def cluster_primitive(positions: np.ndarray, record: PrimitiveRecord, n_cells: int, seed: int,
                      cfg: PipelineConfig | None = None) -> list[CellCluster]:
    """Split a primitive into ``min(n_cells, |points|)`` K-means clusters.

    Ground clusters additionally lose points farther than the cell plane
    threshold from their own least-squares plane. Clusters left with fewer
    than ``cfg.min_cell_points`` points are discarded.
    """
    cfg = cfg or PipelineConfig()
    if n_cells < 1:
        raise ValueError("n_cells must be >= 1")
    ids = record.point_ids
    P = positions[ids]
    k = min(int(n_cells), P.shape[0])
    if k == 1:
        assign = np.zeros(P.shape[0], dtype=np.int64)
    else:
        assign = kmeans_pp(P, k, seed=seed, max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol,
                           n_init=cfg.kmeans_restarts).assignments
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(k + 1))
    ground = record.primitive.kind == "ground"
    out = []
    for c in range(k):
        rows = order[bounds[c]:bounds[c + 1]]
        if ground and rows.size >= 3:
            keep, _ = plane_filter(P[rows], cfg.ground_cell_threshold)
            rows = rows[np.sort(keep)]
        if rows.size < cfg.min_cell_points:
            continue
        out.append(CellCluster(record, c, ids[rows], accumulate_cell(P[rows], record.label)))
    return out


def primitive_cells(positions, record: PrimitiveRecord, cfg: PipelineConfig, cell_size: float):
    lcfg = cfg.labels[record.label]
    n_cells = cell_count(primitive_measure(record.primitive, cell_size), lcfg)
    seed = derive_seed(cfg.seed, int(record.label), record.instance_index, record.primitive_index, _TAG_CELLS)
    return cluster_primitive(positions, record, n_cells, seed, cfg)


def cells_from_primitives(cloud: LabeledCloud, primitives: dict, cfg: PipelineConfig,
                          cell_size: float | None = None) -> NdtMap:
    """Cluster already-extracted primitives into an EA-NDT map."""
    cell_size = cfg.cell_size if cell_size is None else float(cell_size)
    if not cell_size > 0:
        raise ConfigurationError(f"cell_size must be positive, got {cell_size}")
    records = [r for label in sorted(primitives) for r in primitives[label]]
    clusters = _map(lambda r: primitive_cells(cloud.positions, r, cfg, cell_size), records, cfg.threads)
    cells = [c.cell for group in clusters for c in group]
    return NdtMap.from_cells(cells, cell_size, "ea-ndt", cfg.seed)


def build_ea_ndt(cloud: LabeledCloud, cfg: PipelineConfig) -> NdtMap:
    """Full EA-NDT build; the output is a pure function of cloud and config
    (including the seed), independent of ``cfg.threads``."""
    primitives = extract_primitives(cloud, cfg)
    ndt_map = cells_from_primitives(cloud, primitives, cfg)
    logger.info("ea-ndt s_c=%.3g: %d cells from %d primitives", cfg.cell_size, len(ndt_map),
                sum(len(v) for v in primitives.values()))
    return ndt_map


# ---------------------------------------------------------------------------
# scaling parameters

def fit_power_law(n, target) -> tuple[float, float]:
    """Least-squares line ``log target = log f + g log n``."""
    x = np.log(np.asarray(n, dtype=np.float64))
    y = np.log(np.asarray(target, dtype=np.float64))
    if x.size < 2 or x.size != y.size:
        raise ValueError("need at least two matching samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be positive and finite")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-24 * max(1.0, float(x @ x)):
        raise ValueError("degenerate fit: the primitive measure does not vary")
    g = float(xc @ (y - y.mean())) / sxx
    f = math.exp(float(y.mean() - g * x.mean()))
    return f, g


def predicted_cells(measures: np.ndarray, caps: np.ndarray, f: float, g: float) -> np.ndarray:
    """Cells per size for per-primitive ``measures`` of shape (sizes, primitives)."""
    n = np.maximum(1.0, np.ceil(f * measures ** g))
    return np.minimum(n, caps).sum(axis=1)


def fit_scaling_params(cloud: LabeledCloud, label, sizes, cfg: PipelineConfig | None = None,
                       primitives: list[PrimitiveRecord] | None = None) -> tuple[float, float]:
    """Fit ``(f, g)`` so EA-NDT cell counts track grid-NDT counts for ``label``.

    Only sizes below 1 m are used. A log-log least-squares fit of the target
    count per primitive against the mean primitive measure gives the start;
    Nelder-Mead on the exact (ceiling, capped) count model then refines it.
    """
    cfg = cfg or PipelineConfig()
    label = SemanticLabel.parse(label)
    sizes = np.asarray([s for s in np.asarray(sizes, dtype=np.float64).ravel() if s < 1.0])
    if sizes.size < 2:
        raise ValueError("need at least two sweep sizes below 1 m")
    if primitives is None:
        primitives = extract_label_primitives(cloud, label, cfg)
    if not primitives:
        raise ValueError(f"no {label.key} primitives to fit")
    label_pos = cloud.positions[cloud.label_ids(label)]
    target = np.array([grid_cell_count(label_pos, s) for s in sizes], dtype=np.float64)
    ok = target > 0
    sizes, target = sizes[ok], target[ok]
    if sizes.size < 2:
        raise ValueError(f"{label.key}: fewer than two sizes produce grid cells")
    measures = np.array([[primitive_measure(r.primitive, s) for r in primitives] for s in sizes])
    caps = np.array([max(1, len(r.point_ids) // cfg.min_cell_points) for r in primitives], dtype=np.float64)
    f0, g0 = fit_power_law(measures.mean(axis=1), target / len(primitives))

    logt = np.log(target)

    def loss(theta):
        pred = predicted_cells(measures, caps, math.exp(theta[0]), theta[1])
        r = np.log(pred) - logt
        return float(r @ r)

    start = np.array([math.log(f0), g0])
    res = minimize(loss, start, method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 2000})
    theta = res.x if res.fun <= loss(start) else start
    f, g = math.exp(float(theta[0])), float(theta[1])
    if not (math.isfinite(f) and math.isfinite(g) and f > 0):
        raise ValueError("fit did not converge to finite parameters")
    logger.info("%s: fitted f=%.4g g=%.4g (start %.4g, %.4g)", label.key, f, g, f0, g0)
    return f, g
