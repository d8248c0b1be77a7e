"""Deterministic synthetic street scenes with per-object ground truth.

Surfaces are sampled uniformly at a fixed areal density and perturbed with
Gaussian noise along their normal. Every object draws from its own random
substream, so adding or editing one object leaves the others unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from eandt.cloud import ConfigurationError, LabeledCloud, assign_hard_labels
from eandt.clustering import substream
from eandt.labels import SEMANTIC_KITTI_CLASSES, SemanticLabel

SOURCE_CLASS = {
    SemanticLabel.GROUND: "road",
    SemanticLabel.BUILDING: "building",
    SemanticLabel.FENCE: "fence",
    SemanticLabel.POLE: "pole",
    SemanticLabel.TRAFFIC_SIGN: "traffic-sign",
    SemanticLabel.TREE_TRUNK: "trunk",
}

# substream tags per object family
_GROUND, _BUILDING, _FENCE, _POLE, _TRUNK, _SIGN, _OUTLIER, _NOISE = range(1, 9)


@dataclass
class GroundSpec:
    extent: tuple = (100.0, 20.0)
    density: float = 500.0
    roughness: float = 0.01
    slope: tuple = (0.01, -0.005)
    undulation: float = 0.10
    wavelength: float = 30.0

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        k = 2.0 * math.pi / self.wavelength
        return (self.slope[0] * x + self.slope[1] * y
                + self.undulation * np.sin(k * x) * np.cos(0.7 * k * y))


@dataclass
class BuildingSpec:
    center: tuple
    size: tuple
    height: float
    yaw: float = 0.0
    density: float = 400.0

    def corners(self) -> np.ndarray:
        w, d = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[-w, -d], [w, -d], [w, d], [-w, d]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return local @ np.array([[c, s], [-s, c]]) + np.asarray(self.center, dtype=np.float64)


@dataclass
class FenceSpec:
    polyline: list
    height: float = 1.5
    density: float = 300.0


@dataclass
class CylinderSpec:
    position: tuple
    height: float = 3.0
    radius: float = 0.08
    density: float = 600.0


@dataclass
class SignSpec:
    center: tuple
    size: tuple = (0.6, 0.6)
    yaw: float = 0.0
    density: float = 1000.0


@dataclass
class SceneSpec:
    ground: GroundSpec | None = field(default_factory=GroundSpec)
    buildings: list = field(default_factory=list)
    fences: list = field(default_factory=list)
    poles: list = field(default_factory=list)
    trunks: list = field(default_factory=list)
    signs: list = field(default_factory=list)
    surface_noise: float = 0.01
    clutter_fraction: float = 0.0
    clutter_depth: float = 0.5
    outlier_fraction: float = 0.0
    label_noise_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        fractions = (self.outlier_fraction, self.label_noise_fraction, self.clutter_fraction)
        if any(not 0 <= v <= 0.5 for v in fractions):
            raise ConfigurationError("noise fractions must lie in [0, 0.5]")
        if self.surface_noise < 0 or self.clutter_depth < 0:
            raise ConfigurationError("surface_noise and clutter_depth must be non-negative")
        dens = [o.density for o in self.buildings + self.fences + self.poles + self.trunks + self.signs]
        if self.ground is not None:
            dens.append(self.ground.density)
        if any(not d > 0 for d in dens):
            raise ConfigurationError("point densities must be positive")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        doc = dict(doc or {})
        try:
            ground = doc.pop("ground", {})
            return cls(
                ground=None if ground is None else GroundSpec(**_tuples(ground)),
                buildings=[BuildingSpec(**_tuples(b)) for b in doc.pop("buildings", [])],
                fences=[FenceSpec(**f) for f in doc.pop("fences", [])],
                poles=[CylinderSpec(**_tuples(p)) for p in doc.pop("poles", [])],
                trunks=[CylinderSpec(**_tuples(t)) for t in doc.pop("trunks", [])],
                signs=[SignSpec(**_tuples(s)) for s in doc.pop("signs", [])],
                **doc,
            )
        except TypeError as exc:
            raise ConfigurationError(f"invalid scene spec: {exc}") from None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in dict(d).items()}


def load_scene_spec(path) -> SceneSpec:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    return SceneSpec.from_dict(doc or {})


def save_scene_spec(spec: SceneSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))


def mini_suburb(seed: int = 0, clutter_fraction: float = 0.08, outlier_fraction: float = 0.0,
                label_noise_fraction: float = 0.0) -> SceneSpec:
    """A 100 x 20 m street: four buildings, two fences, ten poles, six trunks
    and four signs (about 1.3M points).

    Object positions are deliberately irregular so that no object sits on
    the boundaries of a power-of-two or decimal grid.
    """
    buildings = [
        BuildingSpec((12.37, 15.41), (10.0, 6.0), 6.0, 0.05),
        BuildingSpec((37.12, 15.08), (12.0, 7.0), 7.0, -0.08),
        BuildingSpec((61.83, 15.57), (9.0, 6.0), 5.0, 0.12),
        BuildingSpec((86.91, 15.13), (11.0, 7.0), 6.5, -0.03),
    ]
    fences = [FenceSpec([[3.23, 9.47], [18.19, 9.82]]), FenceSpec([[53.31, 9.64], [68.27, 9.39]])]
    pole_x = [5.31, 15.17, 24.63, 34.89, 45.42, 54.71, 65.28, 74.56, 85.13, 94.77]
    poles = [CylinderSpec((x, 2.57 + 0.13 * (i % 3)), 3.0, 0.08, 600.0) for i, x in enumerate(pole_x)]
    trunk_x = [8.29, 23.61, 40.47, 56.83, 71.38, 88.52]
    trunks = [CylinderSpec((x, 6.83 + 0.21 * (i % 2)), 3.0, 0.20, 1200.0) for i, x in enumerate(trunk_x)]
    signs = [SignSpec((pole_x[i], poles[i].position[1] - 0.15, 2.3), (0.6, 0.6), 0.0, 1000.0)
             for i in (0, 2, 4, 6)]
    return SceneSpec(GroundSpec(), buildings, fences, poles, trunks, signs, surface_noise=0.01,
                     clutter_fraction=clutter_fraction, clutter_depth=0.5,
                     outlier_fraction=outlier_fraction, label_noise_fraction=label_noise_fraction, seed=seed)


# ---------------------------------------------------------------------------
# ground truth

@dataclass
class TruthPrimitive:
    """One generated surface.

    ``kind`` is ``ground``, ``planar``, ``single-planar`` or ``cylindrical``;
    planar kinds carry ``normal`` and ``offset`` (``n . x + d = 0``),
    cylinders ``axis_point``, ``axis_dir``, ``length`` and ``radius``.
    """

    label: SemanticLabel
    kind: str
    instance: int
    point_ids: np.ndarray
    params: dict


@dataclass
class SceneTruth:
    primitives: list
    point_primitive: np.ndarray  # index into primitives, -1 for outliers
    true_labels: np.ndarray      # label before label noise, OTHER for outliers
    clutter: np.ndarray          # True for points pushed off their surface

    def count(self, label) -> int:
        label = SemanticLabel.parse(label)
        return sum(1 for p in self.primitives if p.label == label)

    def instances(self, label) -> int:
        label = SemanticLabel.parse(label)
        return len({p.instance for p in self.primitives if p.label == label})


def _rect(rng, origin, u, v, lu, lv, density):
    n = int(round(lu * lv * density))
    a = rng.random(n) * lu
    b = rng.random(n) * lv
    return origin + a[:, None] * u + b[:, None] * v


def _noisy(rng, pts, normal, sigma):
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, len(pts))[:, None] * normal
    return pts


def _clutter(rng, pts, normals, fraction, depth, one_sided=False):
    """Push a ``fraction`` of points off their surface by up to ``depth``
    along the normal (facade details, vegetation, debris that keep the
    surface's label). Returns the points and the displaced mask."""
    mask = rng.random(len(pts)) < fraction
    if not mask.any() or depth <= 0:
        return pts, np.zeros(len(pts), dtype=bool)
    d = rng.uniform(0.05 * depth, depth, int(mask.sum()))
    if not one_sided:
        d *= np.where(rng.random(d.size) < 0.5, -1.0, 1.0)
    normals = np.broadcast_to(normals, pts.shape)
    pts = pts.copy()
    pts[mask] += d[:, None] * normals[mask]
    return pts, mask


def _in_polygon(xy, poly) -> np.ndarray:
    inside = np.zeros(len(xy), dtype=bool)
    x, y = xy[:, 0], xy[:, 1]
    for i in range(len(poly)):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % len(poly)]
        cross = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cross & (x < xint)
    return inside


def generate_scene(spec: SceneSpec) -> tuple[LabeledCloud, SceneTruth]:
    """Sample ``spec`` into a labeled cloud and its ground-truth registry."""
    ground = spec.ground or GroundSpec(density=1.0)
    chunks, labels, owners, clutter = [], [], [], []
    prims = []
    instance = 0

    def add(points, label, kind, params, new_instance=True, displaced=None):
        nonlocal instance
        clutter.append(np.zeros(len(points), dtype=bool) if displaced is None else displaced)
        base = sum(len(c) for c in chunks)
        ids = np.arange(base, base + len(points))
        prims.append(TruthPrimitive(label, kind, instance, ids, params))
        chunks.append(np.asarray(points, dtype=np.float64))
        labels.append(np.full(len(points), int(label), dtype=np.int8))
        owners.append(np.full(len(points), len(prims) - 1, dtype=np.int64))
        if new_instance:
            instance += 1

    footprints = [b.corners() for b in spec.buildings]
    if spec.ground is not None:
        g = spec.ground
        rng = substream(spec.seed, _GROUND)
        lx, ly = g.extent
        n = int(round(lx * ly * g.density))
        xy = rng.random((n, 2)) * np.array([lx, ly])
        blocked = np.zeros(n, dtype=bool)
        for poly in footprints:
            blocked |= _in_polygon(xy, poly)
        xy = xy[~blocked]
        z = g.height(xy[:, 0], xy[:, 1]) + rng.normal(0.0, g.roughness, len(xy))
        pts, moved = _clutter(rng, np.column_stack([xy, z]), np.array([0.0, 0.0, 1.0]),
                              spec.clutter_fraction, spec.clutter_depth, one_sided=True)
        add(pts, SemanticLabel.GROUND, "ground", {"extent": tuple(g.extent), "slope": tuple(g.slope)},
            displaced=moved)

    for i, b in enumerate(spec.buildings):
        rng = substream(spec.seed, _BUILDING, i)
        corners = footprints[i]
        z0 = float(ground.height(*b.center)) - 0.2
        for w in range(4):
            p, q = corners[w], corners[(w + 1) % 4]
            edge = q - p
            length = float(np.hypot(*edge))
            u = np.array([edge[0] / length, edge[1] / length, 0.0])
            normal = np.array([u[1], -u[0], 0.0])
            pts = _rect(rng, np.array([p[0], p[1], z0]), u, np.array([0.0, 0.0, 1.0]),
                        length, b.height, b.density)
            pts = _noisy(rng, pts, normal, spec.surface_noise)
            pts, moved = _clutter(rng, pts, normal, spec.clutter_fraction, spec.clutter_depth)
            add(pts, SemanticLabel.BUILDING, "planar",
                {"normal": normal, "offset": -float(normal @ np.array([p[0], p[1], z0]))},
                new_instance=(w == 3), displaced=moved)

    for i, f in enumerate(spec.fences):
        rng = substream(spec.seed, _FENCE, i)
        line = np.asarray(f.polyline, dtype=np.float64)
        for s in range(len(line) - 1):
            p, q = line[s], line[s + 1]
            edge = q - p
            length = float(np.hypot(*edge))
            u = np.array([edge[0] / length, edge[1] / length, 0.0])
            normal = np.array([u[1], -u[0], 0.0])
            z0 = float(ground.height(*p)) + 0.05
            pts = _rect(rng, np.array([p[0], p[1], z0]), u, np.array([0.0, 0.0, 1.0]),
                        length, f.height, f.density)
            pts = _noisy(rng, pts, normal, spec.surface_noise)
            pts, moved = _clutter(rng, pts, normal, spec.clutter_fraction, spec.clutter_depth)
            add(pts, SemanticLabel.FENCE, "planar",
                {"normal": normal, "offset": -float(normal @ np.array([p[0], p[1], z0]))},
                new_instance=(s == len(line) - 2), displaced=moved)

    for tag, items, label in ((_POLE, spec.poles, SemanticLabel.POLE),
                              (_TRUNK, spec.trunks, SemanticLabel.TREE_TRUNK)):
        for i, c in enumerate(items):
            rng = substream(spec.seed, tag, i)
            n = int(round(2.0 * math.pi * c.radius * c.height * c.density))
            theta = rng.random(n) * 2.0 * math.pi
            h = rng.random(n) * c.height
            r = c.radius + (rng.normal(0.0, spec.surface_noise, n) if spec.surface_noise > 0 else 0.0)
            z0 = float(ground.height(*c.position))
            radial = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
            pts = np.column_stack([c.position[0] + r * radial[:, 0], c.position[1] + r * radial[:, 1], z0 + h])
            # clutter on cylinders scales with the radius (bark, brackets, stubs)
            pts, moved = _clutter(rng, pts, radial, spec.clutter_fraction, min(spec.clutter_depth, c.radius),
                                  one_sided=True)
            add(pts, label, "cylindrical", displaced=moved, params=
                {"axis_point": np.array([c.position[0], c.position[1], z0]), "axis_dir": np.array([0.0, 0.0, 1.0]),
                 "length": float(c.height), "radius": float(c.radius)})

    for i, s in enumerate(spec.signs):
        rng = substream(spec.seed, _SIGN, i)
        cu, su = math.cos(s.yaw), math.sin(s.yaw)
        u = np.array([cu, su, 0.0])
        v = np.array([0.0, 0.0, 1.0])
        normal = np.array([su, -cu, 0.0])
        center = np.array([s.center[0], s.center[1], float(ground.height(s.center[0], s.center[1])) + s.center[2]])
        origin = center - 0.5 * s.size[0] * u - 0.5 * s.size[1] * v
        # sign plates are left free of clutter
        pts = _noisy(rng, _rect(rng, origin, u, v, s.size[0], s.size[1], s.density), normal, spec.surface_noise)
        add(pts, SemanticLabel.TRAFFIC_SIGN, "single-planar",
            {"normal": normal, "offset": -float(normal @ center)})

    positions = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    true_labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int8)
    owner = np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)
    displaced = np.concatenate(clutter) if clutter else np.zeros(0, dtype=bool)

    n_out = int(round(spec.outlier_fraction * len(positions)))
    if n_out:
        rng = substream(spec.seed, _OUTLIER)
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        positions = np.concatenate([positions, lo + rng.random((n_out, 3)) * (hi - lo)])
        true_labels = np.concatenate([true_labels, np.full(n_out, int(SemanticLabel.OTHER), dtype=np.int8)])
        owner = np.concatenate([owner, np.full(n_out, -1, dtype=np.int64)])
        displaced = np.concatenate([displaced, np.zeros(n_out, dtype=bool)])

    classes = list(SEMANTIC_KITTI_CLASSES)
    col = {name: j for j, name in enumerate(classes)}
    cls = np.array([col[SOURCE_CLASS[SemanticLabel(v)]] if v != int(SemanticLabel.OTHER) else col["vegetation"]
                    for v in range(len(SemanticLabel))])[true_labels]
    rng = substream(spec.seed, _NOISE)
    if n_out:
        cls[-n_out:] = rng.integers(0, len(classes), n_out)
    n_flip = int(round(spec.label_noise_fraction * len(positions)))
    if n_flip:
        flip = rng.choice(len(positions), n_flip, replace=False)
        shift = rng.integers(1, len(classes), n_flip)
        cls[flip] = (cls[flip] + shift) % len(classes)
    probs = np.zeros((len(positions), len(classes)), dtype=np.float32)
    probs[np.arange(len(positions)), cls] = 1.0
    intensity = np.zeros(len(positions), dtype=np.float32)
    cloud = assign_hard_labels(LabeledCloud(positions, intensity, probs, classes, frame_id="synth"))
    return cloud, SceneTruth(prims, owner, true_labels, displaced)
