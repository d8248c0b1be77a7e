"""Descriptivity, compression ratios and the cell-size sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from eandt.cloud import LabeledCloud
from eandt.labels import SemanticLabel
from eandt.ndt import SIGMA_C, SIGMA_P, GaussianParams, NdtMap, build_grid_ndt
from eandt.pipeline import PipelineConfig, cells_from_primitives, check_labels, extract_label_primitives

logger = logging.getLogger(__name__)

COMPLETE = "complete"
APPLICABLE_BAND = (0.5, 2.0)
_LOG_2PI = math.log(2.0 * math.pi)


def density(x, g: GaussianParams) -> float:
    """Multivariate normal density of ``g`` at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(g.mu)) and np.all(np.isfinite(g.precision_upper))):
        raise ValueError("non-finite input to density")
    p = g.precision_upper
    dx, dy, dz = (float(v) for v in x - g.mu)
    maha = ((p[0] * dx * dx + p[3] * dy * dy + p[5] * dz * dz)
            + 2.0 * (p[1] * dx * dy + p[2] * dx * dz + p[4] * dy * dz))
    return math.exp(g.log_norm - 0.5 * maha)


def descriptivity_score(ndt_map: NdtMap, points, cell_size: float | None = None) -> float:
    """Mean over ``points`` of the best cell density among cells whose mean
    lies within ``2 * cell_size``; points with no such cell count as zero."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("descriptivity needs at least one point")
    cell_size = ndt_map.cell_size if cell_size is None else float(cell_size)
    best, _ = ndt_map.best_density(pts, 2.0 * cell_size)
    return math.fsum(best.tolist()) / pts.shape[0]


def compression_ratio(n_points: int, n_cells: int) -> float:
    if n_cells <= 0:
        raise ValueError("compression ratio undefined for a map without cells")
    return n_points * SIGMA_P / (n_cells * SIGMA_C)


@dataclass
class EvaluationRecord:
    method: str
    label: str
    s_c: float
    N_c: int
    N_p: int
    S_d: float
    R_c: float | None

    def __post_init__(self):
        if self.S_d < 0 or self.N_c < 0:
            raise ValueError("negative score or cell count")


def make_record(method, label, s_c, ndt_map: NdtMap, points) -> EvaluationRecord:
    n_c = len(ndt_map)
    n_p = len(points)
    return EvaluationRecord(method, label, float(s_c), n_c, n_p, descriptivity_score(ndt_map, points, s_c),
                            compression_ratio(n_p, n_c) if n_c else None)


def ratios(record_ea: EvaluationRecord, record_ndt: EvaluationRecord):
    """``(R_d, (R_c_ea, R_c_ndt))`` for two records of the same size and label."""
    if record_ea.s_c != record_ndt.s_c or record_ea.label != record_ndt.label:
        raise ValueError("descriptivity ratio needs records with the same cell size and label")
    if record_ndt.S_d == 0:
        raise ValueError("descriptivity ratio undefined: reference score is zero")
    return (record_ea.S_d / record_ndt.S_d,
            (compression_ratio(record_ea.N_p, record_ea.N_c), compression_ratio(record_ndt.N_p, record_ndt.N_c)))


@dataclass
class Efficiency:
    """Compression efficiency samples at the EA curve's scores."""

    S_d: np.ndarray
    n_ea: np.ndarray
    n_ndt: np.ndarray
    eta: np.ndarray
    status: str = "ok"


def compression_efficiency(curve_ea, curve_ndt) -> Efficiency:
    """Grid-to-EA cell ratio at equal descriptivity.

    Both curves are ``(N_c, S_d)`` pairs. The grid curve is interpolated
    piecewise-linearly in log-log space as ``log N`` over ``log S``, after
    forcing it monotone (cells never decrease as the score grows). EA
    samples outside the grid curve's score range are omitted.
    """
    ea = np.asarray(curve_ea, dtype=np.float64).reshape(-1, 2)
    nd = np.asarray(curve_ndt, dtype=np.float64).reshape(-1, 2)
    if len(ea) < 2 or len(nd) < 2:
        raise ValueError("each curve needs at least two points")
    ea = ea[(ea[:, 0] > 0) & (ea[:, 1] > 0)]
    nd = nd[(nd[:, 0] > 0) & (nd[:, 1] > 0)]
    empty = Efficiency(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), "no-overlap")
    if len(nd) < 2 or len(ea) == 0:
        logger.warning("compression efficiency: not enough positive samples")
        return empty
    ls = np.log(nd[:, 1])
    ln = np.log(nd[:, 0])
    order = np.lexsort((ln, ls))
    ls, ln = ls[order], np.maximum.accumulate(ln[order])
    # collapse equal scores onto their largest cell count
    keep = np.append(ls[1:] != ls[:-1], True)
    ls, ln = ls[keep], ln[keep]
    if len(ls) < 2:
        logger.warning("compression efficiency: grid curve has a single distinct score")
        return empty
    q = np.log(ea[:, 1])
    inside = (q >= ls[0]) & (q <= ls[-1])
    if not inside.any():
        logger.warning("compression efficiency: score ranges do not overlap")
        return empty
    sel = ea[inside]
    n_ndt = np.exp(np.interp(q[inside], ls, ln))
    return Efficiency(sel[:, 1], sel[:, 0], n_ndt, n_ndt / sel[:, 0])


# ---------------------------------------------------------------------------
# sweep

@dataclass
class EvaluationReport:
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def find(self, method: str, label: str, s_c: float) -> EvaluationRecord | None:
        for r in self.records:
            if r.method == method and r.label == label and r.s_c == s_c:
                return r
        return None

    def labels(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def curve(self, method: str, label: str) -> np.ndarray:
        rows = [(r.N_c, r.S_d) for r in self.records if r.method == method and r.label == label]
        return np.array(rows, dtype=np.float64).reshape(-1, 2)

    def descriptivity_ratios(self) -> list[tuple[float, str, float]]:
        out = []
        for r in self.records:
            if r.method != "ea-ndt":
                continue
            ref = self.find("grid-ndt", r.label, r.s_c)
            if ref is None or ref.S_d == 0:
                continue
            out.append((r.s_c, r.label, r.S_d / ref.S_d))
        return out

    def efficiency(self, label: str) -> Efficiency:
        ea, nd = self.curve("ea-ndt", label), self.curve("grid-ndt", label)
        if len(ea) < 2 or len(nd) < 2:
            return Efficiency(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), "no-overlap")
        return compression_efficiency(ea, nd)

    def efficiency_rows(self) -> list[tuple[str, float, float]]:
        rows = []
        for label in self.labels():
            eff = self.efficiency(label)
            rows.extend((label, float(s), float(e)) for s, e in zip(eff.S_d, eff.eta))
        return rows

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "records": [asdict(r) for r in self.records],
            "failures": self.failures,
            "descriptivity_ratio": [{"s_c": s, "label": lab, "R_d": v} for s, lab, v in self.descriptivity_ratios()],
            "efficiency": [{"label": lab, "S_d": s, "eta": e} for lab, s, e in self.efficiency_rows()],
        }

    def write(self, out_dir) -> dict:
        """Write ``report.csv``, ``ratios.csv``, ``efficiency.csv`` and
        ``report.json``; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / v for k, v in (("report", "report.csv"), ("ratios", "ratios.csv"),
                                        ("efficiency", "efficiency.csv"), ("json", "report.json"))}
        with open(paths["report"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "label", "s_c", "N_c", "N_p", "S_d", "R_c"])
            for r in self.records:
                w.writerow([r.method, r.label, repr(r.s_c), r.N_c, r.N_p, repr(r.S_d),
                            "" if r.R_c is None else repr(r.R_c)])
        with open(paths["ratios"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s_c", "label", "R_d"])
            for s, lab, v in self.descriptivity_ratios():
                w.writerow([repr(s), lab, repr(v)])
        with open(paths["efficiency"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "S_d", "eta"])
            for lab, s, e in self.efficiency_rows():
                w.writerow([lab, repr(s), repr(e)])
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return paths


def evaluate_map(ndt_map: NdtMap, cloud: LabeledCloud, labels, ids_per_label: dict | None = None) -> list:
    """Per-label and complete records for one map."""
    labels = [SemanticLabel.parse(v) for v in labels]
    if ids_per_label is None:
        ids_per_label = {label: cloud.label_ids(label) for label in labels}
    out = []
    used = []
    for label in labels:
        ids = ids_per_label[label]
        if len(ids) == 0:
            continue
        used.append(ids)
        out.append(make_record(ndt_map.method, label.key, ndt_map.cell_size, ndt_map.select_label(label),
                               cloud.positions[ids]))
    if used:
        ids = np.sort(np.concatenate(used))
        out.append(make_record(ndt_map.method, COMPLETE, ndt_map.cell_size, ndt_map, cloud.positions[ids]))
    return out


def sweep(cloud: LabeledCloud, cfg: PipelineConfig, sizes, map_sink=None) -> EvaluationReport:
    """Build grid-NDT and EA-NDT maps at every size and score them.

    Primitives are extracted once and reused for every size. A failure at
    one size is recorded and the sweep moves on.

    Args:
        cloud: preprocessed cloud with hard labels.
        cfg: pipeline configuration; its labels select what is evaluated.
        sizes: cell sizes in meters.
        map_sink: optional ``callable(method, s_c, map)`` receiving each map.
    """
    sizes = [float(s) for s in sizes]
    labels = sorted(cfg.labels)
    check_labels(cloud, cfg)
    ids = {label: cloud.label_ids(label) for label in labels}
    report = EvaluationReport(metadata={
        "sizes": sizes,
        "labels": [v.key for v in labels],
        "seed": int(cfg.seed),
        "applicable_band": list(APPLICABLE_BAND),
        "applicable_sizes": [s for s in sizes if APPLICABLE_BAND[0] <= s <= APPLICABLE_BAND[1]],
        "sigma_p": SIGMA_P,
        "sigma_c": SIGMA_C,
    })
    primitives, prim_error = None, None
    try:
        primitives = {label: extract_label_primitives(cloud, label, cfg) for label in labels}
    except Exception as exc:  # noqa: BLE001 - reported per size below
        logger.error("primitive extraction failed: %s", exc)
        prim_error = f"{type(exc).__name__}: {exc}"
    for s in sizes:
        builders = (
            ("grid-ndt", lambda s=s: build_grid_ndt(cloud, s, labels, ids)),
            ("ea-ndt", lambda s=s: cells_from_primitives(cloud, primitives, cfg, s)),
        )
        for method, build in builders:
            try:
                if method == "ea-ndt" and prim_error is not None:
                    raise RuntimeError(prim_error)
                ndt_map = build()
                if method == "grid-ndt":
                    ndt_map.seed = cfg.seed
                if map_sink is not None:
                    map_sink(method, s, ndt_map)
                report.records.extend(evaluate_map(ndt_map, cloud, labels, ids))
                logger.info("%s s_c=%.4g: %d cells", method, s, len(ndt_map))
            except Exception as exc:  # noqa: BLE001 - isolate failures per size
                logger.error("%s s_c=%.4g failed: %s", method, s, exc)
                report.failures.append({"method": method, "s_c": s, "error": f"{type(exc).__name__}: {exc}"})
    return report
