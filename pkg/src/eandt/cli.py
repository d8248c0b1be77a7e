"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

import eandt
from eandt.cloud import (
    CloudFormatError,
    ConfigurationError,
    LabeledCloud,
    assign_hard_labels,
    load_cloud,
    preprocess,
    save_cloud,
)
from eandt.evaluation import evaluate_map, sweep
from eandt.labels import MAP_LABELS, SemanticLabel
from eandt.ndt import MapFormatError, build_grid_ndt, load_map, save_map, sweep_sizes
from eandt.pipeline import (
    LabelConfig,
    PipelineConfig,
    build_ea_ndt,
    dump_config,
    extract_label_primitives,
    fit_scaling_params,
    load_config,
)
from eandt.synth import generate_scene, load_scene_spec, mini_suburb

logger = logging.getLogger("eandt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CLOUD_FORMATS = ("binary-native", "text-xyzilp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


# ---------------------------------------------------------------------------
# flag types

def _positive(name):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not v > 0 or not np.isfinite(v):
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {text}")
        return v
    return parse


def _count(name):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {text}")
        return v
    return parse


def _seed(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed must be an integer, got {text!r}") from None
    if v < 0 or v >= 2 ** 64:
        raise argparse.ArgumentTypeError("--seed must fit in an unsigned 64-bit integer")
    return v


def parse_sizes(text: str) -> np.ndarray:
    """``min:max:count[:log|lin]``."""
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise argparse.ArgumentTypeError(f"--sizes expects min:max:count[:log|lin], got {text!r}")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sizes has a non-numeric field: {text!r}") from None
    mode = parts[3].lower() if len(parts) == 4 else "log"
    if mode not in ("log", "lin", "1", "0", "true", "false"):
        raise argparse.ArgumentTypeError(f"--sizes spacing must be log or lin, got {parts[3]!r}")
    if not (0 < lo <= hi) or count < 1:
        raise argparse.ArgumentTypeError(f"--sizes needs 0 < min <= max and count >= 1, got {text!r}")
    return sweep_sizes(lo, hi, count, mode in ("log", "1", "true"))


def _labels(text):
    try:
        out = [SemanticLabel.parse(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--labels: {exc}") from None
    bad = [v.key for v in out if v not in MAP_LABELS]
    if not out or bad:
        raise argparse.ArgumentTypeError(f"--labels must list map labels, got {text!r}")
    return out


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eandt", description="Environment-aware NDT map building and evaluation.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, cloud=True, config=False, cell=False, seed=False, threads=False, labels=False):
        if cloud:
            sp.add_argument("--cloud", required=True, help="input cloud file")
            sp.add_argument("--merge-map", help="YAML mapping of source classes to map labels")
        if config:
            sp.add_argument("--config", help="pipeline config (YAML); defaults ship the tabulated parameters")
        if cell:
            sp.add_argument("--cell-size", type=_positive("--cell-size"), help="cell size s_c in meters")
        if seed:
            sp.add_argument("--seed", type=_seed, help="random seed (overrides the config)")
        if threads:
            sp.add_argument("--threads", type=_count("--threads"), help="worker threads")
        if labels:
            sp.add_argument("--labels", type=_labels, help="comma-separated map labels to process")

    sp = sub.add_parser("preprocess", help="voxel filter, smooth label probabilities, assign hard labels")
    common(sp)
    sp.add_argument("--voxel", type=_positive("--voxel"), default=0.01, help="averaging voxel (m)")
    sp.add_argument("--smooth", type=float, default=0.05, help="label smoothing radius (m), 0 disables")
    sp.add_argument("--format", choices=CLOUD_FORMATS, default="binary-native")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic labeled scene")
    sp.add_argument("--spec", default="mini-suburb", help="scene spec YAML or 'mini-suburb'")
    sp.add_argument("--seed", type=_seed, help="scene seed (overrides the spec)")
    sp.add_argument("--format", choices=CLOUD_FORMATS, default="binary-native")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("build-ndt", help="build a per-label grid NDT map")
    common(sp, config=True, cell=True, labels=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("build-ea", help="build an EA-NDT map")
    common(sp, config=True, cell=True, seed=True, threads=True, labels=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="score a map against a cloud")
    common(sp, labels=True)
    sp.add_argument("--map", required=True)
    sp.add_argument("--out", help="CSV file for the records (stdout if omitted)")

    sp = sub.add_parser("sweep", help="build and score both methods over a range of cell sizes")
    common(sp, config=True, seed=True, threads=True, labels=True)
    sp.add_argument("--sizes", type=parse_sizes, default=None, help="min:max:count[:log|lin] (default 0.2:10:30:log)")
    sp.add_argument("--no-maps", action="store_true", help="do not write map files")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("fit-params", help="fit per-label scaling parameters against grid NDT")
    common(sp, config=True, seed=True, threads=True, labels=True)
    sp.add_argument("--sizes", type=parse_sizes, default=None, help="sizes to fit on; only those below 1 m are used")
    sp.add_argument("--out", required=True, help="output config YAML")

    sp = sub.add_parser("info", help="describe a cloud or map file, or the installation")
    sp.add_argument("--cloud")
    sp.add_argument("--map")
    return p


# ---------------------------------------------------------------------------
# helpers

def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    if getattr(args, "cell_size", None) is not None:
        changes["cell_size"] = args.cell_size
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    if changes:
        cfg = cfg.with_(**changes)
    if getattr(args, "labels", None):
        cfg = cfg.restrict(args.labels)
    return cfg


def _merge_map(args):
    if not getattr(args, "merge_map", None):
        return None
    merge = yaml.safe_load(Path(args.merge_map).read_text())
    if not isinstance(merge, dict):
        raise ConfigurationError(f"{args.merge_map}: expected a mapping of class names to labels")
    return merge


def _load_labeled(args) -> LabeledCloud:
    """Load ``--cloud`` and derive hard labels from its probabilities; the
    file formats store probabilities only."""
    return assign_hard_labels(load_cloud(args.cloud), _merge_map(args))


def _restrict_cloud(cloud: LabeledCloud, cfg: PipelineConfig) -> LabeledCloud:
    """Mark points of unselected map labels as OTHER so they are ignored."""
    keep = np.isin(cloud.labels, [int(v) for v in cfg.labels])
    other = np.isin(cloud.labels, [int(v) for v in MAP_LABELS]) & ~keep
    if not other.any():
        return cloud
    labels = cloud.labels.copy()
    labels[other] = int(SemanticLabel.OTHER)
    return LabeledCloud(cloud.positions, cloud.intensity, cloud.probs, cloud.class_names, labels, cloud.frame_id)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, argv, params: dict, cfg: PipelineConfig | None = None, inputs=()) -> None:
    doc = {
        "command": command,
        "argv": list(argv),
        "params": params,
        "inputs": {str(p): _file_digest(p) for p in inputs},
        "versions": {"eandt": eandt.__version__, "backend": eandt.BACKEND, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
    }
    if cfg is not None:
        text = dump_config(cfg)
        doc["config"] = cfg.to_dict()
        doc["config_sha256"] = hashlib.sha256(text.encode()).hexdigest()
        doc["seed"] = int(cfg.seed)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _manifest_for(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _records_csv(records, fh):
    fh.write("method,label,s_c,N_c,N_p,S_d,R_c\n")
    for r in records:
        fh.write(f"{r.method},{r.label},{r.s_c!r},{r.N_c},{r.N_p},{r.S_d!r},{'' if r.R_c is None else repr(r.R_c)}\n")


# ---------------------------------------------------------------------------
# commands

def cmd_preprocess(args, argv):
    cloud = load_cloud(args.cloud)
    out = preprocess(cloud, args.voxel, args.smooth, _merge_map(args))
    save_cloud(out, args.out, args.format)
    logger.info("preprocessed %d -> %d points", len(cloud), len(out))
    write_manifest(_manifest_for(args.out), "preprocess", argv,
                   {"voxel": args.voxel, "smooth": args.smooth, "merge_map": args.merge_map,
                    "format": args.format}, inputs=[args.cloud])


def cmd_synth(args, argv):
    if args.spec == "mini-suburb":
        spec = mini_suburb()
    else:
        spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    cloud, truth = generate_scene(spec)
    save_cloud(cloud, args.out, args.format)
    logger.info("synthesized %d points, %d primitives", len(cloud), len(truth.primitives))
    write_manifest(_manifest_for(args.out), "synth", argv,
                   {"spec": spec.to_dict(), "format": args.format})


def cmd_build_ndt(args, argv):
    cfg = _config(args)
    cloud = _load_labeled(args)
    ndt_map = build_grid_ndt(cloud, cfg.cell_size, sorted(cfg.labels))
    ndt_map.seed = cfg.seed
    save_map(ndt_map, args.out)
    logger.info("grid-ndt s_c=%g: %d cells", cfg.cell_size, len(ndt_map))
    write_manifest(_manifest_for(args.out), "build-ndt", argv, {"cell_size": cfg.cell_size}, cfg, [args.cloud])


def cmd_build_ea(args, argv):
    cfg = _config(args)
    cloud = _restrict_cloud(_load_labeled(args), cfg)
    ndt_map = build_ea_ndt(cloud, cfg)
    save_map(ndt_map, args.out)
    write_manifest(_manifest_for(args.out), "build-ea", argv, {"cell_size": cfg.cell_size}, cfg, [args.cloud])


def cmd_eval(args, argv):
    cloud = _load_labeled(args)
    ndt_map = load_map(args.map)
    labels = args.labels or sorted(ndt_map.label_set & set(MAP_LABELS))
    records = evaluate_map(ndt_map, cloud, labels)
    if args.out:
        with open(args.out, "w") as fh:
            _records_csv(records, fh)
        write_manifest(_manifest_for(args.out), "eval", argv, {"labels": [v.key for v in labels]},
                       inputs=[args.cloud, args.map])
    else:
        _records_csv(records, sys.stdout)


def cmd_sweep(args, argv):
    cfg = _config(args)
    sizes = args.sizes if args.sizes is not None else sweep_sizes()
    cloud = _restrict_cloud(_load_labeled(args), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sink = None
    if not args.no_maps:
        (out / "maps").mkdir(exist_ok=True)

        def sink(method, s_c, ndt_map):
            save_map(ndt_map, out / "maps" / f"{method}_{s_c:.6f}.map")

    report = sweep(cloud, cfg, sizes, sink)
    report.write(out)
    write_manifest(out / "manifest.json", "sweep", argv, {"sizes": [float(s) for s in sizes]}, cfg, [args.cloud])
    if report.failures:
        logger.warning("%d builds failed; see report.json", len(report.failures))


def cmd_fit_params(args, argv):
    cfg = _config(args)
    sizes = args.sizes if args.sizes is not None else sweep_sizes()
    cloud = _restrict_cloud(_load_labeled(args), cfg)
    labels = dict(cfg.labels)
    for label in sorted(cfg.labels):
        if cloud.label_ids(label).size == 0:
            logger.warning("%s: no points, keeping configured parameters", label.key)
            continue
        prims = extract_label_primitives(cloud, label, cfg)
        f, g = fit_scaling_params(cloud, label, sizes, cfg, prims)
        old = cfg.labels[label]
        labels[label] = LabelConfig(label, f, g, old.kind, old.grow_threshold, old.grow_min_points)
        print(f"{label.key}: f={f!r} g={g!r}")
    fitted = cfg.with_(labels=labels)
    Path(args.out).write_text(dump_config(fitted))
    write_manifest(_manifest_for(args.out), "fit-params", argv, {"sizes": [float(s) for s in sizes]},
                   fitted, [args.cloud])


def cmd_info(args, argv):
    if args.cloud:
        cloud = load_cloud(args.cloud)
        try:
            cloud = assign_hard_labels(cloud)
        except ConfigurationError:
            pass  # classes outside the default merge map: report as unlabeled
        print(f"cloud: {len(cloud)} points, {len(cloud.class_names)} classes, frame {cloud.frame_id}")
        if len(cloud):
            lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
            print(f"bounds: {lo.tolist()} .. {hi.tolist()}")
            counts = np.bincount(cloud.labels.astype(np.int64) + 1, minlength=len(SemanticLabel) + 1)
            if counts[0]:
                print(f"unlabeled: {counts[0]}")
            for label in SemanticLabel:
                if counts[int(label) + 1]:
                    print(f"{label.key}: {counts[int(label) + 1]}")
    if args.map:
        m = load_map(args.map)
        print(f"map: {m.method}, s_c={m.cell_size!r}, seed={m.seed}, {len(m)} cells")
        for label in sorted(m.label_set):
            print(f"{label.key}: {int(np.count_nonzero(m.labels == int(label)))}")
    if not args.cloud and not args.map:
        print(f"eandt {eandt.__version__} (kernels: {eandt.BACKEND}), numpy {np.__version__}, "
              f"scipy {scipy.__version__}")


COMMANDS = {
    "preprocess": cmd_preprocess, "synth": cmd_synth, "build-ndt": cmd_build_ndt, "build-ea": cmd_build_ea,
    "eval": cmd_eval, "sweep": cmd_sweep, "fit-params": cmd_fit_params, "info": cmd_info,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, argv)
    except (CloudFormatError, MapFormatError, ConfigurationError, OSError) as exc:
        print(f"eandt {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"eandt {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"eandt {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())
