"""Command-line pipeline: preprocess -> register -> octree -> evaluate.

Every stage reads its inputs from, and writes its outputs to, the run's
output directory, so a pipeline can be resumed stage by stage::

    semoctree pipeline --config run.json
    semoctree register --config run.json --voxel-size 0.05
    semoctree synth --spec facade.json --out data/
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from types import SimpleNamespace

import numpy as np

from . import __version__
from .core import NEW, CloudFormatError, DomainError
from .evaluation import confusion_matrix, metrics_json, metrics_table, summarize
from .io import load_cloud, save_cloud
from .octree import SemanticOctree
from .preprocess import SorParams, estimate_surface_stats, statistical_outlier_removal, voxel_downsample
from .registration import (
    ConvergenceCriteria,
    RegistrationError,
    RigidTransform,
    apply_transform,
    gicp_register,
)

logger = logging.getLogger("semoctree")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_VALIDATION = 5

FLOAT_PRECISION = 9

DEFAULT_CONFIG = {
    "source": None,
    "target": None,
    "truth": None,
    "output_dir": "out",
    "seed": 0,
    "threads": 1,
    "class_names": {},
    "sor": {"enabled": True, "k": 20, "std_ratio": 1.7},
    "registration": {
        "enabled": True,
        "voxel_size": 0.1,
        "lambda": 10.0,
        "max_iterations": 50,
        "rel_fitness": 1e-6,
        "rel_rmse": 1e-6,
        "normal_k": 20,
        "epsilon": 1e-3,
        "initial_transform": None,
    },
    "octree": {"max_lat": 0.1, "padding": None},
}

STAGES = ("preprocess", "register", "octree", "evaluate")


class ConfigError(Exception):
    pass


class ValidationMismatch(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.exc = exc


# config ---------------------------------------------------------------------


def _merge(base, override, path=""):
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and key != "class_names":
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}{key}' must be an object")
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value


def load_config(path=None, overrides=None):
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        _merge(config, user)
    if overrides:
        _merge(config, overrides)
    validate_config(config)
    return config


def validate_config(config):
    def positive(section, key, integer=False, minimum=None):
        value = config[section][key] if section else config[key]
        ok = isinstance(value, int) if integer else isinstance(value, (int, float))
        ok = ok and not isinstance(value, bool)
        limit = minimum if minimum is not None else 0
        if not ok or not (value >= limit if minimum is not None else value > limit):
            raise ConfigError(f"{section + '.' if section else ''}{key} must be a positive number, got {value!r}")

    positive("sor", "k", integer=True, minimum=2)
    positive("sor", "std_ratio")
    for key in ("voxel_size", "lambda", "rel_fitness", "rel_rmse", "epsilon"):
        positive("registration", key)
    positive("registration", "max_iterations", integer=True)
    positive("registration", "normal_k", integer=True, minimum=3)
    positive("octree", "max_lat")
    positive(None, "threads", integer=True)
    pad = config["octree"]["padding"]
    if pad is not None and (not isinstance(pad, (int, float)) or pad < 0):
        raise ConfigError(f"octree.padding must be null or >= 0, got {pad!r}")
    init = config["registration"]["initial_transform"]
    if init is not None:
        try:
            RigidTransform.from_matrix(init)
        except ValueError as exc:
            raise ConfigError(f"registration.initial_transform: {exc}") from exc


def _round(obj, precision=FLOAT_PRECISION):
    if isinstance(obj, float):
        return round(obj, precision)
    if isinstance(obj, dict):
        return {k: _round(v, precision) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, precision) for v in obj]
    return obj


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_round(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _out(config, name):
    return os.path.join(config["output_dir"], name)


def _require(path, what):
    if not path:
        raise ConfigError(f"config needs '{what}'")
    if not os.path.exists(path):
        raise FileNotFoundError(2, f"{what} file not found", path)
    return path


def _class_names(config):
    names = {str(NEW): "new"}
    names.update({str(k): v for k, v in config.get("class_names", {}).items()})
    return {int(k): v for k, v in names.items()}


# stages ---------------------------------------------------------------------


def stage_preprocess(config):
    source = load_cloud(_require(config["source"], "source"))
    target = load_cloud(_require(config["target"], "target"))
    truth = load_cloud(_require(config["truth"], "truth")) if config["truth"] else None
    if source.labels is None:
        raise ValidationMismatch(f"source cloud {config['source']} has no labels")
    if truth is not None:
        if truth.labels is None:
            raise ValidationMismatch(f"truth cloud {config['truth']} has no labels")
        if len(truth) != len(target):
            raise ValidationMismatch(f"truth has {len(truth)} points but target has {len(target)}")

    info = {"source_points": len(source), "target_points": len(target)}
    target_kept = np.arange(len(target))
    if config["sor"]["enabled"]:
        params = SorParams(config["sor"]["k"], config["sor"]["std_ratio"])
        source, removed_s = statistical_outlier_removal(source, params, workers=config["threads"])
        target_filtered, removed_t = statistical_outlier_removal(target, params, workers=config["threads"])
        target_kept = np.setdiff1d(target_kept, removed_t)
        target = target_filtered
        info.update(source_removed=int(len(removed_s)), target_removed=int(len(removed_t)))
    save_cloud(source, _out(config, "source_filtered.ply"))
    save_cloud(target.with_labels(None), _out(config, "target_filtered.ply"))
    if truth is not None:
        save_cloud(truth.subset(target_kept), _out(config, "truth_filtered.ply"))
    _write_json(_out(config, "preprocess.json"), info)
    return info


def stage_register(config):
    source = load_cloud(_require(_out(config, "source_filtered.ply"), "preprocessed source"))
    target = load_cloud(_require(_out(config, "target_filtered.ply"), "preprocessed target"))
    reg = config["registration"]
    init = RigidTransform.from_matrix(reg["initial_transform"]) if reg["initial_transform"] else RigidTransform()
    if reg["enabled"]:
        threads = config["threads"]
        src_down = voxel_downsample(source, reg["voxel_size"])
        tgt_down = voxel_downsample(target, reg["voxel_size"])
        src_stats = estimate_surface_stats(src_down, reg["normal_k"], reg["epsilon"], workers=threads)
        tgt_stats = estimate_surface_stats(tgt_down, reg["normal_k"], reg["epsilon"], workers=threads)
        result = gicp_register(
            src_down, src_stats, tgt_down, tgt_stats,
            init=init,
            max_correspondence_distance=reg["lambda"],
            criteria=ConvergenceCriteria(reg["max_iterations"], reg["rel_fitness"], reg["rel_rmse"]),
            workers=threads,
        )
        T = result.transform
        info = {
            "matrix": T.matrix().tolist(),
            "fitness": result.fitness,
            "inlier_rmse": result.inlier_rmse,
            "iterations_used": result.iterations_used,
            "converged": result.converged,
            "objective_non_increasing": all(b <= a for a, b in result.objective_history),
            "downsampled_points": {"source": len(src_down), "target": len(tgt_down)},
        }
    else:
        T = init
        info = {"matrix": T.matrix().tolist(), "skipped": True}
    save_cloud(apply_transform(source, T), _out(config, "source_registered.ply"))
    _write_json(_out(config, "transform.json"), info)
    return info


def stage_octree(config):
    source = load_cloud(_require(_out(config, "source_registered.ply"), "registered source"))
    target = load_cloud(_require(_out(config, "target_filtered.ply"), "preprocessed target"))
    oc = config["octree"]
    tree = SemanticOctree.build(source, oc["max_lat"], oc["padding"])
    labeled, report = tree.transfer_labels(target)
    save_cloud(labeled, _out(config, "labeled_target.ply"))
    record = report.to_dict(FLOAT_PRECISION)
    record["octree"] = {
        "depth": tree.max_depth,
        "root_origin": list(tree.root.origin),
        "root_side": tree.root.side,
        "leaves": tree.n_leaves,
    }
    _write_json(_out(config, "change_report.json"), record)
    tree.dump_leaves(_out(config, "removed_leaves.xyz"), only_removed=True)
    return {k: record[k] for k in ("new_points", "unchanged_points", "out_of_bounds_points", "new_fraction")}


def stage_evaluate(config):
    if not config["truth"]:
        return {"skipped": True}
    pred = load_cloud(_require(_out(config, "labeled_target.ply"), "labeled target"))
    truth = load_cloud(_require(_out(config, "truth_filtered.ply"), "preprocessed truth"))
    report = _read_json(_require(_out(config, "change_report.json"), "change report"))
    if len(pred) != len(truth):
        raise ValidationMismatch(f"labeled target has {len(pred)} points, truth has {len(truth)}")
    if not np.array_equal(pred.points, truth.points):
        raise ValidationMismatch("labeled target and truth point order differ")
    classes = set(np.unique(truth.labels).tolist()) | set(np.unique(pred.labels).tolist())
    cm = confusion_matrix(pred, truth, classes)
    names = _class_names(config)

    record = summarize(cm, SimpleNamespace(new_fraction=report["new_fraction"]), config["octree"]["max_lat"], names, FLOAT_PRECISION)
    with open(_out(config, "metrics.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_json(record) + "\n")
    with open(_out(config, "confusion.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cm.to_csv(names))
    with open(_out(config, "metrics.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_table([record]))
    return {"overall_accuracy": record["overall_accuracy"], "kappa": record["kappa"]}


STAGE_FUNCS = {
    "preprocess": stage_preprocess,
    "register": stage_register,
    "octree": stage_octree,
    "evaluate": stage_evaluate,
}


def run_stage(stage, config):
    os.makedirs(config["output_dir"], exist_ok=True)
    try:
        return STAGE_FUNCS[stage](config)
    except Exception as exc:
        raise StageError(stage, exc) from exc


def run_pipeline(config):
    """Run every stage and write ``manifest.json``; returns the manifest."""
    os.makedirs(config["output_dir"], exist_ok=True)
    manifest = {"version": __version__, "config": config, "stages": {}, "partial": False}
    try:
        for stage in STAGES:
            manifest["stages"][stage] = {"status": "ok", "summary": run_stage(stage, config)}
    except StageError as err:
        manifest["stages"][err.stage] = {"status": "failed", "error": str(err.exc)}
        manifest["partial"] = True
        raise
    finally:
        manifest["outputs"] = sorted(
            f for f in os.listdir(config["output_dir"]) if f != "manifest.json"
        )
        _write_json(_out(config, "manifest.json"), manifest)
    return manifest


# synthetic data -------------------------------------------------------------


def run_synth(spec_path, out_dir):
    """Write a source/target/truth cloud triple described by a JSON file.

    The file holds a ``facade`` object (façade spec fields) and optionally
    ``target`` settings: ``density``, ``seed``, ``rotation_deg``,
    ``translation_m``, ``transform_seed``, ``removals``
    (``[[lo, hi], ...]``) and ``additions`` (element objects).
    """
    from .synthetic import Element, FacadeSpec, generate, inject_changes, perturb, random_rotation_transform

    data = _read_json(spec_path)
    if not isinstance(data, dict) or "facade" not in data:
        raise ConfigError("synthetic spec needs a 'facade' object")
    try:
        spec = FacadeSpec.from_dict(data["facade"])
    except (TypeError, DomainError) as exc:
        raise ConfigError(f"invalid façade spec: {exc}") from exc
    tcfg = dict(data.get("target", {}))
    source = generate(spec)
    target_spec = spec.replace(density=tcfg.get("density", spec.density), seed=tcfg.get("seed", spec.seed + 1))
    target = generate(target_spec)
    additions = [Element.from_dict(e) for e in tcfg.get("additions", [])]
    target, truth = inject_changes(
        target, tcfg.get("removals", []), additions,
        density=target_spec.density, noise=target_spec.noise, seed=target_spec.seed + 1,
    )
    T = random_rotation_transform(
        tcfg.get("rotation_deg", 0.0), tcfg.get("translation_m", 0.0), seed=tcfg.get("transform_seed", 0)
    )
    target = perturb(target, T)
    os.makedirs(out_dir, exist_ok=True)
    save_cloud(source, os.path.join(out_dir, "source.ply"))
    save_cloud(target.with_labels(None), os.path.join(out_dir, "target.ply"))
    save_cloud(target, os.path.join(out_dir, "target_truth.ply"))
    info = {
        "source_points": len(source),
        "target_points": len(target),
        "added_points": int(truth.added.sum()),
        "removed_points": int(truth.removed.sum()),
        "transform": T.matrix().tolist(),
    }
    _write_json(os.path.join(out_dir, "synth.json"), info)
    return info


# entry point ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="semoctree", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_run_args(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--source", help="labeled source cloud (.ply/.xyz)")
        p.add_argument("--target", help="unlabeled target cloud")
        p.add_argument("--truth", help="labeled ground truth for the target")
        p.add_argument("--out", dest="output_dir", help="output directory")
        p.add_argument("--max-lat", type=float, help="largest smallest-leaf side in metres")
        p.add_argument("--voxel-size", type=float, help="registration voxel size in metres")
        p.add_argument("--lambda", dest="lam", type=float, help="max correspondence distance in metres")
        p.add_argument("--max-iter", type=int, help="registration iteration cap")
        p.add_argument("--sor-k", type=int, help="outlier-removal neighbours")
        p.add_argument("--sor-sigma", type=float, help="outlier-removal std ratio")
        p.add_argument("--no-sor", action="store_true", help="skip outlier removal")
        p.add_argument("--no-register", action="store_true", help="skip registration")
        p.add_argument("--threads", type=int, help="worker cap for neighbour searches")

    add_run_args(sub.add_parser("pipeline", help="run all stages"))
    for stage in STAGES:
        add_run_args(sub.add_parser(stage, help=f"run the {stage} stage only"))
    synth = sub.add_parser("synth", help="generate a synthetic source/target pair")
    synth.add_argument("--spec", required=True, help="JSON synthetic spec")
    synth.add_argument("--out", required=True, help="output directory")
    return parser


def overrides_from_args(args):
    ov = {}
    for key in ("source", "target", "truth", "output_dir", "threads"):
        if getattr(args, key, None) is not None:
            ov[key] = getattr(args, key)
    reg = {}
    for attr, key in (("voxel_size", "voxel_size"), ("lam", "lambda"), ("max_iter", "max_iterations")):
        if getattr(args, attr) is not None:
            reg[key] = getattr(args, attr)
    if args.no_register:
        reg["enabled"] = False
    sor = {}
    if args.sor_k is not None:
        sor["k"] = args.sor_k
    if args.sor_sigma is not None:
        sor["std_ratio"] = args.sor_sigma
    if args.no_sor:
        sor["enabled"] = False
    if args.max_lat is not None:
        ov["octree"] = {"max_lat": args.max_lat}
    if reg:
        ov["registration"] = reg
    if sor:
        ov["sor"] = sor
    return ov


def _exit_code(exc):
    if isinstance(exc, StageError):
        exc = exc.exc
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, CloudFormatError)):
        return EXIT_IO
    if isinstance(exc, (RegistrationError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValidationMismatch, DomainError)):
        return EXIT_VALIDATION
    return 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "synth":
            info = run_synth(args.spec, args.out)
            print(json.dumps(_round(info, 6)))
            return EXIT_OK
        config = load_config(args.config, overrides_from_args(args))
        if args.command == "pipeline":
            manifest = run_pipeline(config)
            summary = {k: v.get("summary") for k, v in manifest["stages"].items()}
        else:
            summary = run_stage(args.command, config)
        print(json.dumps(_round(summary, 6), sort_keys=True))
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = _exit_code(exc)
        if code == 1:
            raise
        print(f"semoctree: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
