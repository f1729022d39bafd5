"""Command-line entry point.

Subcommands: ``synth``, ``estimate-grid``, ``compress``, ``augment``,
``train``, ``eval`` and ``inspect-weights``. Every command writes a JSON
report to stdout holding the resolved configuration, the seeds used and the
results; wall-clock figures sit under a ``timing`` key.

Configuration precedence is built-in defaults, then the ``--config`` JSON
file, then explicit flags. The file may hold a top-level ``seed`` and
``jobs`` and one section per component: ``synth``, ``compress``,
``augment`` and ``train``. Unknown sections or keys are rejected.

Seeding: the global ``--seed`` is expanded with ``numpy.random.SeedSequence``
into one seed per stage, ``stage_seed(seed, stage)`` below, so changing the
settings of one stage never shifts the random stream of another.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal error.
Failures print ``{"error": kind, "message": ...}`` as the last stderr line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .augment import AugmentConfig, augment
from .compressor import BatchStats, compress_batch, estimate_grid_spacing
from .core import CsvSchema, export_preview, load_object_csv, read_c2g, read_object_table, write_c2g, write_object_csv
from .errors import C2GError, DataError
from .nn import build_deepcnet, build_deeplnino, load_checkpoint, save_checkpoint
from .synth import SpatialPattern, generate, planted_spec
from .train import Dataset, TrainConfig, evaluate, inspect_first_layer, predict, repeat_runs

log = logging.getLogger("c2gnet")

STAGES = ("synth", "augment", "train")

SYNTH_DEFAULTS = {
    "task": "planted",
    "n_per_class": 10,
    "low": 0.1,
    "high": 0.3,
    "width_um": 672.0,
    "height_um": 504.0,
    "density": 1 / 81.6,
    "pattern": "uniform",
    "clusters": 20,
    "radius_um": 20.0,
}
COMPRESS_DEFAULTS = {"d_um": None, "auto": False, "round_to_int": False, "x": "x_um", "y": "y_um", "props": None,
                     "skip_bad_rows": False}
TOP_LEVEL_KEYS = {"seed", "jobs"}
SECTIONS = {"synth", "compress", "augment", "train"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


REQUIRED = {
    "synth": ("out",),
    "compress": ("out",),
    "augment": ("out",),
    "train": ("out",),
    "eval": ("model_path",),
    "inspect-weights": ("model_path", "out"),
}


def _check_required(args) -> None:
    # checked after parsing so an unknown flag is reported first
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k) is None]
    if missing:
        flags = ["--model" if k == "model_path" else "--" + k for k in missing]
        raise UsageError(f"the following arguments are required: {', '.join(flags)}")


def stage_seed(seed: int, stage: str) -> int:
    """Seed for one pipeline stage, derived from the global seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(STAGES.index(stage),))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a JSON object")
    unknown = set(cfg) - TOP_LEVEL_KEYS - SECTIONS
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, allowed: set[str]) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise DataError(f"config section {name!r} must be an object")
    unknown = set(sec) - allowed
    if unknown:
        raise DataError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return dict(sec)


def _overlay(base: dict, flags: dict) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _flags(args, keys) -> dict:
    return {k: getattr(args, k, None) for k in keys}


AUG_FIELDS = [f for f in fields(AugmentConfig) if f.name != "rng_seed"]


def _add_augment_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("augmentation (mirrors AugmentConfig)")
    for f in AUG_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        if f.name.endswith("_range"):
            g.add_argument(flag, dest="aug_" + f.name, type=float, nargs=2, metavar=("LO", "HI"))
        elif f.name.endswith("_p"):
            g.add_argument(flag, dest="aug_" + f.name, type=float, metavar="P")
        else:
            g.add_argument(flag, dest="aug_" + f.name, type=int)


def resolve_augment(args, cfg: dict) -> AugmentConfig:
    names = {f.name for f in AUG_FIELDS}
    base = _section(cfg, "augment", names | {"rng_seed"})
    base.pop("rng_seed", None)
    flags = {f.name: getattr(args, "aug_" + f.name, None) for f in AUG_FIELDS}
    merged = _overlay(base, flags)
    for k in ("channel_brightness_range", "global_brightness_range"):
        if k in merged:
            merged[k] = tuple(merged[k])
    return AugmentConfig(**merged)


# ---------------------------------------------------------------------------
# inputs


def _expand(paths: Sequence[str], suffix: str) -> list[Path]:
    out: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob(f"*{suffix}")))
        elif p.exists():
            out.append(p)
        else:
            raise DataError(f"input {p} does not exist")
    if not out:
        raise DataError(f"no {suffix} inputs found in {list(paths)}")
    return out


def _load_objects(paths: Sequence[str], conf: dict):
    schema = CsvSchema(conf["x"], conf["y"], tuple(conf["props"]) if conf["props"] else None)
    images, rejected = [], []
    for p in _expand(paths, ".csv"):
        if conf["skip_bad_rows"]:
            img, rej = read_object_table(p, schema)
            rejected += [{"file": p.name, "line": r.line, "reason": r.reason} for r in rej]
        else:
            img = load_object_csv(p, schema)
        images.append((p, img))
    return images, rejected


def _load_grids(paths: Sequence[str]):
    return [(p, read_c2g(p)) for p in _expand(paths, ".c2g")]


def _emit(report: dict, dest: str | None = None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if dest:
        Path(dest).write_text(text + "\n")
    print(text)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg) -> dict:
    conf = _overlay(_section(cfg, "synth", set(SYNTH_DEFAULTS)), _flags(args, SYNTH_DEFAULTS))
    conf = {**SYNTH_DEFAULTS, **conf}
    if conf["task"] not in ("planted", "null"):
        raise DataError(f"task must be 'planted' or 'null', got {conf['task']!r}")
    high = conf["high"] if conf["task"] == "planted" else conf["low"]
    pattern = (SpatialPattern() if conf["pattern"] == "uniform"
               else SpatialPattern(conf["pattern"], conf["clusters"], conf["radius_um"]))
    seed = stage_seed(args.seed, "synth")
    spec = planted_spec(conf["low"], high, width_um=conf["width_um"], height_um=conf["height_um"],
                        density=conf["density"], patterns=(pattern, pattern), seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"ch{c}" for c in range(spec.channels)]
    files = []
    for img in generate(spec, conf["n_per_class"]):
        path = out / f"{img.id}.csv"
        write_object_csv(img, path, names)
        files.append({"file": path.name, "label": img.label, "objects": img.n_objects})
    return {"config": conf, "stage_seed": seed, "images": files}


def cmd_estimate_grid(args, cfg) -> dict:
    conf = {**COMPRESS_DEFAULTS, **_overlay(_section(cfg, "compress", set(COMPRESS_DEFAULTS)),
                                            _flags(args, COMPRESS_DEFAULTS))}
    images, _ = _load_objects(args.inputs, conf)
    stats = BatchStats.from_images([img for _, img in images])
    d = estimate_grid_spacing(stats, round_to_int=bool(conf["round_to_int"]))
    return {
        "config": conf,
        "d_um": d,
        "n_images": stats.n,
        "densities": {img.id: img.density for _, img in images},
    }


def cmd_compress(args, cfg) -> dict:
    conf = {**COMPRESS_DEFAULTS, **_overlay(_section(cfg, "compress", set(COMPRESS_DEFAULTS)),
                                            _flags(args, COMPRESS_DEFAULTS))}
    if (conf["d_um"] is None) == (not conf["auto"]):
        raise UsageError("compress needs exactly one of --d or --auto")
    images, rejected = _load_objects(args.inputs, conf)
    grids, rep = compress_batch([img for _, img in images], d_override=conf["d_um"],
                                round_to_int=bool(conf["round_to_int"]), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (src, _), grid in zip(images, grids):
        write_c2g(grid, out / f"{src.stem}.c2g")
    report = {"config": conf, **rep.to_dict()}
    if rejected:
        report["rejected_rows"] = rejected
    return report


def cmd_augment(args, cfg) -> dict:
    acfg = resolve_augment(args, cfg)
    seed = stage_seed(args.seed, "augment")
    rng = np.random.default_rng(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preview = Path(args.preview) if args.preview else None
    if preview:
        preview.mkdir(parents=True, exist_ok=True)
    written = []
    for path, img in _load_grids(args.inputs):
        cmap = [c % img.spec.channels for c in args.channels]
        if preview:
            export_preview(img, cmap, preview / f"{path.stem}-before.png")
        for k in range(args.copies):
            aug = augment(img, acfg, rng)
            name = f"{path.stem}-aug{k:02d}"
            write_c2g(aug, out / f"{name}.c2g")
            if preview:
                export_preview(aug, cmap, preview / f"{name}-after.png")
            written.append({"file": f"{name}.c2g", "occupied_before": img.n_occupied,
                            "occupied_after": aug.n_occupied})
    return {"config": acfg.to_dict(), "stage_seed": seed, "outputs": written}


TRAIN_FLAGS = ("epochs", "batch_size", "runs", "l1", "target_accuracy", "rho", "eps")


def resolve_train(args, cfg) -> TrainConfig:
    allowed = {f.name for f in fields(TrainConfig)}
    base = _section(cfg, "train", allowed)
    base.pop("augment", None)  # the augment section is the single source for augmentation
    base.pop("seed", None)
    flags = _flags(args, TRAIN_FLAGS)
    if args.class_weights is not None:
        flags["class_weights"] = tuple(args.class_weights)
    if args.train_fraction is not None:
        flags["split"] = (args.train_fraction, 1.0 - args.train_fraction)
    if args.no_oversample:
        flags["oversample"] = False
    if args.same_seed:
        flags["same_seed"] = True
    merged = _overlay(base, flags)
    if args.model == "deepcnet" and "epochs" not in merged:
        merged["epochs"] = 400
    merged["augment"] = None if args.no_augment else resolve_augment(args, cfg)
    merged["seed"] = stage_seed(args.seed, "train")
    for k in ("class_weights", "split"):
        if k in merged:
            merged[k] = tuple(merged[k])
    return TrainConfig(**merged)


def cmd_train(args, cfg) -> dict:
    tcfg = resolve_train(args, cfg)
    grids = [g for _, g in _load_grids(args.inputs)]
    data = Dataset.from_images(grids)
    kx, ky, p = grids[0].spec.shape
    if args.model == "deeplnino":
        spec = build_deeplnino(p, 2, input_plane=(kx, ky), l1=tcfg.l1)
        name, image_type = "C2G-Net", "Cell2Grid"
    else:
        spec = build_deepcnet(args.deepcnet_layers, 32, input_shape=(kx, ky, p))
        name, image_type = "DeepCNet", "Cell2Grid"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, ckpts = repeat_runs(spec, data, tcfg, name, image_type, f"{kx}x{ky}")
    for i, ckpt in enumerate(ckpts):
        save_checkpoint(ckpt, out / f"run-{i:02d}.ckpt")
    (out / "report.txt").write_text(report.to_table() + "\n")
    d = report.to_dict()
    (out / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return {"config": tcfg.to_dict(), "report": d, "checkpoints": [f"run-{i:02d}.ckpt" for i in range(len(ckpts))]}


def cmd_eval(args, cfg) -> dict:
    ckpt = load_checkpoint(args.model_path)
    items = _load_grids(args.inputs)
    grids = [g for _, g in items]
    x = np.stack([g.data for g in grids])
    if x.shape[1:] != ckpt.spec.input_shape:
        raise DataError(f"inputs are {x.shape[1:]}, model expects {ckpt.spec.input_shape}")
    pred = predict(ckpt, x)
    result: dict[str, Any] = {
        "model": str(args.model_path),
        "predictions": {p.stem: int(c) for (p, _), c in zip(items, pred)},
    }
    if all(g.label is not None for g in grids):
        ev = evaluate(ckpt, Dataset.from_images(grids))
        result.update(ev.to_dict())
    return result


def cmd_inspect(args, cfg) -> dict:
    ckpt = load_checkpoint(args.model_path)
    names = args.channel_names.split(",") if args.channel_names else None
    ins = inspect_first_layer(ckpt, args.threshold, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ins.write_csv(out / "first_layer_weights.csv")
    ins.write_heatmap(out / "first_layer_weights.png")
    return {
        "threshold": args.threshold,
        "flagged_filters": ins.flagged,
        "outputs": ["first_layer_weights.csv", "first_layer_weights.png"],
    }


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--jobs", type=int, help="worker processes for batch compression (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--report-file", help="also write the JSON report here")

    parser = _Parser(prog="c2gnet", description="Object-grid image compression and compact CNN training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate labelled synthetic object tables")
    p.add_argument("--out")
    p.add_argument("--task", choices=("planted", "null"))
    p.add_argument("--n-per-class", dest="n_per_class", type=int)
    p.add_argument("--low", type=float, help="share of the channel-0 phenotype in label 0")
    p.add_argument("--high", type=float, help="share of the channel-0 phenotype in label 1")
    p.add_argument("--width-um", dest="width_um", type=float)
    p.add_argument("--height-um", dest="height_um", type=float)
    p.add_argument("--density", type=float, help="objects per square micrometre")
    p.add_argument("--pattern", choices=("uniform", "clustered"))
    p.add_argument("--clusters", type=int)
    p.add_argument("--radius-um", dest="radius_um", type=float)
    p.set_defaults(func=cmd_synth)

    def table_flags(q):
        q.add_argument("inputs", nargs="+", help="object CSV files or directories")
        q.add_argument("--round", dest="round_to_int", action="store_const", const=True,
                       help="round the estimated spacing to whole micrometres")
        q.add_argument("--x-col", dest="x")
        q.add_argument("--y-col", dest="y")
        q.add_argument("--props", type=lambda s: s.split(","), help="comma-separated property columns")
        q.add_argument("--skip-bad-rows", dest="skip_bad_rows", action="store_const", const=True,
                       help="drop invalid rows and list them in the report instead of failing")

    p = sub.add_parser("estimate-grid", parents=[common], help="estimate the grid spacing for a batch")
    table_flags(p)
    p.set_defaults(func=cmd_estimate_grid)

    p = sub.add_parser("compress", parents=[common], help="compress object tables to grid images")
    table_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--d", dest="d_um", type=float, help="grid spacing in micrometres")
    g.add_argument("--auto", action="store_const", const=True, help="estimate the spacing from the batch")
    p.add_argument("--out")
    p.add_argument("--report", choices=("json", "none"), default="json")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("augment", parents=[common], help="write augmented copies of grid images")
    p.add_argument("inputs", nargs="+", help=".c2g files or directories")
    p.add_argument("--out")
    p.add_argument("--copies", type=int, default=1)
    p.add_argument("--preview", help="directory for before/after PNG previews")
    p.add_argument("--channels", type=lambda s: [int(c) for c in s.split(",")], default=[0, 1, 2],
                   help="channels mapped to R,G,B in previews")
    _add_augment_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train repeated runs on labelled grid images")
    p.add_argument("inputs", nargs="+", help=".c2g files or directories")
    p.add_argument("--out")
    p.add_argument("--model", choices=("deeplnino", "deepcnet"), default="deeplnino")
    p.add_argument("--deepcnet-layers", type=int, default=6)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--l1", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--class-weights", dest="class_weights", type=float, nargs=2, metavar=("W0", "W1"))
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--target-accuracy", dest="target_accuracy", type=float,
                   help="stop a run once validation balanced accuracy reaches this")
    p.add_argument("--no-oversample", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--same-seed", action="store_true", help="use one seed for every run")
    _add_augment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on grid images")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--model", dest="model_path", help="checkpoint file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-weights", parents=[common], help="export first-layer weights")
    p.add_argument("--model", dest="model_path", help="checkpoint file")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=0.004)
    p.add_argument("--channel-names", help="comma-separated channel names")
    p.set_defaults(func=cmd_inspect)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _check_required(args)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = load_config(args.config)
        args.seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        args.jobs = args.jobs if args.jobs is not None else int(cfg.get("jobs", 1))
        t0 = time.perf_counter()
        result = args.func(args, cfg)
        report = {"command": args.command, "seed": args.seed, **result}
        report.setdefault("timing", {})["wall_s"] = time.perf_counter() - t0
        log.info("resolved config: %s", json.dumps({k: v for k, v in report.items() if k in ("seed", "config")},
                                                   sort_keys=True, default=_json_default))
        if getattr(args, "report", "json") == "json":
            _emit(report, args.report_file)
        elif args.report_file:
            Path(args.report_file).write_text(json.dumps(report, indent=2, sort_keys=True,
                                                         default=_json_default) + "\n")
        return 0
    except UsageError as e:
        return _fail("usage", str(e), 2)
    except (DataError, C2GError, OSError) as e:
        return _fail(type(e).__name__, str(e), 3)
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail("internal", f"{type(e).__name__}: {e}", 4)
    finally:
        log.removeHandler(handler)


def main() -> None:
    sys.exit(run())
