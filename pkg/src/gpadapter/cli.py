"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error (including missing
files), 3 numeric breakdown or training failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .adapter import AdapterConfig
from .data import SynthConfig, read_dataset, read_two_column_csv, read_ucr, subsample, synthesize, write_dataset
from .errors import GPAdapterError, InvalidArgumentError, NumericBreakdownError, TrainingFailureError
from .experiments import GRID, ApproxErrorConfig, TimingConfig, approx_error_rows, grid_rows, timing_rows
from .training import HISTORY_FIELDS, Artifacts, ClassifierSpec, Dataset, TrainConfig, evaluate, train

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("gpadapter")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# flag name -> config key, shared by the subcommands that accept it
COMMON_FLAGS = {
    "m": ("--m", int, "number of inducing points"),
    "k": ("--k", int, "Lanczos steps"),
    "samples": ("--samples", int, "Monte Carlo samples S per series"),
    "d": ("--d", int, "number of reference times"),
    "framework": ("--framework", str, "uac or imp"),
    "regime": ("--regime", str, "end_to_end or two_stage"),
    "classifier": ("--classifier", str, "logreg, mlp, convnet or meg"),
    "seed": ("--seed", int, "random seed"),
    "lr": ("--lr", float, "learning rate"),
    "epochs": ("--epochs", int, "training epochs"),
}


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    """Flat key-value config from a JSON or TOML file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a key-value table")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicitly given flags."""
    out = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = load_config(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        out.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _add_flags(parser, names):
    for name in names:
        flag, typ, help_ = COMMON_FLAGS[name]
        parser.add_argument(flag, dest=name, type=typ, default=None, help=help_)


def _write_csv(path, header, rows):
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    finally:
        if out is not sys.stdout:
            out.close()


def _dump_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _progress(msg):
    log.info(msg)


# ---------------------------------------------------------------- commands


SYNTH_DEFAULTS = {f.name: f.default for f in fields(SynthConfig)}


def cmd_synth(args):
    cfg = resolve(SYNTH_DEFAULTS, args)
    dataset = synthesize(SynthConfig(**cfg))
    write_dataset(args.out, dataset)


def cmd_subsample(args):
    cfg = resolve({"fraction": 0.1, "seed": 0}, args)
    dataset = subsample(read_dataset(args.input), float(cfg["fraction"]), int(cfg["seed"]))
    write_dataset(args.out, dataset)


def cmd_convert(args):
    series = []
    for item in args.files:
        path, sep, label = item.rpartition(":")
        if not sep or not path:
            raise UsageError(f"expected FILE:LABEL, got {item!r}")
        series.append(read_two_column_csv(path, int(label)))
    T = args.T if args.T is not None else max(float(s.times[-1]) for s in series)
    classes = args.classes if args.classes is not None else max(s.label for s in series) + 1
    write_dataset(args.out, Dataset(series, T, classes))


def cmd_import_ucr(args):
    write_dataset(args.out, read_ucr(args.files, T=args.T))


APPROX_DEFAULTS = {f.name: f.default for f in fields(ApproxErrorConfig)}


def _tuple_cfg(cfg):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}


def cmd_approx_error(args):
    cfg = resolve(APPROX_DEFAULTS, args)
    if args.m is not None:
        cfg["m_values"] = (args.m,)
    if args.k is not None:
        cfg["k_values"] = (args.k,)
    rows = approx_error_rows(ApproxErrorConfig(**_tuple_cfg(cfg)), _progress)
    _write_csv(args.out, ("sweep", "n", "m", "k", "error"), rows)


TIMING_DEFAULTS = {f.name: f.default for f in fields(TimingConfig)}


def cmd_timing(args):
    cfg = resolve(TIMING_DEFAULTS, args)
    rows = timing_rows(TimingConfig(**_tuple_cfg(cfg)), _progress)
    _write_csv(args.out, ("method", "n", "seconds"), rows)


TRAIN_DEFAULTS = {
    "data": None,
    "test": None,
    "classifier": "logreg",
    "framework": "uac",
    "regime": "end_to_end",
    "mode": "ski",
    "d": 254,
    "m": 256,
    "k": 5,
    "samples": 10,
    "seed": 0,
    "lr": 1e-2,
    "momentum": 0.9,
    "epochs": 50,
    "patience": 10,
    "hidden": 256,
    "meg_features": 1000,
    "ml_epochs": 10,
    "grid": False,
}


def _train_setup(cfg, T):
    adapter_cfg = AdapterConfig(
        T=T, d=int(cfg["d"]), m=int(cfg["m"]), k=int(cfg["k"]), S=int(cfg["samples"]),
        mode=cfg["mode"], framework=cfg["framework"], seed=int(cfg["seed"]),
    )
    train_cfg = TrainConfig(
        learning_rate=float(cfg["lr"]), momentum=float(cfg["momentum"]), epochs=int(cfg["epochs"]),
        early_stop_patience=int(cfg["patience"]), regime=cfg["regime"], framework=cfg["framework"],
        seed=int(cfg["seed"]), ml_epochs=int(cfg["ml_epochs"]),
    )
    return adapter_cfg, train_cfg


def cmd_train(args):
    cfg = resolve(TRAIN_DEFAULTS, args)
    if cfg["data"] is None:
        raise UsageError("a training dataset is required (--data or config key 'data')")
    dataset = read_dataset(cfg["data"])
    test = read_dataset(cfg["test"]) if cfg["test"] else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adapter_cfg, train_cfg = _train_setup(cfg, dataset.T)
    _dump_json(out / "config.json", cfg)

    if cfg["grid"]:
        if test is None:
            raise UsageError("--grid needs a test dataset")
        rows = grid_rows(dataset, test, adapter_cfg, train_cfg, GRID, int(cfg["hidden"]), int(cfg["meg_features"]), _progress)
        _write_csv(out / "grid.csv", ("classifier", "framework", "regime", "test_accuracy", "best_val_accuracy"), rows)
        return

    spec = ClassifierSpec(cfg["classifier"], hidden=int(cfg["hidden"]), meg_features=int(cfg["meg_features"]))
    artifacts, history = train(dataset, adapter_cfg, spec, train_cfg)
    artifacts.save(out / "artifacts.json")
    _write_csv(out / "history.csv", HISTORY_FIELDS, ([h[f] for f in HISTORY_FIELDS] for h in history))
    if test is not None:
        _dump_json(out / "metrics.json", evaluate(test, artifacts))


def cmd_eval(args):
    artifacts = Artifacts.load(args.artifacts)
    metrics = evaluate(read_dataset(args.data), artifacts)
    if args.out:
        _dump_json(args.out, metrics)
    else:
        json.dump(metrics, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpadapter", description="GP adapters for irregular time series classification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="sample a synthetic dataset from a GP prior")
    p.add_argument("--config")
    p.add_argument("--n-series", dest="N", type=int)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--T", dest="T", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--class-mode", dest="class_mode", choices=("none", "template", "kernel"))
    p.add_argument("--amplitude", type=float)
    p.add_argument("--inv-length", dest="inv_length", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--template-amp", dest="template_amp", type=float)
    _add_flags(p, ["seed"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("subsample", help="keep a random fraction of each series")
    p.add_argument("input")
    p.add_argument("--config")
    p.add_argument("--fraction", type=float)
    _add_flags(p, ["seed"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("convert", help="build a dataset from two-column time,value CSV files")
    p.add_argument("files", nargs="+", metavar="FILE:LABEL")
    p.add_argument("--T", dest="T", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("import-ucr", help="import whitespace/comma separated archive files (label first)")
    p.add_argument("files", nargs="+")
    p.add_argument("--T", dest="T", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_ucr)

    p = sub.add_parser("approx-error", help="SKI + Lanczos sample error sweeps over m and k")
    p.add_argument("--config")
    _add_flags(p, ["m", "k", "seed"])
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_approx_error)

    p = sub.add_parser("timing", help="exact vs Lanczos sampling and gradient timings")
    p.add_argument("--config")
    _add_flags(p, ["m", "k", "seed"])
    p.add_argument("--reps", type=int)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("train", help="train a classifier (or the full grid) on a dataset file")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--mode", choices=("ski", "exact"))
    _add_flags(p, list(COMMON_FLAGS))
    p.add_argument("--grid", action="store_const", const=True, default=None, help="run all classifier/framework/regime cells")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved artifacts on a dataset file")
    p.add_argument("artifacts")
    p.add_argument("data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gpadapter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (NumericBreakdownError, TrainingFailureError) as exc:
        print(f"gpadapter: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, InvalidArgumentError, FileNotFoundError, IsADirectoryError, TypeError, ValueError) as exc:
        print(f"gpadapter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GPAdapterError as exc:
        print(f"gpadapter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
