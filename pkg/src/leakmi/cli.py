"""Command-line interface: ``leakmi {synth-gen,mi-estimate,detect,benchmark}``.

Exit codes: 0 success (no leak), 1 error, 2 leak detected.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchConfig, benchmark, rows_to_csv
from .data import Dataset, dataset_to_csv, load_csv
from .detect import APPROACHES, IldConfig, IldDataset, evaluate_ild, run_ild_multi
from .synth import GEN_METHODS, TECHNIQUES, SynthConfig, generate_system, ground_truth_mi

log = logging.getLogger("leakmi")

EXIT_OK, EXIT_ERROR, EXIT_LEAK = 0, 1, 2
OUTPUT_ENV = "LEAKMI_OUTPUT_DIR"
SCHEMA_VERSION = 1
MI_METHODS = ("log-loss", "cal-log-loss", "mid-point", "gmm", "mine", "pc-softmax")


class CliError(Exception):
    """User-facing error; reported without a traceback and exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: {message}")


# -- output helpers ------------------------------------------------------------

def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _default_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "."))


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed config JSON in {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    version = cfg.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise CliError(f"config key 'schema_version': unsupported version {version!r}")
    return cfg


def _merge(config: dict, flags: dict) -> dict:
    """Flag values override the config file; ``None`` means "not given"."""
    out = dict(config)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _ild_config(merged: dict) -> tuple[IldConfig, int]:
    merged = dict(merged)
    seed = int(merged.pop("seed", 0))
    try:
        return IldConfig.from_dict(merged), seed
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid detection config: {exc}") from None


def _read_dataset(path, label_col) -> Dataset:
    if path is None:
        raise CliError("--input is required")
    if not Path(path).exists():
        raise CliError(f"input not found: {path}")
    try:
        col = int(label_col) if label_col is not None and str(label_col).lstrip("-").isdigit() else label_col
        return load_csv(path, -1 if col is None else col)
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot load {path}: {exc}") from None


# -- commands ------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    cfg_file = _load_config(args.config)
    merged = _merge(cfg_file, {
        "technique": args.technique, "gen_method": args.gen_method, "num_classes": args.classes,
        "dims": args.dims, "noise": args.noise, "imbalance": args.imbalance,
        "samples_per_class": args.samples_per_class, "seed": args.seed})
    M = int(merged.get("num_classes", 2))
    r = merged.get("imbalance")
    if r is not None and abs(float(r) - 1.0 / M) < 1e-12:
        r = None
    if merged.get("gen_method") is None:
        merged["gen_method"] = "balanced" if r is None else "minority"
    merged["imbalance"] = r
    try:
        cfg = SynthConfig(**merged)
    except TypeError as exc:
        raise CliError(f"invalid synth config: {exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    data, gt = generate_system(cfg)
    out_dir = Path(args.output) if args.output else _default_dir()
    name = args.name or (f"synth_{cfg.technique}_{cfg.gen_method}_M{cfg.num_classes}_d{cfg.dims}"
                         f"_e{cfg.noise:g}_s{cfg.seed}")
    csv_path = atomic_write(out_dir / f"{name}.csv", dataset_to_csv(data))
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "generator": {k: v for k, v in cfg.__dict__.items()},
        "model": gt.to_dict(),
        "class_counts": data.meta["class_counts"],
        "ground_truth_mi_bits": ground_truth_mi(data, gt),
        "label_column": "y",
    }
    atomic_write(out_dir / f"{name}.json", dumps_json(sidecar))
    print(f"wrote {csv_path} ({data.n_samples} rows), ground-truth MI "
          f"{sidecar['ground_truth_mi_bits']:.4f} bits")
    return EXIT_OK


def cmd_mi_estimate(args) -> int:
    data = _read_dataset(args.input, args.label_col)
    merged = _merge(_load_config(args.config), {
        "calibration": args.calibration, "outer_folds": args.folds, "hpo_budget": args.hpo_budget,
        "seed": args.seed, "n_jobs": args.jobs, "ll_mode": args.ll_mode})
    merged["approach"] = args.method
    merged["n_models"] = 1
    merged.pop("threshold", None)
    cfg, seed = _ild_config(merged)
    t0 = time.time()
    rep = run_ild_multi(data, cfg, [args.method], seed)[args.method]
    values = rep.estimates[0]["values"]
    out = {
        "schema_version": SCHEMA_VERSION,
        "method": args.method,
        "value_bits": float(np.mean(values)),
        "per_fold": values,
        "model": rep.models[0],
        "config": cfg.to_dict(),
        "seed": seed,
        "input": str(args.input),
        "metadata": {"started": t0, "seconds": round(time.time() - t0, 3)},
    }
    text = dumps_json(out)
    if args.output:
        atomic_write(args.output, text)
    print(text, end="")
    return EXIT_OK


def _read_ild(directory: Path, labels_file, label_col) -> tuple[IldDataset, list]:
    labels_file = Path(labels_file) if labels_file else directory / "labels.csv"
    if not labels_file.exists():
        raise CliError(f"labels file not found: {labels_file}")
    systems, names = [], []
    with open(labels_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"file", "z"} <= set(reader.fieldnames):
            raise CliError(f"{labels_file} needs columns 'file' and 'z'")
        for row in reader:
            systems.append((_read_dataset(directory / row["file"], label_col), int(row["z"])))
            names.append(row["file"])
    return IldDataset(tuple(systems)), names


def cmd_detect(args) -> int:
    merged = _merge(_load_config(args.config), {
        "approach": args.approach, "calibration": args.calibration, "alpha": args.alpha,
        "n_models": args.models, "threshold": args.threshold, "outer_folds": args.folds,
        "hpo_budget": args.hpo_budget, "seed": args.seed, "n_jobs": args.jobs,
        "ll_mode": args.ll_mode})
    cfg, seed = _ild_config(merged)
    if args.input and Path(args.input).is_dir():
        ildset, names = _read_ild(Path(args.input), args.labels, args.label_col)
        res = evaluate_ild(ildset, cfg, seed)
        out = {"schema_version": SCHEMA_VERSION, "approach": cfg.approach, "systems": names,
               **{k: res[k] for k in ("accuracy", "fpr", "fnr", "decisions", "truth", "errors")},
               "config": cfg.to_dict(), "seed": seed}
        text = dumps_json(out)
        if args.output:
            atomic_write(args.output, text)
        print(f"{cfg.approach}: accuracy {res['accuracy']:.3f}  fpr {res['fpr']:.3f}  "
              f"fnr {res['fnr']:.3f} over {len(names)} systems")
        return EXIT_OK
    data = _read_dataset(args.input, args.label_col)
    rep = run_ild_multi(data, cfg, [cfg.approach], seed)[cfg.approach]
    rep.metadata["started"] = time.time()
    rep.metadata["input"] = str(args.input)
    if args.output:
        atomic_write(args.output, dumps_json(rep.to_dict()))
    print(rep.summary())
    return EXIT_LEAK if rep.leak else EXIT_OK


def cmd_benchmark(args) -> int:
    cfg_file = _load_config(args.config)
    flags = {"methods": args.methods, "seeds": args.seeds, "n_jobs": args.jobs,
             "base_seed": args.seed, "classes": args.classes, "dims": args.dims,
             "noise": args.noise, "imbalance": args.imbalance, "techniques": args.techniques}
    try:
        cfg = BenchConfig.from_dict(_merge(cfg_file, flags))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid benchmark config: {exc}") from None
    rows, errors = benchmark(cfg, return_errors=True)
    out = Path(args.output) if args.output else _default_dir() / "benchmark.csv"
    atomic_write(out, rows_to_csv(rows))
    print(f"wrote {len(rows)} rows to {out}" + (f" ({len(errors)} failed cells)" if errors else ""))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="leakmi", description="Mutual-information estimation and leakage detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, label=True):
        sp.add_argument("--config", help="JSON config file (flags take precedence)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, help="worker processes")
        if label:
            sp.add_argument("--input", help="CSV file (detect: or a directory of CSVs)")
            sp.add_argument("--label-col", help="label column name or index (default: last)")

    s = sub.add_parser("synth-gen", help="generate a synthetic system dataset")
    s.add_argument("--technique", choices=TECHNIQUES)
    s.add_argument("--gen-method", choices=GEN_METHODS)
    s.add_argument("--classes", type=int)
    s.add_argument("--dims", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--imbalance", type=float)
    s.add_argument("--samples-per-class", type=int)
    s.add_argument("--name", help="output file stem")
    s.add_argument("-o", "--output", help="output directory")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth_gen)

    m = sub.add_parser("mi-estimate", help="estimate MI between features and labels")
    m.add_argument("--method", choices=MI_METHODS, required=True)
    m.add_argument("--calibration")
    m.add_argument("--folds", type=int)
    m.add_argument("--hpo-budget", type=int)
    m.add_argument("--ll-mode", choices=("cross-entropy", "predictive"))
    m.add_argument("-o", "--output", help="JSON output path")
    common(m)
    m.set_defaults(func=cmd_mi_estimate)

    d = sub.add_parser("detect", help="run leakage detection")
    d.add_argument("--approach", choices=APPROACHES)
    d.add_argument("--calibration")
    d.add_argument("--alpha", type=float)
    d.add_argument("--models", type=int, help="number of top models J")
    d.add_argument("--threshold", type=int)
    d.add_argument("--folds", type=int)
    d.add_argument("--hpo-budget", type=int)
    d.add_argument("--ll-mode", choices=("cross-entropy", "predictive"))
    d.add_argument("--labels", help="labels CSV (file,z) for a directory input")
    d.add_argument("-o", "--output", help="JSON report path")
    common(d)
    d.set_defaults(func=cmd_detect)

    b = sub.add_parser("benchmark", help="sweep synthetic systems and score estimators")
    b.add_argument("--methods", nargs="+")
    b.add_argument("--seeds", type=int)
    b.add_argument("--classes", type=int, nargs="+")
    b.add_argument("--dims", type=int, nargs="+")
    b.add_argument("--noise", type=float, nargs="+")
    b.add_argument("--imbalance", type=float, nargs="+")
    b.add_argument("--techniques", nargs="+")
    b.add_argument("-o", "--output", help="CSV output path")
    common(b, label=False)
    b.set_defaults(func=cmd_benchmark)
    return p


def parse_and_dispatch(argv=None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_ERROR
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main(argv=None) -> None:
    sys.exit(parse_and_dispatch(argv))


if __name__ == "__main__":
    main()
