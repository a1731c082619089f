"""Command-line interface: ``hdel {fit,confidence,overid,simulate,ingest-check}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .confidence import build_projected_el, region_contour
from .experiments import (
    NUMERICAL_ERRORS,
    MixedResults,
    ResultStore,
    build_model,
    fit_model,
    format_rows,
    is_overid,
    make_data,
    run_replicates,
    simulate_table,
)
from .io import ingest_csv
from .moments import DataError
from .penalized import bias_correct

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _config(args, **extra):
    return load_config(args.config, seed=args.seed, reps=args.reps, out=args.out, **extra)


def cmd_fit(args) -> int:
    cfg = _config(args)
    model = build_model(cfg)
    data, truth = make_data(cfg, 0)
    fit, info = fit_model(cfg, model, data)
    bc = bias_correct(fit, model, data)
    record = {"config_hash": cfg.hash(), "version": __version__, **info, "fit": fit.to_dict(),
              "support_size": len(fit.support),
              "bias_corrected": {"theta": bc.theta.tolist(), "applied": bc.applied,
                                 "diagnostic": bc.diagnostic}}
    if truth is not None:
        record["true_support"] = list(truth.support)
    _dump(record, Path(cfg.out) / "fit.json")
    print(f"support size {len(fit.support)}; moments selected {len(fit.moment_support)}; "
          f"converged {fit.converged}; wrote {Path(cfg.out) / 'fit.json'}")
    return EXIT_OK


def _write_contour(cfg, model, data) -> Path:
    fit, _ = fit_model(cfg, model, data)
    theta = bias_correct(fit, model, data).theta if cfg.plugin == "bc" else fit.theta
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pel = build_projected_el(model, data, theta, list(cfg.coords), tau=cfg.tau,
                                 auto_relax=cfg.auto_relax)
    center, _ = pel.minimum
    se = pel.standard_errors()
    axes = [np.linspace(c - 6 * s, c + 6 * s, cfg.grid) for c, s in zip(center, se)]
    paths = []
    for level in cfg.levels:
        res = region_contour(pel, 1 - level, axes, cfg.calibration)
        path = Path(cfg.out) / f"contour_{round(level * 100)}.csv"
        res.to_csv(path, [f"theta{k + 1}" for k in cfg.coords])
        paths.append(path)
    return paths


def cmd_confidence(args) -> int:
    cfg = _config(args)
    records = run_replicates(cfg, "confidence", args.threads)
    rows = ResultStore(cfg.out, cfg, "confidence").write(records)
    intervals = [{"coord": iv["coord"], "level": iv["level"], "lo": iv.get("lo"), "hi": iv.get("hi"),
                  "rows": iv["rows"], "calibration": cfg.calibration, **({"error": iv["error"]} if "error" in iv else {})}
                 for iv in records[0]["intervals"]]
    _dump(intervals, Path(cfg.out) / "intervals.json")
    if cfg.contour:
        model = build_model(cfg)
        data, _ = make_data(cfg, 0)
        for path in _write_contour(cfg, model, data):
            print(f"wrote {path}")
    print(format_rows(rows))
    return EXIT_OK


def cmd_overid(args) -> int:
    cfg = _config(args)
    if not is_overid(cfg) and cfg.design != "custom-csv":
        raise ConfigError("design: the over-identification test needs an overid design or custom-csv data")
    records = run_replicates(cfg, "overid", args.threads)
    rows = ResultStore(cfg.out, cfg, "overid").write(records)
    print(format_rows(rows))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.table is None:
        raise ConfigError("table: --table is required for simulate")
    base = load_config(args.config, seed=args.seed, out=args.out)
    rows, _ = simulate_table(args.table, base, args.scale, args.threads, reps=args.reps)
    print(format_rows(rows))
    return EXIT_OK


def cmd_ingest_check(args) -> int:
    data = ingest_csv(args.path, args.layout)
    if data.layout == "flat":
        print(f"flat: n={data.n} width={data.rows.shape[1]}")
    else:
        sizes = sorted(set(data.block_sizes))
        print(f"long: n={data.n} subjects, block sizes {sizes}, p={data.z[0].shape[1]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="config file (key = value or JSON)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--reps", type=int, default=None, help="replications (overrides config)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
        p.add_argument("--out", type=str, default=None, help="output directory (overrides config)")

    for name, fn, helptext in (("fit", cmd_fit, "penalized EL fit with bias correction"),
                               ("confidence", cmd_confidence, "projected-EL intervals and regions"),
                               ("overid", cmd_overid, "over-identification test"),
                               ("simulate", cmd_simulate, "replicate a simulation table")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.set_defaults(func=fn)
        if name == "simulate":
            p.add_argument("--table", type=int, choices=range(1, 6), default=None)
            p.add_argument("--scale", type=float, default=0.5,
                           help="fraction of 1000 replications (default 0.5)")
    p = sub.add_parser("ingest-check", help="validate a CSV data file")
    p.add_argument("path")
    p.add_argument("--layout", choices=("flat", "long"), default="flat")
    p.set_defaults(func=cmd_ingest_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MixedResults) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NUMERICAL_ERRORS as err:
        print(f"numerical failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
