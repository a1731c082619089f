"""Simulation designs, per-replicate runners, result persistence and table rendering.

Replicate ``b`` of a run with master seed ``s`` draws its data from
``replicate_rng(s, b)`` and its multiplier critical values from
``replicate_seed(s, b)``, so records do not depend on how replicates are
scheduled across workers.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .confidence import EmptyRegion, UnboundedInterval, build_projected_el, confidence_interval
from .el_core import DegenerateMomentError
from .io import ingest_csv
from .moments import (
    TruthSpec,
    compound_symmetry,
    gen_linear,
    gen_overid_mean,
    gen_repeated,
    make_iv_model,
    make_linear_model,
    make_mean_overid_model,
    make_qif_model,
)
from .overid import IllConditioned, run_overid_test
from .penalized import bias_correct, default_grids, ebic_select, fit_penalized_el
from .projection import ProjectionInfeasible
from .reference import TABLE1, TABLE2, TABLE3, TABLE4, TABLE5
from .rng import replicate_rng, replicate_seed

NUMERICAL_ERRORS = (ProjectionInfeasible, EmptyRegion, UnboundedInterval, DegenerateMomentError,
                    IllConditioned, np.linalg.LinAlgError, FloatingPointError)


class MixedResults(RuntimeError):
    """Records from different configurations were about to be combined."""


def qif_basis(m: int = 3) -> list:
    return [np.eye(m), compound_symmetry(m, 0.5)]


def build_model(cfg: ExperimentConfig):
    design = cfg.design
    if design == "example1":
        return make_linear_model(cfg.p)
    if design == "example2":
        return make_qif_model(cfg.p, qif_basis())
    if design.startswith("overid"):
        return make_mean_overid_model(cfg.p)
    kind = cfg.model
    if kind == "linear":
        return make_linear_model(cfg.p)
    if kind == "iv":
        return make_iv_model(cfg.p, cfg.r_value)
    if kind == "qif":
        return make_qif_model(cfg.p, qif_basis())
    return make_mean_overid_model(cfg.p)


def make_data(cfg: ExperimentConfig, b: int):
    """``(data, truth)`` for replicate ``b``; ``truth`` is None for user data."""
    rng = replicate_rng(cfg.seed, b)
    if cfg.design == "example1":
        return gen_linear(cfg.n, cfg.p, rng)
    if cfg.design == "example2":
        return gen_repeated(cfg.n, cfg.p, rng)
    if cfg.design.startswith("overid"):
        case = 1 if cfg.design == "overid_case1" else 2
        theta0 = np.zeros(cfg.p)
        theta0[0] = 5.0
        return gen_overid_mean(cfg.n, cfg.p, case, cfg.a, rng), TruthSpec(theta0)
    return ingest_csv(cfg.data, cfg.layout), None


def fit_model(cfg: ExperimentConfig, model, data):
    """Penalized EL fit with fixed or EBIC-selected tuning; returns ``(fit, info)``."""
    if cfg.tuning == "fixed":
        pi, nu = cfg.tuning_values(data.n, model.p, model.r)
        fit = fit_penalized_el(model, data, pi, nu, p1=cfg.p1, p2=cfg.p2)
        return fit, {"pi": pi, "nu": nu, "tuning": "fixed"}
    pis, nus = default_grids(data.n, model.p, model.r, size=cfg.ebic_size)
    res = ebic_select(model, data, pis, nus, gamma=cfg.ebic_gamma, p1=cfg.p1, p2=cfg.p2,
                      criterion=cfg.ebic_criterion)
    return res.fit, {"pi": res.pi, "nu": res.nu, "tuning": "ebic", "grid_points": res.evaluated,
                     "criterion": res.criterion}


def _plugin(cfg, fit, model, data):
    if cfg.plugin == "bc":
        return bias_correct(fit, model, data).theta
    return fit.theta


def _finite(v):
    return float(v) if math.isfinite(v) else None


def confidence_replicate(cfg: ExperimentConfig, b: int) -> dict:
    """Intervals for every target coordinate and level on replicate ``b``."""
    model = build_model(cfg)
    data, truth = make_data(cfg, b)
    fit, info = fit_model(cfg, model, data)
    theta_star = _plugin(cfg, fit, model, data)
    variants = [False, True] if cfg.two_rows else [False]
    out = []
    for k in cfg.coords:
        for two in variants:
            rows = 2 if two else 1
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    pel = build_projected_el(model, data, theta_star, [k], tau=cfg.tau, two_rows=two,
                                             auto_relax=cfg.auto_relax)
            except NUMERICAL_ERRORS as err:
                out.append({"coord": k, "rows": rows, "error": f"{type(err).__name__}: {err}"})
                continue
            for level in cfg.levels:
                rec = {"coord": k, "rows": rows, "level": level}
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        iv = confidence_interval(pel, 1 - level, cfg.calibration)
                except NUMERICAL_ERRORS as err:
                    rec["error"] = f"{type(err).__name__}: {err}"
                    out.append(rec)
                    continue
                rec.update(lo=_finite(iv.lo), hi=_finite(iv.hi), length=_finite(iv.length))
                if truth is not None and not math.isnan(iv.lo):
                    rec["covered"] = bool(iv.contains(float(truth.theta0[k])))
                out.append(rec)
    return {"b": b, "config_hash": cfg.hash(), **info, "support": list(fit.support),
            "moment_support_size": len(fit.moment_support), "converged": fit.converged,
            "intervals": out}


def overid_replicate(cfg: ExperimentConfig, b: int) -> dict:
    model = build_model(cfg)
    data, _ = make_data(cfg, b)
    fit, info = fit_model(cfg, model, data)
    modes = ["Rn", "all"] if cfg.test_mode == "both" else [cfg.test_mode]
    tests = []
    for mode in modes:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = run_overid_test(model, data, fit, alpha=cfg.alpha, mode=mode, M=cfg.M,
                                      seed=replicate_seed(cfg.seed, b))
        except NUMERICAL_ERRORS as err:
            tests.append({"mode": mode, "error": f"{type(err).__name__}: {err}"})
            continue
        d = res.to_dict()
        tests.append({"mode": mode, "T_n": d["T_n"], "cv": d["cv"], "p_value": d["p_value"],
                      "reject": d["reject"], "q": len(d["J"]), "R_n_size": len(d["R_n"])})
    return {"b": b, "config_hash": cfg.hash(), **info, "support": list(fit.support), "tests": tests}


def is_overid(cfg: ExperimentConfig) -> bool:
    return cfg.design.startswith("overid") or (cfg.design == "custom-csv" and cfg.model == "mean_overid")


def run_replicates(cfg: ExperimentConfig, kind: str, threads: int = 1) -> list:
    """All ``cfg.reps`` records in replicate order; identical for any ``threads``."""
    fn = confidence_replicate if kind == "confidence" else overid_replicate
    job = partial(fn, cfg)
    if threads <= 1 or cfg.reps == 1:
        return [job(b) for b in range(cfg.reps)]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(job, range(cfg.reps), chunksize=1))


def aggregate(records: list, kind: str) -> list:
    """Aggregate rows (dicts) recomputed purely from the per-replicate records."""
    rows = []
    if kind == "confidence":
        groups = {}
        for rec in records:
            for iv in rec["intervals"]:
                if "level" not in iv:
                    continue
                groups.setdefault((iv["rows"], iv["coord"], iv["level"]), []).append(iv)
        for (nrows, coord, level), items in sorted(groups.items()):
            ok = [it for it in items if "error" not in it]
            cov = [it["covered"] for it in ok if "covered" in it]
            lens = [it["length"] for it in ok if it.get("length") is not None]
            rows.append({"rows": nrows, "coord": coord, "level": level, "n_ok": len(ok),
                         "n_failed": len(items) - len(ok),
                         "coverage_pct": 100.0 * sum(cov) / len(cov) if cov else None,
                         "mean_length": sum(lens) / len(lens) if lens else None})
        return rows
    groups = {}
    for rec in records:
        for t in rec["tests"]:
            groups.setdefault(t["mode"], []).append(t)
    for mode, items in sorted(groups.items()):
        ok = [t for t in items if "error" not in t]
        rows.append({"mode": mode, "n_ok": len(ok), "n_failed": len(items) - len(ok),
                     "rejection_rate": sum(t["reject"] for t in ok) / len(ok) if ok else None})
    return rows


def _csv_text(rows: list) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


class ResultStore:
    """Per-replicate JSONL records, an aggregate CSV and a manifest carrying the config hash."""

    def __init__(self, out_dir, cfg: ExperimentConfig, kind: str):
        self.dir = Path(out_dir)
        self.cfg = cfg
        self.kind = kind

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def write(self, records: list) -> list:
        h = self.cfg.hash()
        if any(rec.get("config_hash") != h for rec in records):
            raise MixedResults("records carry a different config hash")
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            if old.get("config_hash") != h:
                raise MixedResults(f"{self.dir} holds results of config {old.get('config_hash')}, not {h}")
        self.dir.mkdir(parents=True, exist_ok=True)
        rows = aggregate(records, self.kind)
        (self.dir / "records.jsonl").write_text(
            "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records))
        (self.dir / "aggregate.csv").write_text(f"# config_hash={h}\n" + _csv_text(rows))
        manifest = {"config_hash": h, "version": __version__, "kind": self.kind,
                    "replicates": len(records), "config": self.cfg.to_dict()}
        self.manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return rows

    @staticmethod
    def load(out_dir):
        """``(manifest, records)``; refuses records whose hash differs from the manifest."""
        out_dir = Path(out_dir)
        manifest = json.loads((out_dir / "manifest.json").read_text())
        records = [json.loads(line) for line in (out_dir / "records.jsonl").read_text().splitlines()]
        bad = [rec["b"] for rec in records if rec.get("config_hash") != manifest["config_hash"]]
        if bad:
            raise MixedResults(f"records {bad[:5]} do not match config {manifest['config_hash']}")
        return manifest, records


# ---------------------------------------------------------------- paper tables

TABLE_DESIGNS = {
    1: dict(design="example1", n=50, p=100, coords=tuple(range(10)), levels=(0.90, 0.95, 0.99)),
    2: dict(design="example1", n=50, p=100, coords=tuple(range(10)), levels=(0.95,)),
    3: dict(design="example2", n=50, p=100, coords=tuple(range(5)), levels=(0.90, 0.95, 0.99)),
    4: dict(design="example2", n=50, p=100, coords=tuple(range(5)), levels=(0.95,), two_rows=True),
}


def table_configs(table: int, base: ExperimentConfig, reps: int) -> list:
    """``(label, config)`` pairs needed to render a table."""
    if table in TABLE_DESIGNS:
        return [(f"table{table}", replace(base, reps=reps, **TABLE_DESIGNS[table]))]
    if table != 5:
        raise ConfigError(f"table: unknown table id {table}")
    out = []
    for case, a, n, p in TABLE5:
        design = "overid_case1" if case == 1 else "overid_case2"
        label = f"case{case}_a{a}_n{n}_p{p}"
        out.append((label, replace(base, reps=reps, design=design, a=a, n=n, p=p, coords=(0,),
                                   test_mode="both", alpha=0.05)))
    return out


def _fmt(v, digits):
    return "" if v is None else f"{v:.{digits}f}"


def render_table(table: int, results: dict) -> list:
    """Rows in the published layout plus a mean-absolute-difference column against the paper."""
    rows = []
    if table in (1, 3):
        ref = (TABLE1[(50, 100, 100)] if table == 1 else TABLE3[(50, 100, 200)])
        agg = results[f"table{table}"]
        coords = TABLE_DESIGNS[table]["coords"]
        for level in TABLE_DESIGNS[table]["levels"]:
            ours = [next((a["coverage_pct"] for a in agg if a["rows"] == 1 and a["coord"] == k
                          and abs(a["level"] - level) < 1e-12), None) for k in coords]
            paper = ref[round(level * 100)]
            diffs = [abs(o - q) for o, q in zip(ours, paper) if o is not None]
            row = {"level": f"{round(level * 100)}%"}
            row.update({f"theta{k + 1}": _fmt(o, 1) for k, o in zip(coords, ours)})
            row["mean_abs_diff"] = _fmt(sum(diffs) / len(diffs) if diffs else None, 2)
            rows.append(row)
        return rows
    if table == 2:
        agg = results["table2"]
        ours = [next((a["mean_length"] for a in agg if a["rows"] == 1 and a["coord"] == k), None)
                for k in range(10)]
        paper = TABLE2[(50, 100, 100)]
        diffs = [abs(o - q) for o, q in zip(ours, paper) if o is not None]
        row = {"method": "EL"}
        row.update({f"theta{k + 1}": _fmt(o, 3) for k, o in enumerate(ours)})
        row["mean_abs_diff"] = _fmt(sum(diffs) / len(diffs) if diffs else None, 3)
        return [row]
    if table == 4:
        agg = results["table4"]
        for nrows, name, key in ((1, "One estimating equation", "one"), (2, "Two estimating equations", "two")):
            ours = [next((a["mean_length"] for a in agg if a["rows"] == nrows and a["coord"] == k), None)
                    for k in range(5)]
            paper = TABLE4[(50, 100, 200)][key]
            diffs = [abs(o - q) for o, q in zip(ours, paper) if o is not None]
            row = {"method": name}
            row.update({f"theta{k + 1}": _fmt(o, 3) for k, o in enumerate(ours)})
            row["mean_abs_diff"] = _fmt(sum(diffs) / len(diffs) if diffs else None, 3)
            rows.append(row)
        return rows
    for (case, a, n, p), (ref1, ref2) in TABLE5.items():
        agg = {r["mode"]: r["rejection_rate"] for r in results[f"case{case}_a{a}_n{n}_p{p}"]}
        sigma = "5^2" if case == 1 else f"5^2 x {a}"
        m1, m2 = agg.get("Rn"), agg.get("all")
        rows.append({"case": case, "sigma11": sigma, "(n,p)": f"({n},{p})",
                     "method1": _fmt(m1, 3), "method2": _fmt(m2, 3),
                     "paper1": f"{ref1:.3f}", "paper2": f"{ref2:.3f}",
                     "diff1": _fmt(None if m1 is None else m1 - ref1, 3),
                     "diff2": _fmt(None if m2 is None else m2 - ref2, 3)})
    return rows


def format_rows(rows: list) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    width = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.rjust(width[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).rjust(width[c]) for c in cols) for r in rows]
    return "\n".join(lines)


def simulate_table(table: int, base: ExperimentConfig, scale: float = 0.5, threads: int = 1,
                   reps: int = None) -> tuple:
    """Run every design point of a table, persist each, and render the table."""
    if not 0 < scale <= 1:
        raise ConfigError("scale: must lie in (0, 1]")
    reps = reps if reps is not None else max(1, round(1000 * scale))
    results = {}
    for label, cfg in table_configs(table, base, reps):
        kind = "overid" if is_overid(cfg) else "confidence"
        records = run_replicates(cfg, kind, threads)
        results[label] = ResultStore(Path(base.out) / label, cfg, kind).write(records)
    rows = render_table(table, results)
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"table{table}.csv").write_text(_csv_text(rows))
    return rows, results
