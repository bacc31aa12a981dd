"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or numerical error.  Every
output file starts with a provenance line (package version, seed and a
hash of the run configuration, where input files enter by content hash
so that the same data at another path gives the same hash).  No
timestamps are written, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .density import TABLE_CUTOFFS, DensityError, FIGURE_BANDWIDTH, kde, manipulation_test
from .domain import (THRESHOLD_2_5, THRESHOLD_5, DataError, Dataset, Formula, build_design, mundlak_augment,
                     observed_power, parse_dataset, vote_counts, write_dataset)
from .glmm import SCHEMA_VERSION, ConvergenceError, FittedModel, Independent, ModelSpec, SarNetwork, fit, icc, lr_chibar_test
from .inference import mean_profile, parse_contrast, parse_overrides, predict_probability, probability_difference, scheme_table
from .network import build_adjacency, network_summary, write_edge_list, write_matrix
from .report import SchemaError, coefficient_table, render_report
from .simulate import SimConfig, simulate_dataset

OUT_ENV = "METAREG_OUT"
SUBCOMMANDS = ("ingest", "density-test", "fit", "predict", "simulate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ------------------------------------------------------------- provenance

def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config_hash(args: argparse.Namespace, inputs: Sequence[str]) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func") and k not in inputs}
    for name in inputs:
        value = getattr(args, name, None)
        if value:
            cfg[name] = _file_hash(value)
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Run:
    """Output directory plus the provenance stamped on every file."""

    def __init__(self, args: argparse.Namespace, inputs: Sequence[str] = ()):
        self.out = Path(args.out or os.environ.get(OUT_ENV) or ".")
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = args.seed
        self.provenance = {"tool": "metareg", "version": __version__, "command": args.command,
                           "seed": args.seed, "config_hash": _config_hash(args, inputs)}
        self.written: list[Path] = []

    @property
    def header(self) -> str:
        p = self.provenance
        return f"metareg {p['version']} {p['command']} seed={p['seed']} config={p['config_hash']}"

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, payload: dict[str, Any]) -> Path:
        doc = {"schema_version": SCHEMA_VERSION, "provenance": self.provenance, **payload}
        path = self.path(name)
        path.write_text(json.dumps(doc, indent=2, sort_keys=False, allow_nan=False, default=_jsonable) + "\n",
                        encoding="utf-8")
        self.written.append(path)
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        buf = io.StringIO()
        buf.write(f"# {self.header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
        path = self.path(name)
        path.write_text(buf.getvalue(), encoding="utf-8")
        self.written.append(path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text, encoding="utf-8")
        self.written.append(path)
        return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v)}")


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else f"{float(v):.6f}"
    return str(v)


def _clean(v: Any) -> Any:
    """Replace non-finite floats by None for strict JSON."""
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return float(v) if np.isfinite(v) else None
    return v


# --------------------------------------------------------------- helpers

def _load(args) -> Dataset:
    return parse_dataset(args.estimates, args.studies)


def _matches(dataset: Dataset, e, key: str, value: str) -> bool:
    v = dataset.value(e, key)
    if isinstance(v, str):
        return v == value
    try:
        return float(v) == float(value)
    except ValueError:
        return False


def _filter(dataset: Dataset, spec: str) -> tuple[str, Dataset]:
    pairs = parse_overrides(spec)
    for key in pairs:
        if not dataset.has_covariate(key):
            raise DataError(f"unknown filter covariate {key!r}")
    raw = dict(p.split("=", 1) for p in spec.split(","))
    sub = dataset.subset(lambda e: all(_matches(dataset, e, k.strip(), v.strip()) for k, v in raw.items()))
    return spec, sub


def _split_list(text: str | None) -> list[str]:
    return [s.strip() for s in (text or "").split(",") if s.strip()]


# ------------------------------------------------------------ subcommands

def cmd_ingest(args) -> int:
    run = Run(args, ("estimates", "studies"))
    ds = _load(args)
    t = ds.t_values()
    sig = t[t > THRESHOLD_5]
    power = [observed_power(v, 0.05) for v in sig]
    net = build_adjacency(ds.studies)
    summ = network_summary(net, ds.studies)
    run.write_json("dataset_summary.json", _clean({
        "n_estimates": ds.n, "n_studies": ds.J,
        "prop_t_gt_1645": float(np.mean(t > THRESHOLD_5)), "prop_t_gt_196": float(np.mean(t > THRESHOLD_2_5)),
        "median_observed_power_significant": float(np.median(power)) if power else None,
        "network": {"n_authors": summ.n_authors, "multi_study_authors": summ.multi_study_authors,
                    "n_edges": summ.n_edges, "studies_without_influence": summ.n_no_influence},
    }))
    rows = []
    for cov in args.group_by or []:
        for r in vote_counts(ds, cov):
            rows.append([cov, r.level, r.n, *r.prop_above, r.mean_t, r.sd_t])
    if rows:
        run.write_csv("vote_counts.csv", ["covariate", "level", "n", "prop_t_gt_1645", "prop_t_gt_196",
                                          "mean_t", "sd_t"], rows)
    write_edge_list(net, run.path("network_edges.csv"), header=run.header)
    write_matrix(net, run.path("network_matrix.csv"), header=run.header)
    return 0


def cmd_density(args) -> int:
    if (args.bandwidth_left is None) != (args.bandwidth_right is None):
        raise UsageError("--bandwidth-left and --bandwidth-right must be given together")
    bands = None
    if args.bandwidth_left is not None:
        bands = (args.bandwidth_left, args.bandwidth_right)
    run = Run(args, ("estimates", "studies"))
    ds = _load(args)
    cutoffs = args.cutoff or list(TABLE_CUTOFFS)
    subsets = [("All studies", ds)] + [_filter(ds, f) for f in args.filter or []]
    groups = []
    for label, sub in subsets:
        t = sub.t_values()
        results = []
        for c in cutoffs:
            try:
                res = manipulation_test(t, c, args.order, bands, args.bootstrap, args.seed)
                results.append(_clean(res.to_dict()))
            except DensityError as exc:
                results.append({"cutoff": c, "error": str(exc)})
        groups.append({"label": label, "n": int(t.size), "results": results})
    run.write_json("density_tests.json", {"groups": groups})
    header = ["subgroup", "n"] + [f"{k}_{c:g}" for c in cutoffs for k in ("statistic", "p_value")]
    rows = []
    for g in groups:
        row = [g["label"], g["n"]]
        for r in g["results"]:
            row += [r.get("statistic"), r.get("p_value")]
        rows.append(row)
    run.write_csv("density_tests.csv", header, rows)
    grid = np.linspace(0.0, 3.0, 301)
    t_all = ds.t_values()
    curve = kde(t_all, args.kde_bandwidth, grid)
    run.write_csv("kde.csv", ["t", "density"], list(zip(curve.grid, curve.density)))
    return 0


def _parse_refs(items: Sequence[str] | None) -> dict[str, str]:
    refs = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--reference expects name=level, got {item!r}")
        k, v = item.split("=", 1)
        refs[k.strip()] = v.strip()
    return refs


def cmd_fit(args) -> int:
    run = Run(args, ("estimates", "studies"))
    ds = _load(args)
    covs = _split_list(args.covariates)
    mundlak = _split_list(args.mundlak)
    if mundlak:
        ds = mundlak_augment(ds, mundlak)
        covs += [f"mean_{m}" for m in mundlak]
    formula = Formula(tuple(covs), args.threshold, _parse_refs(args.reference), not args.no_sqrt_n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        design = build_design(ds, formula)
    if args.random == "sar":
        structure = SarNetwork(build_adjacency(ds.studies))
    else:
        structure = Independent()
    model = fit(ModelSpec(design, structure, args.nodes))
    payload: dict[str, Any] = {"model": model.to_dict(), "formula": {
        "covariates": list(formula.covariates), "threshold": formula.threshold,
        "reference_levels": dict(sorted(design.reference_levels.items())), "sqrt_n": formula.sqrt_n}}
    if model.rho is None:
        payload["lr_test"] = lr_chibar_test(model)
        payload["icc"] = icc(model.sigma_u ** 2)
        payload["aic"] = model.aic
    payload["sigma_u_squared"] = model.sigma_u ** 2
    payload["coefficients"] = coefficient_table(model)
    run.write_json("model.json", _clean(payload))
    rows = [[r["part"], r["name"], r["estimate"], r["se"], r["p_value"], r["stars"]] for r in payload["coefficients"]]
    run.write_csv("coefficients.csv", ["part", "name", "estimate", "se", "p_value", "stars"], rows)
    if not model.converged:
        print("warning: optimizer did not converge", file=sys.stderr)
    return 0


def _read_json(path: str) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None


def cmd_predict(args) -> int:
    run = Run(args, ("model", "scheme_file"))
    doc = _read_json(args.model)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{args.model}: unsupported schema version {doc.get('schema_version')!r}")
    model = FittedModel.from_dict(doc["model"])
    scale = args.ci_scale
    contrasts = []
    for spec in args.contrast or []:
        a, b = parse_contrast(spec)
        pa, pb = mean_profile(model, a), mean_profile(model, b)
        res = probability_difference(model, pa, pb, label=spec)
        contrasts.append(res.to_dict())
    schemes = []
    if args.scheme_file:
        spec = _read_json(args.scheme_file)
        items = spec["schemes"] if isinstance(spec, dict) else spec
        base = spec.get("base", {}) if isinstance(spec, dict) else {}
        base = {**base, **parse_overrides(args.base or "")}
        pairs = [(s["name"], s.get("overrides", {})) for s in items]
        if scale == "logit":
            for name, ov in pairs:
                pred = predict_probability(model, mean_profile(model, {**base, **ov}), scale="logit")
                schemes.append({"scheme": name, "p": pred.p, "se": pred.se, "ci_low": pred.ci_low, "ci_high": pred.ci_high})
        else:
            schemes = [dict(r.__dict__) for r in scheme_table(model, pairs, base)]
    baseline = predict_probability(model, mean_profile(model), scale=scale)
    run.write_json("predictions.json", _clean({"baseline": dict(baseline.__dict__), "contrasts": contrasts,
                                                "schemes": schemes, "ci_scale": scale}))
    run.write_csv("contrasts.csv", ["contrast", "difference", "se", "ci_low", "ci_high", "p_a", "p_b"],
                  [[c["label"], c["delta"], c["se"], c["ci_low"], c["ci_high"], c["p_a"], c["p_b"]] for c in contrasts])
    run.write_csv("schemes.csv", ["scheme", "probability", "se", "ci_low", "ci_high"],
                  [[s["scheme"], s["p"], s["se"], s["ci_low"], s["ci_high"]] for s in schemes])
    return 0


def cmd_simulate(args) -> int:
    run = Run(args, ("config",))
    cfg_doc = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_doc["seed"] = args.seed
    config = SimConfig.from_dict(cfg_doc)
    run.seed = config.seed
    run.provenance["seed"] = config.seed
    dataset, truth = simulate_dataset(config)
    write_dataset(dataset, run.path("estimates.csv"), run.path("studies.csv"), header=run.header)
    run.write_json("truth.json", _clean({"config": config.to_dict(), "truth": truth}))
    return 0


def cmd_report(args) -> int:
    run = Run(args, ("model", "density", "predictions"))
    docs = {k: _read_json(getattr(args, k)) if getattr(args, k) else None for k in ("model", "density", "predictions")}
    text = render_report(docs["model"], docs["density"], docs["predictions"], provenance=run.header)
    run.write_text("report.md", text)
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metareg", description="Multilevel logistic meta-regression toolkit.")
    p.add_argument("--version", action="version", version=f"metareg {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        if data:
            sp.add_argument("--estimates", required=True)
            sp.add_argument("--studies", required=True)
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or .)")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("ingest", help="validate data, vote counts and co-authorship network")
    common(sp)
    sp.add_argument("--group-by", action="append")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("density-test", help="density-discontinuity tests at significance cutoffs")
    common(sp)
    sp.add_argument("--cutoff", type=float, action="append")
    sp.add_argument("--order", type=int, default=3)
    sp.add_argument("--bandwidth-left", type=float)
    sp.add_argument("--bandwidth-right", type=float)
    sp.add_argument("--bootstrap", type=int, default=500)
    sp.add_argument("--filter", action="append", help="subgroup filter covariate=value[,covariate=value]")
    sp.add_argument("--kde-bandwidth", type=float, default=FIGURE_BANDWIDTH)
    sp.set_defaults(func=cmd_density)

    sp = sub.add_parser("fit", help="fit the multilevel logit")
    common(sp)
    sp.add_argument("--covariates", default="", help="comma-separated covariate names (a:b for interactions)")
    sp.add_argument("--random", choices=("independent", "sar"), default="independent")
    sp.add_argument("--threshold", type=float, choices=(THRESHOLD_5, THRESHOLD_2_5), default=THRESHOLD_5)
    sp.add_argument("--mundlak", default="", help="estimate-level covariates whose study means are added")
    sp.add_argument("--nodes", type=int, default=15)
    sp.add_argument("--reference", action="append", help="reference level name=level")
    sp.add_argument("--no-sqrt-n", action="store_true", help="omit the centred sqrt(sample size) covariate")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="predicted probabilities and contrasts")
    common(sp, data=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--contrast", action="append", help="a=1,b=x@vs@a=0")
    sp.add_argument("--scheme-file")
    sp.add_argument("--base", help="overrides applied under every scheme")
    sp.add_argument("--ci-scale", choices=("probability", "logit"), default="probability")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("simulate", help="write a synthetic dataset with known truth")
    sp.add_argument("--config")
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", help="render a markdown report from prior JSON outputs")
    sp.add_argument("--model")
    sp.add_argument("--density")
    sp.add_argument("--predictions")
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_report)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage())
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (DataError, DensityError, SchemaError, ConvergenceError, KeyError, ValueError,
            ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"metareg: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
