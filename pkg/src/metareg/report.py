"""Markdown rendering of fitted models, density tests and contrasts.

Inputs are the JSON documents written by the ``fit``, ``density-test``
and ``predict`` subcommands.  Every document carries ``schema_version``;
a mismatch is an error rather than a best-effort render.
"""

from __future__ import annotations

import math
from typing import Any, Sequence

import numpy as np

from .glmm import SCHEMA_VERSION, FittedModel, icc, significance_stars


class SchemaError(ValueError):
    pass


def check_schema(doc: dict[str, Any] | None, what: str) -> None:
    if doc is None:
        return
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{what}: schema version {version!r}, expected {SCHEMA_VERSION}")


def _num(v: float | None, digits: int = 3) -> str:
    if v is None or not math.isfinite(v):
        return "-"
    return f"{v:,.{digits}f}"


def _coef_rows(model: FittedModel) -> tuple[list[tuple[str, str, str]], list[tuple[str, str, str]]]:
    se = model.se
    pvals = model.wald_pvalues()
    p = len(model.beta)
    fixed = [(name, _num(model.beta[i]) + significance_stars(pvals[i]), _num(se[i]))
             for i, name in enumerate(model.column_names)]
    random = []
    if model.boundary:
        random.append(("σ_u", "0.000 (boundary)", "-"))
    else:
        random.append(("σ_u", _num(model.sigma_u) + significance_stars(pvals[p]), _num(se[p])))
    random.append(("σ_u²", _num(model.sigma_u ** 2), "-"))
    if model.rho is not None:
        random.append(("ρ", _num(model.rho) + significance_stars(pvals[p + 1]), _num(se[p + 1])))
    return fixed, random


def coefficient_table(model: FittedModel) -> list[dict[str, Any]]:
    """Rows of the coefficient table in reporting order (fixed part, then random part)."""
    se = model.se
    pvals = model.wald_pvalues()
    rows = []
    for i, name in enumerate(model.param_names):
        part = "fixed" if i < len(model.beta) else "random"
        est = float(model.params[i])
        rows.append({"part": part, "name": name, "estimate": est,
                     "se": None if not np.isfinite(se[i]) else float(se[i]),
                     "p_value": None if not np.isfinite(pvals[i]) else float(pvals[i]),
                     "stars": significance_stars(pvals[i])})
    return rows


def _table(header: Sequence[str], rows: Sequence[Sequence[str]], align: str | None = None) -> list[str]:
    align = align or "l" + "r" * (len(header) - 1)
    sep = ["---:" if a == "r" else "---" for a in align]
    lines = ["| " + " | ".join(header) + " |", "| " + " | ".join(sep) + " |"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def render_model(doc: dict[str, Any]) -> list[str]:
    check_schema(doc, "model")
    model = FittedModel.from_dict(doc["model"])
    fixed, random = _coef_rows(model)
    thr = model.threshold
    label = "independent" if model.rho is None else "SAR co-authorship"
    outcome = "logit(Pr(t > threshold))" if thr is None else f"logit(Pr(t > {thr:g}))"
    out = ["## Estimated model coefficients", "",
           f"Outcome: {outcome}; study random coefficients: {label}.", ""]
    rows = [["**Fixed part**", "", ""], *map(list, fixed), ["**Random part**", "", ""], *map(list, random)]
    if model.rho is None and model.marginal_loglik is not None:
        lr = doc.get("lr_test") or {}
        if lr:
            rows.append(["LR test vs. marginal model (chi-bar)",
                         _num(lr["lr"], 2) + significance_stars(lr["p_value"]), "-"])
        rows.append(["Intraclass correlation", _num(icc(model.sigma_u ** 2)), "-"])
    else:
        rows.append(["LR test vs. marginal model (chi-bar)", "-", "-"])
    rows.append(["Observations", f"{model.n_obs:,}", ""])
    rows.append(["Studies", f"{model.n_studies:,}", ""])
    rows.append(["AIC", _num(model.aic, 1) if model.rho is None else "-", ""])
    rows.append(["Log likelihood", _num(model.loglik, 1), ""])
    out += _table(["", "Coefficient", "S.E."], rows)
    out += ["", "\\* p<0.10; \\*\\* p<0.05; \\*\\*\\* p<0.01"]
    if not model.converged:
        out += ["", "**Warning:** the optimizer did not converge."]
    if not model.hessian_pd:
        out += ["", "**Warning:** Hessian not positive definite; standard errors unreliable."]
    return out


def render_density(doc: dict[str, Any]) -> list[str]:
    check_schema(doc, "density")
    groups = doc.get("groups") or []
    if not groups:
        return []
    cutoffs = [r["cutoff"] for r in groups[0]["results"]]
    header = ["Estimates from"]
    for c in cutoffs:
        header += [f"stat. (t = {c:g})", "p-value"]
    rows = []
    for g in groups:
        row = [f"{g['label']} (n={g['n']})"]
        for r in g["results"]:
            if r.get("error"):
                row += ["n/a", "n/a"]
            else:
                row += [_num(r["statistic"]) + significance_stars(r["p_value"]), _num(r["p_value"])]
        rows.append(row)
    return (["## Manipulation tests based on density discontinuity", ""] + _table(header, rows)
            + ["", "\\* p<0.10; \\*\\* p<0.05; \\*\\*\\* p<0.01"])


def render_predictions(doc: dict[str, Any]) -> list[str]:
    check_schema(doc, "predictions")
    out: list[str] = []
    contrasts = doc.get("contrasts") or []
    if contrasts:
        rows = [[c["label"], _num(c["delta"]), _num(c["ci_low"]), _num(c["ci_high"]), _num(c["p_a"]), _num(c["p_b"])]
                for c in contrasts]
        out += ["## Predicted probability differences", ""]
        out += _table(["Contrast", "Difference", "95% CI low", "95% CI high", "P(a)", "P(b)"], rows)
        out.append("")
    schemes = doc.get("schemes") or []
    if schemes:
        rows = [[s["scheme"], _num(s["p"]), _num(s["ci_low"]), _num(s["ci_high"])] for s in schemes]
        out += ["## Predicted probabilities by scheme", ""]
        out += _table(["Scheme", "Probability", "95% CI low", "95% CI high"], rows)
        out.append("")
    return out[:-1] if out else out


def render_report(model: dict[str, Any] | None = None, density: dict[str, Any] | None = None,
                  predictions: dict[str, Any] | None = None, provenance: str | None = None) -> str:
    """Assemble the markdown report; absent or empty sections are omitted."""
    for doc, what in ((model, "model"), (density, "density"), (predictions, "predictions")):
        check_schema(doc, what)
    parts = ["# Meta-regression report"]
    if provenance:
        parts += ["", f"<!-- {provenance} -->"]
    for doc, render in ((model, render_model), (density, render_density), (predictions, render_predictions)):
        if doc is None:
            continue
        lines = render(doc)
        if lines:
            parts += [""] + lines
    return "\n".join(parts) + "\n"
