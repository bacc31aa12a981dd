"""Predicted probabilities and probability contrasts with delta-method intervals.

Predictions fix the study effect at its mean of zero.  Covariates not
set explicitly sit at their estimate-level means, except the centred
square root of sample size which is set to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .domain import INTERCEPT, SQRT_N, DesignMatrix
from .glmm import FittedModel

Override = float | str


@dataclass(frozen=True)
class CovariateProfile:
    column_names: tuple[str, ...]
    values: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.column_names, map(float, self.values)))


@dataclass(frozen=True)
class Prediction:
    p: float
    se: float
    ci_low: float
    ci_high: float
    level: float = 0.95


@dataclass(frozen=True)
class ContrastResult:
    delta: float
    se: float
    ci_low: float
    ci_high: float
    p_a: float
    p_b: float
    level: float = 0.95
    label: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _source(source: DesignMatrix | FittedModel):
    cats, refs = dict(source.categorical_columns), dict(source.reference_levels)
    if isinstance(source, DesignMatrix):
        return source.column_names, source.column_means(), cats, refs
    if source.column_means is None:
        raise ValueError("fitted model carries no column means")
    return source.column_names, np.asarray(source.column_means, dtype=float), cats, refs


def mean_profile(source: DesignMatrix | FittedModel,
                 overrides: Mapping[str, Override] | None = None) -> CovariateProfile:
    """Covariate profile at the column means with ``sqrt_n = 0``.

    An override key is either a design column (numeric value) or the name
    of a categorical covariate with a level as value; the latter zeroes
    the covariate's indicator columns and sets the chosen one to 1.
    """
    names, means, cats, refs = _source(source)
    values = means.copy()
    index = {c: i for i, c in enumerate(names)}
    if INTERCEPT in index:
        values[index[INTERCEPT]] = 1.0
    if SQRT_N in index:
        values[index[SQRT_N]] = 0.0
    by_var: dict[str, dict[str, str]] = {}
    for col, (var, level) in cats.items():
        by_var.setdefault(var, {})[level] = col
    for key, val in (overrides or {}).items():
        if key in index and not isinstance(val, str):
            values[index[key]] = float(val)
        elif key in by_var:
            level = str(val)
            for col in by_var[key].values():
                values[index[col]] = 0.0
            if level in by_var[key]:
                values[index[by_var[key][level]]] = 1.0
            elif level != refs.get(key):
                raise KeyError(f"unknown level {level!r} of {key!r}")
        else:
            raise KeyError(f"unknown profile column {key!r}")
    return CovariateProfile(tuple(names), values)


def _check(fitted: FittedModel, profile: CovariateProfile) -> np.ndarray:
    if tuple(profile.column_names) != tuple(fitted.column_names):
        raise ValueError("profile columns do not match the fitted model's design")
    return np.asarray(profile.values, dtype=float)


def _z(level: float) -> float:
    return float(stats.norm.isf((1 - level) / 2))


def predict_probability(fitted: FittedModel, profile: CovariateProfile, level: float = 0.95,
                        scale: str = "probability") -> Prediction:
    """P(y = 1) at ``profile`` with ``u = 0``.

    ``scale="logit"`` builds the interval on the linear predictor and maps
    it back, which keeps it inside (0, 1) without clamping.
    """
    x = _check(fitted, profile)
    V = np.nan_to_num(fitted.vcov_beta)
    eta = float(x @ fitted.beta)
    p = float(expit(eta))
    z = _z(level)
    if scale == "logit":
        se_eta = float(np.sqrt(max(x @ V @ x, 0.0)))
        return Prediction(p, p * (1 - p) * se_eta, float(expit(eta - z * se_eta)), float(expit(eta + z * se_eta)), level)
    if scale != "probability":
        raise ValueError(f"unknown scale {scale!r}")
    grad = p * (1 - p) * x
    se = float(np.sqrt(max(grad @ V @ grad, 0.0)))
    return Prediction(p, se, max(0.0, p - z * se), min(1.0, p + z * se), level)


def probability_difference(fitted: FittedModel, profile_a: CovariateProfile, profile_b: CovariateProfile,
                           level: float = 0.95, label: str = "") -> ContrastResult:
    xa, xb = _check(fitted, profile_a), _check(fitted, profile_b)
    V = np.nan_to_num(fitted.vcov_beta)
    pa, pb = float(expit(xa @ fitted.beta)), float(expit(xb @ fitted.beta))
    grad = pa * (1 - pa) * xa - pb * (1 - pb) * xb
    se = float(np.sqrt(max(grad @ V @ grad, 0.0)))
    delta = pa - pb
    z = _z(level)
    return ContrastResult(delta, se, max(-1.0, delta - z * se), min(1.0, delta + z * se), pa, pb, level, label)


@dataclass(frozen=True)
class SchemeRow:
    scheme: str
    p: float
    se: float
    ci_low: float
    ci_high: float


def scheme_table(fitted: FittedModel, schemes: Sequence[tuple[str, Mapping[str, Override]]] | Mapping[str, Mapping[str, Override]],
                 base_overrides: Mapping[str, Override] | None = None, level: float = 0.95) -> list[SchemeRow]:
    """One prediction per named scheme; scheme overrides are applied over ``base_overrides``."""
    items = schemes.items() if isinstance(schemes, Mapping) else schemes
    rows = []
    for name, overrides in items:
        profile = mean_profile(fitted, {**(base_overrides or {}), **overrides})
        pred = predict_probability(fitted, profile, level)
        rows.append(SchemeRow(name, pred.p, pred.se, pred.ci_low, pred.ci_high))
    return rows


def parse_overrides(text: str) -> dict[str, Override]:
    """``"a=1,b=level"`` -> ``{"a": 1.0, "b": "level"}``."""
    out: dict[str, Override] = {}
    for part in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in part:
            raise ValueError(f"expected name=value, got {part!r}")
        key, val = (s.strip() for s in part.split("=", 1))
        try:
            out[key] = float(val)
        except ValueError:
            out[key] = val
    return out


def parse_contrast(text: str) -> tuple[dict[str, Override], dict[str, Override]]:
    """``"x=1@vs@x=0"`` -> the two override maps."""
    if "@vs@" not in text:
        raise ValueError(f"contrast must contain '@vs@': {text!r}")
    a, b = text.split("@vs@", 1)
    return parse_overrides(a), parse_overrides(b)
