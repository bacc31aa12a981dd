"""Data model, CSV ingestion and the response/design construction.

An estimate is one reported treatment effect (level 1), a study is the
paper or report it comes from (level 2).  The response of the
meta-regression is the sign-recoded t-statistic dichotomized at a
right-tailed critical value.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg, stats

ESTIMATE_FIELDS = ("estimate_id", "study_id", "raw_effect", "std_error", "negative_is_good")
STUDY_FIELDS = ("study_id", "authors", "year", "published", "sample_size")

THRESHOLD_5 = 1.645
THRESHOLD_2_5 = 1.96

SQRT_N = "sqrt_n"
INTERCEPT = "intercept"
PUBLISHED = "published"
MUNDLAK_PREFIX = "mean_"

# Conventional base categories of the policy-evaluation coding scheme; used only when a covariate
# with that name is present and no explicit reference level was configured.
DEFAULT_REFERENCE_LEVELS: dict[str, str] = {
    "aim": "R&D",
    "instrument": "direct_loan",
    "government": "national",
    "methodology": "DID",
    "firms": "all",
    "timing": "simultaneous",
    "outcome": "indirect",
}

RANK_TOL = 1e-10


class DataError(ValueError):
    """Invalid or inconsistent input data."""


class RankDeficientError(DataError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class SeparationWarning(UserWarning):
    """Response is constant, so the logit MLE does not exist."""


@dataclass(frozen=True)
class EstimateRecord:
    estimate_id: str
    study_id: str
    raw_effect: float
    std_error: float
    negative_is_good: bool = False
    covariates: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.raw_effect):
            raise DataError(f"estimate {self.estimate_id}: raw_effect must be finite")
        if not (math.isfinite(self.std_error) and self.std_error > 0):
            raise DataError(f"estimate {self.estimate_id}: std_error must be finite and > 0")

    @property
    def t(self) -> float:
        return t_statistic(self.raw_effect, self.std_error, self.negative_is_good)


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    authors: frozenset[str]
    year: int
    published: bool = False
    sample_size: int = 1
    study_covariates: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "authors", frozenset(self.authors))
        if not self.authors:
            raise DataError(f"study {self.study_id}: author set is empty")
        if self.sample_size < 1:
            raise DataError(f"study {self.study_id}: sample_size must be >= 1")


@dataclass(frozen=True)
class Dataset:
    estimates: tuple[EstimateRecord, ...]
    studies: Mapping[str, StudyRecord]

    def __post_init__(self):
        object.__setattr__(self, "estimates", tuple(self.estimates))
        if not self.estimates:
            raise DataError("dataset has no estimates")
        seen = set()
        used = set()
        for e in self.estimates:
            if e.estimate_id in seen:
                raise DataError(f"duplicate estimate_id {e.estimate_id!r}")
            seen.add(e.estimate_id)
            if e.study_id not in self.studies:
                raise DataError(f"estimate {e.estimate_id!r} references unknown study {e.study_id!r}")
            used.add(e.study_id)
        empty = [s for s in self.studies if s not in used]
        if empty:
            raise DataError(f"studies without estimates: {', '.join(empty)}")

    @property
    def n(self) -> int:
        return len(self.estimates)

    @property
    def J(self) -> int:
        return len(self.studies)

    @property
    def study_order(self) -> list[str]:
        return list(self.studies)

    def t_values(self) -> np.ndarray:
        return np.array([e.t for e in self.estimates])

    def value(self, estimate: EstimateRecord, name: str) -> Any:
        """Covariate lookup: estimate level first, then study level."""
        if name in estimate.covariates:
            return estimate.covariates[name]
        study = self.studies[estimate.study_id]
        if name in study.study_covariates:
            return study.study_covariates[name]
        if name == PUBLISHED:
            return float(study.published)
        raise KeyError(name)

    def has_covariate(self, name: str) -> bool:
        try:
            self.value(self.estimates[0], name)
        except KeyError:
            return False
        return True

    def subset(self, keep: Callable[[EstimateRecord], bool]) -> "Dataset":
        """Dataset restricted to matching estimates; studies left empty are dropped."""
        est = [e for e in self.estimates if keep(e)]
        used = {e.study_id for e in est}
        return Dataset(est, {k: s for k, s in self.studies.items() if k in used})


@dataclass(frozen=True)
class Formula:
    """Which covariates enter the linear predictor and how y is built.

    ``covariates`` may name estimate covariates, study covariates,
    ``published``, Mundlak columns (``mean_<name>``) or two-way
    interactions written ``a:b``.  The centred square root of the study
    sample size is appended when ``sqrt_n`` is true.
    """

    covariates: tuple[str, ...] = ()
    threshold: float = THRESHOLD_5
    reference_levels: Mapping[str, str] = field(default_factory=dict)
    sqrt_n: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def with_covariates(self, extra: Iterable[str]) -> "Formula":
        return replace(self, covariates=self.covariates + tuple(extra))


@dataclass(frozen=True)
class DesignMatrix:
    response: np.ndarray
    predictors: np.ndarray
    group_map: np.ndarray
    column_names: tuple[str, ...]
    study_order: tuple[str, ...]
    t: np.ndarray
    threshold: float
    sqrt_n_center: float | None = None
    # column -> (categorical covariate, level) for reference-coded indicators
    categorical_columns: Mapping[str, tuple[str, str]] = field(default_factory=dict)
    reference_levels: Mapping[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.predictors.shape[0]

    @property
    def J(self) -> int:
        return self.group_map.shape[1]

    @property
    def p(self) -> int:
        return self.predictors.shape[1]

    @property
    def groups(self) -> np.ndarray:
        """Study index of each row."""
        return np.argmax(self.group_map, axis=1)

    def column_means(self) -> np.ndarray:
        return self.predictors.mean(axis=0)


def t_statistic(raw_effect: float, std_error: float, negative_is_good: bool) -> float:
    if not (math.isfinite(raw_effect) and math.isfinite(std_error)):
        raise ValueError("raw_effect and std_error must be finite")
    if std_error <= 0:
        raise ValueError("std_error must be positive")
    t = raw_effect / std_error
    return -t if negative_is_good else t


def dichotomize(t: float, threshold: float = THRESHOLD_5) -> int:
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    return int(t > threshold)


def observed_power(t: float, alpha: float = 0.05) -> float:
    """Post-hoc power of the right-tailed z test, taking ``t`` as the noncentrality."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    return float(stats.norm.sf(stats.norm.isf(alpha) - t))


# ---------------------------------------------------------------- ingestion

def _parse_bool(text: str, what: str, row: int) -> bool:
    s = text.strip().lower()
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise DataError(f"row {row}: {what} must be 0/1, got {text!r}")


def _parse_float(text: str, what: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}: {what} is not a number: {text!r}") from None


def _type_columns(rows: list[dict[str, str]], names: Sequence[str], path: Path) -> dict[str, bool]:
    """True for columns whose every cell parses as a float."""
    numeric = {}
    for name in names:
        ok = True
        for i, r in enumerate(rows, start=2):
            cell = (r.get(name) or "").strip()
            if cell == "":
                raise DataError(f"{path.name} row {i}: missing value for covariate {name!r}")
            try:
                float(cell)
            except ValueError:
                ok = False
        numeric[name] = ok
    return numeric


def _read_csv(path: Path, required: Sequence[str]) -> tuple[list[dict[str, str]], list[str]]:
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = []
        for i, r in enumerate(reader, start=2):
            if None in r or any(v is None for v in r.values()):
                raise DataError(f"{path.name} row {i}: wrong number of fields")
            rows.append({k.strip(): v for k, v in r.items()})
    extra = [h for h in header if h not in required]
    return rows, extra


def parse_dataset(estimates_path: str | Path, studies_path: str | Path) -> Dataset:
    """Read and validate the two-file CSV layout.

    Row numbers in error messages count the header as row 1.
    """
    estimates_path, studies_path = Path(estimates_path), Path(studies_path)
    srows, scov = _read_csv(studies_path, STUDY_FIELDS)
    snumeric = _type_columns(srows, scov, studies_path)
    studies: dict[str, StudyRecord] = {}
    for i, r in enumerate(srows, start=2):
        sid = r["study_id"].strip()
        if not sid:
            raise DataError(f"{studies_path.name} row {i}: empty study_id")
        if sid in studies:
            raise DataError(f"{studies_path.name} row {i}: duplicate study_id {sid!r}")
        authors = frozenset(a.strip() for a in r["authors"].split(";") if a.strip())
        if not authors:
            raise DataError(f"{studies_path.name} row {i}: empty author list")
        try:
            year = int(r["year"])
            size = int(r["sample_size"])
        except ValueError:
            raise DataError(f"{studies_path.name} row {i}: year and sample_size must be integers") from None
        if size < 1:
            raise DataError(f"{studies_path.name} row {i}: sample_size must be >= 1")
        cov = {c: float(r[c]) if snumeric[c] else r[c].strip() for c in scov}
        studies[sid] = StudyRecord(sid, authors, year, _parse_bool(r["published"], "published", i), size, cov)

    erows, ecov = _read_csv(estimates_path, ESTIMATE_FIELDS)
    enumeric = _type_columns(erows, ecov, estimates_path)
    estimates = []
    seen = set()
    for i, r in enumerate(erows, start=2):
        eid = r["estimate_id"].strip()
        sid = r["study_id"].strip()
        if not eid:
            raise DataError(f"{estimates_path.name} row {i}: empty estimate_id")
        if eid in seen:
            raise DataError(f"{estimates_path.name} row {i}: duplicate estimate_id {eid!r}")
        seen.add(eid)
        if sid not in studies:
            raise DataError(f"{estimates_path.name} row {i}: unknown study_id {sid!r}")
        raw = _parse_float(r["raw_effect"], "raw_effect", i)
        se = _parse_float(r["std_error"], "std_error", i)
        if not math.isfinite(raw):
            raise DataError(f"{estimates_path.name} row {i}: raw_effect must be finite")
        if not (math.isfinite(se) and se > 0):
            raise DataError(f"{estimates_path.name} row {i}: std_error must be positive, got {r['std_error']!r}")
        cov = {c: float(r[c]) if enumeric[c] else r[c].strip() for c in ecov}
        neg = _parse_bool(r["negative_is_good"], "negative_is_good", i)
        estimates.append(EstimateRecord(eid, sid, raw, se, neg, cov))

    used = {e.study_id for e in estimates}
    unused = [s for s in studies if s not in used]
    if unused:
        raise DataError(f"{studies_path.name}: studies without estimates: {', '.join(unused)}")
    return Dataset(estimates, studies)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_dataset(dataset: Dataset, estimates_path: str | Path, studies_path: str | Path,
                  header: str | None = None) -> None:
    """Inverse of :func:`parse_dataset`; ``header`` is written as ``#`` comment lines."""
    ecov = list(dataset.estimates[0].covariates)
    first_study = next(iter(dataset.studies.values()))
    scov = list(first_study.study_covariates)
    with open(estimates_path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write("".join(f"# {line}\n" for line in header.splitlines()))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ESTIMATE_FIELDS) + ecov)
        for e in dataset.estimates:
            w.writerow([e.estimate_id, e.study_id, _fmt(e.raw_effect), _fmt(e.std_error),
                        int(e.negative_is_good)] + [_fmt(e.covariates[c]) for c in ecov])
    with open(studies_path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write("".join(f"# {line}\n" for line in header.splitlines()))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(STUDY_FIELDS) + scov)
        for s in dataset.studies.values():
            w.writerow([s.study_id, ";".join(sorted(s.authors)), s.year, int(s.published), s.sample_size]
                       + [_fmt(s.study_covariates[c]) for c in scov])


# ------------------------------------------------------ study-level means

def _is_categorical(values: Iterable[Any]) -> bool:
    return any(isinstance(v, str) for v in values)


def mundlak_augment(dataset: Dataset, covariate_names: Sequence[str]) -> Dataset:
    """Attach within-study means of estimate-level covariates to each study.

    A numeric covariate ``x`` becomes the study covariate ``mean_x``.  A
    categorical covariate ``c`` yields one proportion ``mean_c[level]``
    per observed level.
    """
    by_study: dict[str, list[EstimateRecord]] = {sid: [] for sid in dataset.studies}
    for e in dataset.estimates:
        by_study[e.study_id].append(e)
    added: dict[str, dict[str, float]] = {sid: {} for sid in dataset.studies}
    for name in covariate_names:
        if any(name not in e.covariates for e in dataset.estimates):
            raise KeyError(f"unknown estimate-level covariate {name!r}")
        values = [e.covariates[name] for e in dataset.estimates]
        if _is_categorical(values):
            levels = sorted({str(v) for v in values})
            for sid, rows in by_study.items():
                for lev in levels:
                    added[sid][f"{MUNDLAK_PREFIX}{name}[{lev}]"] = float(
                        np.mean([str(e.covariates[name]) == lev for e in rows]))
        else:
            for sid, rows in by_study.items():
                added[sid][MUNDLAK_PREFIX + name] = float(np.mean([float(e.covariates[name]) for e in rows]))
    studies = {sid: replace(s, study_covariates={**s.study_covariates, **added[sid]})
               for sid, s in dataset.studies.items()}
    return Dataset(dataset.estimates, studies)


# ------------------------------------------------------------ design matrix

def _reference_level(name: str, levels: Sequence[str], formula: Formula) -> str:
    if name in formula.reference_levels:
        ref = formula.reference_levels[name]
        if ref not in levels:
            raise DataError(f"reference level {ref!r} not observed for covariate {name!r}")
        return ref
    default = DEFAULT_REFERENCE_LEVELS.get(name)
    return default if default in levels else levels[0]


def _expand(dataset: Dataset, name: str, formula: Formula,
            refs: dict[str, str] | None = None) -> tuple[list[str], np.ndarray, dict]:
    """Columns contributed by a single (non-interaction) covariate name."""
    est = dataset.estimates
    if dataset.has_covariate(name):
        values = [dataset.value(e, name) for e in est]
        if _is_categorical(values):
            levels = sorted({str(v) for v in values})
            ref = _reference_level(name, levels, formula)
            if refs is not None:
                refs[name] = ref
            names, cols, cats = [], [], {}
            for lev in levels:
                if lev == ref:
                    continue
                col = f"{name}[{lev}]"
                names.append(col)
                cols.append([float(str(v) == lev) for v in values])
                cats[col] = (name, lev)
            return names, np.array(cols).T.reshape(len(est), len(names)), cats
        return [name], np.array(values, dtype=float)[:, None], {}
    if name.startswith(MUNDLAK_PREFIX):
        base = name[len(MUNDLAK_PREFIX):]
        first = dataset.studies[est[0].study_id].study_covariates
        level_cols = sorted(k for k in first if k.startswith(f"{name}["))
        if level_cols:
            levels = [k[len(name) + 1:-1] for k in level_cols]
            ref = _reference_level(base, levels, formula)
            keep = [k for k, lev in zip(level_cols, levels) if lev != ref]
            mat = np.array([[dataset.value(e, k) for k in keep] for e in est], dtype=float)
            return keep, mat.reshape(len(est), len(keep)), {}
    raise DataError(f"unknown covariate {name!r}")


def build_design(dataset: Dataset, formula: Formula) -> DesignMatrix:
    """Response, reference-coded predictors and study incidence matrix."""
    est = dataset.estimates
    t = dataset.t_values()
    y = (t > formula.threshold).astype(float)
    if y.min() == y.max():
        warnings.warn(f"response is constant ({int(y[0])}) at threshold {formula.threshold}; "
                      "logit estimates will not exist", SeparationWarning, stacklevel=2)

    names = [INTERCEPT]
    cols = [np.ones((len(est), 1))]
    categorical: dict[str, tuple[str, str]] = {}
    refs: dict[str, str] = {}
    for term in formula.covariates:
        if ":" in term:
            a, b = term.split(":", 1)
            na, ma, _ = _expand(dataset, a, formula)
            nb, mb, _ = _expand(dataset, b, formula)
            for i, ca in enumerate(na):
                for k, cb in enumerate(nb):
                    names.append(f"{ca}:{cb}")
                    cols.append((ma[:, i] * mb[:, k])[:, None])
        else:
            n_, m_, c_ = _expand(dataset, term, formula, refs)
            names.extend(n_)
            cols.append(m_)
            categorical.update(c_)

    center = None
    if formula.sqrt_n:
        root = np.array([math.sqrt(dataset.studies[e.study_id].sample_size) for e in est])
        center = float(root.mean())
        names.append(SQRT_N)
        cols.append((root - center)[:, None])

    X = np.hstack(cols)
    if len(set(names)) != len(names):
        raise DataError("duplicate design columns: " + ", ".join(sorted({c for c in names if names.count(c) > 1})))
    if not np.all(np.isfinite(X)):
        raise DataError("design matrix has non-finite entries")
    _check_rank(X, names)

    order = dataset.study_order
    index = {sid: j for j, sid in enumerate(order)}
    D = np.zeros((len(est), len(order)))
    D[np.arange(len(est)), [index[e.study_id] for e in est]] = 1.0
    return DesignMatrix(y, X, D, tuple(names), tuple(order), t, formula.threshold, center, categorical, refs)


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        raise RankDeficientError(names)
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < X.shape[1]:
        raise RankDeficientError([names[i] for i in sorted(piv[rank:])])


# -------------------------------------------------------------- vote counts

@dataclass(frozen=True)
class VoteCount:
    level: str
    n: int
    prop_above: tuple[float, ...]
    mean_t: float
    sd_t: float


def vote_counts(dataset: Dataset, group_by: str,
                thresholds: Sequence[float] = (THRESHOLD_5, THRESHOLD_2_5)) -> list[VoteCount]:
    """Share of estimates beyond each threshold and t moments, per covariate level."""
    if not dataset.has_covariate(group_by):
        raise KeyError(f"unknown covariate {group_by!r}")
    groups: dict[str, list[float]] = {}
    for e in dataset.estimates:
        v = dataset.value(e, group_by)
        key = v if isinstance(v, str) else _fmt(v)
        groups.setdefault(key, []).append(e.t)
    rows = []
    for level in sorted(groups):
        t = np.array(groups[level])
        sd = float(t.std(ddof=1)) if t.size > 1 else float("nan")
        rows.append(VoteCount(level, int(t.size), tuple(float(np.mean(t > c)) for c in thresholds),
                              float(t.mean()), sd))
    return rows
