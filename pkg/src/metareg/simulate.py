"""Synthetic evaluation literatures with known generating parameters.

Every random draw goes through a Philox generator seeded from a
``SeedSequence``; replications use ``SeedSequence(seed).spawn`` so each
one owns an independent stream and results do not depend on how
replications are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Literal, Sequence

import numpy as np
from scipy.special import expit, ndtri

from .domain import INTERCEPT, Dataset, EstimateRecord, Formula, StudyRecord, build_design
from .network import CoauthorNetwork, build_adjacency

P_HACK_BAND = 0.3


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: Literal["binary", "normal", "categorical"] = "binary"
    level: Literal["estimate", "study"] = "estimate"
    prob: float = 0.5
    mean: float = 0.0
    sd: float = 1.0
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()

    def n_coefficients(self) -> int:
        return len(self.levels) - 1 if self.kind == "categorical" else 1

    def column_names(self) -> list[str]:
        if self.kind == "categorical":
            return [f"{self.name}[{lev}]" for lev in self.levels[1:]]
        return [self.name]


@dataclass(frozen=True)
class NetworkConfig:
    n_authors: int = 120
    authors_per_study: float = 2.0
    year_range: tuple[int, int] = (2000, 2019)
    # author popularity ~ rank**(-popularity); larger gives a few prolific authors
    popularity: float = 0.8


@dataclass(frozen=True)
class PHackConfig:
    threshold: float = 1.645
    intensity: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    n_studies: int = 50
    estimates_per_study: float = 20
    poisson: bool = True
    beta_true: tuple[float, ...] = (-0.5, 1.0)
    covariates: tuple[CovariateSpec, ...] = (CovariateSpec("x1"),)
    interactions: tuple[tuple[str, str, float], ...] = ()
    sigma_u_true: float = 1.0
    rho_true: float = 0.0
    network: NetworkConfig | None = None
    p_hack: PHackConfig | None = None
    threshold: float = 1.645
    sample_size_range: tuple[int, int] = (100, 5000)
    seed: int = 0

    def __post_init__(self):
        if self.n_studies < 1:
            raise ValueError("n_studies must be >= 1")
        if self.estimates_per_study <= 0:
            raise ValueError("estimates_per_study must be positive")
        if self.sigma_u_true < 0:
            raise ValueError("sigma_u_true must be >= 0")
        if not -1 < self.rho_true < 1:
            raise ValueError("rho_true must lie in (-1, 1)")
        expected = 1 + sum(c.n_coefficients() for c in self.covariates)
        if len(self.beta_true) != expected:
            raise ValueError(f"beta_true has {len(self.beta_true)} entries, covariates need {expected}")
        for c in self.covariates:
            if c.kind == "categorical" and (len(c.levels) < 2 or len(c.probs) != len(c.levels)):
                raise ValueError(f"categorical covariate {c.name!r} needs >= 2 levels with probabilities")
        names = {c.name for c in self.covariates}
        for a, b, _ in self.interactions:
            if a not in names or b not in names:
                raise ValueError(f"interaction {a}:{b} references an unknown covariate")
        if self.p_hack is not None and not 0 <= self.p_hack.intensity <= 1:
            raise ValueError("p-hacking intensity must lie in [0, 1]")
        if self.rho_true != 0 and self.network is None:
            raise ValueError("rho_true != 0 requires a network configuration")

    @property
    def column_names(self) -> list[str]:
        return [INTERCEPT] + [n for c in self.covariates for n in c.column_names()]

    def formula(self, sqrt_n: bool = False, interactions: bool = True) -> Formula:
        """Formula matching the generating model."""
        terms = [c.name for c in self.covariates]
        if interactions:
            terms += [f"{a}:{b}" for a, b, _ in self.interactions]
        refs = {c.name: c.levels[0] for c in self.covariates if c.kind == "categorical"}
        return Formula(tuple(terms), self.threshold, refs, sqrt_n)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimConfig":
        d = dict(d)
        d["covariates"] = tuple(CovariateSpec(**{**c, "levels": tuple(c.get("levels", ())),
                                                 "probs": tuple(c.get("probs", ()))})
                                for c in d.get("covariates", [asdict(CovariateSpec("x1"))]))
        d["interactions"] = tuple(tuple(i) for i in d.get("interactions", ()))
        if d.get("network") is not None:
            net = dict(d["network"])
            if "year_range" in net:
                net["year_range"] = tuple(net["year_range"])
            d["network"] = NetworkConfig(**net)
        if d.get("p_hack") is not None:
            d["p_hack"] = PHackConfig(**d["p_hack"])
        for key in ("beta_true", "sample_size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def replication_seeds(seed: int, replications: int) -> list[int]:
    return [int(c.generate_state(1, np.uint64)[0] >> np.uint64(1))
            for c in np.random.SeedSequence(seed).spawn(replications)]


def _draw_covariate(spec: CovariateSpec, rng: np.random.Generator, size: int):
    if spec.kind == "binary":
        return (rng.random(size) < spec.prob).astype(float)
    if spec.kind == "normal":
        return rng.normal(spec.mean, spec.sd, size)
    idx = rng.choice(len(spec.levels), size=size, p=np.asarray(spec.probs) / np.sum(spec.probs))
    return np.array(spec.levels, dtype=object)[idx]


def _numeric_columns(spec: CovariateSpec, values) -> np.ndarray:
    if spec.kind == "categorical":
        return np.column_stack([(values == lev).astype(float) for lev in spec.levels[1:]])
    return np.asarray(values, dtype=float)[:, None]


def _generate_authors(n: int, cfg: NetworkConfig | None, rng: np.random.Generator):
    if cfg is None:
        years = rng.integers(2000, 2020, size=n)
        return [frozenset({f"A{j + 1:03d}"}) for j in range(n)], years
    lo, hi = cfg.year_range
    years = rng.integers(lo, hi + 1, size=n)
    weights = np.arange(1, cfg.n_authors + 1, dtype=float) ** -cfg.popularity
    weights /= weights.sum()
    authors = []
    for _ in range(n):
        k = min(cfg.n_authors, 1 + rng.poisson(max(cfg.authors_per_study - 1, 0)))
        pick = rng.choice(cfg.n_authors, size=k, replace=False, p=weights)
        authors.append(frozenset(f"A{i + 1:03d}" for i in sorted(pick)))
    return authors, years


def study_effects(sigma_u: float, rho: float, network: CoauthorNetwork | None, rng: np.random.Generator,
                  J: int | None = None, draws: int | None = None) -> np.ndarray:
    """Study effects ``v = (I - rho W)^{-1} u`` with ``u ~ N(0, sigma_u^2 I)``.

    Returns shape ``(J,)``, or ``(draws, J)`` when ``draws`` is given.
    """
    J = network.J if network is not None else J
    if J is None:
        raise ValueError("J is required without a network")
    shape = (J,) if draws is None else (draws, J)
    u = rng.normal(0.0, 1.0, size=shape) * sigma_u
    if network is None or rho == 0:
        return u
    A = np.eye(J) - rho * network.row_std_w
    if np.linalg.cond(A) > 1e12:
        raise ValueError("I - rho W is singular for the generated network")
    return np.linalg.solve(A, u.T).T


def simulate_dataset(config: SimConfig) -> tuple[Dataset, dict[str, Any]]:
    """Draw a dataset from the multilevel logit with a continuous-t bridge.

    ``t = threshold + Phi^{-1}(logistic(eta)) + z`` with ``z ~ N(0, 1)``,
    so ``P(t > threshold) = logistic(eta)`` and ``y = 1{t > threshold}``.
    """
    rng = make_rng(config.seed)
    J = config.n_studies
    if config.poisson:
        counts = np.maximum(1, rng.poisson(config.estimates_per_study, size=J))
    else:
        counts = np.full(J, int(round(config.estimates_per_study)))
    n = int(counts.sum())
    g = np.repeat(np.arange(J), counts)

    authors, years = _generate_authors(J, config.network, rng)
    lo, hi = config.sample_size_range
    sizes = np.round(np.exp(rng.uniform(math.log(lo), math.log(hi), size=J))).astype(int)
    published = rng.random(J) < 0.5
    study_ids = [f"S{j + 1:03d}" for j in range(J)]
    studies = {sid: StudyRecord(sid, authors[j], int(years[j]), bool(published[j]), int(sizes[j]))
               for j, sid in enumerate(study_ids)}

    network = build_adjacency(studies) if config.network is not None else None
    effects = study_effects(config.sigma_u_true, config.rho_true, network, rng, J)

    est_cols: dict[str, Any] = {}
    study_cols: dict[str, Any] = {}
    X = [np.ones((n, 1))]
    values: dict[str, np.ndarray] = {}
    for spec in config.covariates:
        if spec.level == "estimate":
            v = _draw_covariate(spec, rng, n)
            est_cols[spec.name] = v
        else:
            sv = _draw_covariate(spec, rng, J)
            study_cols[spec.name] = sv
            v = sv[g]
        values[spec.name] = _numeric_columns(spec, v)
        X.append(values[spec.name])
    X = np.hstack(X)
    eta = X @ np.asarray(config.beta_true, dtype=float) + effects[g]
    for a, b, coef in config.interactions:
        eta = eta + coef * (values[a] * values[b]).sum(axis=1)

    shift = ndtri(expit(eta))
    t = config.threshold + shift + rng.normal(size=n)
    if config.p_hack is not None and config.p_hack.intensity > 0:
        t = inject_p_hacking(t, config.p_hack.threshold, config.p_hack.intensity, rng)

    se = np.exp(rng.normal(0.0, 0.5, size=n))
    negative_good = rng.random(n) < 0.2
    raw = np.where(negative_good, -t, t) * se

    estimates = []
    for i in range(n):
        cov = {k: (v[i] if isinstance(v[i], str) else float(v[i])) for k, v in est_cols.items()}
        estimates.append(EstimateRecord(f"E{i + 1:05d}", study_ids[g[i]], float(raw[i]), float(se[i]),
                                        bool(negative_good[i]), cov))
    if study_cols:
        studies = {sid: replace(s, study_covariates={k: (v[j] if isinstance(v[j], str) else float(v[j]))
                                                     for k, v in study_cols.items()})
                   for j, (sid, s) in enumerate(studies.items())}
    dataset = Dataset(estimates, studies)
    truth = {
        "seed": config.seed,
        "beta": dict(zip(config.column_names, map(float, config.beta_true))),
        "interactions": [[a, b, float(c)] for a, b, c in config.interactions],
        "sigma_u": float(config.sigma_u_true),
        "rho": float(config.rho_true),
        "threshold": config.threshold,
        "study_effects": dict(zip(study_ids, map(float, effects))),
        "n_estimates": n,
        "n_studies": J,
        "n_edges": None if network is None else int(network.raw_w.sum()),
    }
    return dataset, truth


def inject_p_hacking(t_samples: Sequence[float], threshold: float, intensity: float,
                     seed: int | np.random.Generator = 0) -> np.ndarray:
    """Move just-insignificant statistics above the threshold.

    Each value in ``[threshold - 0.3, threshold)`` is, with probability
    ``intensity``, replaced by a uniform draw on ``[threshold, threshold + 0.3]``.
    """
    if not 0 <= intensity <= 1:
        raise ValueError("intensity must lie in [0, 1]")
    t = np.array(t_samples, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    band = (t >= threshold - P_HACK_BAND) & (t < threshold)
    move = band & (rng.random(t.size) < intensity)
    t[move] = rng.uniform(threshold, threshold + P_HACK_BAND, size=int(move.sum()))
    return t


# ----------------------------------------------------------- Monte Carlo

@dataclass(frozen=True)
class FitOptions:
    random: Literal["independent", "sar"] = "independent"
    nodes: int = 15
    sqrt_n: bool = False
    fix_rho: float | None = None


@dataclass
class RecoveryReport:
    names: list[str]
    truth: np.ndarray
    estimates: np.ndarray
    ses: np.ndarray
    n_failed: int = 0
    seeds: list[int] = field(default_factory=list)

    @property
    def bias(self) -> np.ndarray:
        return np.nanmean(self.estimates, axis=0) - self.truth

    @property
    def mean(self) -> np.ndarray:
        return np.nanmean(self.estimates, axis=0)

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(np.nanmean((self.estimates - self.truth) ** 2, axis=0))

    @property
    def coverage(self) -> np.ndarray:
        lo = self.estimates - 1.959963984540054 * self.ses
        hi = self.estimates + 1.959963984540054 * self.ses
        inside = (lo <= self.truth) & (self.truth <= hi)
        ok = np.isfinite(self.ses)
        with np.errstate(invalid="ignore"):
            return np.where(ok.sum(axis=0) > 0, (inside & ok).sum(axis=0) / ok.sum(axis=0), np.nan)

    def table(self) -> list[dict[str, float]]:
        return [{"parameter": n, "truth": float(t), "mean": float(m), "bias": float(b), "rmse": float(r),
                 "coverage": float(c)}
                for n, t, m, b, r, c in zip(self.names, self.truth, self.mean, self.bias, self.rmse, self.coverage)]


def _one_replication(config: SimConfig, seed: int, options: FitOptions):
    from .glmm import Independent, ModelSpec, SarNetwork, fit
    from .network import build_adjacency

    dataset, _ = simulate_dataset(replace(config, seed=seed))
    design = build_design(dataset, config.formula(sqrt_n=options.sqrt_n))
    if options.random == "sar":
        structure = SarNetwork(build_adjacency(dataset.studies))
    else:
        structure = Independent()
    fitted = fit(ModelSpec(design, structure, options.nodes, fix_rho=options.fix_rho))
    return fitted.params, fitted.se


def monte_carlo_recovery(config: SimConfig, replications: int, options: FitOptions | None = None,
                         n_jobs: int = 1) -> RecoveryReport:
    """Bias, RMSE and Wald-interval coverage over seeded replications.

    Failed fits are counted in ``n_failed`` and excluded.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    options = options or FitOptions()
    seeds = replication_seeds(config.seed, replications)
    names = list(config.column_names) + [f"{a}:{b}" for a, b, _ in config.interactions]
    if options.sqrt_n:
        names.append("sqrt_n")
    names.append("sigma_u")
    truth = list(config.beta_true) + [c for *_, c in config.interactions]
    if options.sqrt_n:
        truth.append(0.0)
    truth.append(config.sigma_u_true)
    if options.random == "sar":
        names.append("rho")
        truth.append(config.rho_true)

    def run(seed):
        try:
            return _one_replication(config, seed, options)
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError):
            return None

    if n_jobs == 1:
        results = [run(s) for s in seeds]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(run)(s) for s in seeds)

    k = len(names)
    est = np.full((replications, k), np.nan)
    ses = np.full((replications, k), np.nan)
    failed = 0
    for r, res in enumerate(results):
        if res is None:
            failed += 1
            continue
        est[r], ses[r] = res
    return RecoveryReport(names, np.array(truth, dtype=float), est, ses, failed, seeds)
