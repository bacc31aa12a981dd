"""Random-intercept logit with independent or SAR-correlated study effects.

Linear predictor ``eta = X beta + D v``.  With independent effects
``v ~ N(0, sigma_u^2 I)`` and the marginal likelihood factorizes over
studies; each one-dimensional integral is done by adaptive Gauss-Hermite
quadrature.  With SAR effects ``v = (I - rho W)^{-1} u`` the integral is
J-dimensional and is approximated by a joint Laplace expansion.

Optimization works on ``(beta, log sigma_u[, atanh rho])``; results are
reported on the natural scale.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg, optimize, stats
from scipy.special import expit, logsumexp

from .domain import DesignMatrix
from .network import CoauthorNetwork

SCHEMA_VERSION = 1
LOGIT_RESIDUAL_VARIANCE = math.pi ** 2 / 3
RHO_BOUND = 0.999
LOG_SIGMA_BOUNDS = (-12.0, 6.0)
SIGMA_BOUNDARY = 1e-4
REL_STEP = 1e-5


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float] = ()):
        self.trace = list(trace)
        super().__init__(f"{message}; gradient-norm trace: {[f'{g:.3g}' for g in self.trace]}")


class SingularNetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Independent:
    name = "independent"


@dataclass(frozen=True)
class SarNetwork:
    network: CoauthorNetwork
    name = "sar"


@dataclass
class ModelSpec:
    design: DesignMatrix
    random_structure: Independent | SarNetwork = field(default_factory=Independent)
    quadrature_nodes: int = 15
    gtol: float = 1e-6
    step_tol: float = 1e-9
    max_iter: int = 500
    fix_rho: float | None = None

    def __post_init__(self):
        if self.quadrature_nodes < 1:
            raise ValueError("quadrature_nodes must be >= 1")
        if isinstance(self.random_structure, SarNetwork):
            order = self.random_structure.network.study_order
            if tuple(order) != tuple(self.design.study_order):
                raise ValueError("network study order does not match the design's study columns")

    @property
    def is_sar(self) -> bool:
        return isinstance(self.random_structure, SarNetwork)


@dataclass
class FittedModel:
    column_names: tuple[str, ...]
    beta: np.ndarray
    sigma_u: float
    rho: float | None
    loglik: float
    vcov: np.ndarray
    converged: bool
    n_obs: int
    n_studies: int
    random: str = "independent"
    sqrt_n_center: float | None = None
    column_means: np.ndarray | None = None
    threshold: float | None = None
    marginal_loglik: float | None = None
    boundary: bool = False
    hessian_pd: bool = True
    iterations: int = 0
    categorical_columns: dict = field(default_factory=dict)
    reference_levels: dict = field(default_factory=dict)

    @property
    def param_names(self) -> list[str]:
        names = list(self.column_names) + ["sigma_u"]
        if self.rho is not None:
            names.append("rho")
        return names

    @property
    def params(self) -> np.ndarray:
        extra = [self.sigma_u] + ([self.rho] if self.rho is not None else [])
        return np.concatenate([self.beta, extra])

    @property
    def se(self) -> np.ndarray:
        d = np.diag(self.vcov).copy()
        d[d < 0] = np.nan
        return np.sqrt(d)

    @property
    def vcov_beta(self) -> np.ndarray:
        p = len(self.beta)
        return self.vcov[:p, :p]

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def aic(self) -> float:
        return 2 * self.n_params - 2 * self.loglik

    def wald_pvalues(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            z = self.params / self.se
        return 2 * stats.norm.sf(np.abs(z))

    def to_dict(self) -> dict[str, Any]:
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()
        return {
            "schema_version": SCHEMA_VERSION,
            "random": self.random,
            "column_names": list(self.column_names),
            "beta": arr(self.beta),
            "sigma_u": self.sigma_u,
            "rho": self.rho,
            "loglik": self.loglik,
            "vcov": [[_json_float(v) for v in row] for row in np.asarray(self.vcov, dtype=float)],
            "converged": self.converged,
            "n_obs": self.n_obs,
            "n_studies": self.n_studies,
            "sqrt_n_center": self.sqrt_n_center,
            "column_means": arr(self.column_means),
            "threshold": self.threshold,
            "marginal_loglik": self.marginal_loglik,
            "boundary": self.boundary,
            "hessian_pd": self.hessian_pd,
            "iterations": self.iterations,
            "categorical_columns": {k: list(v) for k, v in self.categorical_columns.items()},
            "reference_levels": dict(self.reference_levels),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FittedModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"model schema version {d.get('schema_version')!r} != {SCHEMA_VERSION}")
        means = d.get("column_means")
        return cls(
            column_names=tuple(d["column_names"]),
            beta=np.array(d["beta"], dtype=float),
            sigma_u=float(d["sigma_u"]),
            rho=None if d["rho"] is None else float(d["rho"]),
            loglik=float(d["loglik"]),
            vcov=np.array([[np.nan if v is None else v for v in row] for row in d["vcov"]], dtype=float),
            converged=bool(d["converged"]),
            n_obs=int(d["n_obs"]),
            n_studies=int(d["n_studies"]),
            random=d["random"],
            sqrt_n_center=d.get("sqrt_n_center"),
            column_means=None if means is None else np.array(means, dtype=float),
            threshold=d.get("threshold"),
            marginal_loglik=d.get("marginal_loglik"),
            boundary=bool(d.get("boundary", False)),
            hessian_pd=bool(d.get("hessian_pd", True)),
            iterations=int(d.get("iterations", 0)),
            categorical_columns={k: tuple(v) for k, v in d.get("categorical_columns", {}).items()},
            reference_levels=dict(d.get("reference_levels", {})),
        )


def _json_float(v: float):
    return None if not np.isfinite(v) else float(v)


# ------------------------------------------------------------ likelihoods

def _bernoulli_loglik(y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    return y * eta - np.logaddexp(0.0, eta)


def logit_loglik(beta: np.ndarray, design: DesignMatrix) -> float:
    """Ordinary (single-level) logit log-likelihood."""
    return float(_bernoulli_loglik(design.response, design.predictors @ beta).sum())


def fit_logit(design: DesignMatrix, max_iter: int = 100, tol: float = 1e-10) -> tuple[np.ndarray, float, np.ndarray]:
    """Newton-Raphson for the ordinary logit: returns (beta, loglik, vcov)."""
    X, y = design.predictors, design.response
    beta = np.zeros(X.shape[1])
    ll = logit_loglik(beta, design)
    for _ in range(max_iter):
        p = expit(X @ beta)
        H = X.T @ (X * (p * (1 - p))[:, None])
        step = linalg.solve(H + 1e-12 * np.eye(len(beta)), X.T @ (y - p), assume_a="pos")
        t = 1.0
        while True:
            new = beta + t * step
            new_ll = logit_loglik(new, design)
            if new_ll >= ll - 1e-12 or t < 1e-8:
                break
            t /= 2
        beta, done = new, abs(new_ll - ll) < tol
        ll = new_ll
        if done and np.max(np.abs(t * step)) < 1e-6:
            break
    p = expit(X @ beta)
    H = X.T @ (X * (p * (1 - p))[:, None])
    return beta, ll, np.linalg.pinv(H)


@functools.lru_cache(maxsize=16)
def _hermgauss(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.hermite.hermgauss(nodes)


def _group_index(design: DesignMatrix) -> tuple[np.ndarray, int]:
    return design.groups, design.J


def _group_modes(eta: np.ndarray, y: np.ndarray, g: np.ndarray, J: int, sigma: float,
                 tol: float = 1e-11, max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mode of each study effect, and the curvature there.

    Safeguarded Newton: the score is monotone in u and the root lies in
    ``[-n_j sigma^2, n_j sigma^2]``; steps leaving the bracket bisect.
    """
    prec = 1.0 / sigma ** 2
    counts = np.bincount(g, minlength=J).astype(float)
    hi = counts * sigma ** 2 + 1e-12
    lo = -hi
    u = np.zeros(J)
    for _ in range(max_iter):
        p = expit(eta + u[g])
        score = np.bincount(g, y - p, minlength=J) - u * prec
        curv = np.bincount(g, p * (1 - p), minlength=J) + prec
        lo = np.where(score > 0, u, lo)
        hi = np.where(score < 0, u, hi)
        new = u + score / curv
        out = (new < lo) | (new > hi)
        new = np.where(out, 0.5 * (lo + hi), new)
        step = np.abs(new - u)
        u = new
        if np.all(step <= tol * (1 + np.abs(u))):
            break
    p = expit(eta + u[g])
    curv = np.bincount(g, p * (1 - p), minlength=J) + prec
    return u, curv


def loglik_independent(beta: np.ndarray, log_sigma_u: float, design: DesignMatrix, nodes: int = 15) -> float:
    """Marginal log-likelihood by adaptive Gauss-Hermite quadrature per study."""
    beta = np.asarray(beta, dtype=float)
    sigma = math.exp(log_sigma_u)
    y = design.response
    g, J = _group_index(design)
    eta = design.predictors @ beta
    mode, curv = _group_modes(eta, y, g, J, sigma)
    scale = 1.0 / np.sqrt(curv)
    x, w = _hermgauss(nodes)
    u = mode[:, None] + math.sqrt(2.0) * scale[:, None] * x[None, :]
    # per-study data log-likelihood at every node, summed in row order
    ll_obs = _bernoulli_loglik(y[:, None], eta[:, None] + u[g])
    ll = np.zeros((J, nodes))
    for k in range(nodes):
        ll[:, k] = np.bincount(g, ll_obs[:, k], minlength=J)
    log_prior = -0.5 * (u / sigma) ** 2
    terms = np.log(w)[None, :] + x[None, :] ** 2 + ll + log_prior
    per_group = (np.log(math.sqrt(2.0) * scale) - math.log(math.sqrt(2 * math.pi) * sigma)
                 + logsumexp(terms, axis=1))
    total = float(per_group.sum())
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite log-likelihood at beta={beta.tolist()}, log_sigma_u={log_sigma_u}")
    return total


def _rho(rho_unconstrained: float) -> float:
    return float(np.clip(math.tanh(rho_unconstrained), -RHO_BOUND, RHO_BOUND))


def _sar_operator(rho: float, net: CoauthorNetwork) -> np.ndarray:
    A = np.eye(net.J) - rho * net.row_std_w
    if np.linalg.cond(A) > 1e12:
        raise SingularNetworkError(f"I - rho W is singular at rho={rho}")
    return A


def sigma_matrix(sigma_u: float, rho: float, net: CoauthorNetwork) -> np.ndarray:
    """Covariance of the SAR study effects, ``sigma_u^2 [(I - rho W)'(I - rho W)]^{-1}``."""
    A = _sar_operator(rho, net)
    return sigma_u ** 2 * np.linalg.inv(A.T @ A)


def sar_log_prior(v: np.ndarray, sigma_u: float, rho: float, net: CoauthorNetwork) -> float:
    """Log density of ``v`` under ``N(0, sigma_matrix(sigma_u, rho, net))`` via its precision."""
    A = _sar_operator(rho, net)
    r = A @ np.asarray(v, dtype=float) / sigma_u
    _, logdet_a = np.linalg.slogdet(A)
    return float(-0.5 * r @ r - net.J * (0.5 * math.log(2 * math.pi) + math.log(sigma_u)) + logdet_a)


def loglik_sar(beta: np.ndarray, log_sigma_u: float, rho_unconstrained: float, design: DesignMatrix,
               net: CoauthorNetwork, tol: float = 1e-10, max_iter: int = 100) -> float:
    """Joint Laplace approximation of the SAR marginal log-likelihood.

    Works in whitened coordinates ``v = sigma_u (I - rho W)^{-1} z`` with
    ``z ~ N(0, I)``; the Laplace approximation is invariant under this
    linear change of variables and the Hessian ``I + sigma^2 B' S B`` stays
    well conditioned as ``sigma_u -> 0``.
    """
    if net.J != design.J:
        raise ValueError(f"network has {net.J} studies, design has {design.J}")
    beta = np.asarray(beta, dtype=float)
    sigma = math.exp(log_sigma_u)
    rho = _rho(rho_unconstrained)
    B = np.linalg.inv(_sar_operator(rho, net)) * sigma
    y = design.response
    g, J = _group_index(design)
    eta0 = design.predictors @ beta

    def objective(z):
        eta = eta0 + (B @ z)[g]
        return float(_bernoulli_loglik(y, eta).sum() - 0.5 * z @ z), eta

    z = np.zeros(J)
    f, eta = objective(z)
    trace = []
    for _ in range(max_iter):
        p = expit(eta)
        grad = B.T @ np.bincount(g, y - p, minlength=J) - z
        H = np.eye(J) + B.T @ (B * np.bincount(g, p * (1 - p), minlength=J)[:, None])
        step = linalg.solve(H, grad, assume_a="pos")
        trace.append(float(np.max(np.abs(grad))))
        t = 1.0
        while True:
            f_new, eta_new = objective(z + t * step)
            if f_new >= f - 1e-12 or t < 1e-10:
                break
            t /= 2
        z, f, eta = z + t * step, f_new, eta_new
        if np.max(np.abs(t * step)) < tol * (1 + np.max(np.abs(z))):
            break
    else:
        raise ConvergenceError("Laplace mode search did not converge", trace)
    p = expit(eta)
    H = np.eye(J) + B.T @ (B * np.bincount(g, p * (1 - p), minlength=J)[:, None])
    _, logdet = np.linalg.slogdet(H)
    total = f - 0.5 * logdet
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite log-likelihood at beta={beta.tolist()}, "
                                 f"log_sigma_u={log_sigma_u}, rho={rho}")
    return float(total)


# ---------------------------------------------------------------- fitting

def numeric_gradient(f, x: np.ndarray, rel_step: float = REL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def numeric_hessian(f, x: np.ndarray, rel_step: float = REL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    k = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H


class _Objective:
    """Negative log-likelihood over the unconstrained parameter vector."""

    def __init__(self, spec: ModelSpec, fixed_log_sigma: float | None = None):
        self.spec = spec
        self.p = spec.design.p
        self.fixed_log_sigma = fixed_log_sigma
        self.free_rho = spec.is_sar and spec.fix_rho is None

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, float, float]:
        beta = theta[: self.p]
        i = self.p
        if self.fixed_log_sigma is None:
            log_sigma = float(np.clip(theta[i], *LOG_SIGMA_BOUNDS))
            i += 1
        else:
            log_sigma = self.fixed_log_sigma
        if self.free_rho:
            rho_u = float(theta[i])
        elif self.spec.is_sar:
            rho_u = math.atanh(self.spec.fix_rho)
        else:
            rho_u = 0.0
        return beta, log_sigma, rho_u

    def loglik(self, theta: np.ndarray) -> float:
        beta, log_sigma, rho_u = self.unpack(theta)
        spec = self.spec
        if spec.is_sar:
            return loglik_sar(beta, log_sigma, rho_u, spec.design, spec.random_structure.network)
        return loglik_independent(beta, log_sigma, spec.design, spec.quadrature_nodes)

    def __call__(self, theta: np.ndarray) -> float:
        return -self.loglik(theta)


def fit(spec: ModelSpec, start: np.ndarray | None = None) -> FittedModel:
    """Maximum likelihood by BFGS with central-difference gradients.

    ``start`` optionally overrides the default starting point (ordinary
    logit coefficients, ``log sigma_u = 0``, ``rho = 0``) on the
    unconstrained scale.
    """
    design = spec.design
    if spec.is_sar and spec.fix_rho is None and not np.any(spec.random_structure.network.row_std_w):
        raise SingularNetworkError("co-authorship network has no links; rho is not identified")
    beta0, marginal_ll, _ = fit_logit(design)
    obj = _Objective(spec)
    theta0 = np.concatenate([beta0, [0.0], [0.0] if obj.free_rho else []])
    if start is not None:
        theta0 = np.asarray(start, dtype=float)
        if theta0.shape != (len(beta0) + 1 + obj.free_rho,):
            raise ValueError("start vector has the wrong length")

    res = optimize.minimize(obj, theta0, jac=lambda th: numeric_gradient(obj, th), method="BFGS",
                            options={"gtol": spec.gtol, "maxiter": spec.max_iter, "xrtol": spec.step_tol})
    theta = res.x
    grad = numeric_gradient(obj, theta)
    grad_norm = float(np.max(np.abs(grad)))
    # the line search can stop on gradient noise just above gtol
    converged = bool(res.success or grad_norm < max(spec.gtol, 1e-4))
    loglik = -float(res.fun)
    p = design.p
    log_sigma = float(np.clip(theta[p], *LOG_SIGMA_BOUNDS))
    sigma = math.exp(log_sigma)
    boundary = sigma <= SIGMA_BOUNDARY
    rho = None
    if spec.is_sar:
        rho = _rho(theta[p + 1]) if obj.free_rho else float(spec.fix_rho)

    # vcov on the unconstrained scale, then delta method to the reporting scale
    if boundary:
        sub = _Objective(spec, fixed_log_sigma=log_sigma)
        keep = [i for i in range(theta.size) if i != p]
        H_sub = numeric_hessian(sub, theta[keep])
        H = np.full((theta.size, theta.size), np.nan)
        H[np.ix_(keep, keep)] = H_sub
        hess_for_pd = H_sub
    else:
        H = numeric_hessian(obj, theta)
        hess_for_pd = H
    H = 0.5 * (H + H.T)
    hess_for_pd = 0.5 * (hess_for_pd + hess_for_pd.T)
    pd = bool(np.all(np.linalg.eigvalsh(hess_for_pd) > 0))
    n_rep = p + 1 + (rho is not None)
    vcov = np.full((n_rep, n_rep), np.nan)
    if boundary:
        keep = [i for i in range(theta.size) if i != p]
        inv = np.linalg.pinv(hess_for_pd)
        V = np.full((theta.size, theta.size), np.nan)
        V[np.ix_(keep, keep)] = inv
    else:
        V = np.linalg.pinv(hess_for_pd)
    jac = np.ones(theta.size)
    jac[p] = sigma
    if obj.free_rho:
        jac[p + 1] = 1 - rho ** 2
    Vr = V * jac[:, None] * jac[None, :]
    vcov[: theta.size, : theta.size] = Vr
    if rho is not None and not obj.free_rho:
        vcov[-1, :] = vcov[:, -1] = 0.0
    if boundary:
        sigma = 0.0

    return FittedModel(
        column_names=design.column_names, beta=theta[:p].copy(), sigma_u=sigma, rho=rho,
        loglik=loglik, vcov=vcov, converged=converged, n_obs=design.n, n_studies=design.J,
        random="sar" if spec.is_sar else "independent", sqrt_n_center=design.sqrt_n_center,
        column_means=design.column_means(), threshold=design.threshold, marginal_loglik=marginal_ll,
        boundary=boundary, hessian_pd=pd, iterations=int(res.nit),
        categorical_columns=dict(design.categorical_columns),
        reference_levels=dict(design.reference_levels),
    )


# ------------------------------------------------------------- model tests

def chibar_pvalue(lr: float) -> float:
    """p-value of a 50:50 mixture of chi2(0) and chi2(1)."""
    return 1.0 if lr <= 0 else float(0.5 * stats.chi2.sf(lr, 1))


def lr_chibar_test(full: FittedModel | float, marginal_loglik: float | None = None) -> dict[str, float]:
    """LR test of ``sigma_u = 0`` against the ordinary logit with the same covariates."""
    ll_full = full.loglik if isinstance(full, FittedModel) else float(full)
    if marginal_loglik is None:
        if not isinstance(full, FittedModel) or full.marginal_loglik is None:
            raise ValueError("marginal_loglik is required")
        marginal_loglik = full.marginal_loglik
    lr = 2 * (ll_full - marginal_loglik)
    if lr < -1e-6:
        raise ValueError(f"negative LR statistic {lr:.3g}: the multilevel fit did not reach the logit optimum")
    lr = max(lr, 0.0)
    return {"lr": lr, "p_value": chibar_pvalue(lr)}


def icc(variance_u: float) -> float:
    """Latent-scale intraclass correlation for the logit link."""
    if variance_u < 0:
        raise ValueError("variance must be non-negative")
    return variance_u / (variance_u + LOGIT_RESIDUAL_VARIANCE)


def significance_stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""


@dataclass(frozen=True)
class ModelComparison:
    lr: float
    df: int
    p_value: float
    added: list[dict]
    shared: list[dict]
    base: FittedModel
    augmented: FittedModel


def compare_models(base_spec: ModelSpec, augmented_spec: ModelSpec) -> ModelComparison:
    """Likelihood-ratio comparison of nested specifications.

    Reports the LR gain and the size of the added coefficients, the two
    criteria for keeping interaction terms.
    """
    bd, ad = base_spec.design, augmented_spec.design
    if not set(bd.column_names) <= set(ad.column_names):
        raise ValueError("base specification is not nested in the augmented one")
    if bd.n != ad.n or not np.array_equal(bd.response, ad.response):
        raise ValueError("specifications use different data")
    if base_spec.is_sar != augmented_spec.is_sar:
        raise ValueError("specifications use different random structures")
    base = fit(base_spec)
    idx = {c: i for i, c in enumerate(bd.column_names)}
    start_beta = np.array([base.beta[idx[c]] if c in idx else 0.0 for c in ad.column_names])
    log_sigma = math.log(max(base.sigma_u, 1e-3))
    extra = [math.atanh(base.rho)] if augmented_spec.is_sar and augmented_spec.fix_rho is None else []
    aug = fit(augmented_spec, start=np.concatenate([start_beta, [log_sigma], extra]))
    df = ad.p - bd.p
    lr = max(2 * (aug.loglik - base.loglik), 0.0)
    p = 1.0 if df == 0 else float(stats.chi2.sf(lr, df))
    se = aug.se
    added = [{"name": c, "estimate": float(aug.beta[i]), "se": float(se[i])}
             for i, c in enumerate(ad.column_names) if c not in idx]
    shared = [{"name": c, "base": float(base.beta[idx[c]]), "augmented": float(aug.beta[i]),
               "delta": float(aug.beta[i] - base.beta[idx[c]])}
              for i, c in enumerate(ad.column_names) if c in idx]
    return ModelComparison(lr, df, p, added, shared, base, aug)
