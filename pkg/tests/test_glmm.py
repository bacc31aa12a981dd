import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, optimize, stats
from scipy.special import expit

from conftest import make_dataset, sim_design
from metareg.domain import Dataset, Formula, StudyRecord, build_design
from metareg.glmm import (FittedModel, Independent, ModelSpec, SarNetwork, SingularNetworkError, chibar_pvalue,
                          compare_models, fit, icc, logit_loglik, loglik_independent, loglik_sar, lr_chibar_test,
                          sar_log_prior, sigma_matrix, significance_stars)
from metareg.network import CoauthorNetwork, build_adjacency
from metareg.simulate import NetworkConfig, SimConfig, make_rng, replication_seeds, simulate_dataset


def two_study_net():
    return CoauthorNetwork.from_raw(["S1", "S2"], np.array([[0, 1], [1, 0.0]]))


def trapezoid_single_study(ys, etas, sigma):
    # oracle: brute-force integral over u on a 10,001-point grid
    u = np.linspace(-10, 10, 10_001)
    lik = np.ones_like(u)
    for y, e in zip(ys, etas):
        p = expit(e + sigma * u)
        lik *= p if y else 1 - p
    return math.log(integrate.trapezoid(lik * stats.norm.pdf(u), u))


# ----------------------------------------------------------- independent

def test_sigma_to_zero_is_logit():
    _, d, _ = sim_design(1)
    beta = np.array([-0.3, 0.8])
    assert loglik_independent(beta, -20.0, d) == pytest.approx(logit_loglik(beta, d), abs=1e-6)


@pytest.mark.filterwarnings("ignore::metareg.domain.SeparationWarning")
@pytest.mark.parametrize("t", [2.5, 0.3])
def test_single_estimate_oracle(t):
    d = build_design(make_dataset({"S1": [t]}), Formula((), sqrt_n=False))
    ll = loglik_independent(np.zeros(1), 0.0, d)
    assert ll == pytest.approx(trapezoid_single_study([t > 1.645], [0.0], 1.0), abs=1e-6)


def test_relabelling_studies():
    ds, d, _ = sim_design(2, n_studies=12)
    order = list(ds.studies)[::-1]
    perm = Dataset(sorted(ds.estimates, key=lambda e: order.index(e.study_id)),
                   {sid: ds.studies[sid] for sid in order})
    d2 = build_design(perm, Formula(("x1",), sqrt_n=False))
    beta = np.array([-0.4, 0.9])
    assert loglik_independent(beta, 0.1, d2) == pytest.approx(loglik_independent(beta, 0.1, d), abs=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_quadrature_converged_at_15_nodes(seed):
    _, d, _ = sim_design(seed, n_studies=50, per_study=20)
    beta = np.array([-0.5, 1.0])
    a = loglik_independent(beta, 0.0, d, nodes=15)
    b = loglik_independent(beta, 0.0, d, nodes=51)
    assert abs(a - b) / abs(b) < 1e-6


# ------------------------------------------------------------------- SAR

@pytest.mark.parametrize("seed", range(3))
def test_laplace_matches_quadrature_at_rho_zero(seed):
    _, d, _ = sim_design(seed, n_studies=20, per_study=15)
    net = CoauthorNetwork.from_raw(d.study_order, np.zeros((20, 20)))
    beta = np.array([-0.5, 1.0])
    a = loglik_sar(beta, 0.0, 0.0, d, net)
    b = loglik_independent(beta, 0.0, d)
    assert abs(a - b) / abs(b) < 0.005


def test_single_study_sar():
    d = build_design(make_dataset({"S1": [2.0, 0.5, 1.9]}), Formula((), sqrt_n=False))
    net = CoauthorNetwork.from_raw(["S1"], np.zeros((1, 1)))
    beta = np.array([0.2])
    a = loglik_sar(beta, 0.3, 0.0, d, net)
    assert loglik_sar(beta, 0.3, 1.2, d, net) == pytest.approx(a, abs=1e-8)
    # oracle: scalar Laplace approximation of the single-study integral
    y = d.response
    s = math.exp(0.3)

    def neg(u):
        eta = 0.2 + u
        return -(np.sum(y * eta - np.logaddexp(0, eta)) - 0.5 * (u / s) ** 2)

    u_hat = optimize.minimize_scalar(neg, bracket=(-3, 3), tol=1e-12).x
    p = expit(0.2 + u_hat)
    curv = 3 * p * (1 - p) + 1 / s ** 2
    oracle = -neg(u_hat) - math.log(s) - 0.5 * math.log(curv)
    assert a == pytest.approx(oracle, abs=1e-8)


def test_sar_prior_uses_eq_covariance():
    net = two_study_net()
    A = np.eye(2) - 0.5 * net.row_std_w
    Sigma = np.linalg.inv(A.T @ A)
    v = np.array([0.4, -1.3])
    expected = stats.multivariate_normal(np.zeros(2), Sigma).logpdf(v)
    assert sar_log_prior(v, 1.0, 0.5, net) == pytest.approx(expected, abs=1e-10)


def test_sigma_matrix_examples():
    net = two_study_net()
    # oracle: (I - 0.5 W)'(I - 0.5 W) = [[1.25, -1], [-1, 1.25]], inverted by hand
    A = np.eye(2) - 0.5 * net.row_std_w
    direct = np.linalg.inv(A.T @ A)
    frozen = np.array([[20 / 9, 16 / 9], [16 / 9, 20 / 9]])
    assert np.allclose(direct, frozen, atol=1e-12)
    assert np.allclose(sigma_matrix(1.0, 0.5, net), frozen, atol=1e-3)
    assert np.array_equal(sigma_matrix(0.0, 0.5, net), np.zeros((2, 2)))
    assert np.allclose(sigma_matrix(2.0, 0.0, net), 4 * np.eye(2), atol=1e-12)


def test_sar_rejects_mismatched_network():
    _, d, _ = sim_design(0, n_studies=5)
    net = CoauthorNetwork.from_raw(["a", "b"], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        loglik_sar(np.zeros(2), 0.0, 0.0, d, net)
    with pytest.raises(ValueError):
        ModelSpec(d, SarNetwork(net))


def test_sar_fit_without_links_is_error():
    _, d, _ = sim_design(0, n_studies=5)
    net = CoauthorNetwork.from_raw(d.study_order, np.zeros((5, 5)))
    with pytest.raises(SingularNetworkError):
        fit(ModelSpec(d, SarNetwork(net)))


# ------------------------------------------------------------------- fit

@pytest.fixture(scope="module")
def fitted():
    _, d, _ = sim_design(5, n_studies=40, per_study=15)
    return d, fit(ModelSpec(d, Independent()))


def test_fit_basic(fitted):
    d, m = fitted
    assert m.converged and m.hessian_pd and m.rho is None
    assert m.loglik == pytest.approx(loglik_independent(m.beta, math.log(m.sigma_u), d), abs=1e-9)
    V = m.vcov
    assert np.allclose(V, V.T, atol=1e-12)
    assert np.linalg.eigvalsh(V).min() > -1e-8
    assert np.all(np.diag(V) > 0)
    assert m.aic == pytest.approx(2 * 3 - 2 * m.loglik)


def test_fit_is_a_maximum(fitted):
    d, m = fitted
    base = loglik_independent(m.beta, math.log(m.sigma_u), d)
    for k in range(3):
        for h in (-1e-2, 1e-2):
            b = m.beta.copy()
            ls = math.log(m.sigma_u)
            if k < 2:
                b[k] += h
            else:
                ls += h
            assert loglik_independent(b, ls, d) <= base + 1e-8


def test_model_json_roundtrip(fitted):
    _, m = fitted
    back = FittedModel.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(back.beta, m.beta) and np.array_equal(back.vcov, m.vcov)
    assert back.sigma_u == m.sigma_u and back.column_names == m.column_names
    bad = m.to_dict() | {"schema_version": 99}
    with pytest.raises(ValueError):
        FittedModel.from_dict(bad)


def test_duplicated_studies_double_loglik():
    ds, d, _ = sim_design(6, n_studies=15)
    extra = [type(e)("D" + e.estimate_id, "D" + e.study_id, e.raw_effect, e.std_error, e.negative_is_good,
                     e.covariates) for e in ds.estimates]
    studies = dict(ds.studies)
    studies.update({"D" + k: StudyRecord("D" + k, s.authors, s.year, s.published, s.sample_size)
                    for k, s in ds.studies.items()})
    dd = build_design(Dataset(list(ds.estimates) + extra, studies), Formula(("x1",), sqrt_n=False))
    m1 = fit(ModelSpec(d, Independent()))
    m2 = fit(ModelSpec(dd, Independent()))
    assert np.allclose(m2.beta, m1.beta, atol=1e-4)
    assert m2.loglik == pytest.approx(2 * m1.loglik, rel=1e-4)


def test_recoding_binary_covariate():
    ds, d, _ = sim_design(7, n_studies=20)
    flipped = d.predictors.copy()
    flipped[:, 1] = 1 - flipped[:, 1]
    from dataclasses import replace
    d2 = replace(d, predictors=flipped)
    m1 = fit(ModelSpec(d, Independent()))
    m2 = fit(ModelSpec(d2, Independent()))
    assert m2.loglik == pytest.approx(m1.loglik, abs=1e-6)
    assert m2.beta[1] == pytest.approx(-m1.beta[1], abs=1e-3)
    assert m2.beta[0] == pytest.approx(m1.beta[0] + m1.beta[1], abs=1e-3)


def test_rho_fixed_zero_matches_independent():
    ds, d, _ = sim_design(8, n_studies=30, per_study=15, network=NetworkConfig())
    net = build_adjacency(ds.studies)
    ind = fit(ModelSpec(d, Independent()))
    sar0 = fit(ModelSpec(d, SarNetwork(net), fix_rho=0.0))
    assert sar0.rho == 0.0
    assert np.allclose(sar0.beta, ind.beta, atol=0.02)
    assert sar0.sigma_u == pytest.approx(ind.sigma_u, abs=0.02)
    assert sar0.se[-1] == 0.0


def test_sar_fit_reports_rho():
    ds, d, _ = sim_design(9, n_studies=40, per_study=15, rho=0.5)
    m = fit(ModelSpec(d, SarNetwork(build_adjacency(ds.studies))))
    assert m.rho is not None and -1 < m.rho < 1
    assert m.param_names[-1] == "rho" and m.vcov.shape == (4, 4)


def test_boundary_fit():
    _, d, _ = sim_design(3, n_studies=30, sigma_u=0.0)
    m = fit(ModelSpec(d, Independent()), start=np.array([-0.5, 1.0, -13.0]))
    assert m.boundary and m.sigma_u == 0.0
    assert np.isnan(m.se[2]) and np.all(np.isfinite(m.se[:2]))


# --------------------------------------------------------- tests and ICC

def test_chibar_examples():
    # oracle: half the chi-square(1) upper tail
    assert chibar_pvalue(2.706) == pytest.approx(0.5 * stats.chi2.sf(2.706, 1), abs=1e-12)
    assert chibar_pvalue(2.706) == pytest.approx(0.050, abs=1e-3)
    assert chibar_pvalue(30.56) < 1e-7
    assert chibar_pvalue(0.0) == 1.0


def test_lr_test():
    assert lr_chibar_test(-100.0, -101.353)["p_value"] == pytest.approx(0.05, abs=1e-3)
    assert lr_chibar_test(-100.0, -100.0) == {"lr": 0.0, "p_value": 1.0}
    with pytest.raises(ValueError):
        lr_chibar_test(-101.0, -100.0)


def test_icc_examples():
    assert icc(1.144) == pytest.approx(0.258, abs=1e-3)
    assert icc(1.211) == pytest.approx(0.269, abs=1e-3)
    assert icc(0.0) == 0.0
    with pytest.raises(ValueError):
        icc(-0.1)


@given(st.floats(0, 1e6))
def test_icc_range(v):
    assert 0 <= icc(v) < 1


@pytest.mark.parametrize("p,stars", [(0.026, "**"), (0.005, "***"), (0.07, "*"), (0.2, ""), (0.01, "**")])
def test_stars(p, stars):
    assert significance_stars(p) == stars


# ---------------------------------------------------------- comparisons

def _interaction_design(seed, coef):
    from metareg.simulate import CovariateSpec
    cfg = SimConfig(n_studies=50, estimates_per_study=20, beta_true=(-0.5, 0.5, 0.5),
                    covariates=(CovariateSpec("a"), CovariateSpec("b")), interactions=(("a", "b", coef),),
                    seed=seed)
    ds, _ = simulate_dataset(cfg)
    base = build_design(ds, cfg.formula(interactions=False))
    aug = build_design(ds, cfg.formula())
    return ModelSpec(base, Independent()), ModelSpec(aug, Independent())


def test_compare_identical_specs():
    base, _ = _interaction_design(0, 0.0)
    res = compare_models(base, base)
    assert res.lr == 0.0 and res.p_value == 1.0 and res.df == 0


def test_compare_rejects_non_nested():
    base, aug = _interaction_design(0, 0.0)
    with pytest.raises(ValueError):
        compare_models(aug, base)


@pytest.mark.slow
def test_interaction_power():
    pvals = [compare_models(*_interaction_design(s, 1.0)).p_value for s in replication_seeds(21, 100)]
    assert np.mean(np.array(pvals) < 0.05) >= 0.80


@pytest.mark.slow
def test_interaction_size():
    pvals = [compare_models(*_interaction_design(s, 0.0)).p_value for s in replication_seeds(22, 200)]
    assert 0.02 <= np.mean(np.array(pvals) < 0.05) <= 0.09


@pytest.mark.slow
def test_recovery_two_coefficients():
    from metareg.simulate import monte_carlo_recovery
    rep = monte_carlo_recovery(SimConfig(n_studies=50, estimates_per_study=20, seed=31), 200)
    assert np.all(np.abs(rep.bias[:2]) < 0.1)
    assert abs(rep.bias[2]) < 0.15


@pytest.mark.slow
def test_boundary_recovery():
    # at 20 estimates per study the MLE itself exceeds 0.15 in about a quarter
    # of null datasets (genuine interior maxima), so use 60 per study
    small = 0
    for s in replication_seeds(41, 100):
        _, d, _ = sim_design(s, n_studies=50, per_study=60, sigma_u=0.0)
        small += fit(ModelSpec(d, Independent())).sigma_u < 0.15
    assert small >= 90
