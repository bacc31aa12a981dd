import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metareg.domain import Dataset, EstimateRecord, StudyRecord

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_dataset(t_by_study, study_cov=None, est_cov=None, years=None, authors=None, sizes=None):
    """Small in-memory dataset; ``t_by_study`` maps study id to a list of t values (se = 1)."""
    estimates, studies = [], {}
    k = 0
    for j, (sid, ts) in enumerate(t_by_study.items()):
        for i, t in enumerate(ts):
            cov = {name: vals[sid][i] for name, vals in (est_cov or {}).items()}
            estimates.append(EstimateRecord(f"E{k:04d}", sid, float(t), 1.0, False, cov))
            k += 1
        scov = {name: vals[sid] for name, vals in (study_cov or {}).items()}
        studies[sid] = StudyRecord(sid, (authors or {}).get(sid, {f"A{j}"}), (years or {}).get(sid, 2000),
                                   False, (sizes or {}).get(sid, 100), scov)
    return Dataset(estimates, studies)


def write_csvs(tmp_path, estimates_rows, studies_rows, est_header=None, study_header=None):
    est_header = est_header or "estimate_id,study_id,raw_effect,std_error,negative_is_good"
    study_header = study_header or "study_id,authors,year,published,sample_size"
    e = tmp_path / "estimates.csv"
    s = tmp_path / "studies.csv"
    e.write_text(est_header + "\n" + "".join(r + "\n" for r in estimates_rows))
    s.write_text(study_header + "\n" + "".join(r + "\n" for r in studies_rows))
    return e, s


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sim_design(seed=0, n_studies=20, per_study=15, sigma_u=1.0, beta=(-0.5, 1.0), rho=0.0, network=None,
               poisson=True):
    """Simulated dataset and its generating-model design matrix."""
    from metareg.domain import build_design
    from metareg.simulate import NetworkConfig, SimConfig, simulate_dataset

    if rho and network is None:
        network = NetworkConfig()
    cfg = SimConfig(n_studies=n_studies, estimates_per_study=per_study, poisson=poisson, beta_true=beta,
                    sigma_u_true=sigma_u, rho_true=rho, network=network, seed=seed)
    ds, truth = simulate_dataset(cfg)
    return ds, build_design(ds, cfg.formula()), truth


DATA = os.path.join(os.path.dirname(__file__), "data")


def run_pipeline(out, argv_run=None):
    """simulate -> ingest -> fit (both structures) -> density-test -> predict -> report into ``out``."""
    from metareg.cli import run

    argv_run = argv_run or run
    out = str(out)
    E = ["--estimates", f"{out}/sim/estimates.csv", "--studies", f"{out}/sim/studies.csv"]
    steps = [
        ["simulate", "--config", os.path.join(DATA, "golden_config.json"), "--out", f"{out}/sim"],
        ["ingest", *E, "--group-by", "region", "--out", f"{out}/ingest"],
        ["fit", *E, "--covariates", "x1,region", "--reference", "region=EU", "--out", f"{out}/fit"],
        ["fit", *E, "--covariates", "x1,region", "--reference", "region=EU", "--random", "sar",
         "--out", f"{out}/fit_sar"],
        ["density-test", *E, "--bootstrap", "60", "--seed", "5", "--filter", "region=EU", "--out", f"{out}/density"],
        ["predict", "--model", f"{out}/fit/model.json", "--contrast", "x1=1@vs@x1=0",
         "--contrast", "region=US@vs@region=EU", "--scheme-file", os.path.join(DATA, "golden_schemes.json"),
         "--out", f"{out}/predict"],
        ["report", "--model", f"{out}/fit/model.json", "--density", f"{out}/density/density_tests.json",
         "--predictions", f"{out}/predict/predictions.json", "--out", f"{out}/report"],
    ]
    for argv in steps:
        code = argv_run(argv)
        assert code == 0, f"{argv[0]} exited with {code}"
    return out
