import json
import os
import subprocess
import sys

import pytest

from conftest import DATA, run_pipeline
from metareg import __version__
from metareg.cli import run

OUTPUTS = {
    "sim": ["estimates.csv", "studies.csv", "truth.json"],
    "ingest": ["dataset_summary.json", "vote_counts.csv", "network_edges.csv", "network_matrix.csv"],
    "fit": ["coefficients.csv", "model.json"],
    "density": ["density_tests.csv", "density_tests.json", "kde.csv"],
    "predict": ["contrasts.csv", "schemes.csv", "predictions.json"],
    "report": ["report.md"],
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def test_declared_files_written(pipeline):
    for sub, names in OUTPUTS.items():
        for name in names:
            assert os.path.isfile(os.path.join(pipeline, sub, name)), f"{sub}/{name}"


def test_provenance_everywhere(pipeline):
    for sub, names in OUTPUTS.items():
        for name in names:
            text = open(os.path.join(pipeline, sub, name), encoding="utf-8").read()
            if name.endswith(".json"):
                doc = json.loads(text)
                assert doc["schema_version"] == 1
                prov = doc["provenance"]
                assert prov["version"] == __version__ and "seed" in prov and len(prov["config_hash"]) == 16
            else:
                head = text.splitlines()[0] if name.endswith(".csv") else text.splitlines()[2]
                assert f"metareg {__version__}" in head and "seed=" in head and "config=" in head


def test_model_json_layout(pipeline):
    doc = json.load(open(os.path.join(pipeline, "fit", "model.json")))
    assert doc["model"]["random"] == "independent"
    assert {"lr_test", "icc", "aic", "sigma_u_squared", "coefficients"} <= set(doc)
    assert doc["formula"]["reference_levels"] == {"region": "EU"}
    sar = json.load(open(os.path.join(pipeline, "fit_sar", "model.json")))
    assert "aic" not in sar and "lr_test" not in sar
    assert sar["coefficients"][-1]["name"] == "rho"


def test_density_outputs(pipeline):
    rows = open(os.path.join(pipeline, "density", "density_tests.csv")).read().splitlines()
    assert rows[1].startswith("subgroup,n,statistic_1.645,p_value_1.645,statistic_1.96")
    assert rows[2].startswith("All studies,") and rows[3].startswith("region=EU,")
    kde = open(os.path.join(pipeline, "density", "kde.csv")).read().splitlines()
    assert kde[1] == "t,density" and kde[2].startswith("0.000000,") and kde[-1].startswith("3.000000,")


def test_golden_report(pipeline):
    got = open(os.path.join(pipeline, "report", "report.md"), "rb").read()
    assert got == open(os.path.join(DATA, "golden_report.md"), "rb").read()


def test_outputs_independent_of_out_dir(pipeline, tmp_path):
    other = run_pipeline(tmp_path)
    for sub, names in OUTPUTS.items():
        for name in names:
            a = open(os.path.join(pipeline, sub, name), "rb").read()
            b = open(os.path.join(other, sub, name), "rb").read()
            assert a == b, f"{sub}/{name}"


def test_nothing_written_outside_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "out").mkdir()
    run_pipeline(tmp_path / "out")
    assert sorted(os.listdir(tmp_path)) == ["out"]


def test_env_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("METAREG_OUT", str(tmp_path / "envout"))
    assert run(["simulate", "--config", os.path.join(DATA, "golden_config.json")]) == 0
    assert (tmp_path / "envout" / "truth.json").exists()


def test_seed_override(tmp_path):
    assert run(["simulate", "--config", os.path.join(DATA, "golden_config.json"), "--seed", "7",
                "--out", str(tmp_path)]) == 0
    doc = json.load(open(tmp_path / "truth.json"))
    assert doc["provenance"]["seed"] == 7 and doc["truth"]["seed"] == 7


# ---------------------------------------------------------- exit codes

def test_unknown_subcommand(capsys):
    assert run(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand_and_missing_flags(capsys):
    assert run([]) == 1
    assert run(["fit"]) == 1
    assert run(["density-test", "--estimates", "a", "--studies", "b", "--bandwidth-left", "0.3"]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    e = tmp_path / "e.csv"
    s = tmp_path / "s.csv"
    e.write_text("estimate_id,study_id,raw_effect,std_error,negative_is_good\nE1,S1,1.0,0,0\n")
    s.write_text("study_id,authors,year,published,sample_size\nS1,a,2000,1,10\n")
    assert run(["fit", "--estimates", str(e), "--studies", str(s), "--out", str(tmp_path)]) == 2
    assert "row 2" in capsys.readouterr().err
    assert run(["fit", "--estimates", str(tmp_path / "missing.csv"), "--studies", str(s)]) == 2
    assert run(["predict", "--model", str(tmp_path / "missing.json")]) == 2


def test_schema_mismatch_exit_2(tmp_path, pipeline):
    doc = json.load(open(os.path.join(pipeline, "fit", "model.json")))
    doc["schema_version"] = 2
    bad = tmp_path / "model.json"
    bad.write_text(json.dumps(doc))
    assert run(["report", "--model", str(bad), "--out", str(tmp_path)]) == 2
    assert run(["predict", "--model", str(bad), "--out", str(tmp_path)]) == 2


def test_unknown_level_in_contrast(tmp_path, pipeline):
    code = run(["predict", "--model", os.path.join(pipeline, "fit", "model.json"),
                "--contrast", "region=Mars@vs@region=EU", "--out", str(tmp_path)])
    assert code == 2


def test_logit_scale_predictions(tmp_path, pipeline):
    assert run(["predict", "--model", os.path.join(pipeline, "fit", "model.json"), "--ci-scale", "logit",
                "--scheme-file", os.path.join(DATA, "golden_schemes.json"), "--out", str(tmp_path)]) == 0
    doc = json.load(open(tmp_path / "predictions.json"))
    assert doc["ci_scale"] == "logit" and len(doc["schemes"]) == 3


def test_mundlak_and_threshold(tmp_path, pipeline):
    E = ["--estimates", os.path.join(pipeline, "sim", "estimates.csv"),
         "--studies", os.path.join(pipeline, "sim", "studies.csv")]
    assert run(["fit", *E, "--covariates", "x1", "--mundlak", "x1", "--threshold", "1.96", "--no-sqrt-n",
                "--out", str(tmp_path)]) == 0
    doc = json.load(open(tmp_path / "model.json"))
    assert doc["model"]["column_names"] == ["intercept", "x1", "mean_x1"]
    assert doc["model"]["threshold"] == 1.96


def test_version_and_console_script():
    res = subprocess.run([sys.executable, "-m", "metareg", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == f"metareg {__version__}"
