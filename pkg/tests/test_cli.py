"""Command-line behavior: estimation, simulation, diagnostics, exit codes."""

import json
import re

import numpy as np
import pytest

import ocbps.simulation as sim
from ocbps.cli import main
from ocbps.errors import DataError
from ocbps.inference import EstimateReport
from ocbps.simulation import DgpSpec, draw_replication


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_sample_csv(path, sample):
    d = sample.covariates.shape[1]
    header = ["t", "y"] + [f"x{j}" for j in range(1, d + 1)]
    lines = [",".join(header)]
    for i in range(sample.n):
        row = [str(int(sample.treatment[i])), repr(float(sample.outcome[i]))]
        row += [repr(float(v)) for v in sample.covariates[i]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="module")
def study_csv(tmp_path_factory):
    sample = draw_replication(DgpSpec(n=1000, beta1=0.33), 7)
    path = tmp_path_factory.mktemp("data") / "study.csv"
    write_sample_csv(path, sample)
    return path


def test_known_propensity_toy_file(tmp_path, capsys):
    data = tmp_path / "toy.csv"
    data.write_text("t,y,pi,x1\n1,3,0.5,1\n0,1,0.5,2\n")
    code, out, err = run_cli(
        capsys, "estimate", "--data", str(data), "--method", "true",
        "--pi-column", "pi",
    )
    assert code == 0
    assert "point: 2.0" in out
    assert err == ""


def test_ocbps_estimate_json_round_trip(study_csv, capsys):
    code, out, _ = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "ocbps",
        "--h1", "1,x2,x3,x4", "--h2", "x1", "--out", "json",
    )
    assert code == 0
    report = EstimateReport.from_json(out.strip())
    assert report.estimand == "ate"
    assert report.method == "ocbps"
    assert abs(report.point - 82.2) <= 4.0 * report.std_error
    assert report.ci_low <= report.point <= report.ci_high
    assert report.residual_max <= 1e-8
    assert json.loads(out) == report.to_dict()


def test_cbps_estimate_with_custom_functions(study_csv, capsys):
    code, out, _ = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "cbps",
        "--f", "1,x1,x2,x3,x4", "--out", "json",
    )
    assert code == 0
    report = EstimateReport.from_json(out.strip())
    assert abs(report.point - 82.2) <= 6.0 * report.std_error
    assert report.residual_max <= 1e-8


def test_aipw_estimate_level_flag(study_csv, capsys):
    code, out, _ = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "aipw",
        "--level", "0.8", "--out", "json",
    )
    assert code == 0
    report = EstimateReport.from_json(out.strip())
    assert report.level == 0.8
    assert abs(report.point - 82.2) <= 6.0 * report.std_error


def test_att_estimate_supported_methods(study_csv, capsys):
    code, out, _ = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "cbps",
        "--estimand", "att", "--out", "json",
    )
    assert code == 0
    report = EstimateReport.from_json(out.strip())
    assert report.estimand == "att"
    assert np.isfinite(report.point)

    code, _, err = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "ocbps",
        "--estimand", "att", "--h1", "1,x2", "--h2", "x1",
    )
    assert code == 2
    assert "supports methods" in err


def test_estimate_csv_output(study_csv, capsys):
    code, out, _ = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "glm",
        "--out", "csv",
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("estimand,method,point,variance,std_error")
    fields = lines[1].split(",")
    assert fields[0] == "glm" or fields[1] == "glm"
    assert float(fields[2]) == pytest.approx(82.2, abs=8.0)


def test_missing_h2_names_the_flag(study_csv, capsys):
    code, _, err = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "ocbps",
        "--h1", "1,x2,x3,x4",
    )
    assert code == 2
    assert "--h2" in err


def test_known_method_requires_pi_column(study_csv, capsys):
    code, _, err = run_cli(
        capsys, "estimate", "--data", str(study_csv), "--method", "true",
    )
    assert code == 2
    assert "--pi-column" in err


def test_dataset_validation_failures(tmp_path, capsys):
    missing_t = tmp_path / "a.csv"
    missing_t.write_text("u,y,x1\n1,2,3\n")
    code, _, err = run_cli(
        capsys, "estimate", "--data", str(missing_t), "--method", "glm",
    )
    assert code == 2 and "'t'" in err

    bad_cell = tmp_path / "b.csv"
    bad_cell.write_text("t,y,x1\n1,2,3\n0,oops,1\n")
    code, _, err = run_cli(
        capsys, "estimate", "--data", str(bad_cell), "--method", "glm",
    )
    assert code == 2 and "not a number" in err

    bad_t = tmp_path / "c.csv"
    bad_t.write_text("t,y,x1\n2,1,3\n0,1,1\n")
    code, _, err = run_cli(
        capsys, "estimate", "--data", str(bad_t), "--method", "glm",
    )
    assert code == 2 and "0 and 1" in err

    code, _, err = run_cli(
        capsys, "estimate", "--data", str(tmp_path / "nope.csv"),
        "--method", "glm",
    )
    assert code == 2 and "cannot read" in err


def test_separated_data_reports_nonconvergence(tmp_path, capsys):
    rows = ["t,y,x1"]
    for v in range(1, 6):
        rows.append(f"1,{v}.0,{v}")
        rows.append(f"0,{v}.5,-{v}")
    data = tmp_path / "sep.csv"
    data.write_text("\n".join(rows) + "\n")
    code, _, err = run_cli(
        capsys, "estimate", "--data", str(data), "--method", "glm",
    )
    assert code == 3
    assert "did not converge" in err


def _indented_values(out, section):
    lines = out.splitlines()
    start = lines.index(section + ":") + 1
    values = []
    for line in lines[start:]:
        if not line.startswith("  "):
            break
        values.append(float(line.rsplit(": ", 1)[1]))
    return values


def test_diagnose_balancing_fit(study_csv, capsys):
    code, out, _ = run_cli(
        capsys, "diagnose", "--data", str(study_csv), "--method", "ocbps",
        "--h1", "1,x2,x3,x4", "--h2", "x1",
    )
    assert code == 0
    residuals = _indented_values(out, "moment_residuals")
    assert len(residuals) == 5
    assert max(abs(v) for v in residuals) <= 1e-8
    assert re.search(r"^pi_quantiles", out, re.M)
    assert re.search(r"^clip_events: \d+$", out, re.M)
    assert "weighted_means" in out


def test_diagnose_likelihood_fit_shows_imbalance(tmp_path, capsys):
    sample = draw_replication(
        DgpSpec(scenario="ps-misspecified", n=800, beta1=1.0), 11
    )
    data = tmp_path / "missp.csv"
    write_sample_csv(data, sample)
    code, out, _ = run_cli(
        capsys, "diagnose", "--data", str(data), "--method", "glm",
    )
    assert code == 0
    score = _indented_values(out, "score_residuals")
    assert max(abs(v) for v in score) <= 1e-8
    raw = _indented_values(out, "first_moment_residuals")
    assert max(abs(v) for v in raw) > 1e-3


def test_simulate_single_replication(tmp_path, capsys):
    out_csv = tmp_path / "one.csv"
    code, out, _ = run_cli(
        capsys, "simulate", "--scenario", "both-correct", "--n", "200",
        "--reps", "1", "--seed", "3", "--estimators", "ocbps",
        "--out", str(out_csv),
    )
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "estimator,bias,sd,rmse,coverage,failures"
    fields = lines[1].split(",")
    assert fields[0] == "ocbps"
    assert fields[2] == "0"                     # single draw: no spread
    assert "scenario=both-correct" in out


def test_simulate_deterministic_across_runs_and_workers(tmp_path, capsys):
    args = ["simulate", "--scenario", "both-correct", "--n", "200",
            "--reps", "6", "--seed", "14", "--estimators", "glm,ocbps"]
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    assert run_cli(capsys, *args, "--out", str(a))[0] == 0
    assert run_cli(capsys, *args, "--out", str(b))[0] == 0
    assert run_cli(capsys, *args, "--out", str(c), "--workers", "2")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() == c.read_bytes()


def test_simulate_invalid_summary_exit_code(capsys, monkeypatch):
    def broken(ctx):
        raise DataError("synthetic failure")

    monkeypatch.setitem(sim._ESTIMATORS, "glm", broken)
    code, out, _ = run_cli(
        capsys, "simulate", "--scenario", "both-correct", "--n", "200",
        "--reps", "4", "--seed", "2", "--estimators", "glm",
    )
    assert code == 4
    assert "flagged invalid" in out


def test_simulate_unknown_scenario(capsys):
    code, _, err = run_cli(
        capsys, "simulate", "--scenario", "table-one", "--reps", "2",
    )
    assert code == 2
    assert "unknown scenario" in err


def test_simulate_scenario_alias(capsys):
    code, out, _ = run_cli(
        capsys, "simulate", "--scenario", "ps-local", "--n", "400",
        "--reps", "2", "--estimators", "ocbps",
    )
    assert code == 0
    assert "scenario=ps-local-misspec" in out


def test_simulate_config_file(tmp_path, capsys):
    config = tmp_path / "design.json"
    config.write_text(json.dumps({"scenario": "both-correct", "n": 150,
                                  "beta1": 0.33}))
    code, out, _ = run_cli(
        capsys, "simulate", "--scenario", str(config), "--reps", "2",
        "--estimators", "ocbps",
    )
    assert code == 0
    assert "n=150" in out and "beta1=0.33" in out

    code, out, _ = run_cli(
        capsys, "simulate", "--scenario", str(config), "--reps", "2",
        "--n", "220", "--estimators", "ocbps",
    )
    assert code == 0
    assert "n=220" in out

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run_cli(capsys, "simulate", "--scenario", str(bad),
                           "--reps", "2")
    assert code == 2 and "scenario config" in err

    unknown = tmp_path / "extra.json"
    unknown.write_text(json.dumps({"scenario": "both-correct", "gamma": 2}))
    code, _, err = run_cli(capsys, "simulate", "--scenario", str(unknown),
                           "--reps", "2")
    assert code == 2 and "unknown scenario config" in err


def test_simulate_empty_estimator_list(capsys):
    code, _, err = run_cli(
        capsys, "simulate", "--scenario", "both-correct", "--reps", "2",
        "--estimators", " , ",
    )
    assert code == 2
    assert "empty estimator list" in err
