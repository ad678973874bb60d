import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dratt.cli import main, parse_filter, parse_grid, parse_sizes, resolve_config
from dratt.data_model import save_csv
from dratt.errors import ConfigError
from dratt.sim import confounded_dgp, generate, grouped_dgp

FIXTURE = Path(__file__).parent / "data" / "reference_dgp.csv"
REF = ["--input", str(FIXTURE), "--covariates", "x:binary", "--treatment", "a", "--outcome", "y",
       "--followup", "r"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def result(argv, capsys):
    code, out, err = run(argv, capsys)
    assert code == 0, err
    return json.loads(out)


@pytest.fixture(scope="module")
def confounded_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "conf.csv"
    save_csv(generate(confounded_dgp(), 4000, 11).dataset, path)
    return path


@pytest.fixture(scope="module")
def grouped_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "grp.csv"
    save_csv(generate(grouped_dgp(), 3000, 12).dataset, path)
    return path


def conf_args(path):
    return ["--input", path, "--covariates", "x1:binary,x2:binary", "--treatment", "a", "--outcome", "y",
            "--followup", "r", "--folds", 5]


def test_fixture_estimate_near_truth(capsys):
    doc = result(["estimate", *REF], capsys)
    assert doc["schema_version"] == 1 and doc["command"] == "estimate"
    res = doc["result"]
    assert abs(res["estimate"] - 0.1) < 3 * res["se"]
    assert res["ci"][0] < res["estimate"] < res["ci"][1]
    assert doc["config"]["folds"] == 10 and doc["config"]["clip"] == 0.01


def test_output_file_byte_identical(tmp_path, capsys):
    out, nuis = tmp_path / "out.json", tmp_path / "nuis.csv"
    seen = []
    for _ in range(2):
        assert run(["estimate", *REF, "--seed", 3, "--output", out, "--nuisance-csv", nuis], capsys)[0] == 0
        seen.append((out.read_bytes(), nuis.read_bytes()))
        out.unlink()
        nuis.unlink()
    assert seen[0] == seen[1]


def test_plain_covariate_names_are_inferred(capsys):
    args = list(REF)
    args[args.index("x:binary")] = "x"
    assert result(["estimate", *args], capsys)["result"] == result(["estimate", *REF], capsys)["result"]


def test_config_errors_exit_2(capsys, tmp_path):
    assert run(["estimate", "--input", FIXTURE], capsys)[0] == 2
    assert run(["estimate", *REF, "--folds", 1], capsys)[0] == 2
    assert run(["estimate", *REF, "--clip", 0.5], capsys)[0] == 2
    assert run(["estimate", *REF, "--learners", "boosting"], capsys)[0] == 2
    assert run(["estimate", *REF, "--filter", "nonsense"], capsys)[0] == 2
    assert run(["heterogeneity", *REF], capsys)[0] == 2
    assert run(["sensitivity", *REF, "--delta-grid", "0.5:2:0.1"], capsys)[0] == 2
    assert run(["calibrate", *REF], capsys)[0] == 2
    code, _, err = run(["simulate", "--dgp", "reference"], capsys)
    assert code == 2 and "--n" in err


def test_fail_fast_before_reading(capsys, tmp_path):
    # bad grid is reported even though the input does not exist
    args = list(REF)
    args[1] = str(tmp_path / "absent.csv")
    assert run(["sensitivity", *args, "--delta-grid", "x"], capsys)[0] == 2


def test_data_errors_exit_3(capsys, tmp_path):
    args = list(REF)
    args[1] = str(tmp_path / "absent.csv")
    assert run(["estimate", *args], capsys)[0] == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("x,r,a,y\n0,1,0,0\n1,2,0,1\n")
    args[1] = str(bad)
    code, _, err = run(["estimate", *args], capsys)
    assert code == 3 and "data error" in err
    assert run(["estimate", *REF, "--filter", "x>5"], capsys)[0] == 3


def test_numeric_error_exit_4(capsys, tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "untreated.csv"
    rows = [f"{rng.integers(2)},1,0,{rng.integers(2)}" for _ in range(200)]
    path.write_text("x,r,a,y\n" + "\n".join(rows) + "\n")
    args = list(REF)
    args[1] = str(path)
    code, _, err = run(["estimate", *args], capsys)
    assert code == 4 and "treated fraction" in err


def test_filters_restrict_before_folding(capsys, tmp_path):
    doc = result(["estimate", *REF, "--filter", "x==1"], capsys)
    n_x1 = sum(1 for line in FIXTURE.read_text().splitlines()[1:] if line.startswith("1,"))
    assert doc["result"]["n"] == n_x1
    assert doc["config"]["filter"] == ["x==1"]


def test_parse_helpers():
    assert parse_filter("victim_w1=0") == ("victim_w1", "=", "0")
    assert parse_filter("age >= 15") == ("age", ">=", "15")
    np.testing.assert_allclose(parse_grid("1:1.1:0.05"), [1.0, 1.05, 1.1])
    np.testing.assert_allclose(parse_grid("1,1.5,2"), [1, 1.5, 2])
    assert parse_grid("1:2:0.01").size == 101
    assert parse_sizes("1-3") == [1, 2, 3] and parse_sizes("2,5") == [2, 5]
    with pytest.raises(ConfigError):
        parse_sizes("a-b")


def test_ini_config_and_precedence(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[dratt]\nfolds = 4\nseed = 9\nlearner-param = logistic.interactions=1\n"
                   "filter =\n    x>=0\n")
    cfg = resolve_config(["estimate", *REF, "--config", str(ini), "--seed", "2"])
    assert cfg["folds"] == 4 and cfg["seed"] == 2 and cfg["filter"] == ["x>=0"]
    bad = tmp_path / "bad.ini"
    bad.write_text("[dratt]\nfoldz = 3\n")
    assert run(["estimate", *REF, "--config", bad], capsys)[0] == 2


def test_roles_from_config_file(tmp_path, capsys):
    ini = tmp_path / "roles.ini"
    ini.write_text(f"[data]\ninput = {FIXTURE}\ncovariates = x:binary\ntreatment = a\noutcome = y\n"
                   "followup = r\n")
    assert result(["estimate", "--config", ini], capsys)["result"] == result(["estimate", *REF], capsys)["result"]


def test_print_config(capsys):
    doc = result(["sensitivity", *REF, "--print-config"], capsys)
    assert doc["delta_grid"] == "1:2:0.01" and doc["learners"] == "logistic" and doc["folds"] == 10
    assert "schema_version" not in doc


def test_otr_with_bounds(confounded_csv, capsys):
    res = result(["otr", *conf_args(confounded_csv), "--delta-add", 0, "--delta-add", 0.05], capsys)["result"]
    lo0, hi0 = res["bounds"][0]["lower"], res["bounds"][0]["upper"]
    assert lo0 == pytest.approx(hi0) == pytest.approx(res["estimate"])
    assert res["bounds"][1]["lower"] < lo0 < res["bounds"][1]["upper"]


def test_sensitivity_command(confounded_csv, tmp_path, capsys):
    curve = tmp_path / "curve.csv"
    res = result(["sensitivity", *conf_args(confounded_csv), "--curve-csv", curve], capsys)["result"]
    assert len(res["curve"]["delta"]) == 101
    assert res["curve"]["lower"][0][0] == pytest.approx(res["estimate"]["estimate"], abs=1e-15)
    assert len(curve.read_text().splitlines()) == 102


def test_calibrate_command(confounded_csv, capsys):
    res = result(["calibrate", *conf_args(confounded_csv), "--subsets", "x1,x2", "--subsets", "x2",
                  "--random-subsets", "1", "--per-size", 2, "--sup"], capsys)["result"]
    cal = res["calibrations"]
    assert len(cal) == 4
    assert cal[0]["delta_hat"] == pytest.approx(1.0, abs=1e-9)
    assert cal[1]["subset"] == ["x2"] and cal[1]["delta_hat"] > 1.2 and "sup" in cal[1]
    assert run(["calibrate", *conf_args(confounded_csv), "--subsets", "nope"], capsys)[0] == 2


def test_overlap_command(confounded_csv, tmp_path, capsys):
    hist = tmp_path / "h.csv"
    res = result(["overlap", *conf_args(confounded_csv), "--bins", 10, "--histogram-csv", hist], capsys)["result"]
    assert sum(res["counts"]) == 4000 and len(res["edges"]) == 11
    assert hist.read_text().splitlines()[0] == "bin_lo,bin_hi,count"


def test_heterogeneity_command(grouped_csv, capsys):
    args = ["--input", grouped_csv, "--covariates", "g1:binary,g2:binary,x:binary", "--treatment", "a",
            "--outcome", "y", "--followup", "r", "--group", "group", "--folds", 5]
    res = result(["heterogeneity", *args], capsys)["result"]
    assert res["test"]["df"] == 2 and 0 <= res["test"]["p_value"] <= 1
    assert sorted(g["label"] for g in res["groups"]) == ["g0", "g1", "g2"]
    assert run(["heterogeneity", *args, "--min-group-size", 10**6], capsys)[0] == 4


def test_simulate_command(tmp_path, capsys):
    argv = ["simulate", "--dgp", "reference", "--n", 500, "--reps", 5, "--seed", 1]
    a, b = run(argv, capsys), run(argv, capsys)
    assert a[0] == 0 and a[1] == b[1]
    res = json.loads(a[1])["result"]
    assert res["reps"] == 5 and res["truth"] == pytest.approx(0.1)
    table = tmp_path / "t.csv"
    res = result(["simulate", "--dgp", "reference", "--task", "convergence", "--n-grid", "200,800",
                  "--reps", 5, "--table-csv", table], capsys)["result"]
    assert len(res["reports"]) == 2 and table.exists()
    res = result(["simulate", "--dgp", "confounded", "--n", 2000, "--reps", 2, "--learners", "logistic",
                  "--learner-param", "logistic.interactions=2", "--break", "omega,mu0,mu1"], capsys)["result"]
    assert res["consistent_branch"] is False
    assert run(["simulate", "--dgp", "reference", "--n", 50, "--break", "pi", "--reps", 2], capsys)[0] == 2
    assert run(["simulate", "--dgp", "reference", "--n", 50, "--effects", "0.1,0.2"], capsys)[0] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dratt", "estimate", "--input", str(tmp_path / "no.csv"),
                           "--covariates", "x:binary", "--treatment", "a", "--outcome", "y",
                           "--followup", "r"], capture_output=True, text=True)
    assert proc.returncode == 3 and "cannot read" in proc.stderr
