import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import expit

from milr import Bag, BagDataset, FitConfig, write_csv
from milr.baselines import fit_naive
from milr.cli import build_parser, main

from conftest import make_dataset


@pytest.fixture
def data(tmp_path, rng):
    path = tmp_path / "bags.csv"
    write_csv(make_dataset(rng, n=50, p=5, sizes=(3, 3), coef=[2, -1.5, 0, 0, 1], intercept=-1.5), path)
    return path


def _read_json(path):
    return json.loads(path.read_text())


def test_fit_at_lambda_max_has_no_slopes(data, tmp_path):
    out = tmp_path / "m.json"
    assert main(["fit", "--data", str(data), "--lambda", "max", "--out", str(out)]) == 0
    model = _read_json(out)
    assert all(b == 0.0 for b in model["fit"]["coef"]["beta"])
    assert model["fit"]["lambda"] == model["lambda_max"]
    assert (tmp_path / "m.manifest.json").exists()


def test_fit_unpenalized_singletons_match_irls(tmp_path, rng):
    X = rng.standard_normal((120, 3))
    y = rng.random(120) < expit(0.4 + X @ [1.0, -0.5, 0.2])
    ds = BagDataset(tuple(Bag(f"i{i}", int(y[i]), X[i:i + 1]) for i in range(120)))
    write_csv(ds, tmp_path / "s.csv")
    out = tmp_path / "m.json"
    rc = main(["fit", "--data", str(tmp_path / "s.csv"), "--lambda", "0", "--tol", "1e-10",
               "--max-iter", "5000", "--out", str(out)])
    assert rc == 0
    raw = _read_json(out)["raw_coefficients"]
    ref = fit_naive(ds, FitConfig(tol=1e-12))
    np.testing.assert_allclose(raw["beta"], ref.coef.beta, atol=1e-6)
    assert raw["intercept"] == pytest.approx(ref.coef.intercept, abs=1e-6)


def test_missing_file_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nowhere.csv"
    assert main(["fit", "--data", str(missing), "--lambda", "1", "--out", str(tmp_path / "x.json")]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["fit", "--lambda", "1"],
    ["fit", "--data", "d.csv", "--lambda", "-2", "--out", "x"],
    ["cv", "--data", "d.csv", "--select", "aic", "--out-dir", "o"],
    ["frobnicate"],
])
def test_bad_flags(argv):
    assert main(argv) == 2


def test_malformed_csv_is_runtime_failure(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("bag_id,label,f\na,1,0.5\na,0,0.2\n")
    assert main(["fit", "--data", str(bad), "--lambda", "1", "--out", str(tmp_path / "m.json")]) == 1
    assert "inconsistent bag label" in capsys.readouterr().err


def test_cv_defaults():
    args = build_parser().parse_args(["cv", "--data", "d.csv", "--out-dir", "o"])
    assert (args.folds, args.grid_size, args.eps, args.select) == (10, 20, 0.001, "cv")


def test_cv_writes_report_and_model(data, tmp_path):
    out = tmp_path / "cv"
    assert main(["cv", "--data", str(data), "--folds", "5", "--out-dir", str(out)]) == 0
    lines = (out / "cv_report.csv").read_text().splitlines()
    assert lines[0] == "lambda,mean_deviance,se_deviance" and len(lines) == 21
    report = _read_json(out / "cv_report.json")
    model = _read_json(out / "model.json")
    assert model["fit"]["lambda"] == report["chosen_lambda"]
    man = _read_json(out / "manifest.json")
    assert man["command"] == "cv" and man["seeds"]["folds"] == 0
    assert set(man["outputs"]) == {"cv_report.csv", "cv_report.json", "path.json", "model.json"}


def test_bic_skips_cross_validation(data, tmp_path):
    out = tmp_path / "bic"
    assert main(["cv", "--data", str(data), "--select", "bic", "--out-dir", str(out)]) == 0
    assert not (out / "cv_report.csv").exists()
    rows = (out / "bic.csv").read_text().splitlines()
    assert rows[0] == "lambda,deviance,n_nonzero,bic" and len(rows) == 21
    assert "cross_validate" not in _read_json(out / "manifest.json")["timing"]


def test_seed_repetition_and_jobs(data, tmp_path):
    for name, jobs in (("a", "1"), ("b", "1"), ("c", "3")):
        assert main(["cv", "--data", str(data), "--folds", "4", "--grid-size", "8", "--seed", "5",
                     "--jobs", jobs, "--out-dir", str(tmp_path / name)]) == 0
    for f in ("cv_report.csv", "cv_report.json", "model.json", "path.json"):
        ref = (tmp_path / "a" / f).read_bytes()
        assert (tmp_path / "b" / f).read_bytes() == ref
        assert (tmp_path / "c" / f).read_bytes() == ref


def test_seed_from_environment(data, tmp_path, monkeypatch):
    monkeypatch.setenv("MILR_SEED", "17")
    out = tmp_path / "cv"
    assert main(["cv", "--data", str(data), "--folds", "3", "--grid-size", "4", "--out-dir", str(out)]) == 0
    assert _read_json(out / "manifest.json")["seeds"]["folds"] == 17
    monkeypatch.setenv("MILR_SEED", "abc")
    assert main(["cv", "--data", str(data), "--out-dir", str(out)]) == 2


class TestPredict:
    @pytest.fixture
    def model(self, data, tmp_path):
        out = tmp_path / "model.json"
        assert main(["fit", "--data", str(data), "--lambda", "max", "--out", str(out)]) == 0
        return out

    def test_zero_slopes_give_equal_probabilities(self, model, data, tmp_path, capsys):
        out = tmp_path / "p.csv"
        metrics = tmp_path / "met.json"
        rc = main(["predict", "--model", str(model), "--data", str(data), "--out", str(out), "--metrics", str(metrics)])
        assert rc == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "bag_id,probability,predicted"
        probs = {r.split(",")[1] for r in rows[1:]}
        assert len(probs) == 1
        m = _read_json(metrics)
        assert set(m) == {"accuracy", "auc", "n_bags", "threshold"}
        assert m["auc"] == 0.5
        assert "accuracy=" in capsys.readouterr().out

    def test_threshold_must_be_open_interval(self, model, data, tmp_path):
        rc = main(["predict", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "p.csv"),
                   "--threshold", "1.0"])
        assert rc == 2

    def test_dimension_mismatch(self, model, tmp_path, rng, capsys):
        other = tmp_path / "other.csv"
        write_csv(make_dataset(rng, n=10, p=2), other)
        assert main(["predict", "--model", str(model), "--data", str(other), "--out", str(tmp_path / "p.csv")]) == 1
        assert "features" in capsys.readouterr().err

    def test_unlabeled_input_has_no_metrics(self, model, tmp_path, capsys):
        unl = tmp_path / "u.csv"
        unl.write_text("bag_id,f1,f2,f3,f4,f5\na,0,0,0,0,0\na,1,1,1,1,1\nb,2,0,1,0,1\n")
        metrics = tmp_path / "met.json"
        rc = main(["predict", "--model", str(model), "--data", str(unl), "--out", str(tmp_path / "p.csv"),
                   "--metrics", str(metrics)])
        assert rc == 0
        assert not metrics.exists()
        assert len((tmp_path / "p.csv").read_text().splitlines()) == 3


class TestSimulate:
    def test_unknown_scheme(self, tmp_path):
        assert main(["simulate", "--scheme", "G", "--replicates", "1", "--out-dir", str(tmp_path)]) == 2

    def test_table1_shape(self, tmp_path):
        assert main(["simulate", "--scheme", "table1", "--replicates", "2", "--out-dir", str(tmp_path)]) == 0
        rows = (tmp_path / "table1.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 * 4
        assert {r.split(",")[0] for r in rows[1:]} == {"Naive", "MILR"}

    def test_scheme_a_smoke(self, tmp_path):
        rc = main(["simulate", "--scheme", "A", "--replicates", "1", "--folds", "3", "--grid-size", "5",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        header = (tmp_path / "table2_A_cv.csv").read_text().splitlines()[0]
        assert header == "model,true_positive,false_positive,true_negative,false_negative"


class TestRerun:
    def test_reproduces_bit_exactly(self, data, tmp_path, capsys):
        first = tmp_path / "first"
        assert main(["cv", "--data", str(data), "--folds", "3", "--grid-size", "6", "--out-dir", str(first)]) == 0
        assert main(["rerun", "--manifest", str(first / "manifest.json"), "--out-dir", str(tmp_path / "again")]) == 0
        for f in ("cv_report.csv", "model.json", "path.json"):
            assert (first / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
        assert "byte-identically" in capsys.readouterr().out

    def test_detects_changed_output(self, data, tmp_path):
        man = tmp_path / "m.manifest.json"
        assert main(["fit", "--data", str(data), "--lambda", "0.3", "--out", str(tmp_path / "m.json")]) == 0
        d = _read_json(man)
        d["outputs"]["m.json"] = "0" * 64
        man.write_text(json.dumps(d))
        assert main(["rerun", "--manifest", str(man), "--out-dir", str(tmp_path / "r")]) == 1

    def test_rejects_non_manifest(self, tmp_path):
        bogus = tmp_path / "x.json"
        bogus.write_text("[1, 2]")
        assert main(["rerun", "--manifest", str(bogus)]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "milr", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("milr ")
