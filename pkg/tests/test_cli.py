import json

import jsonschema
import numpy as np
import pytest
from toys import FIXTURES

from recipro import experiments as ex
from recipro.cli import main
from recipro.datamodel import FlowLedger
from recipro.ingest import load_movielens, random_split
from recipro.models import dataset_rmse, init_params
from recipro.reports import clean_number, dumps, load_schema, read_histogram, write_histogram

MOVIELENS = str(FIXTURES / "tiny_u.data")
REGRESSION = str(FIXTURES / "tiny_regression.csv")
BINARY = str(FIXTURES / "tiny_binary.csv")
SMALL_ML = ["--splits", "2", "--repeats", "2", "--steps", "20", "--lr", "0.01"]


def _run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, "--out-dir", str(out)])
    return code, out


def test_movielens_report_is_byte_identical_and_valid(tmp_path):
    code_a, a = _run(tmp_path, "a", "movielens", "--data", MOVIELENS, *SMALL_ML)
    code_b, b = _run(tmp_path, "b", "movielens", "--data", MOVIELENS, *SMALL_ML)
    assert code_a == code_b == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    doc = json.loads((a / "report.json").read_text())
    jsonschema.validate(doc, load_schema())
    assert [p for p, _ in doc["p_alpha"]] == [0.5, 0.75, 0.9, 0.95]
    for name in ("ledger.csv", "rmse.csv", "discrepancy.csv", "histograms/score_all_splits.csv",
                 "histograms/snr_outflow.csv", "ledgers/split001_repeat001.csv"):
        assert (a / name).is_file(), name


def test_movielens_zero_steps(tmp_path):
    code, out = _run(tmp_path, "z", "movielens", "--data", MOVIELENS, "--splits", "1", "--repeats", "1",
                     "--steps", "0")
    assert code == 0
    lg = FlowLedger.from_csv(out / "ledger.csv")
    assert np.all(lg.inflow == 0) and np.all(lg.outflow == 0)
    cfg = ex.MovielensConfig(MOVIELENS, splits=1, repeats=1, steps=0)
    d = load_movielens(MOVIELENS)
    split = random_split(d, 0.8, ex.job_seed(0, 1, 0))
    w0 = init_params(cfg.spec, d.schema, split.train, ex.job_seed(0, 2, 0, 0))
    doc = json.loads((out / "report.json").read_text())
    assert doc["rmse"]["mean"] == clean_number(dataset_rmse(cfg.spec, w0, split.deploy))


def test_health_report_and_parallel_determinism(tmp_path):
    args = ["health", "--data", REGRESSION, "--task", "diabetes", "--splits", "20"]
    code, serial = _run(tmp_path, "s", *args)
    assert code == 0
    code, parallel = _run(tmp_path, "p", *args, "--workers", "2")
    assert code == 0
    assert (serial / "report.json").read_bytes() == (parallel / "report.json").read_bytes()
    doc = json.loads((serial / "report.json").read_text())
    jsonschema.validate(doc, load_schema())
    lg = FlowLedger.from_csv(serial / "ledger.csv")
    assert np.all(lg.has_inflow & lg.has_outflow)
    assert len(list((serial / "ledgers").iterdir())) == 20


def test_health_marginal_runs(tmp_path):
    code, out = _run(tmp_path, "m", "health", "--data", BINARY, "--task", "breastcancer", "--splits", "4",
                     "--method", "marginal", "--steps", "30")
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["method"] == "marginal" and doc["discrepancy_percentiles"] is None
    assert doc["config"]["marginal_step"] == "held"


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 5, "splits": 3, "lr": 0.02}))
    code, out = _run(tmp_path, "c", "health", "--data", REGRESSION, "--config", str(cfg), "--steps", "7")
    assert code == 0
    settings = json.loads((out / "report.json").read_text())["config"]
    assert (settings["steps"], settings["splits"], settings["lr"]) == (7, 3, 0.02)
    assert settings["train_fraction"] == 0.5


def test_prop1_report(tmp_path):
    code, out = _run(tmp_path, "p", "prop1", "--trials", "30", "--steps", "5", "--clip-norm", "1e-4")
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, load_schema("prop1.schema.json"))
    assert doc["symmetry_gap"] == 0.0
    assert doc["clipped_symmetry_gap"] > 0.0
    assert (out / "trials.csv").is_file()


def test_flowvar_single_run(tmp_path):
    code, out = _run(tmp_path, "f", "flowvar", "--data", MOVIELENS, "--runs", "1", "--steps", "20",
                     "--lr", "0.01", "--individuals", "3")
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, load_schema("flowvar.schema.json"))
    for entry in doc["individuals"]:
        assert len({entry["inflow"][k] for k in ("p5", "p25", "p50", "p75", "p95")}) == 1


def test_flowvar_normalized_inflows_sum_to_one():
    cfg = ex.FlowVarConfig(MOVIELENS, runs=2, steps=20, lr=0.01, individuals=12)
    res = ex.run_flow_variability(cfg)
    np.testing.assert_allclose(res.normalized_inflow.sum(axis=1), 1.0, rtol=1e-12)


def test_flowvar_too_many_individuals(tmp_path):
    code, _ = _run(tmp_path, "f", "flowvar", "--data", MOVIELENS, "--runs", "1", "--steps", "2",
                   "--individuals", "50")
    assert code == 1


@pytest.mark.parametrize("argv", [
    ["movielens", "--data", "/nonexistent/u.data"],
    ["movielens"],
    ["movielens", "--data", MOVIELENS, "--method", "marginal"],
    ["health", "--data", MOVIELENS],
])
def test_input_errors_exit_one(tmp_path, argv, capsys):
    code, _ = _run(tmp_path, "e", *argv)
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_config_setting(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"stepz": 5}))
    code, _ = _run(tmp_path, "e", "health", "--data", REGRESSION, "--config", str(cfg))
    assert code == 1


def test_divergence_exit_two(tmp_path):
    code, _ = _run(tmp_path, "d", "movielens", "--data", MOVIELENS, "--splits", "1", "--repeats", "1",
                   "--steps", "200", "--lr", "10")
    assert code == 2


def test_marginal_movielens_forced_on_tiny_data(tmp_path):
    code, out = _run(tmp_path, "m", "movielens", "--data", MOVIELENS, "--splits", "1", "--repeats", "1",
                     "--steps", "5", "--lr", "0.01", "--method", "marginal", "--force")
    assert code == 0
    assert json.loads((out / "report.json").read_text())["method"] == "marginal"


# --- serialization helpers ----------------------------------------------------

def test_clean_number_sentinels():
    assert clean_number(float("inf")) == "inf"
    assert clean_number(float("-inf")) == "-inf"
    assert clean_number(float("nan")) is None
    assert clean_number(0.1 + 0.2) == 0.3


def test_dumps_is_sorted_and_stable():
    text = dumps({"b": np.float64(1 / 3), "a": [np.int64(2), np.nan]})
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [2, None], "b": 0.333333333333}


def test_histogram_file_declares_edges(tmp_path):
    edges = (0.0, 0.5, 1.0)
    write_histogram(tmp_path / "h.csv", [0.1, 0.6, 1.0], edges, "scores")
    got_edges, counts = read_histogram(tmp_path / "h.csv")
    np.testing.assert_array_equal(got_edges, edges)
    np.testing.assert_array_equal(counts, [1, 2])
    assert "# bin_edges: 0.0,0.5,1.0" in (tmp_path / "h.csv").read_text()

