import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ltmlebench import CONFIG_SCHEMA_VERSION, __version__
from ltmlebench.benchmark import METRIC_FIELDS
from ltmlebench.cli import OUTPUT_ENV, main
from ltmlebench.data_model import NodeSchema, ObservedDataset
from ltmlebench.estimators import EstimatorConfig, estimate
from ltmlebench.inference import contrast_ci
from ltmlebench.presets import ESTIMAND, fixture_path

GOLDEN = Path(__file__).parent / "data"


def fx(name):
    return str(fixture_path(name))


def _cohort_args(out, events=None, config=None):
    return ["cohort", "--events", events or fx("fixture_events.csv"),
            "--config", config or fx("cohort_config.json"),
            "--subjects", fx("fixture_subjects.csv"), "--out", str(out)]


def _fit_config(tmp_path, **estimator):
    cfg = json.loads(Path(fx("fit_config.json")).read_text())
    cfg["estimator"].update(estimator)
    p = tmp_path / "fit.json"
    p.write_text(json.dumps(cfg))
    return str(p), cfg


# -- version and env -----------------------------------------------------------

def test_version_json(capsys):
    assert main(["--version"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == {"version": __version__, "config_schema_version": CONFIG_SCHEMA_VERSION}


def test_output_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["simulate", "--seed", "1", "--n", "50"]) == 0
    assert (tmp_path / "env" / "data.csv").exists()


def test_no_output_dir_is_config_error(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert main(["simulate", "--seed", "1", "--n", "50"]) == 2


# -- cohort --------------------------------------------------------------------

def test_cohort_matches_golden(tmp_path):
    assert main(_cohort_args(tmp_path)) == 0
    assert (tmp_path / "cohort.csv").read_text() == (GOLDEN / "golden_cohort.csv").read_text()
    assert (tmp_path / "flowchart.csv").read_text() == (GOLDEN / "golden_flowchart.csv").read_text()
    for name in ("schema.json", "descriptives.csv", "subject_ids.txt"):
        assert (tmp_path / name).exists()


def test_cohort_missing_key(tmp_path, capsys):
    cfg = json.loads(Path(fx("cohort_config.json")).read_text())
    del cfg["dementia_codes"]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(cfg))
    assert main(_cohort_args(tmp_path / "o", config=str(p))) == 2
    assert "dementia_codes" in capsys.readouterr().err


def test_cohort_empty_events(tmp_path):
    ev = tmp_path / "ev.csv"
    ev.write_text("subject_id,event_kind,code,day\n")
    with pytest.warns(RuntimeWarning):
        assert main(["cohort", "--events", str(ev), "--config", fx("cohort_config.json"),
                     "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "cohort.csv").read_text().splitlines()
    assert len(lines) == 1  # header only


def test_cohort_bad_events_is_data_error(tmp_path):
    ev = tmp_path / "ev.csv"
    ev.write_text("subject_id,event_kind,code,day\n1,teleport,X,4\n")
    assert main(_cohort_args(tmp_path / "o", events=str(ev))) == 3


# -- fit -----------------------------------------------------------------------

def test_fit_fixture_tmle(tmp_path, capsys):
    assert main(["fit", "--data", fx("fixture_data.csv"), "--schema", fx("schema.json"),
                 "--config", fx("fit_config.json"), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "result.json").read_text())
    # independent recomputation through the library API
    schema = NodeSchema.load(fx("schema.json"))
    data = ObservedDataset.from_csv(fx("fixture_data.csv"), schema)
    c = estimate(data, ESTIMAND, EstimatorConfig.from_dict(doc["estimator"]))
    iv = contrast_ci(c)
    assert doc["arms"]["treatment"]["psi"] == c.treatment.psi
    assert doc["arms"]["control"]["psi"] == c.control.psi
    ci = doc["contrast"]["intervals"]["ic"]
    assert (ci["ci_low"], ci["ci_high"]) == (iv.ci_low, iv.ci_high)
    assert ci["ci_low"] < doc["contrast"]["estimate"] < ci["ci_high"]
    assert doc["contrast"]["rd_percent"] == f"{round(100 * c.estimate, 2):.2f}"
    for arm in doc["arms"].values():
        assert set(arm["epsilons"]) == {"1", "2"}  # one targeting step per exposure decision
        assert max(abs(v) for v in arm["score_residuals"].values()) <= 1e-8
    assert "RD%" in capsys.readouterr().out


def test_fit_unknown_estimator(tmp_path):
    cfg, _ = _fit_config(tmp_path, estimator="aipw_magic")
    assert main(["fit", "--data", fx("fixture_data.csv"), "--schema", fx("schema.json"),
                 "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_fit_invalid_data(tmp_path):
    rows = Path(fx("fixture_data.csv")).read_text().splitlines()
    vals = rows[1].split(",")
    vals[4] = vals[5] = "1"  # dementia and death in the same interval
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join([rows[0], ",".join(vals)] + rows[2:]) + "\n")
    assert main(["fit", "--data", str(bad), "--schema", fx("schema.json"),
                 "--config", fx("fit_config.json"), "--out", str(tmp_path / "o")]) == 3


def test_fit_missing_data_file(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--config",
                 fx("fit_config.json"), "--out", str(tmp_path)]) == 3


# -- stochastic commands -------------------------------------------------------

@pytest.mark.parametrize("cmd", [["simulate", "--n", "10"],
                                 ["truth", "--n-mc", "100"],
                                 ["permute", "--data", "x.csv"],
                                 ["benchmark", "--replicates", "2"]])
def test_stochastic_commands_need_seed(tmp_path, capsys, cmd):
    assert main(cmd + ["--out", str(tmp_path)]) == 2
    assert "requires --seed" in capsys.readouterr().err


def test_simulate_fixture_coefficients_twice(tmp_path):
    args = ["simulate", "--coefficients", fx("confounded_coefficients.csv"),
            "--schema", fx("schema.json"), "--seed", "1", "--n", "400"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("data.csv", "schema.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_truth_on_permuted_null(tmp_path):
    assert main(["truth", "--null", "--seed", "3", "--n-mc", "200000",
                 "--out", str(tmp_path), "--no-timestamp"]) == 0
    tr = json.loads((tmp_path / "truth.json").read_text())["truth"]
    assert abs(tr["rd"]) <= 3 * tr["se"]


def test_benchmark_desk_summary_columns(tmp_path):
    assert main(["benchmark", "--preset", "desk", "--seed", "5", "--replicates", "3",
                 "--n", "800", "--n-mc", "20000", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == METRIC_FIELDS
    for col in ("bias", "variance", "mse", "bias_se_ratio", "coverage", "oracle_coverage"):
        assert col in rows[0] and all(r[col] != "" for r in rows)
    assert {r["config"] for r in rows} == {"tmle_glm", "tmle_ridge_us", "iptw_glm"}


def test_unknown_benchmark_preset(tmp_path):
    assert main(["benchmark", "--preset", "nope", "--seed", "1", "--out", str(tmp_path)]) == 2


def test_bad_thread_count(tmp_path):
    assert main(["simulate", "--seed", "1", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_timestamp_suppression(tmp_path):
    for sub in ("a", "b"):
        main(["truth", "--seed", "2", "--n-mc", "1000", "--out", str(tmp_path / sub)])
    doc = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert "timestamp" in doc["metadata"]
    main(["truth", "--seed", "2", "--n-mc", "1000", "--no-timestamp", "--out", str(tmp_path / "c")])
    assert "timestamp" not in json.loads((tmp_path / "c" / "truth.json").read_text())["metadata"]


def test_bootstrap_fit_threads_identical(tmp_path):
    cfg = json.loads(Path(fx("fit_config.json")).read_text())
    cfg.update(variance="bootstrap", B=12)
    p = tmp_path / "boot.json"
    p.write_text(json.dumps(cfg))
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"t{threads}"
        assert main(["fit", "--data", fx("fixture_data.csv"), "--schema", fx("schema.json"),
                     "--config", str(p), "--seed", "4", "--threads", threads,
                     "--no-timestamp", "--out", str(out)]) == 0
        outs.append(out)
    for name in ("result.json", "result.csv", "bootstrap_replicates.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    reps = np.loadtxt(outs[0] / "bootstrap_replicates.csv", delimiter=",", skiprows=1,
                      usecols=1)
    assert reps.shape == (12,)
