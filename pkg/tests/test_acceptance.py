"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The simulation criteria (4, 5, 6, 8) run at full size and take several
minutes each on one core.
"""
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

from ltmlebench.benchmark import BenchmarkSpec, run_benchmark
from ltmlebench.cli import main
from ltmlebench.data_model import (NodeSchema, ObservedDataset, Regime, apply_lvcf,
                                   death_by, dementia_by, event_times, padding_mask)
from ltmlebench.estimators import EstimatorConfig, estimate, format_rd_percent, ice_gcomp, tmle
from ltmlebench.learners import (LearnerSpec, fit_logistic_glm, fit_penalized_logistic,
                                 lambda_max, lambda_path)
from ltmlebench.presets import (ESTIMAND, SCHEMA, fixture_path, preset, roundtrip_dgp)
from ltmlebench.simulation import (DET0, CoefficientMatrix, compute_null_truth, compute_truth,
                                   fit_dgp_coefficients, simulate_dataset)

SAT = LearnerSpec("saturated")
GLM = LearnerSpec("glm_adjusted")
INTERCEPT = LearnerSpec("glm_unadjusted")
TWO = NodeSchema(("W",), ("L",), ("A",), intervals=3)  # two exposure decisions
PAIR = (ESTIMAND.treatment_regime, ESTIMAND.control_regime)


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _report


# -- 1. oracle equivalence -----------------------------------------------------

def _random_binary(n, rng):
    names = ["W", "L_t1", "A_t1", "L_t2", "A_t2", "Y_t3"]
    rows = {}
    for i, c in enumerate(names):
        rows[c] = {"intercept": float(rng.uniform(-0.8, 0.8))}
        rows[c].update({p: float(rng.uniform(-1, 1)) for p in names[:i]})
    seed = int(rng.integers(2**31))
    return simulate_dataset(CoefficientMatrix.build(TWO, rows, DET0), n, seed)


def _enumerate_gformula(data, a):
    """Sum over (W, L1, L2) cells of P(W) P(L1|W) P(L2|W,L1,a) E[Y|W,L1,a,L2,a]."""
    W, L1, L2 = data.col("W"), data.col("L", 1), data.col("L", 2)
    A1, A2, Y = data.col("A", 1), data.col("A", 2), data.col("Y", 3)
    total = 0.0
    for w, l1, l2 in itertools.product((0, 1), repeat=3):
        s1 = W == w
        s2 = s1 & (L1 == l1) & (A1 == a)
        s3 = s2 & (L2 == l2) & (A2 == a)
        p = np.mean(s1) * np.mean(L1[s1] == l1) if s1.any() else 0.0
        if p == 0.0:
            continue
        if not s2.any():
            return None  # positivity fails
        p *= np.mean(L2[s2] == l2)
        if p == 0.0:
            continue
        if not s3.any():
            return None
        total += p * Y[s3].mean()
    return total


def _oracle_datasets(count, n, seed):
    rng = np.random.default_rng(seed)
    out, drawn = [], 0
    while len(out) < count:
        d = _random_binary(n, rng)
        drawn += 1
        truth = [_enumerate_gformula(d, a) for a in (0, 1)]
        if None not in truth:
            out.append((d, truth))
    return out, drawn


def test_criterion_1_oracle_equivalence(report):
    t0 = time.time()
    sets, drawn = _oracle_datasets(50, 500, 1)
    worst = 0.0
    for d, truth in sets:
        for a in (0, 1):
            worst = max(worst, abs(ice_gcomp(d, Regime.static(TWO, A=a), 3, SAT).psi - truth[a]))
    secs = time.time() - t0
    ok = worst <= 1e-10 and secs < 60
    report(1, ok, f"max |ICE - g-formula| {worst:.2e} over 50 datasets "
                  f"({drawn - 50} redrawn for positivity), {secs:.1f}s")
    assert ok


# -- 2. TMLE score contract ----------------------------------------------------

def _fixture_runs():
    fx = ObservedDataset.from_csv(fixture_path("fixture_data.csv"),
                                  NodeSchema.load(fixture_path("schema.json")))
    runs = [("fixture_data", fx, ESTIMAND)]
    for name in ("confounded", "rare", "null"):
        p = preset(name, n=3000, seed=5)
        runs.append((name, p.scenario.draw(), p.estimand))
    return runs


def test_criterion_2_tmle_score_contract(report):
    worst_score, worst_ic = 0.0, 0.0
    for _, data, est in _fixture_runs():
        for g in (GLM, INTERCEPT):
            for q in (GLM, INTERCEPT):
                for reg in (est.treatment_regime, est.control_regime):
                    arm = tmle(data, reg, est.horizon, q, g)
                    worst_score = max(worst_score, *arm.diagnostics["score_residuals"].values())
                    worst_ic = max(worst_ic, abs(arm.ic.mean()))
    sets, _ = _oracle_datasets(20, 500, 2)
    worst_sat = 0.0
    for d, _ in sets:
        for a in (0, 1):
            reg = Regime.static(TWO, A=a)
            gap = abs(tmle(d, reg, 3, SAT, GLM).psi - ice_gcomp(d, reg, 3, SAT).psi)
            worst_sat = max(worst_sat, gap)
    ok = worst_score <= 1e-8 and worst_ic <= 1e-6 and worst_sat <= 1e-8
    report(2, ok, f"max score residual {worst_score:.1e}, max |mean IC| {worst_ic:.1e}, "
                  f"max |TMLE_sat - ICE_sat| {worst_sat:.1e}")
    assert ok


# -- 3. deterministic Q and padding --------------------------------------------

def _strip_padding(data):
    raw = data.values.astype(float)
    raw[padding_mask(data)] = np.nan
    return raw


def test_criterion_3_deterministic_q_and_padding(report):
    bad_override, changed = 0, 0
    rng = np.random.default_rng(3)
    for _, data, est in _fixture_runs():
        ev = event_times(data)
        assert death_by(ev, est.horizon - 1).any()
        for reg in (est.treatment_regime, est.control_regime):
            for arm in (ice_gcomp(data, reg, est.horizon, GLM),
                        tmle(data, reg, est.horizon, GLM, GLM)):
                for t in range(1, est.horizon):
                    q = arm.stack[t]
                    bad_override += int(np.any(q[death_by(ev, t)] != 0.0))
                    bad_override += int(np.any(q[dementia_by(ev, t)] != 1.0))
        raw = _strip_padding(data)
        refilled = apply_lvcf(data.schema, raw)
        junk = data.values.copy()
        mask = padding_mask(data)
        junk[mask] = rng.integers(0, 2, mask.sum())
        for kind in ("ice", "tmle", "iptw"):
            cfg = EstimatorConfig(kind)
            base = estimate(data, est, cfg)
            for other in (refilled, ObservedDataset(data.schema, junk)):
                c = estimate(other, est, cfg)
                changed += int(c.treatment.psi != base.treatment.psi
                               or c.control.psi != base.control.psi)
    ok = bad_override == 0 and changed == 0
    report(3, ok, f"override violations {bad_override}, psi changed by padding {changed}")
    assert ok


# -- 4. double robustness grid -------------------------------------------------

@pytest.mark.slow
def test_criterion_4_double_robustness(report):
    t0 = time.time()
    p = preset("confounded", n=20000, seed=41)
    truth = compute_truth(p.scenario.coefficients, PAIR, 3, 3_000_000, 4)
    configs = {"a_correct_g": EstimatorConfig("tmle", q_learner=INTERCEPT, g_learner=GLM),
               "b_correct_q": EstimatorConfig("tmle", q_learner=GLM, g_learner=INTERCEPT),
               "c_neither": EstimatorConfig("tmle", q_learner=INTERCEPT, g_learner=INTERCEPT)}
    spec = BenchmarkSpec(p.scenario, p.estimand, configs, replicates=200, seed=41)
    res = run_benchmark(spec, truth.rd)
    secs = time.time() - t0
    m = {k: res.metric(k) for k in configs}
    mcse = {k: np.sqrt(v.variance / v.replicates) for k, v in m.items()}
    ok_a = abs(m["a_correct_g"].bias) <= 3 * mcse["a_correct_g"]
    ok_b = abs(m["b_correct_q"].bias) <= 3 * mcse["b_correct_q"]
    floor = max(abs(m["a_correct_g"].bias), abs(m["b_correct_q"].bias),
                3 * mcse["a_correct_g"], 3 * mcse["b_correct_q"])
    ok_c = abs(m["c_neither"].bias) >= 5 * floor
    ok = truth.se <= 2e-4 and ok_a and ok_b and ok_c and secs < 1800
    report(4, ok, f"truth {truth.rd:.5f} (MC-SE {truth.se:.1e}); bias a {m['a_correct_g'].bias:+.5f}"
                  f" (3MCSE {3 * mcse['a_correct_g']:.5f}), b {m['b_correct_q'].bias:+.5f}"
                  f" (3MCSE {3 * mcse['b_correct_q']:.5f}), c {m['c_neither'].bias:+.5f}; "
                  f"{secs:.0f}s")
    assert ok


# -- 5. desk-scale coverage ----------------------------------------------------

BOOT_B = 200


@pytest.mark.slow
def test_criterion_5_rare_event_coverage(report):
    t0 = time.time()
    p = preset("rare", n=5000, seed=11)
    truth = compute_truth(p.scenario.coefficients, PAIR, 3, 1_000_000, 5)
    cfg = EstimatorConfig.from_dict({
        "estimator": "tmle", "truncation_bound": 0.01,
        "g_learner": {"family": "ridge", "lambda_selection": "undersmoothed"}})
    spec = BenchmarkSpec(p.scenario, p.estimand, {"tmle_ridge_us": cfg}, replicates=200,
                         seed=11, intervals=("ic", "bootstrap"), bootstrap_B=BOOT_B)
    res = run_benchmark(spec, truth.rd)
    secs = time.time() - t0
    ic, boot = res.metric("tmle_ridge_us", "ic"), res.metric("tmle_ridge_us", "bootstrap")
    ok = (ic.oracle_coverage >= 0.92 and abs(ic.bias_se_ratio) <= 0.3
          and ic.coverage < boot.coverage and secs < 7200)
    report(5, ok, f"prevalence {truth.risk_control:.3f}/{truth.risk_treatment:.3f}; oracle "
                  f"coverage {ic.oracle_coverage:.3f}, bias/SE {ic.bias_se_ratio:+.3f}, IC "
                  f"coverage {ic.coverage:.3f} vs bootstrap(B={BOOT_B}) {boot.coverage:.3f}; "
                  f"{secs:.0f}s")
    assert ok


# -- 6. null scenario ----------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_null_scenario(report):
    p = preset("null", n=5000, seed=6)
    truth = compute_null_truth(p.scenario.coefficients, PAIR, 3, 1_000_000, 6)
    spec = BenchmarkSpec(p.scenario, p.estimand, {"tmle": EstimatorConfig("tmle")},
                         replicates=200, seed=6)
    m = run_benchmark(spec, 0.0).metric("tmle")
    band = 3 * np.sqrt(m.variance) / np.sqrt(m.replicates)
    ok = abs(truth.rd) <= 3 * truth.se and abs(m.mean_estimate) <= band
    report(6, ok, f"null truth {truth.rd:+.2e} (3MCSE {3 * truth.se:.1e}); mean TMLE "
                  f"{m.mean_estimate:+.5f} within +-{band:.5f}")
    assert ok


# -- 7. learner correctness ----------------------------------------------------

def _logistic(n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = rng.normal(0, 0.8, p)
    y = (rng.random(n) < expit(0.2 + X @ beta)).astype(float)
    return X, y


def test_criterion_7_learner_correctness(report):
    worst_kkt, worst_irls, nonzero = 0.0, 0.0, 0
    for seed in range(5):
        X, y = _logistic(400, 6, seed)
        glm = fit_logistic_glm(X, y)
        for alpha in (1.0, 0.5, 0.0):
            lmax = lambda_max(X, y, alpha=alpha)
            for lam in lambda_path(lmax, 12):
                fit = fit_penalized_logistic(X, y, alpha=alpha, lam=lam)
                worst_kkt = max(worst_kkt, fit.diagnostics["kkt_residual"])
            zero = fit_penalized_logistic(X, y, alpha=alpha, lam=0.0)
            worst_irls = max(worst_irls, np.max(np.abs(zero.coef - glm.coef)),
                             abs(zero.intercept - glm.intercept))
        lmax = lambda_max(X, y, alpha=1.0)
        for lam in (lmax, 1.5 * lmax, 10 * lmax):
            nonzero += int(np.count_nonzero(fit_penalized_logistic(X, y, alpha=1.0, lam=lam).coef))
    ok = worst_kkt <= 1e-6 and worst_irls <= 1e-4 and nonzero == 0
    report(7, ok, f"max KKT {worst_kkt:.1e}, max |lambda=0 - IRLS| {worst_irls:.1e}, "
                  f"nonzero lasso coefficients at lambda>=lambda_max {nonzero}")
    assert ok


# -- 8. DGP round trip ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_round_trip(report):
    truth = CoefficientMatrix.from_csv(fixture_path("roundtrip_coefficients.csv"), SCHEMA)
    assert truth.equals(roundtrip_dgp())
    fit = fit_dgp_coefficients(simulate_dataset(truth, 200_000, 8))
    M = np.column_stack([truth.intercept, truth.coef])
    F = np.column_stack([fit.intercept, fit.coef])
    fitted_rows = [i for i, c in enumerate(SCHEMA.columns) if c not in truth.deterministic]
    sel = np.isfinite(M[fitted_rows])
    err = np.abs(F[fitted_rows] - M[fitted_rows])[sel]
    ok = not fit.deterministic and np.all(np.isfinite(err)) and err.max() <= 0.05
    report(8, ok, f"max |fitted - true| {err.max():.4f} over {err.size} coefficients")
    assert ok


# -- 9. CLI determinism across thread counts -----------------------------------

def _run_all(out: Path, threads: int, boot_cfg: Path):
    fx = lambda name: str(fixture_path(name))  # noqa: E731
    common = ["--seed", "9", "--threads", str(threads), "--no-timestamp"]
    cmds = {
        "simulate": ["simulate", "--n", "3000"],
        "truth": ["truth", "--n-mc", "200000"],
        "truth_null": ["truth", "--null", "--n-mc", "200000"],
        "permute": ["permute", "--data", fx("fixture_data.csv"), "--schema", fx("schema.json")],
        "benchmark": ["benchmark", "--preset", "desk", "--replicates", "6", "--n", "1500",
                      "--n-mc", "100000"],
        "fit": ["fit", "--data", fx("fixture_data.csv"), "--schema", fx("schema.json"),
                "--config", str(boot_cfg)],
        "diagnose": ["diagnose", "--data", fx("fixture_data.csv"), "--schema", fx("schema.json"),
                     "--config", fx("fit_config.json")],
        "cohort": ["cohort", "--events", fx("fixture_events.csv"), "--config",
                   fx("cohort_config.json"), "--subjects", fx("fixture_subjects.csv")],
    }
    for name, argv in cmds.items():
        assert main(argv + common + ["--out", str(out / name)]) == 0, name
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_9_cli_determinism(report, tmp_path):
    cfg = json.loads(Path(fixture_path("fit_config.json")).read_text())
    cfg.update(variance="bootstrap", B=30)
    boot_cfg = tmp_path / "boot.json"
    boot_cfg.write_text(json.dumps(cfg))
    runs = [_run_all(tmp_path / f"t{k}", k, boot_cfg) for k in (1, 2, 3)]
    differ = sorted(str(f) for f in runs[0] for r in runs[1:] if r.get(f) != runs[0][f])
    ok = not differ and set(runs[0]) == set(runs[1]) == set(runs[2])
    report(9, ok, f"{len(runs[0])} output files compared across --threads 1/2/3; "
                  f"differing: {differ or 'none'}")
    assert ok


# -- 10. output fidelity -------------------------------------------------------

def _two_arm_counts(n_arm, events_treat, events_ctrl):
    """Exposure fixed at t1, events only at t2; risks are exact event fractions."""
    s = SCHEMA
    raw = np.zeros((2 * n_arm, len(s.columns)))
    a = np.repeat([1.0, 0.0], n_arm)
    raw[:, s.index["A_t1"]] = a
    raw[:, s.index["A_t2"]] = a
    y = np.zeros(2 * n_arm)
    y[:events_treat] = 1
    y[n_arm:n_arm + events_ctrl] = 1
    raw[:, s.index["Y_t2"]] = y
    later = [s.index[c] for c in s.columns if s.index[c] > s.index["Y_t2"]]
    raw[np.ix_(y == 1, later)] = np.nan
    return apply_lvcf(s, raw)


def test_criterion_10_output_fidelity(report, tmp_path, capsys):
    data = _two_arm_counts(10_000, 71, 74)
    data.to_csv(tmp_path / "d.csv")
    SCHEMA.save(tmp_path / "s.json")
    cfg = json.loads(Path(fixture_path("fit_config.json")).read_text())
    cfg["estimand"]["horizon"] = 2
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code = main(["fit", "--data", str(tmp_path / "d.csv"), "--schema", str(tmp_path / "s.json"),
                 "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")])
    line = capsys.readouterr().out.strip()
    doc = json.loads((tmp_path / "o" / "result.json").read_text())
    ok = (code == 0 and format_rd_percent(0.0071 - 0.0074) == "-0.03"
          and doc["contrast"]["rd_percent"] == "-0.03"
          and line.startswith("risk treatment 0.0071, control 0.0074, RD% -0.03 ("))
    report(10, ok, f"printed: {line}")
    assert ok
