"""Replicate-level estimator benchmarking against a known truth."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data_model import EstimandSpec
from .estimators import EstimationError, EstimatorConfig, estimate
from .inference import BootstrapError, bootstrap, contrast_ci, z_value
from .learners import LearnerError
from .simulation import ScenarioSpec

METRIC_FIELDS = ["config", "interval", "replicates", "failures", "truth", "mean_estimate", "bias",
                 "variance", "mse", "bias_se_ratio", "coverage", "oracle_coverage",
                 "mean_ci_width"]
REPLICATE_FIELDS = ["replicate", "seed", "config", "interval", "estimate", "se", "ci_low",
                    "ci_high", "error"]


def replicate_seed(master_seed: int, r: int) -> int:
    """Seed of replicate r, a pure function of (master seed, r)."""
    return int(np.random.SeedSequence([int(master_seed), int(r)]).generate_state(1)[0])


def oracle_coverage(estimates, truth: float, level: float = 0.95) -> float:
    """Share of replicates within z * SD(estimates) of the truth."""
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("oracle coverage needs at least two replicates")
    sd = float(np.std(est, ddof=1))
    if sd == 0.0:
        return float(np.mean(est == truth))
    return float(np.mean(np.abs(est - truth) <= z_value(level) * sd))


@dataclass(frozen=True)
class Metrics:
    config: str
    interval: str
    replicates: int
    failures: int
    truth: float
    mean_estimate: float
    bias: float
    variance: float
    mse: float
    bias_se_ratio: float
    coverage: float
    oracle_coverage: float
    mean_ci_width: float

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def summarize(estimates, truth: float, ci_low=None, ci_high=None, *, config: str = "",
              interval: str = "", failures: int = 0, level: float = 0.95) -> Metrics:
    """Bias, variance (R-1 denominator), MSE (R denominator) and coverage summaries.

    The identity MSE = bias^2 + variance * (R-1)/R is asserted.
    """
    est = np.sort(np.asarray(estimates, dtype=float))  # sorted: sums independent of order
    R = est.size
    if R < 2:
        raise ValueError("need at least two successful replicates")
    mean = float(est.mean())
    bias = mean - truth
    var = float(np.var(est, ddof=1))
    mse = float(np.mean((est - truth) ** 2))
    if not math.isclose(mse, bias * bias + var * (R - 1) / R, rel_tol=1e-9, abs_tol=1e-15):
        raise AssertionError("MSE decomposition failed")
    sd = math.sqrt(var)
    ratio = abs(bias) / sd if sd > 0 else (0.0 if bias == 0 else math.inf)
    if ci_low is not None:
        lo, hi = np.asarray(ci_low, dtype=float), np.asarray(ci_high, dtype=float)
        cov = float(np.mean((lo <= truth) & (truth <= hi)))
        width = float(np.mean(np.sort(hi - lo)))
    else:
        cov = width = math.nan
    return Metrics(config, interval, R, failures, float(truth), mean, bias, var, mse, ratio, cov,
                   oracle_coverage(est, truth, level), width)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSpec:
    scenario: ScenarioSpec
    estimand: EstimandSpec
    configs: Mapping[str, EstimatorConfig]
    replicates: int = 200
    seed: int = 0
    intervals: tuple[str, ...] = ("ic",)
    bootstrap_B: int = 200
    level: float = 0.95


def _one_replicate(spec: BenchmarkSpec, r: int) -> list[dict]:
    seed = replicate_seed(spec.seed, r)
    data = spec.scenario.draw(seed)
    rows = []
    with threadpool_limits(1):
        for name, cfg in spec.configs.items():
            cfg = replace(cfg, seed=seed)
            base = {"replicate": r, "seed": seed, "config": name}
            try:
                c = estimate(data, spec.estimand, cfg)
            except (EstimationError, LearnerError, ValueError) as exc:
                for kind in spec.intervals:
                    rows.append({**base, "interval": kind, "estimate": math.nan, "se": math.nan,
                                 "ci_low": math.nan, "ci_high": math.nan, "error": str(exc)})
                continue
            for kind in spec.intervals:
                row = {**base, "interval": kind, "estimate": c.estimate, "error": ""}
                try:
                    if kind == "ic":
                        iv = contrast_ci(c, spec.level)
                    elif kind == "bootstrap":
                        iv = bootstrap(data, cfg, spec.bootstrap_B, spec.level, seed,
                                       estimand=spec.estimand, point=c.estimate).percentile
                    else:
                        raise ValueError(f"unknown interval kind {kind!r}")
                    row.update(se=iv.standard_error, ci_low=iv.ci_low, ci_high=iv.ci_high)
                except (BootstrapError, ValueError) as exc:
                    row.update(se=math.nan, ci_low=math.nan, ci_high=math.nan, error=str(exc))
                rows.append(row)
    return rows


def _replicate_group(spec: BenchmarkSpec, rs: Sequence[int]) -> list[dict]:
    return [row for r in rs for row in _one_replicate(spec, r)]


@dataclass
class BenchmarkResult:
    rows: list[dict]
    metrics: list[Metrics]
    truth: float
    log: list[str] = field(default_factory=list)

    def metric(self, config: str, interval: str = "ic") -> Metrics:
        for m in self.metrics:
            if m.config == config and m.interval == interval:
                return m
        raise KeyError((config, interval))

    def write(self, replicates_csv=None, summary_csv=None) -> None:
        if replicates_csv is not None:
            _write_csv(replicates_csv, REPLICATE_FIELDS, self.rows)
        if summary_csv is not None:
            _write_csv(summary_csv, METRIC_FIELDS, [m.row() for m in self.metrics])


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fields})


def run_benchmark(spec: BenchmarkSpec, truth: float, threads: int = 1) -> BenchmarkResult:
    """Apply every configuration to every simulated replicate and summarize.

    Replicates are independent given the master seed, so the rows (sorted by
    replicate) and metrics do not depend on ``threads``.
    """
    rs = list(range(spec.replicates))
    if threads > 1:
        groups = [rs[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_replicate_group, [spec] * threads, groups))
        rows = [row for part in parts for row in part]
    else:
        rows = _replicate_group(spec, rs)
    order = {name: i for i, name in enumerate(spec.configs)}
    korder = {k: i for i, k in enumerate(spec.intervals)}
    rows.sort(key=lambda x: (x["replicate"], order[x["config"]], korder[x["interval"]]))
    metrics, log = [], []
    for name in spec.configs:
        for kind in spec.intervals:
            sel = [x for x in rows if x["config"] == name and x["interval"] == kind]
            ok = [x for x in sel if not math.isnan(x["estimate"])]
            failures = len(sel) - len(ok)
            log += [f"replicate {x['replicate']} {name}: {x['error']}" for x in sel if x["error"]]
            with_ci = [x for x in ok if not math.isnan(x["ci_low"])]
            if len(ok) < 2:
                continue
            m = summarize([x["estimate"] for x in ok], truth, config=name, interval=kind,
                          failures=failures, level=spec.level)
            if with_ci:
                lo = np.array([x["ci_low"] for x in with_ci])
                hi = np.array([x["ci_high"] for x in with_ci])
                m = replace(m, coverage=float(np.mean((lo <= truth) & (truth <= hi))),
                            mean_ci_width=float(np.mean(hi - lo)))
            metrics.append(m)
    return BenchmarkResult(rows, metrics, float(truth), log)
