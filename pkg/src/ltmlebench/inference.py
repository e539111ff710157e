"""Influence-curve and bootstrap confidence intervals."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm
from threadpoolctl import threadpool_limits

from .data_model import EstimandSpec, ObservedDataset
from .estimators import Contrast, EstimationError, EstimatorConfig, estimate
from .learners import LearnerError

METHODS = ("ic", "bootstrap_percentile", "bootstrap_wald")
DEFAULT_B = 500
MAX_FAIL_FRACTION = 0.10


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    standard_error: float
    ci_low: float
    ci_high: float
    method: str
    level: float = 0.95
    replicates: int | None = None
    failures: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown interval method {self.method!r}")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def z_value(level: float) -> float:
    return float(norm.ppf(1 - (1 - level) / 2))


def ic_ci(point: float, ic, level: float = 0.95, *, log_scale: bool = False) -> IntervalEstimate:
    """Wald interval with SE = sd(IC)/sqrt(n).

    With ``log_scale`` the IC is taken to be that of log(point) and the
    interval is exponentiated back (used for relative risks).
    """
    ic = np.asarray(ic, dtype=float)
    if ic.ndim != 1 or ic.size < 2:
        raise ValueError("need at least two influence-curve values")
    if not np.isfinite(ic).all():
        raise ValueError("influence-curve values must be finite")
    se = float(np.std(ic, ddof=1) / math.sqrt(ic.size))
    if se == 0.0:
        warnings.warn("zero-variance influence curve; degenerate interval", RuntimeWarning,
                      stacklevel=2)
        return IntervalEstimate(point, 0.0, point, point, "ic", level)
    z = z_value(level)
    if log_scale:
        centre = math.log(point)
        return IntervalEstimate(point, se, math.exp(centre - z * se), math.exp(centre + z * se),
                                "ic", level)
    return IntervalEstimate(point, se, point - z * se, point + z * se, "ic", level)


def contrast_ci(c: Contrast, level: float = 0.95) -> IntervalEstimate:
    return ic_ci(c.estimate, c.ic, level, log_scale=c.log_scale)


# ---------------------------------------------------------------------------
# bootstrap


def replicate_indices(n: int, seed: int, b: int) -> np.ndarray:
    """Subject indices of bootstrap replicate ``b``; depends only on (seed, b)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))
    return rng.integers(0, n, size=n)


class _ContrastStatistic:
    """Picklable statistic refitting the whole pipeline on a resample."""

    def __init__(self, config: EstimatorConfig, estimand: EstimandSpec):
        self.config = config
        self.estimand = estimand

    def __call__(self, data: ObservedDataset) -> float:
        return estimate(data, self.estimand, self.config).estimate


def _run_replicates(statistic, data, seed, bs) -> list[tuple[int, float | None, str]]:
    out = []
    with threadpool_limits(1):
        for b in bs:
            try:
                value = float(statistic(data.subset(replicate_indices(data.n, seed, b))))
                if not math.isfinite(value):
                    raise EstimationError("non-finite replicate estimate")
                out.append((b, value, ""))
            except (EstimationError, LearnerError, ValueError, FloatingPointError) as exc:
                out.append((b, None, str(exc)))
    return out


@dataclass
class BootstrapResult:
    percentile: IntervalEstimate
    wald: IntervalEstimate
    values: np.ndarray  # replicate statistics in replicate order, NaN for failures
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return len(self.errors)

    def replicate_rows(self) -> list[dict]:
        return [{"replicate": b, "estimate": "" if np.isnan(v) else repr(float(v)),
                 "error": self.errors.get(b, "")} for b, v in enumerate(self.values)]


def bootstrap(data: ObservedDataset, estimator_config: EstimatorConfig | None = None,
              B: int = DEFAULT_B, level: float = 0.95, seed: int = 0, *,
              estimand: EstimandSpec | None = None,
              statistic: Callable[[ObservedDataset], float] | None = None,
              point: float | None = None, threads: int = 1) -> BootstrapResult:
    """Nonparametric subject-level bootstrap of a statistic (default: the estimand contrast).

    Each replicate refits everything on its resample.  Replicates that fail
    are excluded and counted; more than 10% failures is an error.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    if statistic is None:
        if estimator_config is None or estimand is None:
            raise ValueError("bootstrap needs a statistic or an estimator config and estimand")
        statistic = _ContrastStatistic(estimator_config, estimand)
    if point is None:
        point = float(statistic(data))
    bs = list(range(B))
    if threads > 1:
        groups = [bs[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_replicates, [statistic] * threads, [data] * threads,
                                  [seed] * threads, groups))
        results = [r for part in parts for r in part]
    else:
        results = _run_replicates(statistic, data, seed, bs)
    values = np.full(B, np.nan)
    errors = {}
    for b, v, err in results:
        if v is None:
            errors[b] = err
        else:
            values[b] = v
    if len(errors) > MAX_FAIL_FRACTION * B:
        raise BootstrapError(f"{len(errors)} of {B} bootstrap replicates failed")
    ok = np.sort(values[~np.isnan(values)])
    alpha = 1 - level
    lo, hi = np.quantile(ok, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    se = float(np.std(ok, ddof=1))
    z = z_value(level)
    pct = IntervalEstimate(point, se, float(lo), float(hi), "bootstrap_percentile", level,
                           replicates=B, failures=len(errors))
    wald = IntervalEstimate(point, se, point - z * se, point + z * se, "bootstrap_wald", level,
                            replicates=B, failures=len(errors))
    return BootstrapResult(pct, wald, values, errors)


def bootstrap_ci(data: ObservedDataset, estimator_config: EstimatorConfig | None = None,
                 B: int = DEFAULT_B, level: float = 0.95, seed: int = 0, **kwargs
                 ) -> IntervalEstimate:
    """Percentile bootstrap interval (see :func:`bootstrap` for the full result)."""
    return bootstrap(data, estimator_config, B, level, seed, **kwargs).percentile


def format_estimate(iv: IntervalEstimate, scale: float = 1.0, digits: int = 2) -> str:
    """``point (low,high)`` after rescaling, e.g. ``-0.03 (-0.27,0.22)`` for RD%."""
    def f(x):
        v = round(x * scale, digits)
        return f"{0.0 if v == 0 else v:.{digits}f}"
    return f"{f(iv.point)} ({f(iv.ci_low)},{f(iv.ci_high)})"
