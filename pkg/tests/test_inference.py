import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import wide
from ltmlebench.data_model import NodeSchema, ObservedDataset
from ltmlebench.estimators import EstimatorConfig, estimate
from ltmlebench.inference import (BootstrapError, IntervalEstimate, bootstrap, bootstrap_ci,
                                  contrast_ci, format_estimate, ic_ci, replicate_indices)
from ltmlebench.presets import ESTIMAND


def mean_y3(data):
    return float(data.col("Y", 3).mean())


def flaky(data):
    # fails on resamples whose first subject has W=1
    if data.col("W")[0] == 1:
        raise ValueError("synthetic failure")
    return mean_y3(data)


def _ydata(small_schema, n, seed, p=0.3):
    y = (np.random.default_rng(seed).random(n) < p).astype(int)
    return wide(small_schema, Y_t3=y, W=np.random.default_rng(seed + 1).integers(0, 2, n))


def test_wald_arithmetic():
    ic = np.array([-1.0, 1.0] * 50)
    iv = ic_ci(0.1, ic * 0.1 / np.std(ic, ddof=1))  # sd 0.1, n 100
    assert iv.standard_error == pytest.approx(0.01)
    assert (round(iv.ci_low, 4), round(iv.ci_high, 4)) == (0.0804, 0.1196)


def test_zero_ic_is_degenerate():
    with pytest.warns(RuntimeWarning):
        iv = ic_ci(0.3, np.zeros(10))
    assert iv.standard_error == 0 and iv.ci_low == iv.ci_high == 0.3


def test_ic_of_mean_is_textbook():
    y = np.random.default_rng(0).random(500)
    iv = ic_ci(y.mean(), y - y.mean())
    assert iv.standard_error == pytest.approx(y.std(ddof=1) / np.sqrt(500), rel=1e-12)


def test_relative_risk_interval_on_log_scale():
    ic = np.random.default_rng(1).normal(size=400)
    iv = ic_ci(2.0, ic, log_scale=True)
    assert iv.ci_low * iv.ci_high == pytest.approx(4.0)
    assert iv.ci_low < 2.0 < iv.ci_high


def test_interval_validation():
    with pytest.raises(ValueError):
        IntervalEstimate(0, 0, 0, 0, "profile")
    with pytest.raises(ValueError):
        IntervalEstimate(0, 0, 0, 0, "ic", level=1.0)


def test_bootstrap_constant_estimator_has_zero_width(small_schema):
    d = wide(small_schema, Y_t3=[1] * 30)
    assert bootstrap_ci(d, B=50, statistic=mean_y3).width == 0.0


def test_bootstrap_mean_matches_wald(small_schema):
    d = _ydata(small_schema, 200, 3)
    y = d.col("Y", 3).astype(float)
    wald = ic_ci(y.mean(), y - y.mean())
    pct = bootstrap_ci(d, B=1000, seed=9, statistic=mean_y3)
    assert abs(pct.width / wald.width - 1) <= 0.10


def test_bootstrap_deterministic_and_order_free(small_schema):
    d = _ydata(small_schema, 150, 4)
    a = bootstrap(d, B=60, seed=5, statistic=mean_y3)
    b = bootstrap(d, B=60, seed=5, statistic=mean_y3)
    c = bootstrap(d, B=60, seed=5, statistic=mean_y3, threads=2)
    assert a.percentile == b.percentile == c.percentile
    assert np.array_equal(a.values, c.values)


def test_replicate_indices_depend_on_seed_and_index():
    a = replicate_indices(100, 1, 3)
    assert np.array_equal(a, replicate_indices(100, 1, 3))
    assert not np.array_equal(a, replicate_indices(100, 1, 4))
    assert a.min() >= 0 and a.max() < 100


def test_bootstrap_failures(small_schema):
    d = wide(small_schema, W=[0] * 19 + [1], Y_t3=[0, 1] * 10)
    res = bootstrap(d, B=100, seed=0, statistic=flaky)
    assert 0 < res.failures <= 10 and res.percentile.failures == res.failures
    d_bad = wide(small_schema, W=[0] + [1] * 19, Y_t3=[0, 1] * 10)
    with pytest.raises(BootstrapError):
        bootstrap(d_bad, B=50, seed=0, statistic=flaky)


def test_bootstrap_full_pipeline(confounded_data):
    sub = confounded_data.subset(np.arange(800))
    res = bootstrap(sub, EstimatorConfig("tmle"), B=20, seed=1, estimand=ESTIMAND)
    point = estimate(sub, ESTIMAND, EstimatorConfig("tmle")).estimate
    assert res.percentile.point == point
    assert res.wald.ci_low < point < res.wald.ci_high


def test_stacked_data_shrinks_width(confounded_data):
    sub = confounded_data.subset(np.arange(1000))
    cfg = EstimatorConfig("tmle")
    base = contrast_ci(estimate(sub, ESTIMAND, cfg))
    for k in (2, 4):
        stacked = ObservedDataset(sub.schema, np.tile(sub.values, (k, 1)))
        iv = contrast_ci(estimate(stacked, ESTIMAND, cfg))
        assert iv.point == pytest.approx(base.point, abs=1e-9)
        assert base.width / iv.width == pytest.approx(np.sqrt(k), rel=2e-3)


def test_format_estimate():
    iv = IntervalEstimate(-0.0003, 0.001, -0.0027, 0.0022, "ic")
    assert format_estimate(iv, scale=100) == "-0.03 (-0.27,0.22)"


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.5, 0.89), st.floats(0.9, 0.99))
def test_percentile_endpoints_are_order_statistics(seed, lo_level, hi_level):
    schema = NodeSchema(("W",), ("L",), ("A",), 3)
    d = _ydata(schema, 80, seed % 1000)
    narrow = bootstrap(d, B=99, seed=seed, level=lo_level, statistic=mean_y3)
    wide_ = bootstrap(d, B=99, seed=seed, level=hi_level, statistic=mean_y3)
    vals = set(narrow.values.tolist())
    assert narrow.percentile.ci_low in vals and narrow.percentile.ci_high in vals
    assert wide_.percentile.ci_low <= narrow.percentile.ci_low
    assert wide_.percentile.ci_high >= narrow.percentile.ci_high
