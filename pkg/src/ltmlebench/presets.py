"""Shipped desk-scale data-generating processes.

All presets share one schema: two baseline binaries, two time-varying
covariates, one exposure, outcome/death/censoring, three intervals (two
exposure decisions).  Coefficients are made up; they only aim for realistic
confounding and event rates.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .data_model import EstimandSpec, NodeSchema, Regime
from .simulation import CoefficientMatrix, ScenarioSpec

SCHEMA = NodeSchema(baseline_nodes=("W1", "W2"), covariate_nodes=("L1", "L2"),
                    exposure_nodes=("A",), intervals=3)


def _confounded_rows(y_shift: float = 0.0, d_shift: float = 0.0) -> dict:
    rows = {
        "W1": {"intercept": 0.0},
        "W2": {"intercept": -0.5, "W1": 0.5},
        "L1_t1": {"intercept": -1.0, "W1": 1.0, "W2": 0.5},
        "L2_t1": {"intercept": -0.5, "W2": 0.5, "L1_t1": 0.3},
        "Y_t1": {"intercept": -5.0 + y_shift, "W1": 0.5},
        "D_t1": {"intercept": -4.0 + d_shift, "W1": 0.5, "L1_t1": 0.5},
        "A_t1": {"intercept": 0.5, "L1_t1": -1.5, "W1": 0.8, "L2_t1": -0.5},
        "C_t1": {"intercept": -2.5, "W2": 0.3, "L2_t1": 0.4},
        "L1_t2": {"intercept": -1.5, "L1_t1": 2.0, "A_t1": -0.8, "W1": 0.5},
        "L2_t2": {"intercept": -1.0, "L2_t1": 1.5, "L1_t2": 0.3},
        "Y_t2": {"intercept": -3.0 + y_shift, "L1_t1": 1.2, "W1": 0.5, "A_t1": -0.5},
        "D_t2": {"intercept": -3.5 + d_shift, "L1_t1": 0.5, "W1": 0.5},
        "A_t2": {"intercept": -0.5, "A_t1": 2.5, "L1_t2": -1.2, "L2_t2": -0.4, "W1": 0.3},
        "C_t2": {"intercept": -2.5, "L2_t2": 0.3},
        "L1_t3": {"intercept": -1.5, "L1_t2": 2.0, "A_t2": -0.8, "W1": 0.5},
        "L2_t3": {"intercept": -1.0, "L2_t2": 1.5, "L1_t3": 0.3},
        "Y_t3": {"intercept": -2.5 + y_shift, "L1_t2": 1.2, "W1": 0.5, "A_t2": -0.5,
                 "L2_t2": 0.3},
        "D_t3": {"intercept": -3.5 + d_shift, "L1_t2": 0.5, "W1": 0.5},
    }
    return rows


def confounded_dgp() -> CoefficientMatrix:
    """Moderate event rates with strong time-varying confounding of the exposure."""
    return CoefficientMatrix.build(SCHEMA, _confounded_rows())


def rare_event_dgp() -> CoefficientMatrix:
    """Same structure with the outcome shifted down to a prevalence near 2% at the horizon."""
    return CoefficientMatrix.build(SCHEMA, _confounded_rows(y_shift=-2.5))


_ROUNDTRIP_ROWS = {
    "W1": {"intercept": -0.4},
    "W2": {"intercept": -0.6, "W1": 0.4},
    "L1_t1": {"intercept": -0.8, "W1": 0.5, "W2": 0.3},
    "L2_t1": {"intercept": -0.6, "W2": 0.4, "L1_t1": 0.3},
    "Y_t1": {"intercept": -2.4, "W1": 0.4, "L1_t1": 0.3},
    "D_t1": {"intercept": -2.4, "W2": 0.4, "L2_t1": 0.3},
    "A_t1": {"intercept": 0.0, "L1_t1": -0.6, "W1": 0.4, "L2_t1": -0.3},
    "C_t1": {"intercept": -2.4, "W2": 0.3, "L2_t1": 0.3},
    "L1_t2": {"intercept": -0.9, "L1_t1": 0.8, "A_t1": -0.4, "W1": 0.3},
    "L2_t2": {"intercept": -0.7, "L2_t1": 0.7, "L1_t2": 0.3},
    "Y_t2": {"intercept": -2.4, "L1_t2": 0.4, "W1": 0.3, "A_t1": -0.3},
    "D_t2": {"intercept": -2.4, "L2_t2": 0.4, "W2": 0.3},
    "A_t2": {"intercept": -0.3, "A_t1": 0.8, "L1_t2": -0.5, "L2_t2": -0.3},
    "C_t2": {"intercept": -2.4, "L2_t2": 0.3, "A_t2": -0.3},
    "L1_t3": {"intercept": -0.9, "L1_t2": 0.8, "A_t2": -0.4, "W1": 0.3},
    "L2_t3": {"intercept": -0.7, "L2_t2": 0.7, "L1_t3": 0.3},
    "Y_t3": {"intercept": -0.4, "L1_t3": 0.4, "W1": 0.3, "A_t2": -0.3},
    "D_t3": {"intercept": -0.4, "L2_t3": 0.4, "W2": 0.3},
}


def roundtrip_dgp() -> CoefficientMatrix:
    """Moderate effects and event rates so that every row is well identified.

    Early events are kept near 10% to preserve the late risk sets, and the
    final-interval outcome nodes sit near 35% where they carry most information.
    """
    return CoefficientMatrix.build(SCHEMA, _ROUNDTRIP_ROWS)


ALWAYS = Regime.static(SCHEMA, "always", A=1)
NEVER_TREAT = Regime.static(SCHEMA, "never", A=0)
ESTIMAND = EstimandSpec(ALWAYS, NEVER_TREAT, horizon=3)


@dataclass(frozen=True)
class Preset:
    name: str
    scenario: ScenarioSpec
    estimand: EstimandSpec
    replicates: int


def preset(name: str, n: int | None = None, seed: int = 2024) -> Preset:
    """Named benchmark presets: ``confounded``, ``rare``, ``null`` and ``desk``."""
    if name == "confounded":
        sc = ScenarioSpec("dependent", n or 20000, seed, confounded_dgp())
        return Preset(name, sc, ESTIMAND, 200)
    if name in ("rare", "desk"):
        sc = ScenarioSpec("dependent", n or 5000, seed, rare_event_dgp())
        return Preset(name, sc, ESTIMAND, 200)
    if name == "null":
        sc = ScenarioSpec("permuted_null", n or 5000, seed, confounded_dgp(), permutation_seed=seed)
        return Preset(name, sc, ESTIMAND, 200)
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("confounded", "rare", "null", "desk")


def fixture_path(name: str):
    """Path of a file shipped in the package data directory."""
    return resources.files("ltmlebench").joinpath("data", name)
