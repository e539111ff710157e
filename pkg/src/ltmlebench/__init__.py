"""Longitudinal TMLE, ICE g-computation and IPTW for discrete-time registry data,
with a simulation benchmark harness."""

__version__ = "0.1.0"
CONFIG_SCHEMA_VERSION = 1

from .data_model import (EstimandSpec, NodeSchema, ObservedDataset, Regime,  # noqa: E402
                         validate_dataset)
from .estimators import EstimatorConfig, estimate, ice_gcomp, iptw, risk_curve, tmle  # noqa: E402
from .learners import LearnerSpec  # noqa: E402

__all__ = ["EstimandSpec", "EstimatorConfig", "LearnerSpec", "NodeSchema", "ObservedDataset",
           "Regime", "estimate", "ice_gcomp", "iptw", "risk_curve", "tmle", "validate_dataset"]
