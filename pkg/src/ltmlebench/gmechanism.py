"""Treatment and censoring mechanism: per-node fits, cumulative products, positivity."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data_model import (NodeSchema, ObservedDataset, Regime, adherence_matrix, at_risk_matrix,
                         design_columns, event_times)
from .learners import (FittedLearner, LearnerSpec, design_matrix, fit_learner,
                       predict_probability)

DEFAULT_TRUNCATION = 0.01


def node_seed(seed: int, schema: NodeSchema, column: str) -> np.random.SeedSequence:
    """Seed for the learner of one (node, interval), independent of fitting order."""
    return np.random.SeedSequence([int(seed), schema.index[column]])


@dataclass(eq=False)
class GFit:
    """One learner per exposure/censoring node per interval, ``None`` for an empty stratum."""

    schema: NodeSchema
    learners: dict[str, FittedLearner | None]
    predictors: dict[str, list[str]]
    warnings: list[str] = field(default_factory=list)

    def probabilities(self, data: ObservedDataset) -> dict[str, np.ndarray]:
        """P(node = 1 | past) for every subject and every A-block column."""
        out = {}
        for col, learner in self.learners.items():
            if learner is None:
                out[col] = None
                continue
            X = design_matrix(data, self.predictors[col]).X
            out[col] = predict_probability(learner, X)
        return out


def fit_g(data: ObservedDataset, regime: Regime | None, learner_spec: LearnerSpec, *,
          stratify: bool = False, seed: int = 0) -> GFit:
    """Fit P(node=1 | W, full preceding history) for each exposure and censoring node.

    Fits use subjects still at risk at the node (no outcome, death or earlier
    censoring).  With ``stratify`` and a regime, the fit is further restricted
    to subjects whose treatment history so far is consistent with the regime.
    """
    s = data.schema
    at_risk = at_risk_matrix(data)
    adh = adherence_matrix(data, regime) if (stratify and regime is not None) else None
    learners, predictors, notes = {}, {}, []
    keys = np.arange(data.n)
    for t in range(1, s.K + 1):
        earlier = np.ones(data.n, dtype=bool)
        for col in s.a_block(t):
            node, _ = s.parse(col)
            rows = at_risk[:, t].astype(bool)
            if adh is not None:
                rows &= adh[:, t - 1].astype(bool) & earlier
            cols = design_columns(s, col)
            predictors[col] = cols
            if not rows.any():
                msg = f"empty stratum for {col}; using deterministic g=1"
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
                notes.append(msg)
                learners[col] = None
            else:
                X = design_matrix(data.subset(rows), cols).X
                y = data.col(node, t)[rows].astype(float)
                learners[col] = fit_learner(learner_spec, X, y, seed=node_seed(seed, s, col),
                                            keys=keys[rows])
            if adh is not None and node in s.exposure_nodes:
                earlier &= data.col(node, t) == regime.value(node, t)
    return GFit(s, learners, predictors, notes)


@dataclass(frozen=True, eq=False)
class CumulativeG:
    """``raw[:, t]`` is the running product through interval t (column 0 is 1)."""

    raw: np.ndarray
    truncated: np.ndarray
    factors: np.ndarray
    bound: float

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.truncated


def cumulative_g(g: GFit | Mapping[str, np.ndarray], data: ObservedDataset, regime: Regime,
                 truncation_bound: float = DEFAULT_TRUNCATION) -> CumulativeG:
    """Regime-oriented cumulative product of treatment and no-censoring probabilities.

    ``g`` is a fitted mechanism or a mapping from A-block column name to
    P(node = 1 | past) per subject (an oracle).  Factors for subject-intervals
    that are no longer at risk are 1; the cumulative product is floored at
    ``truncation_bound``.
    """
    if not 0 < truncation_bound <= 0.5:
        raise ValueError("truncation bound must lie in (0, 0.5]")
    s = data.schema
    regime.check(s)
    probs = g.probabilities(data) if isinstance(g, GFit) else g
    at_risk = at_risk_matrix(data).astype(bool)
    factors = np.ones((data.n, s.K + 1))
    for t in range(1, s.K + 1):
        f = np.ones(data.n)
        for col in s.a_block(t):
            node, _ = s.parse(col)
            p = probs.get(col)
            if p is None:
                continue
            p = np.asarray(p, dtype=float)
            if node == s.censor_node:
                f = f * (1.0 - p)
            elif regime.value(node, t) == 1:
                f = f * p
            else:
                f = f * (1.0 - p)
        factors[:, t] = np.where(at_risk[:, t], f, 1.0)
    raw = np.cumprod(factors, axis=1)
    return CumulativeG(raw=raw, truncated=np.maximum(raw, truncation_bound), factors=factors,
                       bound=truncation_bound)


def positivity_diagnostics(cumg: CumulativeG, data: ObservedDataset, regime: Regime,
                           arm: str = "") -> list[dict]:
    """Per-interval adherence attrition and cumulative-g summaries among adherent subjects."""
    s = data.schema
    ev = event_times(data)
    adh = adherence_matrix(data, regime, ev).astype(bool)
    rows = []
    prev = data.n
    for t in range(1, s.K + 1):
        a = adh[:, t]
        g = cumg.raw[a, t]
        row = {
            "arm": arm or regime.name,
            "interval": t,
            "n_adherent": int(a.sum()),
            "frac_adherent": float(a.mean()) if data.n else 0.0,
            "n_at_risk_adherent": int((a & (ev.terminal > t) & (ev.censored > t)).sum()),
            "deaths": int((adh[:, t - 1] & (ev.terminal == t) & ~ev.dementia).sum()),
            "outcomes": int((adh[:, t - 1] & (ev.terminal == t) & ev.dementia).sum()),
            "censored": int((adh[:, t - 1] & (ev.censored == t)).sum()),
            "non_adherent": int((adh[:, t - 1] & ~a & (ev.censored != t)).sum()),
            "g_min": float(g.min()) if g.size else float("nan"),
            "g_p05": float(np.quantile(g, 0.05)) if g.size else float("nan"),
            "g_median": float(np.median(g)) if g.size else float("nan"),
            "n_truncated": int((g < cumg.bound).sum()),
        }
        if row["n_adherent"] > prev:
            raise AssertionError("adherent count increased over time")
        prev = row["n_adherent"]
        rows.append(row)
    return rows


POSITIVITY_FIELDS = ["arm", "interval", "n_adherent", "frac_adherent", "n_at_risk_adherent",
                     "deaths", "outcomes", "censored", "non_adherent", "g_min", "g_p05",
                     "g_median", "n_truncated"]
