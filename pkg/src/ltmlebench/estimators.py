"""Point estimators of counterfactual cumulative risk under static regimes.

All three estimators share the same bookkeeping: event times decide the
deterministic outcome regressions (1 after the outcome, 0 after death), and
adherence decides which subjects enter each backward regression.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace
from typing import Any, Mapping

import numpy as np
from scipy.special import expit, logit

from .data_model import (EstimandSpec, NodeSchema, ObservedDataset, Regime, adherence_matrix,
                         death_by, dementia_by, event_times)
from .gmechanism import DEFAULT_TRUNCATION, CumulativeG, GFit, cumulative_g, fit_g
from .learners import LearnerSpec, design_matrix, fit_learner, predict_probability

Q_LO, Q_HI = 1e-5, 1 - 1e-5
EPS_LIMIT = 50.0
SCORE_TOL = 1e-12  # relative weighted score below which targeting is skipped
ESTIMATORS = ("tmle", "ice", "iptw")


class EstimationError(RuntimeError):
    """Raised when an estimator cannot be computed (e.g. practical positivity failure)."""


@dataclass(frozen=True)
class EstimatorConfig:
    estimator: str = "tmle"
    q_learner: LearnerSpec = LearnerSpec("glm_adjusted")
    g_learner: LearnerSpec = LearnerSpec("glm_adjusted")
    truncation_bound: float = DEFAULT_TRUNCATION
    iptw_variant: str = "horvitz_thompson"
    deterministic_death: bool = True
    stratify_g: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.iptw_variant not in ("horvitz_thompson", "hajek"):
            raise ValueError(f"unknown IPTW variant {self.iptw_variant!r}")
        if not 0 < self.truncation_bound <= 0.5:
            raise ValueError("truncation bound must lie in (0, 0.5]")

    @property
    def needs_g(self) -> bool:
        return self.estimator in ("tmle", "iptw")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_learner"] = self.q_learner.to_dict()
        d["g_learner"] = self.g_learner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EstimatorConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown estimator config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("q_learner", "g_learner"):
            if key in d:
                d[key] = LearnerSpec.from_dict(d[key])
        return cls(**d)


@dataclass(eq=False)
class ArmEstimate:
    regime: Regime
    horizon: int
    psi: float
    ic: np.ndarray
    estimator: str
    diagnostics: dict = field(default_factory=dict)
    stack: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.ic.shape[0]


def q_columns(schema: NodeSchema, t: int) -> list[str]:
    """Regressors of the iterated outcome regression at interval t: W and L-blocks through t."""
    cols = list(schema.baseline_nodes)
    for s in range(1, t + 1):
        cols += schema.l_block(s)
    return cols


def _q_seed(seed: int, t: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), 7919, t])


def _fluctuate(y, offset, w) -> tuple[float, bool]:
    """Solve sum w*(y - expit(offset + eps)) = 0 for the intercept eps.

    Newton's method on the concave weighted log-likelihood with step halving.
    Returns (eps, converged); when the root lies beyond +-50 the last iterate
    inside that range is returned with converged=False.
    """
    W = w.sum()
    eps = 0.0

    def loglik(e):
        eta = offset + e
        return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))

    ll = loglik(eps)
    for _ in range(200):
        p = expit(offset + eps)
        score = float(np.sum(w * (y - p)))
        if abs(score) <= 1e-13 * W:
            return eps, True
        info = float(np.sum(w * p * (1 - p)))
        if info <= 0:
            return eps, False
        step = score / info
        t = 1.0
        while True:
            cand = eps + t * step
            ll_c = loglik(cand)
            if ll_c >= ll - 1e-14 * W or t < 1e-12:
                break
            t *= 0.5
        if abs(cand) > EPS_LIMIT:
            return eps, False
        if cand == eps:
            return eps, abs(score) <= 1e-9 * W
        eps, ll = cand, ll_c
    return eps, False


def _check_horizon(data: ObservedDataset, regime: Regime, horizon: int) -> None:
    regime.check(data.schema)
    if not 1 <= horizon <= data.schema.intervals:
        raise ValueError(f"horizon must be in 1..{data.schema.intervals}")


def _backward(data, regime, horizon, q_spec, *, deterministic_death=True, cumg=None, seed=0):
    """Iterated regressions from the horizon back to interval 1.

    With ``cumg`` each regression is followed by a weighted intercept
    fluctuation (targeting); otherwise this is plain ICE g-computation.
    """
    s = data.schema
    n = data.n
    ev = event_times(data)
    adh = adherence_matrix(data, regime, ev).astype(bool)
    keys = np.arange(n)
    q_next = dementia_by(ev, horizon).astype(float)
    stack = {horizon: q_next}
    eps, resid, converged, learners = {}, {}, {}, {}
    ic = np.zeros(n)
    for t in range(horizon - 1, 0, -1):
        dem = dementia_by(ev, t)
        dead = death_by(ev, t)
        det = dem | dead if deterministic_death else dem
        rows = adh[:, t] & ~det
        if not rows.any():
            # fine only if every Q_t that is used later is fixed by an override
            if (adh[:, t - 1] & ~det).any():
                raise EstimationError(f"empty adherent stratum at t={t}")
            learner = None
        else:
            X = design_matrix(data, q_columns(s, t)).X
            learner = fit_learner(q_spec, X[rows], q_next[rows], seed=_q_seed(seed, t),
                                  keys=keys[rows])
            learners[t] = learner
        if learner is None:
            q = np.zeros(n)
        elif learner.kind in ("constant", "cells"):
            # weighted means are already valid probabilities; clamping would bias them
            q = predict_probability(learner, X, clamp=False)
        else:
            q = predict_probability(learner, X)
        q[dem] = 1.0
        if deterministic_death:
            q[dead] = 0.0
        if cumg is not None:
            w = adh[:, t] / cumg.truncated[:, t]
            if w.sum() <= 0:
                raise EstimationError(f"no adherent subjects at t={t}")
            off = logit(np.clip(q, Q_LO, Q_HI))
            fit = (w > 0) & ~det
            score = float(w[fit] @ (q_next[fit] - q[fit])) if fit.any() else 0.0
            if abs(score) > SCORE_TOL * float(w[fit].sum()):
                e, ok = _fluctuate(q_next[fit], off[fit], w[fit])
                q = expit(off + e)
            else:
                e, ok = 0.0, True  # initial fit already solves the score
            q[dem] = 1.0
            if deterministic_death:
                q[dead] = 0.0
            r = w * (q_next - q)
            resid[t] = abs(float(r.sum())) / float(w.sum())
            eps[t] = e
            converged[t] = ok
            ic += r
        stack[t] = q
        q_next = q
    psi = float(np.mean(q_next))
    ic += q_next - psi
    diag: dict[str, Any] = {"q_learners": {t: lr.diagnostics.get("degenerate", False)
                                           for t, lr in learners.items()}}
    if cumg is not None:
        diag.update(epsilons=eps, score_residuals=resid, fluctuation_converged=converged,
                    mean_ic=float(ic.mean()))
    return psi, ic, diag, stack


def ice_gcomp(data: ObservedDataset, regime: Regime, horizon: int, q_learner_spec: LearnerSpec,
              *, deterministic_death: bool = True, seed: int = 0) -> ArmEstimate:
    """Iterated conditional expectation g-computation of P(Y_regime(horizon) = 1)."""
    _check_horizon(data, regime, horizon)
    psi, ic, diag, stack = _backward(data, regime, horizon, q_learner_spec,
                                     deterministic_death=deterministic_death, seed=seed)
    return ArmEstimate(regime, horizon, psi, ic, "ice", diag, stack)


def tmle(data: ObservedDataset, regime: Regime, horizon: int, q_spec: LearnerSpec,
         g_spec: LearnerSpec | None = None, truncation_bound: float = DEFAULT_TRUNCATION, *,
         gfit: GFit | None = None, cumg: CumulativeG | None = None,
         deterministic_death: bool = True, seed: int = 0) -> ArmEstimate:
    """Longitudinal TMLE with weighted intercept fluctuations.

    ``cumg`` (e.g. built from an oracle mechanism) or ``gfit`` may be supplied
    to skip fitting the treatment/censoring mechanism.
    """
    _check_horizon(data, regime, horizon)
    if cumg is None:
        if gfit is None:
            if g_spec is None:
                raise ValueError("tmle needs g_spec, gfit or cumg")
            gfit = fit_g(data, regime, g_spec, seed=seed)
        cumg = cumulative_g(gfit, data, regime, truncation_bound)
    psi, ic, diag, stack = _backward(data, regime, horizon, q_spec,
                                     deterministic_death=deterministic_death, cumg=cumg,
                                     seed=seed)
    t_last = max(horizon - 1, 0)
    adh = adherence_matrix(data, regime).astype(bool)[:, t_last]
    diag["n_truncated"] = int((adh & (cumg.raw[:, t_last] < cumg.bound)).sum())
    if any(not ok for ok in diag["fluctuation_converged"].values()):
        diag["flag"] = "non-convergent fluctuation"
    return ArmEstimate(regime, horizon, psi, ic, "tmle", diag, stack)


def iptw(data: ObservedDataset, regime: Regime, horizon: int, g_spec: LearnerSpec | None = None,
         truncation_bound: float = DEFAULT_TRUNCATION, variant: str = "horvitz_thompson", *,
         gfit: GFit | None = None, cumg: CumulativeG | None = None, seed: int = 0) -> ArmEstimate:
    """Inverse probability of treatment and censoring weighted risk."""
    _check_horizon(data, regime, horizon)
    if variant not in ("horvitz_thompson", "hajek"):
        raise ValueError(f"unknown IPTW variant {variant!r}")
    ev = event_times(data)
    y = dementia_by(ev, horizon).astype(float)
    stop = horizon - 1
    if stop == 0:
        w = np.ones(data.n)
        n_trunc = 0
    else:
        if cumg is None:
            if gfit is None:
                if g_spec is None:
                    raise ValueError("iptw needs g_spec, gfit or cumg")
                gfit = fit_g(data, regime, g_spec, seed=seed)
            cumg = cumulative_g(gfit, data, regime, truncation_bound)
        adh = adherence_matrix(data, regime, ev)[:, stop].astype(float)
        w = adh / cumg.truncated[:, stop]
        n_trunc = int(((adh > 0) & (cumg.raw[:, stop] < cumg.bound)).sum())
    if variant == "horvitz_thompson":
        psi = float(np.mean(w * y))
        ic = w * y - psi
    else:
        mw = float(np.mean(w))
        if mw <= 0:
            raise EstimationError("no adherent subjects")
        psi = float(np.sum(w * y) / np.sum(w))
        ic = w * (y - psi) / mw
    diag = {"variant": variant, "n_truncated": n_trunc, "max_weight": float(w.max()) if w.size else 0.0}
    return ArmEstimate(regime, horizon, psi, ic, "iptw", diag)


# ---------------------------------------------------------------------------
# common interface


def estimate_arm(data: ObservedDataset, regime: Regime, horizon: int, config: EstimatorConfig,
                 gfit: GFit | None = None) -> ArmEstimate:
    if config.needs_g and gfit is None:
        gfit = fit_g(data, regime, config.g_learner, stratify=config.stratify_g,
                     seed=config.seed)
    if config.estimator == "ice":
        return ice_gcomp(data, regime, horizon, config.q_learner,
                         deterministic_death=config.deterministic_death, seed=config.seed)
    if config.estimator == "tmle":
        return tmle(data, regime, horizon, config.q_learner, truncation_bound=config.truncation_bound,
                    gfit=gfit, deterministic_death=config.deterministic_death, seed=config.seed)
    return iptw(data, regime, horizon, truncation_bound=config.truncation_bound,
                variant=config.iptw_variant, gfit=gfit, seed=config.seed)


def shared_g(data: ObservedDataset, config: EstimatorConfig) -> GFit | None:
    """A mechanism fit reusable by every regime (only when fits are not regime-stratified)."""
    if not config.needs_g or config.stratify_g:
        return None
    return fit_g(data, None, config.g_learner, seed=config.seed)


@dataclass(eq=False)
class Contrast:
    kind: str
    estimate: float
    ic: np.ndarray
    treatment: ArmEstimate
    control: ArmEstimate

    @property
    def log_scale(self) -> bool:
        return self.kind == "relative_risk"


def contrast(treat: ArmEstimate, ctrl: ArmEstimate, kind: str = "risk_difference") -> Contrast:
    """Risk difference (IC difference) or relative risk (delta method on the log scale)."""
    if treat.horizon != ctrl.horizon or treat.n != ctrl.n:
        raise ValueError("arms must share horizon and data")
    if kind == "risk_difference":
        return Contrast(kind, treat.psi - ctrl.psi, treat.ic - ctrl.ic, treat, ctrl)
    if kind == "relative_risk":
        if ctrl.psi == 0:
            raise EstimationError("relative risk undefined")
        if treat.psi == 0:
            raise EstimationError("relative risk undefined on the log scale")
        ic = treat.ic / treat.psi - ctrl.ic / ctrl.psi
        return Contrast(kind, treat.psi / ctrl.psi, ic, treat, ctrl)
    if kind == "per_arm_risk":
        return Contrast(kind, treat.psi, treat.ic, treat, ctrl)
    raise ValueError(f"unknown contrast {kind!r}")


def estimate(data: ObservedDataset, estimand: EstimandSpec, config: EstimatorConfig) -> Contrast:
    """Both arms and their contrast, sharing one mechanism fit where possible."""
    estimand.check(data.schema)
    gfit = shared_g(data, config)
    treat = estimate_arm(data, estimand.treatment_regime, estimand.horizon, config, gfit)
    ctrl = estimate_arm(data, estimand.control_regime, estimand.horizon, config, gfit)
    return contrast(treat, ctrl, estimand.contrast)


def risk_curve(data: ObservedDataset, regime: Regime, config: EstimatorConfig,
               gfit: GFit | None = None) -> list[ArmEstimate | EstimationError]:
    """One full estimator run per horizon 1..K+1; a failing horizon yields its error."""
    if gfit is None:
        gfit = shared_g(data, config)
    out: list[ArmEstimate | EstimationError] = []
    for h in range(1, data.schema.intervals + 1):
        try:
            out.append(estimate_arm(data, regime, h, config, gfit))
        except (EstimationError, ValueError) as exc:
            out.append(EstimationError(f"horizon {h}: {exc}"))
    return out


def monotonicity_violations(curve) -> list[int]:
    """Horizons whose estimate is below the previous horizon's (reported, not enforced)."""
    psis = [c.psi if isinstance(c, ArmEstimate) else math.nan for c in curve]
    return [h + 1 for h in range(1, len(psis)) if psis[h] < psis[h - 1]]


def format_rd_percent(rd: float, digits: int = 2) -> str:
    """Risk difference rescaled x100 for display."""
    value = round(rd * 100, digits)
    if value == 0:
        value = 0.0
    return f"{value:.{digits}f}"


def format_risk_row(label: str, treat_risk: float, ctrl_risk: float, rd: float | None = None,
                    ci: tuple[float, float] | None = None) -> str:
    rd = treat_risk - ctrl_risk if rd is None else rd
    text = f"{label}: treatment {treat_risk:.4f}, control {ctrl_risk:.4f}, RD% {format_rd_percent(rd)}"
    if ci is not None:
        text += f" ({format_rd_percent(ci[0])}, {format_rd_percent(ci[1])})"
    return text


def with_seed(config: EstimatorConfig, seed: int) -> EstimatorConfig:
    return replace(config, seed=int(seed))


def arm_summary(arm: ArmEstimate) -> dict:
    """JSON-ready summary of one arm: risk plus targeting and truncation diagnostics."""
    d = arm.diagnostics
    out = {"regime": arm.regime.to_dict(), "horizon": arm.horizon, "estimator": arm.estimator,
           "psi": float(arm.psi), "mean_ic": float(arm.ic.mean())}
    for key in ("epsilons", "score_residuals", "fluctuation_converged"):
        if key in d:
            out[key] = {str(t): (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                        for t, v in sorted(d[key].items())}
    for key in ("n_truncated", "variant", "max_weight", "flag"):
        if key in d:
            out[key] = d[key]
    return out


def contrast_row(c: Contrast) -> dict:
    """Flat record of a contrast for tabular aggregation."""
    return {"contrast": c.kind, "horizon": c.treatment.horizon, "estimator": c.treatment.estimator,
            "risk_treatment": float(c.treatment.psi), "risk_control": float(c.control.psi),
            "estimate": float(c.estimate)}
