"""Conditional-probability learners for the nuisance regressions.

Every learner fits a weighted quasi-binomial model, so outcomes may be
fractional (iterated-regression pseudo-outcomes).  Weights enter relatively:
they are normalised to sum to one before fitting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Any, Mapping, Sequence

import numpy as np
from numba import njit
from scipy.special import expit, xlogy

from .data_model import NodeSchema, ObservedDataset

PRED_LO, PRED_HI = 1e-6, 1 - 1e-6

FAMILIES = ("glm_adjusted", "glm_unadjusted", "saturated", "lasso", "ridge",
            "elastic_net", "random_forest")
PENALIZED = ("lasso", "ridge", "elastic_net")


class LearnerError(ValueError):
    """Raised for invalid learner input."""


class EmptyStratumError(LearnerError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    family: str = "glm_adjusted"
    lambda_selection: str = "cv_min"
    alpha: float | None = None
    folds: int = 10
    path_size: int = 100
    path_ratio: float = 1e-4
    n_trees: int = 100
    min_leaf: int = 10
    mtry: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise LearnerError(f"unknown learner family {self.family!r}")
        if self.lambda_selection not in ("cv_min", "undersmoothed"):
            raise LearnerError(f"unknown lambda selection {self.lambda_selection!r}")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise LearnerError("alpha must be in [0, 1]")

    @property
    def mix(self) -> float:
        """Elastic-net mixing parameter (1 = lasso, 0 = ridge)."""
        if self.family == "lasso":
            return 1.0
        if self.family == "ridge":
            return 0.0
        return 0.5 if self.alpha is None else float(self.alpha)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: Mapping | str) -> "LearnerSpec":
        if isinstance(d, str):
            return cls(family=d)
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise LearnerError(f"unknown learner keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.X.shape[0]


def design_matrix(data: ObservedDataset, columns: Sequence[str]) -> DesignMatrix:
    """Expand the named columns; categorical nodes become reference-coded indicators."""
    s: NodeSchema = data.schema
    idx = s.index
    blocks, names = [], []
    for col in columns:
        node, _ = s.parse(col)
        x = data.values[:, idx[col]].astype(float)
        k = s.n_levels(node)
        if k == 2:
            blocks.append(x[:, None])
            names.append(col)
        else:
            for level in range(1, k):
                blocks.append((x == level).astype(float)[:, None])
                names.append(f"{col}={level}")
    X = np.hstack(blocks) if blocks else np.zeros((data.n, 0))
    return DesignMatrix(X, tuple(names))


@dataclass(frozen=True, eq=False)
class FittedLearner:
    spec: LearnerSpec
    n_features: int
    kind: str  # "constant" | "linear" | "cells" | "forest"
    intercept: float = 0.0
    coef: np.ndarray | None = None
    cells: Any = None
    trees: tuple = ()
    tree_features: tuple = ()
    diagnostics: Mapping[str, Any] = field(default_factory=dict)

    @property
    def degenerate(self) -> bool:
        return bool(self.diagnostics.get("degenerate", False))


def _clamp(p):
    return np.clip(p, PRED_LO, PRED_HI)


def predict_probability(learner: FittedLearner, X, *, clamp: bool = True) -> np.ndarray:
    """Predicted probabilities, clamped to [PRED_LO, PRED_HI] unless ``clamp=False``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != learner.n_features:
        raise LearnerError(f"expected {learner.n_features} columns, got shape {X.shape}")
    if learner.kind == "constant":
        p = np.full(X.shape[0], learner.intercept)
    elif learner.kind == "linear":
        p = expit(learner.intercept + X @ learner.coef)
    elif learner.kind == "cells":
        p = learner.cells.predict(X)
    elif learner.kind == "forest":
        p = np.zeros(X.shape[0])
        for tree, feats in zip(learner.trees, learner.tree_features):
            p += tree.predict(X[:, feats])
        p /= len(learner.trees)
    else:  # pragma: no cover
        raise LearnerError(f"unknown learner kind {learner.kind}")
    return _clamp(p) if clamp else p


# ---------------------------------------------------------------------------
# input handling


def _prepare(X, y, w):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).ravel()
    if y.shape[0] != n or w.shape[0] != n:
        raise LearnerError("X, y and w must have the same number of rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all() and np.isfinite(w).all()):
        raise LearnerError("non-finite input")
    if (w < 0).any():
        raise LearnerError("weights must be non-negative")
    if ((y < 0) | (y > 1)).any():
        raise LearnerError("outcomes must lie in [0, 1]")
    if n == 0 or w.sum() <= 0:
        raise EmptyStratumError("empty regression stratum")
    return X, y, w


def _wmean(y, w) -> float:
    """Weighted mean that is exactly 0 or 1 when the weighted outcome is constant."""
    yy = y[w > 0]
    if yy.size and (yy == yy[0]).all():
        return float(yy[0])
    return float(w @ y / w.sum())


def _active_columns(X, w) -> np.ndarray:
    """Columns that vary among positive-weight rows, first copy of duplicates only."""
    rows = X[w > 0]
    keep = []
    seen = set()
    for j in range(X.shape[1]):
        col = rows[:, j]
        if col.size == 0 or np.all(col == col[0]):
            continue
        key = col.tobytes()
        if key in seen:
            continue
        seen.add(key)
        keep.append(j)
    return np.array(keep, dtype=int)


def _constant(spec, p, mean, reason) -> FittedLearner:
    return FittedLearner(spec, p, "constant", intercept=float(mean),
                         diagnostics={"degenerate": True, "reason": reason})


def _expand_coef(p, active, beta) -> np.ndarray:
    coef = np.zeros(p)
    coef[active] = beta
    return coef


def _loglik(v, y, eta):
    # weighted mean quasi-binomial log-likelihood
    return float(np.sum(v * (y * eta - np.logaddexp(0.0, eta))))


# ---------------------------------------------------------------------------
# unpenalized logistic regression


def fit_logistic_glm(X, y, w=None, *, spec: LearnerSpec | None = None,
                     max_iter: int = 100, tol: float = 1e-12) -> FittedLearner:
    """Weighted (quasi-)binomial logistic regression by IRLS.

    Rank-deficient designs are solved with a least-squares Newton step, so
    predictions stay well defined.  A constant outcome gives a constant learner.
    """
    spec = spec or LearnerSpec("glm_adjusted")
    X, y, w = _prepare(X, y, w)
    n, p = X.shape
    v = w / w.sum()
    ybar = _wmean(y, w)
    if ybar <= 0.0 or ybar >= 1.0:
        return _constant(spec, p, ybar, "constant outcome")
    active = _active_columns(X, w)
    Xa = np.hstack([np.ones((n, 1)), X[:, active]])
    pos = v > 0
    Xa, yv, vv = Xa[pos], y[pos], v[pos]
    beta = np.zeros(Xa.shape[1])
    beta[0] = math.log(ybar / (1 - ybar))
    eta = Xa @ beta
    ll = _loglik(vv, yv, eta)
    grad = Xa.T @ (vv * (yv - expit(eta)))
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        H = Xa.T @ ((vv * mu * (1 - mu))[:, None] * Xa)
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = Xa @ cand
            ll_c = _loglik(vv, yv, eta_c)
            if ll_c >= ll - 1e-15 or t < 1e-10:
                break
            t *= 0.5
        beta, eta, ll = cand, eta_c, ll_c
        grad = Xa.T @ (vv * (yv - expit(eta)))
        if np.max(np.abs(grad)) <= tol or np.max(np.abs(t * step)) < 1e-14:
            converged = np.max(np.abs(grad)) <= 1e-8
            break
    gmax = float(np.max(np.abs(grad)))
    return FittedLearner(
        spec, p, "linear", intercept=float(beta[0]),
        coef=_expand_coef(p, active, beta[1:]),
        diagnostics={"iterations": it, "objective": -ll, "gradient": gmax,
                     "converged": bool(converged or gmax <= 1e-8),
                     "degenerate": False, "active": active.tolist()})


def fit_intercept_only(X, y, w=None, *, spec: LearnerSpec | None = None) -> FittedLearner:
    spec = spec or LearnerSpec("glm_unadjusted")
    X, y, w = _prepare(X, y, w)
    mean = _wmean(y, w)
    return FittedLearner(spec, X.shape[1], "constant", intercept=mean,
                         diagnostics={"degenerate": mean <= 0.0 or mean >= 1.0})


# ---------------------------------------------------------------------------
# saturated (cell-mean) learner


class _CellTable:
    """Weighted outcome mean per distinct covariate row; unseen rows get the overall mean."""

    def __init__(self, X, y, w):
        self.fallback = float(w @ y / w.sum())
        keys = [r.tobytes() for r in np.ascontiguousarray(X)]
        sums: dict[bytes, float] = {}
        wts: dict[bytes, float] = {}
        for k, yi, wi in zip(keys, y, w):
            if wi > 0:
                sums[k] = sums.get(k, 0.0) + wi * yi
                wts[k] = wts.get(k, 0.0) + wi
        self.means = {k: sums[k] / wts[k] for k in sums}

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        return np.array([self.means.get(r.tobytes(), self.fallback) for r in X])


def fit_saturated(X, y, w=None, *, spec: LearnerSpec | None = None) -> FittedLearner:
    """Nonparametric MLE: the weighted mean outcome within each observed covariate cell."""
    spec = spec or LearnerSpec("saturated")
    X, y, w = _prepare(X, y, w)
    table = _CellTable(X, y, w)
    return FittedLearner(spec, X.shape[1], "cells", cells=table,
                         diagnostics={"cells": len(table.means), "degenerate": False})


# ---------------------------------------------------------------------------
# penalized logistic regression


@dataclass
class _Standardized:
    Xs: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    active: np.ndarray
    v: np.ndarray
    y: np.ndarray


def _standardize(X, y, w) -> _Standardized:
    v = w / w.sum()
    pos = v > 0
    active = _active_columns(X, w)
    Xa = X[pos][:, active]
    vv = v[pos]
    mean = vv @ Xa
    sd = np.sqrt(vv @ (Xa - mean) ** 2)
    return _Standardized((Xa - mean) / sd, mean, sd, active, vv, y[pos])


def lambda_max(X, y, w=None, alpha: float = 1.0) -> float:
    """Smallest penalty at which every standardized coefficient is zero."""
    X, y, w = _prepare(X, y, w)
    st = _standardize(X, y, w)
    if st.Xs.shape[1] == 0:
        return 0.0
    ybar = st.v @ st.y
    g = np.abs(st.Xs.T @ (st.v * (st.y - ybar)))
    return float(g.max() / max(alpha, 1e-3))


def lambda_path(lmax: float, size: int = 100, ratio: float = 1e-4) -> np.ndarray:
    if size == 1 or lmax <= 0:
        return np.array([lmax])
    return lmax * np.geomspace(1.0, ratio, size)


@njit(cache=True)
def _cd_quadratic(H, c, theta, l1, l2, max_sweeps=10000, tol=1e-15):
    """Minimise 0.5 t'Ht - c't + l1|t[1:]|_1 + 0.5 l2 |t[1:]|^2 by cyclic coordinate descent."""
    theta = theta.copy()
    r = c - H @ theta  # partial residual
    m = theta.shape[0]
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(m):
            hjj = H[j, j]
            if hjj <= 0:
                continue
            old = theta[j]
            z = r[j] + hjj * old
            if j == 0:
                new = z / hjj
            else:
                new = max(abs(z) - l1, 0.0) * (1.0 if z >= 0 else -1.0) / (hjj + l2)
            if new != old:
                d = new - old
                r -= H[:, j] * d
                theta[j] = new
                delta = max(delta, abs(d) * math.sqrt(hjj))
        if delta < tol:
            break
    return theta


def _penalized_objective(st, theta, lam, alpha):
    eta = theta[0] + st.Xs @ theta[1:]
    b = theta[1:]
    return (-_loglik(st.v, st.y, eta)
            + lam * (alpha * np.abs(b).sum() + 0.5 * (1 - alpha) * b @ b))


def _kkt_residual(st, theta, lam, alpha) -> float:
    eta = theta[0] + st.Xs @ theta[1:]
    resid = st.v * (st.y - expit(eta))
    g0 = abs(resid.sum())
    b = theta[1:]
    g = -(st.Xs.T @ resid) + lam * (1 - alpha) * b
    l1 = lam * alpha
    viol = np.where(b != 0, np.abs(g + l1 * np.sign(b)), np.maximum(np.abs(g) - l1, 0.0))
    return float(max(g0, viol.max() if viol.size else 0.0))


def _solve_penalized(st, lam, alpha, theta0=None, max_iter=200, tol=1e-10):
    p = st.Xs.shape[1]
    if theta0 is None:
        ybar = float(st.v @ st.y)
        theta = np.zeros(p + 1)
        theta[0] = math.log(ybar / (1 - ybar))
    else:
        theta = theta0.copy()
    Z = np.hstack([np.ones((st.Xs.shape[0], 1)), st.Xs])
    obj = _penalized_objective(st, theta, lam, alpha)
    l1, l2 = lam * alpha, lam * (1 - alpha)
    it = 0
    for it in range(1, max_iter + 1):
        eta = Z @ theta
        mu = expit(eta)
        s = st.v * mu * (1 - mu)
        H = Z.T @ (s[:, None] * Z)
        grad = Z.T @ (st.v * (st.y - mu))  # ascent direction of log-lik
        c = H @ theta + grad
        if l1 == 0.0:
            A = H.copy()
            A[np.arange(1, p + 1), np.arange(1, p + 1)] += l2
            target = np.linalg.lstsq(A, c, rcond=None)[0]
        else:
            target = _cd_quadratic(H, c, theta, l1, l2)
        step = target - theta
        t = 1.0
        while True:
            cand = theta + t * step
            obj_c = _penalized_objective(st, cand, lam, alpha)
            if obj_c <= obj + 1e-15 or t < 1e-10:
                break
            t *= 0.5
        theta, obj = cand, obj_c
        if np.max(np.abs(t * step)) < tol:
            break
    return theta, obj, it


def fit_penalized_logistic(X, y, w=None, alpha: float = 1.0, lam: float = 0.0, *,
                           spec: LearnerSpec | None = None, warm=None,
                           kkt_tol: float = 1e-6) -> FittedLearner:
    """Elastic-net penalized weighted logistic regression.

    Minimises  -sum_i v_i loglik_i + lam * (alpha*|b|_1 + (1-alpha)/2*|b|^2)
    over standardized columns, with an unpenalized intercept and v = w/sum(w).
    Solved by proximal Newton steps with coordinate descent on the quadratic
    model.  Coefficients are returned on the original column scale.
    """
    if not 0 <= alpha <= 1:
        raise LearnerError("alpha must be in [0, 1]")
    if lam < 0 or not math.isfinite(lam):
        raise LearnerError("lambda must be finite and non-negative")
    spec = spec or LearnerSpec("elastic_net", alpha=alpha)
    X, y, w = _prepare(X, y, w)
    n, p = X.shape
    ybar = _wmean(y, w)
    if ybar <= 0.0 or ybar >= 1.0:
        return _constant(spec, p, ybar, "constant outcome")
    st = _standardize(X, y, w)
    theta, obj, it = _solve_penalized(st, lam, alpha, theta0=warm)
    kkt = _kkt_residual(st, theta, lam, alpha)
    if kkt > kkt_tol:
        theta, obj, more = _solve_penalized(st, lam, alpha, theta0=theta, max_iter=500, tol=0.0)
        it += more
        kkt = _kkt_residual(st, theta, lam, alpha)
    b_std = theta[1:]
    b = b_std / st.sd
    b0 = theta[0] - float(b @ st.mean)
    return FittedLearner(
        spec, p, "linear", intercept=b0, coef=_expand_coef(p, st.active, b),
        diagnostics={"iterations": it, "objective": obj, "kkt_residual": kkt,
                     "lambda": lam, "alpha": alpha, "degenerate": False,
                     "theta_std": theta, "active": st.active.tolist()})


def _fold_labels(n: int, folds: int, seed, keys=None) -> np.ndarray:
    """Fold label per row from a seeded shuffle of subject keys."""
    keys = np.arange(n) if keys is None else np.asarray(keys)
    rng = np.random.default_rng(seed)
    order = rng.permutation(int(keys.max()) + 1 if keys.size else 0)
    return order[keys] % folds


def _deviance(y, p, v):
    p = np.clip(p, PRED_LO, PRED_HI)
    return float(-2 * np.sum(v * (xlogy(y, p) + xlogy(1 - y, 1 - p))))


def cv_deviance_path(X, y, w, alpha, path, folds=10, seed=0, keys=None) -> np.ndarray:
    X, y, w = _prepare(X, y, w)
    labels = _fold_labels(X.shape[0], folds, seed, keys)
    total = np.zeros(len(path))
    for k in range(folds):
        test = labels == k
        train = ~test
        if not test.any() or w[test].sum() <= 0:
            continue
        wt = np.where(train, w, 0.0)
        if wt.sum() <= 0:
            continue
        ybar = _wmean(y, wt)
        v_test = w[test]
        if ybar <= 0 or ybar >= 1:
            # degenerate training fold: constant prediction for every lambda
            total += _deviance(y[test], np.full(test.sum(), ybar), v_test)
            continue
        st = _standardize(X, y, wt)
        theta = None
        for i, lam in enumerate(path):
            theta, _, _ = _solve_penalized(st, lam, alpha, theta0=theta, tol=1e-8)
            b = theta[1:] / st.sd
            b0 = theta[0] - b @ st.mean
            eta = b0 + X[test][:, st.active] @ b
            total[i] += _deviance(y[test], expit(eta), v_test)
    return total / w.sum()


def select_lambda_cv(X, y, w=None, alpha: float = 1.0, *, folds: int = 10, path=None,
                     path_size: int = 100, path_ratio: float = 1e-4, seed=0, keys=None) -> float:
    """Lambda on the path with minimum cross-validated binomial deviance."""
    X, y, w = _prepare(X, y, w)
    if path is None:
        path = lambda_path(lambda_max(X, y, w, alpha), path_size, path_ratio)
    path = np.asarray(path, dtype=float)
    if path.size == 1:
        return float(path[0])
    if X.shape[0] < folds:
        raise LearnerError(f"need at least {folds} rows for {folds}-fold CV")
    dev = cv_deviance_path(X, y, w, alpha, path, folds=folds, seed=seed, keys=keys)
    return float(path[int(np.argmin(dev))])


def select_lambda_undersmoothed(path) -> float:
    path = np.asarray(path, dtype=float)
    if path.size == 0:
        raise LearnerError("empty lambda path")
    return float(path.min())


def fit_penalized_learner(X, y, w, spec: LearnerSpec, seed=0, keys=None) -> FittedLearner:
    X, y, w = _prepare(X, y, w)
    alpha = spec.mix
    lmax = lambda_max(X, y, w, alpha)
    path = lambda_path(lmax, spec.path_size, spec.path_ratio)
    if spec.lambda_selection == "undersmoothed":
        lam = select_lambda_undersmoothed(path)
    else:
        lam = select_lambda_cv(X, y, w, alpha, folds=spec.folds, path=path, seed=seed, keys=keys)
    fit = fit_penalized_logistic(X, y, w, alpha=alpha, lam=lam, spec=spec)
    fit.diagnostics["lambda_max"] = lmax
    return fit


# ---------------------------------------------------------------------------
# random forest


def fit_random_forest(X, y, w=None, *, spec: LearnerSpec | None = None, seed=0,
                      keys=None) -> FittedLearner:
    """Bagged CART regression trees on the (possibly fractional) outcome.

    Bootstrap multiplicities are Poisson(1) draws indexed by subject key, and
    rows are sorted by key before each tree is grown, so the forest does not
    depend on the order in which subjects are presented.
    """
    from sklearn.tree import DecisionTreeRegressor

    spec = spec or LearnerSpec("random_forest")
    X, y, w = _prepare(X, y, w)
    n, p = X.shape
    keys = np.arange(n) if keys is None else np.asarray(keys, dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    X, y, w, keys = X[order], y[order], w[order], keys[order]
    mtry = spec.mtry or max(1, math.ceil(math.sqrt(max(p, 1))))
    ss = np.random.SeedSequence(seed)
    trees, feats = [], []
    top = int(keys.max()) + 1
    for b, child in enumerate(ss.spawn(spec.n_trees)):
        rng = np.random.default_rng(child)
        counts = rng.poisson(1.0, size=top)[keys].astype(float)
        if n == 1:
            counts[:] = 1.0
        sw = counts * w
        rows = sw > 0
        if not rows.any():
            rows = w > 0
            sw = w
        fs = np.sort(rng.choice(p, size=min(mtry, p), replace=False)) if p else np.zeros(0, int)
        tree = DecisionTreeRegressor(min_samples_leaf=min(spec.min_leaf, int(rows.sum())),
                                     random_state=int(rng.integers(2**31 - 1)))
        Xf = X[rows][:, fs] if p else np.zeros((int(rows.sum()), 1))
        tree.fit(Xf, y[rows], sample_weight=sw[rows])
        trees.append(tree)
        feats.append(fs if p else np.zeros(0, int))
    if p == 0:
        # a forest with no predictors is the weighted mean
        return FittedLearner(spec, 0, "constant", intercept=float(w @ y / w.sum()),
                             diagnostics={"degenerate": True, "reason": "no predictors"})
    return FittedLearner(spec, p, "forest", trees=tuple(trees), tree_features=tuple(feats),
                         diagnostics={"trees": len(trees), "mtry": mtry, "degenerate": False})


# ---------------------------------------------------------------------------
# dispatcher


def fit_learner(spec: LearnerSpec, X, y, w=None, *, seed=0, keys=None) -> FittedLearner:
    """Fit the learner described by ``spec``; constant outcomes give a constant learner."""
    X, y, w = _prepare(X, y, w)
    ybar = _wmean(y, w)
    if spec.family != "saturated" and (ybar <= 0.0 or ybar >= 1.0):
        return _constant(spec, X.shape[1], ybar, "constant outcome")
    if spec.family == "glm_adjusted":
        return fit_logistic_glm(X, y, w, spec=spec)
    if spec.family == "glm_unadjusted":
        return fit_intercept_only(X, y, w, spec=spec)
    if spec.family == "saturated":
        return fit_saturated(X, y, w, spec=spec)
    if spec.family in PENALIZED:
        return fit_penalized_learner(X, y, w, spec, seed=seed, keys=keys)
    return fit_random_forest(X, y, w, spec=spec, seed=seed, keys=keys)


def diagnostics_summary(learner: FittedLearner) -> dict:
    out = {"family": learner.spec.family, "kind": learner.kind}
    for k, v in learner.diagnostics.items():
        if isinstance(v, (int, float, bool, str)) or v is None:
            out[k] = v
    return out
