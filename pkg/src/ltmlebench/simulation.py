"""Sequential logistic data-generating processes, permuted nulls and Monte-Carlo truths."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
from scipy.special import expit

from .data_model import (NodeSchema, ObservedDataset, Regime, apply_lvcf, event_times,
                         padding_mask)
from .learners import fit_logistic_glm

DET0, DET1 = "DET0", "DET1"
CHUNK = 65536
DEFAULT_N_MC = 2_000_000


class CoefficientError(ValueError):
    pass


@dataclass(eq=False)
class CoefficientMatrix:
    """One logistic row per column of the schema, in generation order.

    ``coef[i, j]`` is the coefficient of column j in the model for column i
    (NaN = absent; only j < i may be present).  Columns listed in
    ``deterministic`` are set to 0 or 1 whenever they are drawn.
    """

    schema: NodeSchema
    intercept: np.ndarray
    coef: np.ndarray
    deterministic: dict[str, int] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        m = len(self.schema.columns)
        self.intercept = np.asarray(self.intercept, dtype=float)
        self.coef = np.asarray(self.coef, dtype=float)
        if self.intercept.shape != (m,) or self.coef.shape != (m, m):
            raise CoefficientError(f"expected {m} rows and {m} predictor columns")
        if any(n > 2 for n in self.schema.levels.values()):
            raise CoefficientError("logistic DGPs support binary nodes only")
        upper = np.triu(np.ones((m, m), dtype=bool))
        if np.isfinite(self.coef[upper]).any():
            raise CoefficientError("a row may only reference strictly preceding nodes")
        for col, v in self.deterministic.items():
            if col not in self.schema.index or v not in (0, 1):
                raise CoefficientError(f"bad deterministic row {col!r}")

    @property
    def rows(self) -> list[str]:
        return self.schema.columns

    @classmethod
    def build(cls, schema: NodeSchema, rows: Mapping[str, Mapping[str, float] | str],
              default_intercept: float | str = DET0) -> "CoefficientMatrix":
        """Assemble from ``{column: {"intercept": b0, predictor: b, ...} | "DET0" | "DET1"}``.

        Columns not listed get ``default_intercept`` (a number or a DET sentinel).
        """
        m = len(schema.columns)
        idx = schema.index
        intercept = np.zeros(m)
        coef = np.full((m, m), np.nan)
        det = {}
        unknown = set(rows) - set(idx)
        if unknown:
            raise CoefficientError(f"unknown rows: {sorted(unknown)}")
        for col in schema.columns:
            spec = rows.get(col, default_intercept)
            i = idx[col]
            if isinstance(spec, str):
                if spec not in (DET0, DET1):
                    raise CoefficientError(f"unknown sentinel {spec!r}")
                det[col] = int(spec[-1])
                continue
            if not isinstance(spec, Mapping):
                intercept[i] = float(spec)
                continue
            for key, val in spec.items():
                if key == "intercept":
                    intercept[i] = float(val)
                elif key not in idx:
                    raise CoefficientError(f"unknown predictor {key!r} in row {col}")
                else:
                    j = idx[key]
                    if j >= i:
                        raise CoefficientError(f"{col} cannot depend on later node {key}")
                    coef[i, j] = float(val)
        return cls(schema, intercept, coef, det)

    def get(self, row: str, predictor: str = "intercept") -> float:
        i = self.schema.index[row]
        if predictor == "intercept":
            return float(self.intercept[i])
        return float(self.coef[i, self.schema.index[predictor]])

    # -- CSV -----------------------------------------------------------------

    def to_csv(self, path=None) -> str:
        cols = self.schema.columns
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "intercept"] + cols)
        for i, col in enumerate(cols):
            if col in self.deterministic:
                w.writerow([col, DET1 if self.deterministic[col] else DET0] + [""] * len(cols))
                continue
            cells = ["" if math.isnan(x) else repr(float(x)) for x in self.coef[i]]
            w.writerow([col, repr(float(self.intercept[i]))] + cells)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text, schema: NodeSchema) -> "CoefficientMatrix":
        if isinstance(path_or_text, str) and "\n" in path_or_text:
            text = path_or_text
        else:
            with open(path_or_text, newline="") as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        cols = schema.columns
        if not rows or rows[0] != ["node", "intercept"] + cols:
            raise CoefficientError("coefficient header does not match the schema")
        if [r[0] for r in rows[1:]] != cols:
            raise CoefficientError("coefficient rows must follow generation order")
        m = len(cols)
        intercept = np.zeros(m)
        coef = np.full((m, m), np.nan)
        det = {}
        for i, r in enumerate(rows[1:]):
            if len(r) != m + 2:
                raise CoefficientError(f"row {r[0]} has {len(r)} fields")
            if r[1] in (DET0, DET1):
                if any(r[2:]):
                    raise CoefficientError(f"deterministic row {r[0]} has coefficients")
                det[r[0]] = int(r[1][-1])
                continue
            intercept[i] = float(r[1])
            coef[i] = [float(x) if x != "" else np.nan for x in r[2:]]
        return cls(schema, intercept, coef, det)

    def equals(self, other: "CoefficientMatrix") -> bool:
        return (self.schema.columns == other.schema.columns
                and self.deterministic == other.deterministic
                and np.array_equal(self.intercept, other.intercept)
                and np.array_equal(self.coef, other.coef, equal_nan=True))


# ---------------------------------------------------------------------------
# generation


def _roles(schema: NodeSchema) -> list[tuple[str, str, int | None, int | None]]:
    """(role, node, t, index of the same node at t-1) per column."""
    idx = schema.index
    out = []
    for col in schema.columns:
        node, t = schema.parse(col)
        if t is None:
            role = "baseline"
        elif node == schema.outcome_node:
            role = "Y"
        elif node == schema.competing_node:
            role = "D"
        elif node == schema.censor_node:
            role = "C"
        elif node in schema.exposure_nodes:
            role = "A"
        else:
            role = "L"
        prev = idx.get(schema.name(node, t - 1)) if t and t > 1 else None
        out.append((role, node, t, prev))
    return out


def _draw_chunk(cm: CoefficientMatrix, U: np.ndarray, regime: Regime | None) -> np.ndarray:
    s = cm.schema
    k, m = U.shape
    beta = np.nan_to_num(cm.coef, nan=0.0)
    det = {s.index[c]: v for c, v in cm.deterministic.items()}
    X = np.zeros((k, m))
    stopped = np.zeros(k, dtype=bool)  # terminal event or censoring already happened
    y_now = np.zeros(k, dtype=bool)
    event_now = np.zeros(k, dtype=bool)
    current = None
    for i, (role, node, t, prev) in enumerate(_roles(s)):
        if t is not None and t != current:
            # a new interval: events of the previous one become terminal
            stopped |= event_now
            event_now = np.zeros(k, dtype=bool)
            y_now = np.zeros(k, dtype=bool)
            current = t
        if i in det:
            drawn = np.full(k, float(det[i]))
        elif role == "C" and regime is not None:
            drawn = np.zeros(k)
        elif role == "A" and regime is not None:
            drawn = np.full(k, float(regime.value(node, t)))
        else:
            p = expit(cm.intercept[i] + X[:, :i] @ beta[i, :i])
            drawn = (U[:, i] < p).astype(float)
        if role == "baseline":
            X[:, i] = drawn
            continue
        if role in ("L", "Y"):
            active = ~stopped
        elif role == "D":
            active = ~stopped & ~y_now
        else:
            active = ~stopped & ~event_now
        prev_val = X[:, prev] if prev is not None else np.zeros(k)
        X[:, i] = np.where(active, drawn, prev_val)
        if role == "Y":
            y_now = active & (X[:, i] == 1)
            event_now |= y_now
        elif role == "D":
            event_now |= active & (X[:, i] == 1)
        elif role == "C":
            stopped |= active & (X[:, i] == 1)
    return X


def _chunks(cm: CoefficientMatrix, n: int, seed: int, regime: Regime | None = None
            ) -> Iterator[np.ndarray]:
    """Simulated blocks of at most CHUNK subjects, each from its own seeded stream."""
    m = len(cm.schema.columns)
    for c, start in enumerate(range(0, n, CHUNK)):
        size = min(CHUNK, n - start)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), c]))
        yield _draw_chunk(cm, rng.random((size, m)), regime)


def simulate_dataset(coeffs: CoefficientMatrix, n: int, seed: int,
                     regime: Regime | None = None) -> ObservedDataset:
    """Draw ``n`` subjects node by node.

    With ``regime`` the exposure nodes are set to the regime and censoring to 0
    while everything else follows the DGP (counterfactual data).  The same seed
    gives common random numbers across regimes.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if regime is not None:
        regime.check(coeffs.schema)
    parts = list(_chunks(coeffs, n, seed, regime))
    values = np.vstack(parts) if parts else np.zeros((0, len(coeffs.schema.columns)))
    return ObservedDataset(coeffs.schema, values.astype(np.int64))


@dataclass(frozen=True)
class Truth:
    rd: float
    se: float
    risk_treatment: float
    risk_control: float
    se_treatment: float
    se_control: float
    n_mc: int
    method: str = "counterfactual simulation"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compute_truth(coeffs: CoefficientMatrix, regime_pair: tuple[Regime, Regime], horizon: int,
                  n_mc: int = DEFAULT_N_MC, seed: int = 0) -> Truth:
    """Monte-Carlo risk difference P(Y_a1(h)=1) - P(Y_a0(h)=1) with common random numbers."""
    s = coeffs.schema
    if not 1 <= horizon <= s.intervals:
        raise ValueError(f"horizon must be in 1..{s.intervals}")
    for r in regime_pair:
        r.check(s)
    col = s.index[s.name(s.outcome_node, horizon)]
    s1 = s0 = sdd = 0.0
    for x1, x0 in zip(_chunks(coeffs, n_mc, seed, regime_pair[0]),
                      _chunks(coeffs, n_mc, seed, regime_pair[1])):
        y1, y0 = x1[:, col], x0[:, col]
        d = y1 - y0
        s1 += y1.sum()
        s0 += y0.sum()
        sdd += (d * d).sum()
    n = float(n_mc)
    p1, p0 = s1 / n, s0 / n
    rd = p1 - p0
    var_d = (sdd - n * rd * rd) / (n - 1)
    se = math.sqrt(max(var_d, 0.0) / n)
    return Truth(float(rd), se, float(p1), float(p0), math.sqrt(p1 * (1 - p1) / (n - 1)),
                 math.sqrt(p0 * (1 - p0) / (n - 1)), int(n_mc))


# ---------------------------------------------------------------------------
# fitting a DGP to data


def generating_strata(data: ObservedDataset) -> dict[str, np.ndarray]:
    """Subjects for whom each column is actually drawn (not carried forward)."""
    s = data.schema
    ev = event_times(data)
    out = {}
    for col, (role, node, t, _) in zip(s.columns, _roles(s)):
        if role == "baseline":
            out[col] = np.ones(data.n, dtype=bool)
            continue
        alive = (ev.terminal >= t) & (ev.censored >= t)
        if role in ("L", "Y"):
            out[col] = alive
        elif role == "D":
            out[col] = alive & ~((ev.terminal == t) & ev.dementia)
        else:
            out[col] = alive & (ev.terminal > t)
    return out


def fit_dgp_coefficients(data: ObservedDataset) -> CoefficientMatrix:
    """Unpenalized logistic fit of every node on all strictly preceding columns.

    Each node is fit among the subjects for whom it is generated.  Empty strata
    or constant outcomes yield deterministic rows; predictors that are constant
    in the stratum are left absent.
    """
    s = data.schema
    m = len(s.columns)
    intercept = np.zeros(m)
    coef = np.full((m, m), np.nan)
    det, flags = {}, {}
    strata = generating_strata(data)
    for i, col in enumerate(s.columns):
        rows = strata[col]
        y = data.values[rows, i].astype(float)
        if y.size == 0:
            det[col] = 0
            flags[col] = "empty stratum"
            continue
        if y.min() == y.max():
            det[col] = int(y[0])
            flags[col] = "constant outcome"
            continue
        X = data.values[rows, :i].astype(float)
        fit = fit_logistic_glm(X, y)
        active = fit.diagnostics["active"]
        intercept[i] = fit.intercept
        coef[i, active] = fit.coef[active]
        if not fit.diagnostics["converged"]:
            flags[col] = "glm not converged (separation?)"
    return CoefficientMatrix(s, intercept, coef, det, flags)


# ---------------------------------------------------------------------------
# permuted null


def block_columns(schema: NodeSchema) -> list[str]:
    cols = []
    for t in range(1, schema.intervals + 1):
        cols += [schema.name(schema.outcome_node, t), schema.name(schema.competing_node, t)]
        if t <= schema.K:
            cols.append(schema.name(schema.censor_node, t))
    return cols


def null_permutation(n: int, seed: int | None) -> np.ndarray:
    if seed is None:
        return np.arange(n)
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(n)


def permute_null(data: ObservedDataset, seed: int | None, *, inverse: bool = False
                 ) -> ObservedDataset:
    """Jointly permute the outcome, competing-event and censoring trajectories.

    One permutation moves every subject's whole (Y, D, C) block to another
    subject; baseline, covariate and exposure values stay put and are carried
    forward again after the new event times.  ``seed=None`` is the identity;
    ``inverse`` applies the inverse of the seeded permutation, which restores
    the block exactly (covariates that became padding stay carried forward).
    """
    s = data.schema
    perm = null_permutation(data.n, seed)
    if inverse:
        perm = np.argsort(perm)
    blk = [s.index[c] for c in block_columns(s)]
    v = data.values.astype(float)
    v[:, blk] = data.values[perm][:, blk]
    staged = ObservedDataset(s, v.astype(np.int64))
    pad = padding_mask(staged)
    pad[:, blk] = False
    v[pad] = np.nan
    return apply_lvcf(s, v)


def _block_hazards(data: ObservedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Discrete hazards of Y and of D (given no Y) per interval among uncensored risk sets."""
    s = data.schema
    ev = event_times(data)
    hy, hd = np.zeros(s.intervals + 1), np.zeros(s.intervals + 1)
    for t in range(1, s.intervals + 1):
        risk = (ev.terminal >= t) & (ev.censored >= t)
        nr = risk.sum()
        if nr == 0:
            continue
        y = risk & (ev.terminal == t) & ev.dementia
        hy[t] = y.sum() / nr
        ny = (risk & ~y).sum()
        hd[t] = (risk & (ev.terminal == t) & ~ev.dementia).sum() / ny if ny else 0.0
    return hy, hd


def compute_null_truth(coeffs: CoefficientMatrix, regime_pair: tuple[Regime, Regime],
                       horizon: int, n_mc: int = DEFAULT_N_MC, seed: int = 0) -> Truth:
    """Truth for the permuted-null scenario.

    The permuted event block is independent of exposure, so each arm's risk
    under "no censoring" follows from the block's discrete hazards.  These are
    estimated from a permuted natural-course sample of size ``n_mc``; each arm
    is then drawn from the hazards with its own stream, so the reported
    MC-SE reflects genuine simulation noise around a zero difference.
    """
    s = coeffs.schema
    if not 1 <= horizon <= s.intervals:
        raise ValueError(f"horizon must be in 1..{s.intervals}")
    for r in regime_pair:
        r.check(s)
    natural = permute_null(simulate_dataset(coeffs, n_mc, seed), seed)
    hy, hd = _block_hazards(natural)
    risks, ses = [], []
    for arm in (1, 2):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA7, arm]))
        alive = np.ones(n_mc, dtype=bool)
        dem = np.zeros(n_mc, dtype=bool)
        for t in range(1, horizon + 1):
            u = rng.random((n_mc, 2))
            y = alive & (u[:, 0] < hy[t])
            d = alive & ~y & (u[:, 1] < hd[t])
            dem |= y
            alive &= ~(y | d)
        p = dem.mean()
        risks.append(float(p))
        ses.append(math.sqrt(p * (1 - p) / (n_mc - 1)))
    rd = risks[0] - risks[1]
    return Truth(rd, math.hypot(ses[0], ses[1]), risks[0], risks[1], ses[0], ses[1], int(n_mc),
                 method="permuted-null block hazards")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    n: int
    seed: int
    coefficients: CoefficientMatrix
    permutation_seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("dependent", "permuted_null"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "permuted_null" and self.permutation_seed is None:
            raise ValueError("permuted_null scenarios need a permutation seed")

    def draw(self, replicate_seed: int | None = None) -> ObservedDataset:
        seed = self.seed if replicate_seed is None else replicate_seed
        data = simulate_dataset(self.coefficients, self.n, seed)
        if self.kind == "permuted_null":
            perm_seed = self.permutation_seed if replicate_seed is None else replicate_seed
            data = permute_null(data, perm_seed)
        return data
