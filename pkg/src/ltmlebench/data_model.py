"""Longitudinal node schema, dataset container and regime bookkeeping.

A dataset is stored wide: one row per subject, one column per (node, interval).
Within an interval the nodes are ordered covariates, outcome, competing event,
exposures, censoring; the last interval carries only the covariate block.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

NEVER = np.iinfo(np.int32).max


class SchemaError(ValueError):
    """Raised for an inconsistent node schema."""


class DatasetStructureError(ValueError):
    """Raised when a value matrix does not match its schema."""


class LVCFError(ValueError):
    """Raised when a raw table has missing values before any terminal event."""


@dataclass(frozen=True)
class NodeSchema:
    baseline_nodes: tuple[str, ...]
    covariate_nodes: tuple[str, ...]
    exposure_nodes: tuple[str, ...]
    intervals: int
    outcome_node: str = "Y"
    competing_node: str = "D"
    censor_node: str = "C"
    interval_length_days: int = 182
    levels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("baseline_nodes", "covariate_nodes", "exposure_nodes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "levels", dict(self.levels))
        if int(self.intervals) < 1:
            raise SchemaError("intervals must be >= 1")
        if int(self.interval_length_days) < 1:
            raise SchemaError("interval_length_days must be >= 1")
        if not self.exposure_nodes:
            raise SchemaError("at least one exposure node is required")
        events = (self.outcome_node, self.competing_node, self.censor_node)
        names = list(self.baseline_nodes) + list(self.covariate_nodes) + list(self.exposure_nodes) + list(events)
        if len(set(names)) != len(names):
            raise SchemaError(f"node names must be unique: {names}")
        for node, k in self.levels.items():
            if node not in names:
                raise SchemaError(f"levels given for unknown node {node!r}")
            if node not in self.baseline_nodes and node not in self.covariate_nodes:
                raise SchemaError(f"only covariates may be categorical, got {node!r}")
            if int(k) < 2:
                raise SchemaError(f"node {node!r} needs at least 2 levels")

    @property
    def K(self) -> int:
        """Number of intervals carrying an exposure/censoring block."""
        return self.intervals - 1

    @property
    def within_interval_order(self) -> tuple[str, ...]:
        return self.l_nodes + self.a_nodes

    @property
    def l_nodes(self) -> tuple[str, ...]:
        return self.covariate_nodes + (self.outcome_node, self.competing_node)

    @property
    def a_nodes(self) -> tuple[str, ...]:
        return self.exposure_nodes + (self.censor_node,)

    def n_levels(self, node: str) -> int:
        return int(self.levels.get(node, 2))

    @staticmethod
    def name(node: str, t: int | None = None) -> str:
        return node if t is None else f"{node}_t{t}"

    def l_block(self, t: int) -> list[str]:
        return [self.name(v, t) for v in self.l_nodes]

    def a_block(self, t: int) -> list[str]:
        if not 1 <= t <= self.K:
            return []
        return [self.name(v, t) for v in self.a_nodes]

    @cached_property
    def _columns(self) -> tuple[str, ...]:
        cols = list(self.baseline_nodes)
        for t in range(1, self.intervals + 1):
            cols += self.l_block(t) + self.a_block(t)
        return tuple(cols)

    @property
    def columns(self) -> list[str]:
        return list(self._columns)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self._columns)}

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def parse(self, column: str) -> tuple[str, int | None]:
        """Split a column name into (node, interval)."""
        if column in self.baseline_nodes:
            return column, None
        node, _, t = column.rpartition("_t")
        return node, int(t)

    def to_dict(self) -> dict:
        return {
            "baseline_nodes": list(self.baseline_nodes),
            "covariate_nodes": list(self.covariate_nodes),
            "exposure_nodes": list(self.exposure_nodes),
            "intervals": self.intervals,
            "interval_length_days": self.interval_length_days,
            "outcome_node": self.outcome_node,
            "competing_node": self.competing_node,
            "censor_node": self.censor_node,
            "levels": dict(sorted(self.levels.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NodeSchema":
        required = ("baseline_nodes", "covariate_nodes", "exposure_nodes", "intervals")
        for key in required:
            if key not in d:
                raise SchemaError(f"schema is missing key {key!r}")
        allowed = set(required) | {"interval_length_days", "outcome_node", "competing_node",
                                   "censor_node", "levels"}
        unknown = set(d) - allowed
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**{k: d[k] for k in d})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NodeSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class ObservedDataset:
    """Immutable wide person table; ``values[i, j]`` is column ``schema.columns[j]``."""

    schema: NodeSchema
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.int16, copy=True)
        if v.ndim != 2:
            raise DatasetStructureError(f"values must be 2-d, got shape {v.shape}")
        if v.shape[1] != len(self.schema.columns):
            raise DatasetStructureError(
                f"expected {len(self.schema.columns)} columns, got {v.shape[1]}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def col(self, node: str, t: int | None = None) -> np.ndarray:
        return self.values[:, self.schema.index[self.schema.name(node, t)]]

    def node_matrix(self, node: str) -> np.ndarray:
        """(n, T) matrix of a time-varying node over every interval where it exists."""
        s = self.schema
        last = s.K if node in s.a_nodes else s.intervals
        idx = s.index
        return self.values[:, [idx[s.name(node, t)] for t in range(1, last + 1)]]

    def subset(self, rows) -> "ObservedDataset":
        return ObservedDataset(self.schema, self.values[np.asarray(rows)])

    def with_values(self, values) -> "ObservedDataset":
        return ObservedDataset(self.schema, values)

    def to_csv(self, path) -> None:
        header = ",".join(self.schema.columns)
        with open(path, "w", newline="\n") as fh:
            fh.write(header + "\n")
            for row in self.values:
                fh.write(",".join(map(str, row.tolist())) + "\n")

    @classmethod
    def from_csv(cls, path, schema: NodeSchema) -> "ObservedDataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if header != schema.columns:
            missing = sorted(set(schema.columns) - set(header))
            extra = sorted(set(header) - set(schema.columns))
            if missing or extra:
                raise DatasetStructureError(f"header mismatch; missing={missing} extra={extra}")
            raise DatasetStructureError("columns are not in schema order")
        values = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        if values.size == 0:
            values = np.zeros((0, len(schema.columns)), dtype=np.int64)
        return cls(schema, values)


@dataclass(frozen=True)
class Regime:
    """Static regime: a fixed value per exposure node and interval; censoring is always prevented."""

    assignments: Mapping[str, tuple[int, ...]]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "assignments",
                           {k: tuple(int(x) for x in v) for k, v in self.assignments.items()})
        for k, v in self.assignments.items():
            if any(x not in (0, 1) for x in v):
                raise ValueError(f"regime values for {k!r} must be 0/1")

    @classmethod
    def static(cls, schema: NodeSchema, name: str = "", **values: int) -> "Regime":
        missing = set(schema.exposure_nodes) - set(values)
        if missing:
            raise ValueError(f"regime needs a value for exposures {sorted(missing)}")
        return cls({a: (values[a],) * schema.K for a in schema.exposure_nodes}, name=name)

    def check(self, schema: NodeSchema) -> None:
        if set(self.assignments) != set(schema.exposure_nodes):
            raise ValueError("regime must assign every exposure node")
        for k, v in self.assignments.items():
            if len(v) != schema.K:
                raise ValueError(f"regime for {k!r} has {len(v)} values, expected {schema.K}")

    def value(self, node: str, t: int) -> int:
        return self.assignments[node][t - 1]

    def to_dict(self) -> dict:
        return {"name": self.name, "assignments": {k: list(v) for k, v in self.assignments.items()}}

    @classmethod
    def from_dict(cls, d: Mapping, schema: NodeSchema | None = None) -> "Regime":
        if "assignments" in d:
            reg = cls(d["assignments"], name=d.get("name", ""))
        elif "static" in d and schema is not None:
            reg = cls.static(schema, name=d.get("name", ""), **d["static"])
        else:
            raise KeyError("assignments")
        if schema is not None:
            reg.check(schema)
        return reg


CONTRASTS = ("risk_difference", "relative_risk", "per_arm_risk")


@dataclass(frozen=True)
class EstimandSpec:
    treatment_regime: Regime
    control_regime: Regime
    horizon: int
    contrast: str = "risk_difference"

    def check(self, schema: NodeSchema) -> None:
        self.treatment_regime.check(schema)
        self.control_regime.check(schema)
        if not 1 <= self.horizon <= schema.intervals:
            raise ValueError(f"horizon must be in 1..{schema.intervals}")
        if self.contrast not in CONTRASTS:
            raise ValueError(f"unknown contrast {self.contrast!r}")


# ---------------------------------------------------------------------------
# event bookkeeping


@dataclass(frozen=True)
class EventTimes:
    """First-occurrence intervals, ``NEVER`` when absent.

    ``terminal`` is the first interval whose covariate block records dementia
    or death before any censoring, and ``outcome``/``death`` split it by kind;
    ``censored`` is the interval whose censoring node fired first.  Only the first occurrence is used, so values that are
    pure last-value padding never influence anything computed from here.
    """

    outcome: np.ndarray
    death: np.ndarray
    censored: np.ndarray
    terminal: np.ndarray
    dementia: np.ndarray  # bool: terminal event is dementia


def _first_one(mat: np.ndarray) -> np.ndarray:
    hit = mat == 1
    first = np.argmax(hit, axis=1) + 1
    return np.where(hit.any(axis=1), first, NEVER).astype(np.int64)


def event_times(data: ObservedDataset) -> EventTimes:
    s = data.schema
    ty = _first_one(data.node_matrix(s.outcome_node))
    td = _first_one(data.node_matrix(s.competing_node))
    if s.K:
        tc = _first_one(data.node_matrix(s.censor_node))
    else:
        tc = np.full(data.n, NEVER, dtype=np.int64)
    # covariate-block events in interval t are observed before C(t)
    y_obs = np.where(ty <= tc, ty, NEVER)
    d_obs = np.where(td <= tc, td, NEVER)
    dementia = (y_obs <= d_obs) & (y_obs < NEVER)
    terminal = np.minimum(y_obs, d_obs)
    censored = np.where(tc < terminal, tc, NEVER)
    return EventTimes(outcome=np.where(dementia, terminal, NEVER),
                      death=np.where(~dementia, terminal, NEVER), censored=censored, terminal=terminal,
                      dementia=dementia)


def dementia_by(ev: EventTimes, t: int) -> np.ndarray:
    return ev.dementia & (ev.terminal <= t)


def death_by(ev: EventTimes, t: int) -> np.ndarray:
    return ~ev.dementia & (ev.terminal <= t)


def at_risk_matrix(data: ObservedDataset, ev: EventTimes | None = None) -> np.ndarray:
    """(n, K+2) matrix; column t is ``at_risk_indicator(data, t)`` for t=1..K+1."""
    ev = ev or event_times(data)
    t = np.arange(data.schema.intervals + 2)[None, :]
    out = (ev.terminal[:, None] > t) & (ev.censored[:, None] >= t)
    out[:, 0] = True
    return out.astype(np.int8)


def at_risk_indicator(data: ObservedDataset, t: int) -> np.ndarray:
    """1 iff no outcome/death through interval t and no censoring before t."""
    if not 1 <= t <= data.schema.intervals:
        raise ValueError(f"t must be in 1..{data.schema.intervals}")
    return at_risk_matrix(data)[:, t]


def follows_regime(data: ObservedDataset, regime: Regime) -> np.ndarray:
    """(n, K+1) bool; column t says exposures match the regime and C(t)=0."""
    s = data.schema
    out = np.ones((data.n, s.K + 1), dtype=bool)
    for t in range(1, s.K + 1):
        ok = data.col(s.censor_node, t) == 0
        for a in s.exposure_nodes:
            ok &= data.col(a, t) == regime.value(a, t)
        out[:, t] = ok
    return out


def adherence_matrix(data: ObservedDataset, regime: Regime,
                     ev: EventTimes | None = None) -> np.ndarray:
    """(n, K+2) int8; column t is the adherence indicator, column 0 is 1.

    A terminal event in interval s freezes adherence at its value through s-1,
    so exposure values recorded after the event never disqualify a subject.
    Column K+1 repeats column K.
    """
    s = data.schema
    regime.check(s)
    ev = ev or event_times(data)
    follow = follows_regime(data, regime)
    adh = np.ones((data.n, s.K + 2), dtype=bool)
    for t in range(1, s.K + 1):
        frozen = ev.terminal <= t
        adh[:, t] = np.where(frozen, adh[:, t - 1], adh[:, t - 1] & follow[:, t])
    adh[:, s.K + 1] = adh[:, s.K]
    return adh.astype(np.int8)


def adherence_indicator(data: ObservedDataset, regime: Regime, t: int) -> np.ndarray:
    if not 1 <= t <= data.schema.K:
        raise ValueError(f"t must be in 1..{data.schema.K}")
    return adherence_matrix(data, regime)[:, t]


# ---------------------------------------------------------------------------
# validation and last-value-carried-forward


@dataclass(frozen=True)
class Violation:
    subject: int
    node: str
    interval: int | None
    message: str

    def __str__(self):
        return f"subject {self.subject}, {self.node}: {self.message}"


_ROLE = {"outcome_node": "outcome", "competing_node": "competing event", "censor_node": "censoring"}


def validate_dataset(data: ObservedDataset) -> list[Violation]:
    """Return every invariant violation; an empty list means the dataset is valid."""
    if not isinstance(data, ObservedDataset):
        raise DatasetStructureError("expected an ObservedDataset")
    s = data.schema
    out: list[Violation] = []
    idx = s.index
    for col in s.columns:
        node, t = s.parse(col)
        k = s.n_levels(node)
        bad = np.flatnonzero((data.values[:, idx[col]] < 0) | (data.values[:, idx[col]] >= k))
        out += [Violation(int(i), node, t, f"value out of range at t={t}") for i in bad]
    for attr, role in _ROLE.items():
        node = getattr(s, attr)
        if node == s.censor_node and s.K == 0:
            continue
        m = data.node_matrix(node)
        for t in range(2, m.shape[1] + 1):
            for i in np.flatnonzero(m[:, t - 1] < m[:, t - 2]):
                out.append(Violation(int(i), node, t, f"{role} not absorbing at t={t}"))
    y = data.node_matrix(s.outcome_node)
    d = data.node_matrix(s.competing_node)
    for i, t in zip(*np.nonzero((y == 1) & (d == 1))):
        out.append(Violation(int(i), s.competing_node, int(t) + 1,
                             f"outcome and competing event both recorded at t={t + 1}"))
    # first-event interval straight from the raw columns
    tau = np.minimum(_first_one(y), _first_one(d))
    if s.K:
        c = data.node_matrix(s.censor_node)
        tc = _first_one(c)
        for i in np.flatnonzero((tc == tau) & (tau < NEVER)):
            out.append(Violation(int(i), s.censor_node, int(tau[i]),
                                 f"censoring recorded in event interval t={tau[i]}"))
        tau = np.minimum(tau, tc)
    for t in range(2, s.intervals + 1):
        after = np.flatnonzero(tau < t)
        if not after.size:
            continue
        for col in s.l_block(t) + s.a_block(t):
            node, _ = s.parse(col)
            prev = data.values[after, idx[s.name(node, t - 1)]] if s.name(node, t - 1) in idx else None
            if prev is None:
                continue
            cur = data.values[after, idx[col]]
            for i in after[cur != prev]:
                out.append(Violation(int(i), node, t, f"LVCF broken at t={t}"))
    return out


def apply_lvcf(schema: NodeSchema, raw) -> ObservedDataset:
    """Fill post-event cells of a raw wide table with last observed values.

    ``raw`` is an (n, columns) float array in schema column order with NaN for
    unobserved cells.  Cells are only allowed to be missing after a terminal
    event (dementia, death) or after censoring.  Within an event interval
    dementia takes precedence over death, and censoring is set to 0.
    """
    v = np.array(raw, dtype=float, copy=True)
    if v.ndim != 2 or v.shape[1] != len(schema.columns):
        raise DatasetStructureError(f"raw table must have {len(schema.columns)} columns")
    n = v.shape[0]
    idx = schema.index
    for node in schema.baseline_nodes:
        if np.isnan(v[:, idx[node]]).any():
            raise LVCFError("non-terminal missingness unsupported")
    done = np.zeros(n, dtype=bool)
    for t in range(1, schema.intervals + 1):
        cols = schema.l_block(t) + schema.a_block(t)
        for col in cols:
            node, _ = schema.parse(col)
            j = idx[col]
            jp = idx.get(schema.name(node, t - 1))
            prev = v[:, jp] if jp is not None else np.zeros(n)
            v[done, j] = prev[done]
        live = ~done
        for node in schema.covariate_nodes + (schema.outcome_node,):
            if np.isnan(v[live, idx[schema.name(node, t)]]).any():
                raise LVCFError("non-terminal missingness unsupported")
        y = v[:, idx[schema.name(schema.outcome_node, t)]]
        jd = idx[schema.name(schema.competing_node, t)]
        v[live & (y == 1), jd] = 0.0
        if np.isnan(v[live, jd]).any():
            raise LVCFError("non-terminal missingness unsupported")
        event = live & ((y == 1) | (v[:, jd] == 1))
        for col in schema.a_block(t):
            node, _ = schema.parse(col)
            j = idx[col]
            jp = idx.get(schema.name(node, t - 1))
            prev = v[:, jp] if jp is not None else np.zeros(n)
            if node == schema.censor_node:
                v[event, j] = 0.0
            else:
                fill = event & np.isnan(v[:, j])
                v[fill, j] = prev[fill]
            if np.isnan(v[live & ~event, j]).any():
                raise LVCFError("non-terminal missingness unsupported")
        censored = np.zeros(n, dtype=bool)
        if schema.a_block(t):
            censored = live & (v[:, idx[schema.name(schema.censor_node, t)]] == 1)
        done = done | event | censored
    if np.isnan(v).any():
        raise LVCFError("non-terminal missingness unsupported")
    return ObservedDataset(schema, v.astype(np.int64))


def padding_mask(data: ObservedDataset) -> np.ndarray:
    """Boolean mask of cells that are pure last-value padding."""
    s = data.schema
    ev = event_times(data)
    stop = np.minimum(ev.terminal, ev.censored)
    mask = np.zeros(data.values.shape, dtype=bool)
    idx = s.index
    for t in range(1, s.intervals + 1):
        for col in s.l_block(t) + s.a_block(t):
            mask[:, idx[col]] = stop < t
        # nodes after the event inside the event interval
        in_event = ev.terminal == t
        if s.a_block(t):
            for col in s.a_block(t):
                mask[in_event, idx[col]] = True
        dem = in_event & ev.dementia
        mask[dem, idx[s.name(s.competing_node, t)]] = True
    return mask


def design_columns(schema: NodeSchema, before: str) -> list[str]:
    """All columns strictly preceding ``before`` in temporal order."""
    cols = schema.columns
    return cols[: cols.index(before)]


def warn(msg: str) -> None:
    warnings.warn(msg, RuntimeWarning, stacklevel=3)


def as_schema(obj) -> NodeSchema:
    if isinstance(obj, NodeSchema):
        return obj
    return NodeSchema.from_dict(obj)


def stack(datasets: Sequence[ObservedDataset]) -> ObservedDataset:
    return ObservedDataset(datasets[0].schema, np.vstack([d.values for d in datasets]))
