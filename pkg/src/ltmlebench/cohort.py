"""From long registry-style event logs to a wide interval dataset.

Event log columns: ``subject_id, event_kind, code, day``, with event_kind one
of fill, diagnosis, death, emigration, study_end.  Codes are matched by
prefix (``"A10BJ"`` matches ``"A10BJ02"``).  An optional subjects table
(``subject_id, birth_day, <binary attributes>``) supplies age and fixed
baseline attributes.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data_model import NodeSchema, ObservedDataset, apply_lvcf, validate_dataset

EVENT_KINDS = ("fill", "diagnosis", "death", "emigration", "study_end")
DAYS_PER_YEAR = 365.25

RULES = (
    ("no index fill in enrollment window", "index"),
    ("death or emigration before index", "exit"),
    ("below minimum age", "age"),
    ("no prior metformin", "prior_medication"),
    ("insulin-naive violated", "insulin"),
    ("prior dementia", "dementia"),
)


class ConfigError(ValueError):
    pass


class EventDataError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    subject_id: str
    event_kind: str
    code: str
    day: int


@dataclass(frozen=True)
class CohortConfig:
    index_codes: tuple[str, ...]
    window: tuple[int, int]
    prior_medication_codes: tuple[str, ...]
    insulin_codes: tuple[str, ...]
    dementia_codes: tuple[str, ...]
    dementia_medication_codes: tuple[str, ...]
    exposures: Mapping[str, tuple[str, ...]]
    n_intervals: int
    interval_length_days: int = 182
    min_age_years: float | None = None
    comorbidities: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    comedications: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    baseline_flags: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    baseline_attributes: tuple[str, ...] = ()
    age_bands: tuple[float, ...] = ()

    REQUIRED = ("index_codes", "window", "prior_medication_codes", "insulin_codes",
                "dementia_codes", "dementia_medication_codes", "exposures", "n_intervals")

    def __post_init__(self):
        if self.window[0] > self.window[1]:
            raise ConfigError("enrollment window start must not exceed its end")
        if self.interval_length_days < 1 or self.n_intervals < 1:
            raise ConfigError("interval length and number of intervals must be positive")
        if not self.exposures:
            raise ConfigError("at least one exposure node is required")
        if list(self.age_bands) != sorted(self.age_bands):
            raise ConfigError("age bands must be increasing")
        self._check_overlaps()

    def node_sets(self) -> dict[str, tuple[str, ...]]:
        sets = {"Y": self.dementia_codes + self.dementia_medication_codes}
        for group in (self.exposures, self.comorbidities, self.comedications, self.baseline_flags):
            sets.update(group)
        return sets

    def _check_overlaps(self) -> None:
        seen: list[tuple[str, str]] = []
        for node, codes in self.node_sets().items():
            for code in codes:
                for other_node, other in seen:
                    if other_node != node and (code.startswith(other) or other.startswith(code)):
                        raise ConfigError(f"code {code!r} maps to both {other_node} and {node}")
            seen += [(node, c) for c in codes]

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortConfig":
        missing = [k for k in cls.REQUIRED if k not in d]
        if missing:
            raise ConfigError(f"missing config key: {missing[0]}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("index_codes", "prior_medication_codes", "insulin_codes", "dementia_codes",
                    "dementia_medication_codes", "baseline_attributes", "age_bands"):
            if key in kw:
                kw[key] = tuple(kw[key])
        kw["window"] = tuple(int(x) for x in kw["window"])
        for key in ("exposures", "comorbidities", "comedications", "baseline_flags"):
            if key in kw:
                kw[key] = {k: tuple(v) for k, v in kw[key].items()}
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "CohortConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    def schema(self) -> NodeSchema:
        baseline = []
        levels = {}
        if self.age_bands:
            baseline.append("age_cat")
            levels["age_cat"] = len(self.age_bands) + 1
        baseline += list(self.baseline_attributes) + list(self.baseline_flags)
        covariates = list(self.comorbidities) + list(self.comedications)
        return NodeSchema(baseline_nodes=tuple(baseline), covariate_nodes=tuple(covariates),
                          exposure_nodes=tuple(self.exposures), intervals=self.n_intervals,
                          interval_length_days=self.interval_length_days, levels=levels)


def _matches(code: str, prefixes: Iterable[str]) -> bool:
    return any(code.startswith(p) for p in prefixes)


def interval_of(rel_day: int, length: int) -> int:
    """Interval containing a day relative to index: [(t-1)L, tL) -> t."""
    return rel_day // length + 1


# ---------------------------------------------------------------------------
# input


def read_events(path) -> list[EventRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"subject_id", "event_kind", "code", "day"}
        if reader.fieldnames is None:
            return out
        if not need <= set(reader.fieldnames):
            raise EventDataError(f"event log needs columns {sorted(need)}")
        for line, row in enumerate(reader, start=2):
            try:
                rec = EventRecord(row["subject_id"], row["event_kind"], row["code"] or "",
                                  int(row["day"]))
            except (TypeError, ValueError) as exc:
                raise EventDataError(f"line {line}: {exc}") from exc
            out.append(rec)
    check_events(out)
    return out


def check_events(events: Sequence[EventRecord]) -> None:
    exits = defaultdict(int)
    for e in events:
        if e.event_kind not in EVENT_KINDS:
            raise EventDataError(f"unknown event kind {e.event_kind!r}")
        if e.day < 0:
            raise EventDataError(f"negative day for subject {e.subject_id}")
        if e.event_kind in ("death", "emigration"):
            exits[(e.subject_id, e.event_kind)] += 1
            if exits[(e.subject_id, e.event_kind)] > 1:
                raise EventDataError(f"subject {e.subject_id} has more than one {e.event_kind}")


def read_subjects(path) -> dict[str, dict]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row.pop("subject_id")
            out[sid] = {k: (int(v) if v not in ("", None) else None) for k, v in row.items()}
    return out


def group_events(events: Iterable[EventRecord]) -> dict[str, list[EventRecord]]:
    by = defaultdict(list)
    for e in events:
        by[e.subject_id].append(e)
    for sid in by:
        by[sid].sort(key=lambda e: (e.day, e.event_kind, e.code))
    return dict(by)


def _sort_ids(ids):
    return sorted(ids, key=lambda s: (0, int(s), s) if s.isdigit() else (1, 0, s))


# ---------------------------------------------------------------------------
# eligibility


def index_day(evs: Sequence[EventRecord], config: CohortConfig) -> int | None:
    """Day of the first ever fill of an index code."""
    days = [e.day for e in evs if e.event_kind == "fill" and _matches(e.code, config.index_codes)]
    return min(days) if days else None


def exclusion_reason(evs: Sequence[EventRecord], config: CohortConfig,
                     subject: Mapping | None = None) -> str | None:
    """First failing eligibility rule, or None for an included subject."""
    day0 = index_day(evs, config)
    if day0 is None or not config.window[0] <= day0 <= config.window[1]:
        return RULES[0][0]
    if any(e.event_kind in ("death", "emigration") and e.day < day0 for e in evs):
        return RULES[1][0]
    if config.min_age_years is not None:
        birth = (subject or {}).get("birth_day")
        if birth is None or (day0 - birth) / DAYS_PER_YEAR < config.min_age_years:
            return RULES[2][0]
    if not any(e.event_kind == "fill" and e.day < day0
               and _matches(e.code, config.prior_medication_codes) for e in evs):
        return RULES[3][0]
    if any(e.event_kind == "fill" and e.day <= day0 and _matches(e.code, config.insulin_codes)
           for e in evs):
        return RULES[4][0]
    if any(e.day < day0 and _is_dementia(e, config) for e in evs):
        return RULES[5][0]
    return None


def _is_dementia(e: EventRecord, config: CohortConfig) -> bool:
    if e.event_kind == "diagnosis":
        return _matches(e.code, config.dementia_codes)
    if e.event_kind == "fill":
        return _matches(e.code, config.dementia_medication_codes)
    return False


@dataclass
class Flowchart:
    total: int
    excluded: list[tuple[str, int]]
    included: int

    def rows(self) -> list[dict]:
        out = [{"step": "source population", "excluded": 0, "remaining": self.total}]
        remaining = self.total
        for rule, count in self.excluded:
            remaining -= count
            out.append({"step": rule, "excluded": count, "remaining": remaining})
        return out


def apply_eligibility(grouped: Mapping[str, Sequence[EventRecord]], config: CohortConfig,
                      subjects: Mapping[str, Mapping] | None = None
                      ) -> tuple[list[str], Flowchart, dict[str, str]]:
    """Included subject ids (sorted), the exclusion tally in rule order, and per-subject reasons."""
    counts = {rule: 0 for rule, _ in RULES}
    included, reasons = [], {}
    for sid in _sort_ids(grouped):
        reason = exclusion_reason(grouped[sid], config, (subjects or {}).get(sid))
        if reason is None:
            included.append(sid)
        else:
            counts[reason] += 1
            reasons[sid] = reason
    chart = Flowchart(len(grouped), [(r, counts[r]) for r, _ in RULES], len(included))
    return included, chart, reasons


# ---------------------------------------------------------------------------
# discretization


def discretize_exposure(evs: Sequence[EventRecord], codes: Sequence[str], day0: int,
                        length: int, n: int) -> np.ndarray:
    """1 at interval t iff a matching fill falls in [(t-1)L, tL) days after index."""
    out = np.zeros(n, dtype=np.int8)
    for e in evs:
        if e.event_kind != "fill" or not _matches(e.code, codes):
            continue
        rel = e.day - day0
        if rel < 0:
            continue
        t = interval_of(rel, length)
        if t <= n:
            out[t - 1] = 1
    return out


def _first_interval(days: Iterable[int], length: int) -> int | None:
    days = list(days)
    return interval_of(min(days), length) if days else None


def subject_row(evs: Sequence[EventRecord], config: CohortConfig, schema: NodeSchema,
                subject: Mapping | None = None) -> np.ndarray:
    """Raw wide row (NaN after the subject's follow-up stops) for one included subject."""
    day0 = index_day(evs, config)
    L, T, K = config.interval_length_days, schema.intervals, schema.K
    idx = schema.index
    row = np.full(len(schema.columns), np.nan)
    subject = subject or {}
    if config.age_bands:
        birth = subject.get("birth_day")
        if birth is None:
            raise EventDataError("age bands need a birth day for every subject")
        age = (day0 - birth) / DAYS_PER_YEAR
        row[idx["age_cat"]] = int(np.searchsorted(config.age_bands, age, side="right"))
    for attr in config.baseline_attributes:
        v = subject.get(attr)
        if v not in (0, 1):
            raise EventDataError(f"baseline attribute {attr} must be 0/1")
        row[idx[attr]] = v
    for node, codes in config.baseline_flags.items():
        row[idx[node]] = float(any(e.day < day0 and _matches(e.code, codes) for e in evs))
    exits = [e.day - day0 for e in evs if e.event_kind in ("emigration", "study_end")]
    cday = min(exits) if exits else None
    kept = [e for e in evs if cday is None or e.day - day0 <= cday]
    t_y = _first_interval((e.day - day0 for e in kept
                           if e.day >= day0 and _is_dementia(e, config)), L)
    t_d = _first_interval((e.day - day0 for e in kept if e.event_kind == "death"), L)
    t_c = interval_of(cday, L) if cday is not None else None
    if t_c is not None and t_c > K:
        t_c = None
    first_comorb = {}
    for node, codes in config.comorbidities.items():
        days = [e.day - day0 for e in kept if e.event_kind == "diagnosis" and _matches(e.code, codes)]
        # diagnoses before index count from interval 1 on
        first_comorb[node] = interval_of(max(min(days), 0), L) if days else None
    comed = {node: discretize_exposure(kept, codes, day0, L, T)
             for node, codes in config.comedications.items()}
    expo = {node: discretize_exposure(kept, codes, day0, L, T)
            for node, codes in config.exposures.items()}
    for t in range(1, T + 1):
        for node, first in first_comorb.items():
            row[idx[schema.name(node, t)]] = float(first is not None and first <= t)
        for node, vals in comed.items():
            row[idx[schema.name(node, t)]] = vals[t - 1]
        y = t_y is not None and t_y == t
        d = not y and t_d is not None and t_d == t
        row[idx[schema.name(schema.outcome_node, t)]] = float(y)
        row[idx[schema.name(schema.competing_node, t)]] = float(d)
        if t <= K:
            # exposure at the start of the interval is observed even if an event follows
            for node, vals in expo.items():
                row[idx[schema.name(node, t)]] = vals[t - 1]
        if y or d:
            break
        if t <= K:
            censored = t_c == t
            row[idx[schema.name(schema.censor_node, t)]] = float(censored)
            if censored:
                break
    return row


@dataclass
class CohortResult:
    data: ObservedDataset
    subject_ids: list[str]
    flowchart: Flowchart
    exclusions: dict[str, str]

    @property
    def schema(self) -> NodeSchema:
        return self.data.schema

    def descriptives(self) -> list[dict]:
        return descriptives(self.data)

    def write(self, out_dir) -> dict[str, str]:
        import os
        os.makedirs(out_dir, exist_ok=True)
        paths = {k: os.path.join(out_dir, f) for k, f in
                 (("data", "cohort.csv"), ("schema", "schema.json"),
                  ("flowchart", "flowchart.csv"), ("descriptives", "descriptives.csv"))}
        self.data.to_csv(paths["data"])
        self.schema.save(paths["schema"])
        _write_rows(paths["flowchart"], ["step", "excluded", "remaining"], self.flowchart.rows())
        _write_rows(paths["descriptives"], DESCRIPTIVE_FIELDS, self.descriptives())
        return paths


def build_cohort(events: Sequence[EventRecord], config: CohortConfig,
                 schema: NodeSchema | None = None,
                 subjects: Mapping[str, Mapping] | None = None) -> CohortResult:
    """Screen subjects, discretize their follow-up and carry values forward."""
    derived = config.schema()
    if schema is not None and (schema.columns != derived.columns
                               or dict(schema.levels) != dict(derived.levels)):
        raise ConfigError("configuration does not match the target schema")
    schema = schema or derived
    check_events(events)
    grouped = group_events(events)
    included, chart, reasons = apply_eligibility(grouped, config, subjects)
    if not grouped:
        warnings.warn("empty event log: cohort has 0 subjects", RuntimeWarning, stacklevel=2)
    raw = np.array([subject_row(grouped[s], config, schema, (subjects or {}).get(s))
                    for s in included]).reshape(len(included), len(schema.columns))
    data = apply_lvcf(schema, raw)
    bad = validate_dataset(data)
    if bad:  # pragma: no cover - construction guarantees validity
        raise EventDataError(f"cohort fails validation: {bad[0]}")
    return CohortResult(data, included, chart, reasons)


# ---------------------------------------------------------------------------
# descriptives


DESCRIPTIVE_FIELDS = ["variable", "level", "exposed_n", "exposed_pct", "unexposed_n",
                      "unexposed_pct", "total_n", "total_pct"]


def descriptives(data: ObservedDataset, exposure: str | None = None) -> list[dict]:
    """Counts and percentages of each baseline level, split by exposure at interval 1."""
    s = data.schema
    exposure = exposure or s.exposure_nodes[0]
    exposed = data.col(exposure, 1) == 1 if s.K else np.zeros(data.n, dtype=bool)
    groups = (exposed, ~exposed, np.ones(data.n, dtype=bool))

    def pct(k, m):
        return round(100.0 * float(k) / float(m), 1) if m else math.nan

    rows = [{"variable": "N", "level": "", "exposed_n": int(exposed.sum()),
             "exposed_pct": pct(exposed.sum(), data.n), "unexposed_n": int((~exposed).sum()),
             "unexposed_pct": pct((~exposed).sum(), data.n), "total_n": data.n,
             "total_pct": 100.0 if data.n else math.nan}]
    for node in s.baseline_nodes:
        x = data.col(node)
        for level in range(1 if s.n_levels(node) == 2 else 0, s.n_levels(node)):
            row = {"variable": node, "level": level}
            for name, g in zip(("exposed", "unexposed", "total"), groups):
                k = int(((x == level) & g).sum())
                row[f"{name}_n"] = k
                row[f"{name}_pct"] = pct(k, g.sum())
            rows.append(row)
    return rows


def _write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if isinstance(r[k], float) and math.isnan(r[k]) else r[k])
                        for k in fields})
