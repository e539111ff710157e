"""Regenerate the files shipped in src/ltmlebench/data.

    python3 scripts/make_fixtures.py
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ltmlebench.presets import SCHEMA, confounded_dgp, rare_event_dgp, roundtrip_dgp
from ltmlebench.simulation import simulate_dataset

DATA = Path(__file__).resolve().parents[1] / "src" / "ltmlebench" / "data"

COHORT_CONFIG = {
    "index_codes": ["A10BJ", "A10BK", "A10BH"],
    "window": [0, 4000],
    "min_age_years": 50,
    "prior_medication_codes": ["A10BA02"],
    "insulin_codes": ["A10A"],
    "dementia_codes": ["F00", "F01", "F03", "G30"],
    "dementia_medication_codes": ["N06D"],
    "exposures": {"GLP1": ["A10BJ"], "SGLT2": ["A10BK"]},
    "comorbidities": {"HF": ["I50"], "STROKE": ["I63", "I64"]},
    "comedications": {"BB": ["C07"]},
    "baseline_attributes": ["male"],
    "age_bands": [60, 70],
    "interval_length_days": 182,
    "n_intervals": 4,
}

FIT_CONFIG = {
    "estimand": {"treatment": {"A": 1}, "control": {"A": 0}, "horizon": 3},
    "estimator": {"estimator": "tmle", "q_learner": {"family": "glm_adjusted"},
                  "g_learner": {"family": "glm_adjusted"}, "truncation_bound": 0.01},
    "variance": "ic",
}


def synthetic_events(n: int, seed: int) -> tuple[list[dict], list[dict]]:
    """A small registry-like event log with every exclusion path represented."""
    rng = np.random.default_rng(seed)
    events, subjects = [], []
    for i in range(1, n + 1):
        sid = str(i)
        index = int(rng.integers(200, 4200))
        birth = index - int(rng.integers(45 * 365, 85 * 365))
        subjects.append({"subject_id": sid, "birth_day": birth, "male": int(rng.random() < 0.55)})
        if rng.random() < 0.92:
            events.append((sid, "fill", "A10BA02", index - int(rng.integers(30, 180))))
        if rng.random() < 0.04:
            events.append((sid, "fill", "A10AB01", index - int(rng.integers(0, 100))))
        if rng.random() < 0.03:
            events.append((sid, "diagnosis", "F03", index - int(rng.integers(1, 100))))
        drug = "A10BJ02" if rng.random() < 0.4 else ("A10BK01" if rng.random() < 0.5 else "A10BH01")
        events.append((sid, "fill", drug, index))
        stays = rng.random() < 0.7
        for k in range(1, 8):
            if stays and rng.random() < 0.85:
                events.append((sid, "fill", drug, index + 182 * k + int(rng.integers(0, 150))))
        if rng.random() < 0.2:
            events.append((sid, "diagnosis", "I50", index + int(rng.integers(-300, 700))))
        if rng.random() < 0.1:
            events.append((sid, "diagnosis", "I639", index + int(rng.integers(0, 700))))
        if rng.random() < 0.3:
            events.append((sid, "fill", "C07AB02", index + int(rng.integers(0, 700))))
        if rng.random() < 0.08:
            events.append((sid, "diagnosis", "G30", index + int(rng.integers(0, 800))))
        if rng.random() < 0.03:
            events.append((sid, "fill", "N06DA02", index + int(rng.integers(0, 800))))
        if rng.random() < 0.08:
            events.append((sid, "death", "", index + int(rng.integers(-50, 800))))
        if rng.random() < 0.05:
            events.append((sid, "emigration", "", index + int(rng.integers(0, 800))))
        events.append((sid, "study_end", "", 4600))
    events = [e for e in events if e[3] >= 0]
    rows = [{"subject_id": s, "event_kind": k, "code": c, "day": d} for s, k, c, d in events]
    return rows, subjects


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    SCHEMA.save(DATA / "schema.json")
    confounded_dgp().to_csv(DATA / "confounded_coefficients.csv")
    rare_event_dgp().to_csv(DATA / "rare_coefficients.csv")
    roundtrip_dgp().to_csv(DATA / "roundtrip_coefficients.csv")
    simulate_dataset(confounded_dgp(), 2000, 20240601).to_csv(DATA / "fixture_data.csv")
    events, subjects = synthetic_events(300, 7)
    write_csv(DATA / "fixture_events.csv", events)
    write_csv(DATA / "fixture_subjects.csv", subjects)
    (DATA / "cohort_config.json").write_text(json.dumps(COHORT_CONFIG, indent=2) + "\n")
    (DATA / "fit_config.json").write_text(json.dumps(FIT_CONFIG, indent=2) + "\n")


if __name__ == "__main__":
    main()
