"""Command line front end.

Every command reads files, writes files and exits with 0 (success), 2
(configuration error), 3 (data error) or 4 (numerical failure).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from pathlib import Path

from . import __version__, CONFIG_SCHEMA_VERSION
from .benchmark import BenchmarkSpec, run_benchmark
from .cohort import CohortConfig, ConfigError, EventDataError, build_cohort, read_events, read_subjects
from .data_model import (DatasetStructureError, EstimandSpec, LVCFError, NodeSchema, ObservedDataset,
                         Regime, SchemaError, validate_dataset)
from .estimators import (EstimationError, EstimatorConfig, arm_summary, contrast_row, estimate,
                         format_rd_percent, shared_g)
from .gmechanism import POSITIVITY_FIELDS, cumulative_g, fit_g, positivity_diagnostics
from .inference import BootstrapError, bootstrap, contrast_ci
from .learners import EmptyStratumError, LearnerError, LearnerSpec
from .presets import ESTIMAND, PRESETS, SCHEMA, preset
from .simulation import (CoefficientError, CoefficientMatrix, compute_null_truth, compute_truth,
                         permute_null, simulate_dataset)

OUTPUT_ENV = "LTMLEBENCH_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CLIError(EXIT_CONFIG, f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CLIError(EXIT_CONFIG, f"invalid JSON in {path}: {exc}")


def _require(d: dict, key: str, where: str = "config"):
    if key not in d:
        raise CLIError(EXIT_CONFIG, f"missing {where} key: {key}")
    return d[key]


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUTPUT_ENV)
    if not out:
        raise CLIError(EXIT_CONFIG, f"no output directory (use --out or set {OUTPUT_ENV})")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need_seed(args) -> int:
    if args.seed is None:
        raise CLIError(EXIT_CONFIG, f"{args.command} is stochastic and requires --seed")
    return args.seed


def _metadata(args, **extra) -> dict:
    meta = {"command": args.command, "version": __version__,
            "config_schema_version": CONFIG_SCHEMA_VERSION, "seed": args.seed, **extra}
    if not args.no_timestamp:
        meta["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return meta


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _schema(args) -> NodeSchema:
    if getattr(args, "schema", None):
        try:
            return NodeSchema.load(args.schema)
        except FileNotFoundError:
            raise CLIError(EXIT_CONFIG, f"schema file not found: {args.schema}")
    return SCHEMA


def _data(args, schema: NodeSchema) -> ObservedDataset:
    try:
        data = ObservedDataset.from_csv(args.data, schema)
    except FileNotFoundError:
        raise CLIError(EXIT_DATA, f"data file not found: {args.data}")
    except ValueError as exc:
        raise CLIError(EXIT_DATA, f"unreadable data: {exc}")
    bad = validate_dataset(data)
    if bad:
        raise CLIError(EXIT_DATA, f"{len(bad)} invariant violations, first: {bad[0]}")
    return data


def _regime(d, schema: NodeSchema, name: str) -> Regime:
    if isinstance(d, dict) and "assignments" not in d and "static" not in d:
        d = {"name": name, "static": d}
    try:
        return Regime.from_dict(d, schema)
    except (KeyError, ValueError, TypeError) as exc:
        raise CLIError(EXIT_CONFIG, f"bad {name} regime: {exc}")


def _estimand(cfg: dict, schema: NodeSchema) -> EstimandSpec:
    e = _require(cfg, "estimand")
    spec = EstimandSpec(_regime(_require(e, "treatment", "estimand"), schema, "treatment"),
                        _regime(_require(e, "control", "estimand"), schema, "control"),
                        int(_require(e, "horizon", "estimand")), e.get("contrast", "risk_difference"))
    try:
        spec.check(schema)
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, str(exc))
    return spec


def _estimator_config(d: dict, seed: int | None) -> EstimatorConfig:
    try:
        cfg = EstimatorConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise CLIError(EXIT_CONFIG, f"bad estimator config: {exc}")
    if seed is not None:
        cfg = EstimatorConfig.from_dict({**cfg.to_dict(), "seed": seed})
    return cfg


def _coefficients(args, schema: NodeSchema) -> CoefficientMatrix:
    if args.coefficients:
        try:
            return CoefficientMatrix.from_csv(args.coefficients, schema)
        except FileNotFoundError:
            raise CLIError(EXIT_CONFIG, f"coefficient file not found: {args.coefficients}")
    return preset(args.preset).scenario.coefficients


# ---------------------------------------------------------------------------
# commands


def cmd_cohort(args) -> int:
    cfg = CohortConfig.load(args.config)
    try:
        events = read_events(args.events)
    except FileNotFoundError:
        raise CLIError(EXIT_DATA, f"events file not found: {args.events}")
    subjects = read_subjects(args.subjects) if args.subjects else None
    result = build_cohort(events, cfg, subjects=subjects)
    out = _out_dir(args)
    result.write(out)
    Path(out, "subject_ids.txt").write_text("".join(f"{s}\n" for s in result.subject_ids))
    print(f"cohort: {result.data.n} of {result.flowchart.total} subjects included")
    return EXIT_OK


def run_fit(data: ObservedDataset, cfg: dict, seed: int | None, threads: int = 1):
    """Estimate, interval and result document for a fit configuration."""
    schema = data.schema
    estimand = _estimand(cfg, schema)
    config = _estimator_config(cfg.get("estimator", {}), seed)
    variance = cfg.get("variance", "ic")
    level = float(cfg.get("level", 0.95))
    if variance not in ("ic", "bootstrap"):
        raise CLIError(EXIT_CONFIG, f"unknown variance method {variance!r}")
    c = estimate(data, estimand, config)
    intervals = {"ic": contrast_ci(c, level)}
    replicates = None
    if variance == "bootstrap":
        if seed is None:
            raise CLIError(EXIT_CONFIG, "bootstrap requires --seed")
        boot = bootstrap(data, config, int(cfg.get("B", 500)), level, seed, estimand=estimand,
                         point=c.estimate, threads=threads)
        intervals["bootstrap_percentile"] = boot.percentile
        intervals["bootstrap_wald"] = boot.wald
        replicates = boot.replicate_rows()
    primary = intervals["bootstrap_percentile" if variance == "bootstrap" else "ic"]
    doc = {"estimand": {"treatment": estimand.treatment_regime.to_dict(),
                        "control": estimand.control_regime.to_dict(),
                        "horizon": estimand.horizon, "contrast": estimand.contrast},
           "estimator": config.to_dict(),
           "arms": {"treatment": arm_summary(c.treatment), "control": arm_summary(c.control)},
           "contrast": {"kind": c.kind, "estimate": float(c.estimate),
                        "intervals": {k: v.to_dict() for k, v in intervals.items()},
                        "primary_interval": primary.method},
           "n": data.n}
    if c.kind == "risk_difference":
        doc["contrast"]["rd_percent"] = format_rd_percent(c.estimate)
        doc["contrast"]["rd_percent_ci"] = [format_rd_percent(primary.ci_low),
                                            format_rd_percent(primary.ci_high)]
    row = {**contrast_row(c), "se": primary.standard_error, "ci_low": primary.ci_low,
           "ci_high": primary.ci_high, "interval": primary.method}
    return doc, row, replicates


def cmd_fit(args) -> int:
    cfg = _load_json(args.config)
    schema = _schema(args)
    data = _data(args, schema)
    doc, row, replicates = run_fit(data, cfg, args.seed, args.threads)
    doc["metadata"] = _metadata(args)
    out = _out_dir(args)
    _write_json(out / "result.json", doc)
    _write_csv(out / "result.csv", list(row), [row])
    if replicates is not None:
        _write_csv(out / "bootstrap_replicates.csv", ["replicate", "estimate", "error"], replicates)
    c = doc["contrast"]
    t, k = doc["arms"]["treatment"]["psi"], doc["arms"]["control"]["psi"]
    if "rd_percent" in c:
        lo, hi = c["rd_percent_ci"]
        print(f"risk treatment {t:.4f}, control {k:.4f}, RD% {c['rd_percent']} ({lo},{hi})")
    else:
        print(f"risk treatment {t:.4f}, control {k:.4f}, {c['kind']} {c['estimate']:.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = _need_seed(args)
    schema = _schema(args)
    cm = _coefficients(args, schema)
    data = simulate_dataset(cm, args.n, seed)
    out = _out_dir(args)
    data.to_csv(out / "data.csv")
    cm.schema.save(out / "schema.json")
    print(f"simulated {args.n} subjects")
    return EXIT_OK


def cmd_truth(args) -> int:
    seed = _need_seed(args)
    schema = _schema(args)
    cm = _coefficients(args, schema)
    estimand = _estimand(_load_json(args.config), cm.schema) if args.config else ESTIMAND
    pair = (estimand.treatment_regime, estimand.control_regime)
    fn = compute_null_truth if args.null else compute_truth
    truth = fn(cm, pair, estimand.horizon, n_mc=args.n_mc, seed=seed)
    out = _out_dir(args)
    _write_json(out / "truth.json", {"truth": truth.to_dict(), "horizon": estimand.horizon,
                                     "permuted_null": bool(args.null), "metadata": _metadata(args)})
    print(f"truth RD {truth.rd:.6f} (MC-SE {truth.se:.6f})")
    return EXIT_OK


def cmd_permute(args) -> int:
    seed = _need_seed(args)
    schema = _schema(args)
    data = _data(args, schema)
    out = _out_dir(args)
    permute_null(data, seed).to_csv(out / "permuted.csv")
    print(f"permuted {data.n} subjects")
    return EXIT_OK


DESK_CONFIGS = {
    "tmle_glm": {"estimator": "tmle"},
    "tmle_ridge_us": {"estimator": "tmle",
                      "q_learner": {"family": "ridge", "lambda_selection": "undersmoothed"},
                      "g_learner": {"family": "ridge", "lambda_selection": "undersmoothed"}},
    "iptw_glm": {"estimator": "iptw"},
}


def cmd_benchmark(args) -> int:
    seed = _need_seed(args)
    if args.preset not in PRESETS:
        raise CLIError(EXIT_CONFIG, f"unknown preset {args.preset!r}")
    cfg = _load_json(args.config) if args.config else {}
    p = preset(args.preset, n=args.n or cfg.get("n"), seed=seed)
    configs = {name: _estimator_config(d, None)
               for name, d in cfg.get("configs", DESK_CONFIGS).items()}
    R = args.replicates or cfg.get("replicates") or p.replicates
    intervals = tuple(cfg.get("intervals", ["ic"]))
    spec = BenchmarkSpec(p.scenario, p.estimand, configs, replicates=int(R), seed=seed,
                         intervals=intervals, bootstrap_B=int(cfg.get("B", 200)))
    n_mc = int(cfg.get("n_mc", args.n_mc))
    pair = (p.estimand.treatment_regime, p.estimand.control_regime)
    if p.scenario.kind == "permuted_null":
        truth = compute_null_truth(p.scenario.coefficients, pair, p.estimand.horizon, n_mc, seed)
    else:
        truth = compute_truth(p.scenario.coefficients, pair, p.estimand.horizon, n_mc, seed)
    truth_value = 0.0 if p.scenario.kind == "permuted_null" else truth.rd
    result = run_benchmark(spec, truth_value, threads=args.threads)
    out = _out_dir(args)
    result.write(out / "replicates.csv", out / "summary.csv")
    _write_json(out / "truth.json", {"truth": truth.to_dict(), "benchmark_truth": truth_value,
                                     "preset": args.preset, "replicates": int(R),
                                     "metadata": _metadata(args)})
    for m in result.metrics:
        print(f"{m.config:>16} {m.interval:>10}  bias {m.bias:+.5f}  var {m.variance:.3e}  "
              f"coverage {m.coverage:.3f}  oracle {m.oracle_coverage:.3f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _load_json(args.config)
    schema = _schema(args)
    data = _data(args, schema)
    estimand = _estimand(cfg, schema)
    config = _estimator_config(cfg.get("estimator", {}), args.seed)
    rows = []
    gfit = shared_g(data, config) if config.needs_g else None
    for arm, regime in (("treatment", estimand.treatment_regime), ("control", estimand.control_regime)):
        g = gfit or fit_g(data, regime, config.g_learner, stratify=config.stratify_g,
                          seed=config.seed)
        cumg = cumulative_g(g, data, regime, config.truncation_bound)
        rows += positivity_diagnostics(cumg, data, regime, arm)
    out = _out_dir(args)
    _write_csv(out / "positivity.csv", POSITIVITY_FIELDS, rows)
    for r in rows:
        print(f"{r['arm']:>10} t={r['interval']}  adherent {r['n_adherent']}  "
              f"g_min {r['g_min']:.4f}  truncated {r['n_truncated']}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--no-timestamp", action="store_true")
    common.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV})")

    p = argparse.ArgumentParser(prog="ltmlebench",
                                description="Longitudinal causal risk estimation and benchmarking.")
    p.add_argument("--version", action="store_true", help="print version JSON and exit")
    sub = p.add_subparsers(dest="command")

    c = sub.add_parser("cohort", parents=[common], help="build an analysis cohort from an event log")
    c.add_argument("--events", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--subjects")

    f = sub.add_parser("fit", parents=[common], help="estimate a contrast with intervals")
    f.add_argument("--data", required=True)
    f.add_argument("--schema")
    f.add_argument("--config", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset from a DGP")
    s.add_argument("--coefficients")
    s.add_argument("--preset", default="confounded", choices=PRESETS)
    s.add_argument("--schema")
    s.add_argument("--n", type=int, default=5000)

    t = sub.add_parser("truth", parents=[common], help="Monte-Carlo counterfactual truth")
    t.add_argument("--coefficients")
    t.add_argument("--preset", default="confounded", choices=PRESETS)
    t.add_argument("--schema")
    t.add_argument("--config", help="JSON with an estimand block")
    t.add_argument("--n-mc", type=int, default=2_000_000)
    t.add_argument("--null", action="store_true", help="truth of the permuted-null scenario")

    m = sub.add_parser("permute", parents=[common], help="permuted-null version of a dataset")
    m.add_argument("--data", required=True)
    m.add_argument("--schema")

    b = sub.add_parser("benchmark", parents=[common], help="run a simulation benchmark")
    b.add_argument("--preset", default="desk")
    b.add_argument("--config")
    b.add_argument("--replicates", type=int)
    b.add_argument("--n", type=int)
    b.add_argument("--n-mc", type=int, default=2_000_000)

    d = sub.add_parser("diagnose", parents=[common], help="positivity diagnostics")
    d.add_argument("--data", required=True)
    d.add_argument("--schema")
    d.add_argument("--config", required=True)
    return p


COMMANDS = {"cohort": cmd_cohort, "fit": cmd_fit, "simulate": cmd_simulate, "truth": cmd_truth,
            "permute": cmd_permute, "benchmark": cmd_benchmark, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.version:
        print(json.dumps({"version": __version__, "config_schema_version": CONFIG_SCHEMA_VERSION}))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SchemaError, CoefficientError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EventDataError, DatasetStructureError, LVCFError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, BootstrapError, EmptyStratumError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LearnerError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())


def main_exit() -> None:  # console-script entry point
    sys.exit(main())
