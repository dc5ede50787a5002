"""
🚀 ls-discretize command line

    python -m ls_discretize run --config experiments/lsm_d1.toml --seed 7 --out runs/lsm
    python -m ls_discretize run --suite acceptance --workers 4
    python -m ls_discretize list suites

A run writes one directory:

    manifest.json     config, seed, entries and verdicts
    reports.jsonl     one CheckReport per line
    tallies/*.csv     plot-ready (estimate, se, n) rows
    events/*.bin      raw path events (with dump_events)
    meta/             timestamps, timings, metrics and error summary

Everything outside ``meta/`` is reproducible byte for byte from the config
and seed. Exit codes: 0 all pass, 1 any fail, 2 inconclusive without
failures, 3 usage, config or precondition error.
"""

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from . import __version__
from .core import FiniteMeasure
from .debug_utils import (ConfigError, DebugContext, ErrorCategory, ErrorSeverity, DebugError, LSDiscretizeError,
                          PreconditionError, RegionError, debug_logger, get_logger, performance_tracker)
from .diffusion import BoundaryBinning, RegionSpec, SiteLattice, exit_measure_estimate, simulate_ls_paths
from .discrete_walk import hitting_measure, sample_hitting_measure
from .ls_core import (balayage_green_identity_check, chain_green_estimate, make_kappa_fn, validate_ls_data)
from .metrics import timed, write_metrics
from .settings import (ExperimentConfig, ModelSpec, SuiteEntry, load_experiment_config,
                       load_suite_manifest, resolve_seed)
from .verify import (CHECK_REGISTRY, FAIL, INCONCLUSIVE, MODEL_CATALOG, PASS, SUITES, CheckContext, CheckReport,
                     SuiteOutcome, _jsonable, _label, _ls_measure, _measure_rows, catalog_model, combine_verdicts,
                     model_label, resolve_suite, run_suite)

logger = get_logger(__name__)

EXIT_PASS, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_USAGE = 0, 1, 2, 3
USAGE_ERRORS = (ConfigError, PreconditionError, RegionError)

# ============================================================================
# 🧰 SINGLE OPERATIONS
# ============================================================================


def _operation_report(ctx: CheckContext, name: str, verdict: str, details: Dict[str, Any],
                      tallies: Dict[str, List[Dict[str, Any]]], ensembles: Optional[Dict[str, Any]] = None,
                      statistic: float = math.nan, se: float = 0.0, n: int = 0) -> CheckReport:
    return CheckReport(name, OPERATIONS[name][1], ctx.model_id, verdict, "operation", statistic, None, se,
                       ctx.seed, n, details, tallies, ensembles or {})


def _start_site(ctx: CheckContext) -> Tuple[int, ...]:
    return tuple(int(c) for c in ctx.param("start", (0,) * ctx.model.d))


def op_ls_measure(ctx: CheckContext) -> CheckReport:
    ctx.require_continuous("ls-measure")
    data = ctx.data()
    start = _start_site(ctx)
    res = _ls_measure(ctx, data.site_point(start), "op:ls-measure")
    rounds = [{"round": k + 1, "estimate": r, "se": s, "n": res.n_paths}
              for k, (r, s) in enumerate(zip(res.residuals, res.timeout_se))]
    details = {"start": list(start), "C": res.C, "rounds": res.rounds, "residual_mass": res.residual_mass,
               "timeout_mass": res.timeout_mass, "total": res.mu.total}
    return _operation_report(ctx, "ls-measure", PASS, details,
                             {"mu": _measure_rows("mu", res.mu, res.se, res.n_paths), "residuals": rounds},
                             statistic=res.mu.total, n=res.n_paths)


def op_validate_ls_data(ctx: CheckContext) -> CheckReport:
    ctx.require_continuous("validate-ls-data")
    data = ctx.data()
    report = validate_ls_data(data, ctx.model, int(ctx.param("validation_paths", 2000)),
                              ctx.derive("op:validate"), strict=True, workers=ctx.workers)
    rows = [{"condition": c.name, "estimate": c.margin, "se": 0.0, "n": 1, "passed": c.passed}
            for c in report.conditions.values()]
    if report.failed():
        verdict = FAIL
    elif any(c.passed is None for c in report.conditions.values()):
        verdict = INCONCLUSIVE
    else:
        verdict = PASS
    return _operation_report(ctx, "validate-ls-data", verdict, {"report": report.to_dict(), "C": data.C},
                             {"conditions": rows})


def op_simulate_paths(ctx: CheckContext) -> CheckReport:
    ctx.require_continuous("simulate-paths")
    data = ctx.data()
    start = _start_site(ctx)
    ensemble = simulate_ls_paths(ctx.model, data.F, data.V, data.site_point(start), ctx.n_paths,
                                 ctx.derive("op:paths"), make_kappa_fn(data, ctx.model),
                                 int(ctx.param("k_accept", 1)), int(ctx.param("max_entries", 200)),
                                 workers=ctx.workers)
    sites, ok = ensemble.first_accepted()
    first = FiniteMeasure()
    if ok.any():
        uniq, counts = np.unique(sites[ok], axis=0, return_counts=True)
        first = FiniteMeasure({tuple(int(c) for c in s): int(k) / ensemble.n_paths for s, k in zip(uniq, counts)})
    n = ensemble.n_paths
    se = {s: math.sqrt(p * (1 - p) / n) for s, p in first.items()}
    details = {"entries": len(ensemble.entries), "timed_out": int(ensemble.timed_out.sum()),
               "exhausted": int(ensemble.exhausted.sum())}
    return _operation_report(ctx, "simulate-paths", PASS, details,
                             {"first_accepted": _measure_rows("first_accepted", first, se, n)},
                             {"paths": ensemble}, n=n)


def op_exit_measure(ctx: CheckContext) -> CheckReport:
    ctx.require_continuous("exit-measure")
    model = ctx.model
    radius = float(ctx.param("radius", 0.3))
    binning = BoundaryBinning(model.d, ctx.param("n_bins"))
    V = RegionSpec("ball", SiteLattice.build(model.d), radius)
    y_local = np.asarray(ctx.param("start_local", np.zeros(model.d)), dtype=float)
    est = exit_measure_estimate(model, V, y_local, ctx.n_paths, binning, ctx.derive("op:exit"),
                                workers=ctx.workers)
    rows = [{"bin": b, "estimate": float(p), "se": float(s), "n": est.n}
            for b, (p, s) in enumerate(zip(est.probabilities, est.se))]
    return _operation_report(ctx, "exit-measure", PASS,
                             {"timeout_mass": est.timeout_mass, "sparse_bins": list(est.sparse_bins)},
                             {"exit_bins": rows}, n=est.n)


def op_chain_green(ctx: CheckContext) -> CheckReport:
    ctx.require_continuous("chain-green")
    data = ctx.data()
    start = _start_site(ctx)
    target = tuple(int(c) for c in ctx.param("target", (1,) + (0,) * (ctx.model.d - 1)))
    g = chain_green_estimate(data.site_point(start), target, data, ctx.model, ctx.n_paths,
                             int(ctx.param("k_max", 30)), ctx.derive("op:chain-green"), workers=ctx.workers)
    rows = [{"step": k, "estimate": v, "se": math.sqrt(max(v * (1 - v), 0.0) / max(g.n, 1)), "n": g.n}
            for k, v in enumerate(g.visits)]
    details = {"value": g.value, "se": g.se, "upper": g.upper, "tail_bound": g.tail_bound,
               "decay_exponent": g.decay_exponent, "exhausted_fraction": g.exhausted_fraction}
    return _operation_report(ctx, "chain-green", PASS, details, {"visits": rows}, g.value, g.se, g.n)


def op_balayage_green(ctx: CheckContext) -> CheckReport:
    ctx.require_continuous("balayage-green")
    data = ctx.data()
    start = _start_site(ctx)
    target = tuple(int(c) for c in ctx.param("target", (1,) + (0,) * (ctx.model.d - 1)))
    report = balayage_green_identity_check(data.site_point(start), target, data, ctx.model, ctx.n_paths,
                                           ctx.derive("op:balayage-green"), workers=ctx.workers)
    rows = [{"terms": k + 1, "estimate": v, "se": report.se_diff, "n": report.n}
            for k, v in enumerate(report.partial_sums)]
    details = {"g_chain": report.g_chain, "g_balayage": report.g_balayage, "z": report.z}
    return _operation_report(ctx, "balayage-green", PASS if report.passed else FAIL, details,
                             {"partial_sums": rows}, report.z, report.se_diff, report.n)


def op_hitting_measure(ctx: CheckContext) -> CheckReport:
    ctx.require_discrete("hitting-measure")
    model = ctx.model
    trunc = ctx.trunc()
    raw = ctx.param("start", model.origin)
    start = trunc.id_of(tuple(raw) if isinstance(raw, list) else raw)
    exact = hitting_measure(model, start, trunc)
    tallies = {"exact": [{"state": repr(trunc.coord_of(s)), "estimate": w, "se": 0.0, "n": 1}
                         for s, w in exact.items()]}
    details: Dict[str, Any] = {"radius": trunc.radius, "states": trunc.n, "leak": max(0.0, 1.0 - exact.total)}
    if ctx.param("sample", True):
        sampled = sample_hitting_measure(model, start, trunc, ctx.n_paths, ctx.derive("op:hitting"))
        tallies["sampled"] = [{"state": repr(trunc.coord_of(s)), "estimate": w, "se": sampled.se.get(s, 0.0),
                               "n": sampled.n} for s, w in sampled.measure.items()]
        details["sampled_leak"] = sampled.leaked
    return _operation_report(ctx, "hitting-measure", PASS, details, tallies, exact.total, n=trunc.n)


OPERATIONS: Dict[str, Tuple[Callable[[CheckContext], CheckReport], str]] = {
    "ls-measure": (op_ls_measure, "recursive LS-measure μ_y at a site"),
    "validate-ls-data": (op_validate_ls_data, "LS-data conditions with measured margins"),
    "simulate-paths": (op_simulate_paths, "LS path ensemble with online κ-acceptance"),
    "exit-measure": (op_exit_measure, "binned exit distribution of a ball"),
    "chain-green": (op_chain_green, "Green function of the discretized chain"),
    "balayage-green": (op_balayage_green, "chain Green function against summed balayage masses"),
    "hitting-measure": (op_hitting_measure, "exact and sampled hitting measure of a discrete walk"),
}

# ============================================================================
# 📁 RUN DIRECTORY
# ============================================================================


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "-" for ch in text).strip("-") or "x"


def _dump_json(path: Path, payload: Any):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def write_tallies(path: Path, rows: Sequence[Dict[str, Any]]):
    """CSV with label columns first and the (estimate, se, n) triple last."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tail = ["estimate", "se", "n"]
    columns: List[str] = []
    for row in rows:
        for key in row:
            if key not in columns and key not in tail:
                columns.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns + tail, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row.get(k, "")) for k in columns + tail})


def _csv_value(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, tuple):
        return _label(value)
    return value


@dataclass
class RunResult:
    out: Path
    reports: List[CheckReport]
    errors: List[Tuple[str, str, LSDiscretizeError]]
    exit_code: int


def exit_code_for(reports: Sequence[CheckReport], errors: Sequence[Tuple[str, str, LSDiscretizeError]]) -> int:
    if any(isinstance(e, USAGE_ERRORS) for _, _, e in errors):
        return EXIT_USAGE
    verdicts = [r.verdict for r in reports] + [FAIL for _ in errors]
    if not verdicts:
        return EXIT_PASS
    return {PASS: EXIT_PASS, FAIL: EXIT_FAIL, INCONCLUSIVE: EXIT_INCONCLUSIVE}[combine_verdicts(verdicts)]


def write_run(out: Path, manifest: Dict[str, Any], reports: Sequence[CheckReport],
              errors: Sequence[Tuple[str, str, LSDiscretizeError]], dump_events: bool,
              started: datetime, finished: datetime):
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["results"] = [{"index": i, "check": r.check, "model": r.model, "verdict": r.verdict}
                           for i, r in enumerate(reports)]
    manifest["errors"] = [{"check": c, "model": m, "type": type(e).__name__, "message": str(e)}
                          for c, m, e in errors]
    _dump_json(out / "manifest.json", manifest)
    with open(out / "reports.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, default=str) + "\n")
    for i, r in enumerate(reports):
        stem = f"{i:02d}-{_slug(r.check)}-{_slug(r.model)}"
        for name, rows in sorted(r.tallies.items()):
            write_tallies(out / "tallies" / f"{stem}-{_slug(name)}.csv", rows)
        if dump_events:
            for name, ensemble in sorted(r.ensembles.items()):
                ensemble.write_events(out / "events" / f"{stem}-{_slug(name)}.bin")
    meta = out / "meta"
    _dump_json(meta / "timestamps.json", {"started": started.isoformat(), "finished": finished.isoformat(),
                                          "seconds": (finished - started).total_seconds()})
    _dump_json(meta / "timings.json", performance_tracker.get_performance_report())
    _dump_json(meta / "errors.json", debug_logger.get_error_summary())
    write_metrics(meta / "metrics.prom")

# ============================================================================
# ▶️ RUN
# ============================================================================


def _suite_entries(name: Optional[str]) -> Tuple[str, List[SuiteEntry]]:
    if name is None:
        raise ConfigError("Nothing to run: give --suite or a config with a suite or operation")
    path = Path(name)
    if path.suffix.lower() == ".json" or path.exists():
        manifest = load_suite_manifest(path)
        return manifest.name, list(manifest.entries)
    return name, resolve_suite(name)


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        return load_experiment_config(args.config, args.override or ())
    if args.override:
        raise ConfigError("--override needs --config", {"overrides": list(args.override)})
    model = catalog_model(args.model) if args.model else ModelSpec(family="torus-cover-d1")
    return ExperimentConfig(model=model, suite=args.suite or "acceptance")


def _run_operation(config: ExperimentConfig, seed: int, model_id: str) -> Tuple[List[CheckReport], list]:
    name = config.operation
    if name not in OPERATIONS:
        raise ConfigError(f"Unknown operation '{name}'", {"operation": name, "known": sorted(OPERATIONS)})
    ctx = CheckContext(config.model, model_id, config.ls_data, config.n_paths, seed, config.workers,
                       dict(config.params), 0)
    try:
        with timed(name), DebugContext("operation", operation=name, model=model_id):
            return [OPERATIONS[name][0](ctx)], []
    except LSDiscretizeError as e:
        debug_logger.log_error(e.to_debug_error(ErrorSeverity.ERROR))
        return [], [(name, model_id, e)]


def execute(config: ExperimentConfig, seed: int, out: Path, suite: Optional[str] = None) -> RunResult:
    """Run a config's suite or operation and write the run directory."""
    started = datetime.now(timezone.utc)
    model_id = model_label(config.model)
    manifest: Dict[str, Any] = {
        "version": __version__,
        "seed": seed,
        "config": config.model_dump(mode="json", exclude={"out"}),
    }
    suite = suite or config.suite
    if config.operation and not suite:
        manifest["operation"] = config.operation
        reports, errors = _run_operation(config, seed, model_id)
    else:
        suite_name, entries = _suite_entries(suite)
        manifest["suite"] = suite_name
        manifest["entries"] = [e.model_dump() for e in entries]
        many = len(entries) > 1
        with timed(f"suite:{suite_name}"):
            outcome: SuiteOutcome = run_suite(entries, config.model, config.ls_data, config.n_paths, seed,
                                              workers=1 if many else config.workers, params=config.params,
                                              jobs=config.workers if many else 1)
        reports = outcome.reports
        errors = [(e.check, e.model or model_id, err) for e, err in outcome.errors]
    finished = datetime.now(timezone.utc)
    write_run(out, manifest, reports, errors, config.dump_events, started, finished)
    code = exit_code_for(reports, errors)
    return RunResult(out, reports, errors, code)


def print_summary(result: RunResult, console: Optional[Console] = None):
    console = console or Console()
    table = Table(title=f"ls-discretize run → {result.out}")
    for column in ("check", "model", "verdict", "kind", "statistic", "se", "n"):
        table.add_column(column)
    style = {PASS: "green", FAIL: "red", INCONCLUSIVE: "yellow"}
    for r in result.reports:
        table.add_row(r.check, r.model, f"[{style.get(r.verdict, 'white')}]{r.verdict}[/]", r.kind,
                      f"{r.statistic:.4g}", f"{r.se:.3g}", str(r.n))
    for check, model, e in result.errors:
        table.add_row(check, model, "[magenta]error[/]", type(e).__name__, str(e)[:60], "", "")
    console.print(table)

# ============================================================================
# 📋 LIST
# ============================================================================


def list_catalog(what: str) -> List[str]:
    if what == "models":
        return [f"{k}: {', '.join(f'{a}={b}' for a, b in v.items())}" for k, v in MODEL_CATALOG.items()]
    if what == "suites":
        return [f"{k}: {', '.join(sorted({e.check for e in v}))}" for k, v in SUITES.items()]
    if what == "checks":
        return [f"{k}: {desc}" for k, (_, desc) in CHECK_REGISTRY.items()]
    if what == "operations":
        return [f"{k}: {desc}" for k, (_, desc) in OPERATIONS.items()]
    raise ConfigError(f"Cannot list '{what}'", {"what": what})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ls-discretize",
                                     description="Equivariant discretization of diffusions and random walks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a suite or a single operation")
    run.add_argument("--config", help="Experiment config (TOML, JSON or YAML)")
    run.add_argument("--seed", type=int, help="Unsigned 64-bit seed (falls back to LS_DISCRETIZE_SEED)")
    run.add_argument("--workers", type=int, help="Worker threads")
    run.add_argument("--out", help="Run directory")
    run.add_argument("--suite", help="Suite name or JSON suite manifest")
    run.add_argument("--model", help="Catalog model id when no config is given")
    run.add_argument("--override", action="append", metavar="KEY=VAL", help="Dotted-key config override")

    lister = sub.add_parser("list", help="List catalog entries")
    lister.add_argument("what", choices=["models", "suites", "checks", "operations"])
    return parser


def cmd_run(args: argparse.Namespace, console: Console) -> int:
    config = _resolve_config(args)
    seed = resolve_seed(args.seed, config.seed)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer", {"seed": seed})
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1", {"workers": args.workers})
        config = config.model_copy(update={"workers": args.workers})
    out = Path(args.out or config.out)
    logger.info(f"🚀 ls-discretize {__version__}: seed {seed}, output {out}")
    result = execute(config, seed, out, args.suite)
    print_summary(result, console)
    logger.info(f"🏁 Finished with exit code {result.exit_code}")
    return result.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_PASS
    console = Console()
    try:
        if args.command == "list":
            for line in list_catalog(args.what):
                console.print(line, highlight=False)
            return EXIT_PASS
        return cmd_run(args, console)
    except USAGE_ERRORS as e:
        debug_logger.log_error(e.to_debug_error(ErrorSeverity.ERROR))
        console.print(f"[red]❌ {type(e).__name__}: {e}[/]")
        return EXIT_USAGE
    except LSDiscretizeError as e:
        debug_logger.log_error(e.to_debug_error(ErrorSeverity.CRITICAL))
        console.print(f"[red]❌ {type(e).__name__}: {e}[/]")
        return EXIT_FAIL
    except KeyboardInterrupt:
        logger.info("Run interrupted by user")
        return EXIT_FAIL
    except Exception as e:
        debug_logger.log_error(DebugError(message=f"Run failed with error: {e}", category=ErrorCategory.NUMERICAL,
                                          severity=ErrorSeverity.CRITICAL, context={"argv": list(argv or sys.argv[1:])}))
        console.print(f"[red]❌ Run failed: {e}[/]")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
