"""``ctxlake`` command line.

Exit status: 0 when no violations were found, 1 when some were, 2 on a
configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .analyzer import ViolationReport, analyze
from .comparison import run_comparison
from .config import MODES, SCENARIOS, RunConfig
from .errors import ContextLakeError, InvalidConfig, ParseError
from .sim.scenarios import run_scenario

EXIT_OK, EXIT_VIOLATIONS, EXIT_CONFIG = 0, 1, 2
SEED_ENV = "CTXLAKE_SEED"


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InvalidConfig(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _pairs(items: Sequence[str], what: str) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise InvalidConfig(f"{what} must look like key=value, got {item!r}")
        out[key] = value
    return out


def _int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise InvalidConfig(f"{what} must be an integer, got {text!r}") from None


def parse_lag_grid(text: str) -> list[int]:
    """``"0..120:20"`` (inclusive range with step) or ``"20,60,120"``."""
    text = text.strip()
    if not text:
        raise InvalidConfig("the lag grid is empty")
    if ".." in text:
        span, _, step = text.partition(":")
        lo, _, hi = span.partition("..")
        lo, hi, step = _int(lo, "grid start"), _int(hi, "grid end"), _int(step or "1", "grid step")
        if step < 1 or hi < lo:
            raise InvalidConfig(f"bad lag grid {text!r}")
        return list(range(lo, hi + 1, step))
    return [_int(x.strip(), "lag") for x in text.split(",") if x.strip()]


def parse_seeds(text: Optional[str]) -> list[int]:
    if text is None:
        return [_default_seed()]
    seeds = [_int(x.strip(), "seed") for x in text.replace(" ", ",").split(",") if x.strip()]
    if not seeds:
        raise InvalidConfig("no seeds given")
    return seeds


def _print_findings(report: ViolationReport, out=None) -> None:
    out = out or sys.stdout
    for f in report.decisions:
        for v in f.violations:
            print(f"  {v}: decision {f.decision_id} (agent {f.agent_id})", file=out)
    for a in report.history_anomalies:
        print(f"  history: {a['anomaly']} {json.dumps({k: v for k, v in a.items() if k != 'anomaly'}, sort_keys=True)}",
              file=out)
    for g in report.gate_mismatches:
        print(f"  gate mismatch: {json.dumps(g, sort_keys=True)}", file=out)


def _summary_line(report: ViolationReport) -> str:
    s = report.summary()
    n = s["total_violations"]
    codes = ", ".join(f"{k}={v}" for k, v in sorted(s["violations_by_code"].items()) if v)
    return f"{s['decisions']} decisions, {s['admitted']} admitted, {n} violation{'s' if n != 1 else ''}" + (
        f" ({codes})" if codes else "")


def build_config(args: argparse.Namespace) -> RunConfig:
    base: dict = RunConfig.load(args.config).to_dict() if args.config else {}
    for name in ("scenario", "mode", "delta_ms", "max_concurrent", "seed"):
        v = getattr(args, name)
        if v is not None:
            base[name] = v
    if "seed" not in base:
        base["seed"] = _default_seed()
    lags = {k: _int(v, f"lag {k}") for k, v in _pairs(args.lag, "--lag").items()}
    if lags:
        base["lags"] = {**base.get("lags", {}), **lags}
    params = _pairs(args.param, "--param")
    if params:
        base["params"] = {**base.get("params", {}), **params}
    if "scenario" not in base:
        raise InvalidConfig("--scenario is required")
    return RunConfig.from_dict({**base, "out": args.out})


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(cfg.out)
    trace = run_scenario(cfg.scenario, cfg, workdir=out)
    trace_path = out / "trace.jsonl"
    trace.write(trace_path)
    report = analyze(trace.events)
    doc = {**report.to_dict(), "config": cfg.to_dict(), "metrics": trace.metrics, "outcomes": trace.outcomes}
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"{cfg.scenario} [{cfg.mode}] seed={cfg.seed}: {_summary_line(report)} -> {trace_path}")
    _print_findings(report)
    return EXIT_OK if report.clean else EXIT_VIOLATIONS


def cmd_check(args: argparse.Namespace) -> int:
    report = analyze(args.trace)
    print(f"{args.trace}: {_summary_line(report)}")
    _print_findings(report)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK if report.clean else EXIT_VIOLATIONS


def cmd_sweep(args: argparse.Namespace) -> int:
    lags = parse_lag_grid(args.lag_grid)
    seeds = parse_seeds(args.seeds)
    base: dict = {}
    if args.delta_ms is not None:
        base["delta_ms"] = args.delta_ms
    if args.max_concurrent is not None:
        base["max_concurrent"] = args.max_concurrent
    report = run_comparison(args.scenario, lags, seeds, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "sweep.json").write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxlake", description="multi-agent store simulator and trace checker")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and check its trace")
    run.add_argument("--config", help="scenario config JSON (flags override it)")
    run.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)}")
    run.add_argument("--mode", help=f"one of {', '.join(MODES)}")
    run.add_argument("--delta-ms", dest="delta_ms", type=int)
    run.add_argument("--max-concurrent", dest="max_concurrent", type=int)
    run.add_argument("--seed", type=int, help=f"default: ${SEED_ENV} or 0")
    run.add_argument("--lag", action="append", default=[], metavar="SUBSYSTEM=MS")
    run.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--out", default="ctxlake-out", help="output directory")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="analyze a trace file")
    check.add_argument("--trace", required=True)
    check.add_argument("--report", help="also write the report JSON here")
    check.set_defaults(func=cmd_check)

    sweep = sub.add_parser("sweep", help="compare composed and contextlake modes over a lag grid")
    sweep.add_argument("--scenario", required=True)
    sweep.add_argument("--lag-grid", dest="lag_grid", required=True, help='e.g. "0..120:20" or "20,60,120"')
    sweep.add_argument("--seeds", help='e.g. "1,2,3"')
    sweep.add_argument("--delta-ms", dest="delta_ms", type=int)
    sweep.add_argument("--max-concurrent", dest="max_concurrent", type=int)
    sweep.add_argument("--out", default="ctxlake-sweep")
    sweep.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"ctxlake: parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContextLakeError, OSError) as exc:
        print(f"ctxlake: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
