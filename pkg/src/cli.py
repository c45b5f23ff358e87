"""Command line for running scenarios and inspecting their traces.

    python -m src.cli run --scenario antipodal8 --seed 0 --trace data/traces/antipodal8.trace
    python -m src.cli verify --trace data/traces/antipodal8.trace --scenario antipodal8
    python -m src.cli metrics --trace data/traces/antipodal8.trace
    python -m src.cli plot --trace data/traces/antipodal8.trace --out data/plots/antipodal8

Exit codes: 0 success or PASS, 1 findings, 2 usage or IO error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

try:
    from src.config import ROOT, configure_logging
except ModuleNotFoundError:
    project_root = Path(__file__).resolve().parents[1]
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))
    from src.config import ROOT, configure_logging

import pandas as pd

from src import metrics, runtime, verification
from src.scenario import ScenarioError, load_scenario
from src.trace_log import TraceFormatError, TraceLog

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_ERROR = 2


def non_negative_float(raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {raw!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {raw}")
    return value


def positive_float(raw: str) -> float:
    value = non_negative_float(raw)
    if value == 0:
        raise argparse.ArgumentTypeError("expected a positive number, got 0")
    return value


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    delay = args.delay_ms / 1000.0 if args.delay_ms is not None else None
    trace = runtime.run(
        scenario,
        seed=args.seed,
        t_max=args.t_max,
        delay=delay,
        workers=args.workers,
        real_time=args.real_time,
        record_wall_clock=args.wall_clock,
    )
    out = Path(args.trace) if args.trace else ROOT / "data" / "traces" / f"{scenario.name}_seed{trace.meta['seed']}.trace"
    trace.write(out)
    summary = trace.summary
    print(
        f"Saved {len(trace)} records to {out} "
        f"(arrived {len(summary['arrived'])}/{len(scenario.agents)}, "
        f"renewals {summary['renewals']}, violations {summary['violations']}, timeout {summary['timeout']})"
    )
    return EXIT_FINDINGS if summary["timeout"] or summary["violations"] else EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    trace = TraceLog.read(Path(args.trace))
    report = verification.verify_trace(trace, load_scenario(args.scenario), dt_check=args.dt_check)
    if args.report_json:
        verification.save_report(report, Path(args.report_json))
    if args.report_md:
        verification.save_markdown(report, Path(args.report_md))
    print(f"{report.verdict}: {report.findings} finding(s), min center distance {report.min_distance:.3f} m")
    return EXIT_OK if report.verdict == "PASS" else EXIT_FINDINGS


def cmd_metrics(args: argparse.Namespace) -> int:
    result = metrics.compute_metrics(TraceLog.read(Path(args.trace)))
    with pd.option_context("display.width", 120, "display.precision", 3):
        print(result.agents.to_string())
        if not result.intervals.empty:
            print()
            print(result.intervals.to_string(index=False))
    print(f"\nmin inter-agent distance: {result.min_distance:.3f} m")
    if args.out:
        for path in metrics.save_metrics(result, Path(args.out)):
            print(f"Saved {path}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    written = metrics.export_plot_data(TraceLog.read(Path(args.trace)), Path(args.out))
    print(f"Saved {len(written)} plot data files to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Asynchronous spatial-temporal allocation planner and simulator.")
    parser.add_argument("--log-level", default=None, help="Logging level (default: ASTA_LOG_LEVEL or INFO).")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="Simulate a scenario and write its trace.")
    run_p.add_argument("--scenario", required=True, help="Scenario YAML file or name under data/scenarios.")
    run_p.add_argument("--seed", type=int, default=None, help="Run seed (default: the scenario's).")
    run_p.add_argument("--t-max", type=non_negative_float, default=None, help="Simulated time limit in seconds.")
    run_p.add_argument("--delay-ms", type=non_negative_float, default=None, help="Message delay in milliseconds.")
    run_p.add_argument("--trace", default=None, help="Trace output path.")
    run_p.add_argument("--workers", type=int, default=None, help="Planner threads (default: ASTA_WORKERS or 1).")
    run_p.add_argument("--real-time", action="store_true", help="Fall back when a solve overruns T_c in wall time.")
    run_p.add_argument("--wall-clock", action="store_true", help="Record solver runtimes in the trace.")
    run_p.set_defaults(func=cmd_run)

    verify_p = sub.add_parser("verify", help="Check a trace for collisions and protocol guarantees.")
    verify_p.add_argument("--trace", required=True)
    verify_p.add_argument("--scenario", required=True)
    verify_p.add_argument("--dt-check", type=positive_float, default=None, help="Dense sampling step in seconds.")
    verify_p.add_argument("--report-json", default=None, help="Path to JSON report output.")
    verify_p.add_argument("--report-md", default=None, help="Path to Markdown summary.")
    verify_p.set_defaults(func=cmd_verify)

    metrics_p = sub.add_parser("metrics", help="Moving time, transition length and solve cost per agent.")
    metrics_p.add_argument("--trace", required=True)
    metrics_p.add_argument("--out", default=None, help="Directory for metrics CSV files.")
    metrics_p.set_defaults(func=cmd_metrics)

    plot_p = sub.add_parser("plot", help="Export position and distance series as CSV.")
    plot_p.add_argument("--trace", required=True)
    plot_p.add_argument("--out", required=True)
    plot_p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except (FileNotFoundError, ScenarioError, TraceFormatError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR
    except ValueError as exc:
        logger.error("Invalid input: %s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
