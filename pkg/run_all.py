#!/usr/bin/env python
"""Run the main project steps in one go.

This is a convenience runner. It executes:
1) A scenario run into a trace file
2) Trace verification (JSON + Markdown reports)
3) Metrics tables (CSV)
4) Plot data export (CSV)
5) Pytest

Exit code 1 from a step means it finished but found something (a timeout,
verification findings); its outputs exist, so the later steps still run and
the step is listed at the end. Any other failure stops the runner.
"""

import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent
PYTHON = sys.executable
# exit code of a step that ran to the end but reported findings
FINDINGS = 1


def run(title: str, cmd: list[str]) -> int:
    print(f"\n=== {title} ===")
    print("Command:", " ".join(cmd))
    result = subprocess.run(cmd, cwd=ROOT)
    if result.returncode == 0:
        print(f"{title} completed successfully.\n")
    elif result.returncode == FINDINGS:
        print(f"{title} finished with findings.\n")
    else:
        print(f"{title} failed with code {result.returncode}.\n")
    return result.returncode


def main() -> None:
    parser = argparse.ArgumentParser(description="Run a scenario, verify it, and export its metrics.")
    parser.add_argument("--scenario", default="antipodal8", help="Scenario file or name under data/scenarios.")
    parser.add_argument("--seed", type=int, default=0, help="Run seed.")
    parser.add_argument("--skip-tests", action="store_true", help="Skip the pytest step.")
    args = parser.parse_args()

    name = Path(args.scenario).stem
    out = ROOT / "data" / "runs" / name
    trace = out / f"{name}_seed{args.seed}.trace"
    cli = [PYTHON, "-m", "src.cli"]

    steps: list[tuple[str, list[str]]] = [
        ("Run scenario", cli + ["run", "--scenario", args.scenario, "--seed", str(args.seed), "--trace", str(trace)]),
        (
            "Verify trace",
            cli
            + [
                "verify",
                "--trace",
                str(trace),
                "--scenario",
                args.scenario,
                "--report-json",
                str(out / "verification_report.json"),
                "--report-md",
                str(out / "verification_report.md"),
            ],
        ),
        ("Metrics", cli + ["metrics", "--trace", str(trace), "--out", str(out)]),
        ("Plot data", cli + ["plot", "--trace", str(trace), "--out", str(out / "plots")]),
    ]
    if not args.skip_tests:
        steps.append(("Pytest", [PYTHON, "-m", "pytest", "-q"]))

    flagged: list[str] = []
    for title, cmd in steps:
        code = run(title, cmd)
        if code == FINDINGS:
            flagged.append(title)
        elif code != 0:
            sys.exit(code)

    if flagged:
        print("Steps with findings: " + ", ".join(flagged))
        sys.exit(FINDINGS)
    print("All steps completed.")


if __name__ == "__main__":
    main()
