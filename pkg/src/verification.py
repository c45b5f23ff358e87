"""Trace verification

here the trace gets replayed next to the scenario it came from, and we check:

- no two agents' executed shapes ever overlap (dense sampling, one window per
  stretch where both agents follow a fixed commit)
- each committed trajectory stays inside the allocations in force when it was
  committed, with the planner's inflation once its first knot is reached
- renewals only happen while both agents are waiting
- renewals of a pair are never further apart than its frequency bound plus a
  tick. That bound needs each agent to wait longer than the other computes,
  pairs without it are only listed.

Results go to a JSON report and a short Markdown summary.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.allocation import Allocation, Renewal, inflation_margin, query_before, query_many, swept_body, update
from src.config import EPS_SEP, TICK, get_env_int
from src.runtime import bound_applies, frequency_bound
from src.scenario import Scenario
from src.trace_log import TraceFormatError, TraceLog, TraceRecord
from src.trajectory import TIME_SLACK, Trajectory, check_times, first_collision

logger = logging.getLogger(__name__)

MARGIN_TOL = 1e-7


@dataclass
class ExecutedPath:
    """Motion actually followed by one agent: each commit rules until the next."""

    agent_id: int
    commits: List[Tuple[float, Trajectory]] = field(default_factory=list)

    @property
    def commit_times(self) -> List[float]:
        return [t for t, _ in self.commits]

    def trajectory_at(self, t: float) -> Trajectory:
        current = self.commits[0][1]
        for c, traj in self.commits:
            if c > t + TIME_SLACK:
                break
            current = traj
        return current

    def states_at(self, times) -> np.ndarray:
        ts = np.asarray(times, dtype=float)
        out = np.empty((ts.size, 4))
        starts = np.array(self.commit_times)
        idx = np.searchsorted(starts, ts + TIME_SLACK, side="right") - 1
        idx = np.clip(idx, 0, len(self.commits) - 1)
        for k in np.unique(idx):
            mask = idx == k
            out[mask] = self.commits[k][1].states_at(ts[mask])
        return out


def _trajectory(record: TraceRecord) -> Trajectory:
    try:
        return Trajectory.from_record(record.payload["trajectory"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"commit of {record.subject} at t={record.t} has a bad trajectory ({exc})") from None


def executed_paths(trace: TraceLog) -> Dict[int, ExecutedPath]:
    paths: Dict[int, ExecutedPath] = {}
    for record in trace.of_kind("commit"):
        agent = record.agent
        paths.setdefault(agent, ExecutedPath(agent)).commits.append((record.t, _trajectory(record)))
    return paths


def dense_times(trace: TraceLog, dt_check: float) -> np.ndarray:
    end = trace.end_time
    if end <= 0.0:
        return np.array([0.0])
    return check_times(0.0, end, dt_check)


def min_center_distance(paths: Dict[int, ExecutedPath], times: np.ndarray) -> Tuple[float, np.ndarray]:
    """Smallest pairwise center distance overall and at each sample time."""
    ids = sorted(paths)
    if len(ids) < 2:
        return float("inf"), np.full(len(times), np.inf)
    positions = {i: paths[i].states_at(times)[:, :2] for i in ids}
    series = np.full(len(times), np.inf)
    for i, j in combinations(ids, 2):
        series = np.minimum(series, np.linalg.norm(positions[i] - positions[j], axis=1))
    return float(series.min()), series


@dataclass
class VerificationReport:
    scenario: str
    dt_check: float
    pairs_checked: int = 0
    commits_checked: int = 0
    renewals_checked: int = 0
    min_distance: float = float("inf")
    collisions: List[Dict[str, Any]] = field(default_factory=list)
    conformance: List[Dict[str, Any]] = field(default_factory=list)
    intervals: List[Dict[str, Any]] = field(default_factory=list)
    handshakes: List[Dict[str, Any]] = field(default_factory=list)
    protocol: List[Dict[str, Any]] = field(default_factory=list)
    # pairs whose renewal gaps have no bound; listed, not findings
    unbounded_pairs: List[List[int]] = field(default_factory=list)

    @property
    def findings(self) -> int:
        return sum(len(x) for x in (self.collisions, self.conformance, self.intervals, self.handshakes, self.protocol))

    @property
    def verdict(self) -> str:
        return "PASS" if self.findings == 0 else "FAIL"

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["verdict"] = self.verdict
        out["findings"] = self.findings
        return out


def _check_collisions(
    paths: Dict[int, ExecutedPath], scenario: Scenario, end: float, dt_check: float, workers: int
) -> List[Dict[str, Any]]:
    pairs = list(combinations(sorted(paths), 2))

    def check(pair: Tuple[int, int]) -> Optional[Dict[str, Any]]:
        i, j = pair
        fp_i, fp_j = scenario.agent(i).footprint, scenario.agent(j).footprint
        cuts = sorted({0.0, end, *[t for t in paths[i].commit_times + paths[j].commit_times if 0.0 < t < end]})
        for t0, t1 in zip(cuts, cuts[1:]):
            if t1 - t0 <= TIME_SLACK:
                continue
            hit = first_collision(
                paths[i].trajectory_at(t0), fp_i, paths[j].trajectory_at(t0), fp_j, t0, t1, dt_check
            )
            if hit is not None:
                return {"pair": [i, j], "t": hit}
        return None

    if end <= 0.0:
        return []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            found = list(pool.map(check, pairs))
    else:
        found = [check(p) for p in pairs]
    return sorted((f for f in found if f is not None), key=lambda f: (f["t"], f["pair"]))


def _margins(traj: Trajectory, body, alloc: Allocation, times: np.ndarray, before: bool = False) -> np.ndarray:
    positions = traj.positions_at(times)
    if before:
        spaces = [query_before(alloc, t) for t in times]
        normals = np.array([h.normal for h in spaces]).reshape(-1, 2)
        offsets = np.array([h.offset for h in spaces])
    else:
        normals, offsets = query_many(alloc, times)
    supports = np.max(-(normals @ body.vertices.T), axis=1)
    return np.sum(normals * positions, axis=1) - offsets - supports


def conformance_findings(
    traj: Trajectory,
    committed_at: float,
    status: str,
    cfg,
    allocations: Dict[int, Allocation],
    dt_check: float,
) -> List[Dict[str, Any]]:
    """Allocation membership of one committed trajectory from its commit time on."""
    body = swept_body(cfg.footprint, cfg.model.kind)
    first_knot = traj.start_time + traj.knot_dt if len(traj.knots) > 1 else np.inf
    required_inflated = inflation_margin(cfg.model, cfg.h) + EPS_SEP - MARGIN_TOL
    findings = []
    for neighbor in sorted(allocations):
        alloc = allocations[neighbor]
        if alloc.is_empty:
            continue
        switches = np.array(alloc.breakpoints(committed_at - TIME_SLACK))
        last = max(traj.end_time, switches.max() if switches.size else committed_at, committed_at)
        knots = traj.knot_times[traj.knot_times >= committed_at - TIME_SLACK]
        grid = check_times(committed_at, last + dt_check, dt_check)
        times = np.unique(np.concatenate([grid, knots, switches]))
        samples = [(times, _margins(traj, body, alloc, times))]
        if switches.size:
            samples.append((switches, _margins(traj, body, alloc, switches, before=True)))
        worst: Optional[Tuple[float, float, float]] = None
        for ts, margins in samples:
            required = np.full(ts.size, -MARGIN_TOL)
            if status == "planned":
                required[ts >= first_knot - TIME_SLACK] = required_inflated
            bad = np.flatnonzero(margins < required)
            for k in bad:
                if worst is None or ts[k] < worst[0]:
                    worst = (float(ts[k]), float(margins[k]), float(required[k]))
        if worst is not None:
            findings.append(
                {"neighbor": neighbor, "t": worst[0], "margin": worst[1], "required": worst[2]}
            )
    return findings


def verify_trace(
    trace: TraceLog,
    scenario: Scenario,
    dt_check: Optional[float] = None,
    workers: Optional[int] = None,
) -> VerificationReport:
    dt = scenario.dt_check if dt_check is None else dt_check
    workers = workers if workers is not None else get_env_int("ASTA_WORKERS", 1)
    if not trace.of_kind("end"):
        raise TraceFormatError("trace has no end record; it is incomplete")
    unknown = sorted(set(trace.agent_ids) - set(scenario.agent_ids))
    if unknown:
        raise TraceFormatError(f"trace mentions agents {unknown} that are not in scenario {scenario.name}")

    report = VerificationReport(scenario=scenario.name, dt_check=dt)
    paths = executed_paths(trace)
    end = trace.end_time
    report.pairs_checked = len(list(combinations(sorted(paths), 2)))
    report.collisions = _check_collisions(paths, scenario, end, dt, workers)
    report.min_distance, _ = min_center_distance(paths, dense_times(trace, dt))

    # replay: allocations, phases and renewal times in trace order
    allocations: Dict[int, Dict[int, Allocation]] = {i: {} for i in scenario.agent_ids}
    computing: Dict[int, bool] = {i: False for i in scenario.agent_ids}
    renewal_times: Dict[Tuple[int, int], List[float]] = {}
    for record in trace:
        if record.kind == "start":
            computing[record.agent] = True
        elif record.kind == "commit":
            i = record.agent
            computing[i] = False
            report.commits_checked += 1
            status = record.payload.get("status", "")
            if status == "init":
                continue
            for finding in conformance_findings(
                _trajectory(record), record.t, status, scenario.agent(i), allocations[i], dt
            ):
                report.conformance.append({"agent": i, "n": record.payload.get("n"), "status": status, **finding})
        elif record.kind == "session":
            lo, hi = record.pair
            allocations[lo][hi] = Allocation(record.payload["established_at"])
            allocations[hi][lo] = Allocation(record.payload["established_at"])
        elif record.kind == "renewal":
            lo, hi = record.pair
            report.renewals_checked += 1
            try:
                renewal = Renewal.from_record(record.payload)
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise TraceFormatError(f"bad renewal record for {record.subject} at t={record.t} ({exc})") from None
            if hi not in allocations[lo]:
                raise TraceFormatError(f"renewal for {record.subject} at t={record.t} before its session")
            allocations[lo][hi] = update(allocations[lo][hi], renewal)
            allocations[hi][lo] = update(allocations[hi][lo], renewal.mirrored())
            renewal_times.setdefault((lo, hi), []).append(record.t)
            busy = [a for a in (lo, hi) if computing[a]]
            if busy:
                report.handshakes.append({"pair": [lo, hi], "t": record.t, "m": record.payload.get("m"), "busy": busy})
        elif record.kind == "violation":
            report.protocol.append({"subject": record.subject, "t": record.t, **record.payload})

    for (lo, hi), times in sorted(renewal_times.items()):
        if not bound_applies(scenario.agent(lo), scenario.agent(hi)):
            report.unbounded_pairs.append([lo, hi])
            continue
        bound = frequency_bound(scenario.agent(lo), scenario.agent(hi))
        for a, b in zip(times, times[1:]):
            delta = b - a
            if delta > bound + TICK + 1e-9:
                report.intervals.append({"pair": [lo, hi], "t": b, "delta": delta, "bound": bound})

    report.conformance.sort(key=lambda f: (f["t"], f["agent"], f["neighbor"]))
    logger.info(
        "Verified %s: %s with %d finding(s), min center distance %.3f m",
        scenario.name, report.verdict, report.findings, report.min_distance,
    )
    return report


def save_report(report: VerificationReport, json_path: Path) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    with json_path.open("w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)


def save_markdown(report: VerificationReport, md_path: Path) -> None:
    md_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# Verification Report: {report.scenario}", ""]
    lines.append(f"Verdict: **{report.verdict}**")
    lines.append(f"- Agent pairs checked: {report.pairs_checked}")
    lines.append(f"- Commits checked: {report.commits_checked}")
    lines.append(f"- Renewals checked: {report.renewals_checked}")
    lines.append(f"- Minimum center distance: {report.min_distance:.3f} m (dt_check {report.dt_check} s)")
    if report.unbounded_pairs:
        pairs = ", ".join(f"{lo}-{hi}" for lo, hi in report.unbounded_pairs)
        lines.append(f"- Renewal intervals not bounded for pairs: {pairs}")
    lines.append("")

    sections = [
        ("Collisions", report.collisions),
        ("Allocation Conformance", report.conformance),
        ("Renewal Intervals", report.intervals),
        ("Handshakes", report.handshakes),
        ("Protocol Violations", report.protocol),
    ]
    for title, items in sections:
        lines.append(f"## {title}")
        if not items:
            lines.append("- none")
        for item in items[:20]:
            lines.append(f"- {item}")
        if len(items) > 20:
            lines.append(f"- ... {len(items) - 20} more")
        lines.append("")

    md_path.write_text("\n".join(lines), encoding="utf-8")

