"""Metrics from a trace: moving time, path length, solve cost and spacing.

moving time starts at the agent's first replanning start. if it never
arrives we report t_max and set the timeout flag.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from src.config import DT_CHECK
from src.trace_log import TraceLog
from src.verification import dense_times, executed_paths, min_center_distance

logger = logging.getLogger(__name__)

AGENT_COLUMNS = ["model", "T_t", "L", "timeout", "T_cost_max", "T_cost_avg", "replans", "fallbacks", "deadlock"]
INTERVAL_COLUMNS = ["pair", "renewals", "delta_mean", "delta_max", "bound"]


@dataclass
class Metrics:
    agents: pd.DataFrame
    intervals: pd.DataFrame
    min_distance: float

    def to_dict(self) -> Dict[str, Any]:
        agents = self.agents.reset_index().replace({np.nan: None})
        return {
            "min_distance": None if not np.isfinite(self.min_distance) else self.min_distance,
            "agents": agents.to_dict(orient="records"),
            "intervals": self.intervals.to_dict(orient="records"),
        }


def _check_step(trace: TraceLog) -> float:
    return float(trace.meta.get("scenario", {}).get("dt_check", DT_CHECK))


def _interval_frame(trace: TraceLog) -> pd.DataFrame:
    configs = {a["id"]: a for a in trace.meta.get("scenario", {}).get("agents", [])}
    times: Dict[tuple, List[float]] = {}
    for record in trace.of_kind("renewal"):
        times.setdefault(record.pair, []).append(record.t)
    rows = []
    for (lo, hi), ts in sorted(times.items()):
        deltas = np.diff(ts)
        bound = np.nan
        if lo in configs and hi in configs:
            a, b = configs[lo], configs[hi]
            # no bound unless each agent waits longer than the other computes
            if a["T_w"] > b["T_c"] and b["T_w"] > a["T_c"]:
                bound = min(a["T_c"], b["T_c"]) + max(a["T_c"] + a["T_w"], b["T_c"] + b["T_w"])
        rows.append(
            {
                "pair": f"{lo}-{hi}",
                "renewals": len(ts),
                "delta_mean": float(deltas.mean()) if deltas.size else np.nan,
                "delta_max": float(deltas.max()) if deltas.size else np.nan,
                "bound": bound,
            }
        )
    return pd.DataFrame(rows, columns=INTERVAL_COLUMNS)


def compute_metrics(trace: TraceLog) -> Metrics:
    t_max = float(trace.meta.get("t_max", trace.end_time))
    models = {a["id"]: a["model"] for a in trace.meta.get("scenario", {}).get("agents", [])}
    paths = executed_paths(trace)
    times = dense_times(trace, _check_step(trace))

    rows = []
    for i in sorted(paths):
        starts = trace.for_agent(i, "start")
        arrivals = trace.for_agent(i, "arrive")
        commits = trace.for_agent(i, "commit")
        if arrivals:
            first_start = starts[0].t if starts else arrivals[0].t
            moving = max(0.0, arrivals[0].t - first_start)
        else:
            moving = t_max
        positions = paths[i].states_at(times)[:, :2]
        length = float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum()) if len(times) > 1 else 0.0
        costs = [r.payload["runtime_ms"] for r in commits if "runtime_ms" in r.payload]
        rows.append(
            {
                "agent": i,
                "model": models.get(i, ""),
                "T_t": moving,
                "L": length,
                "timeout": not arrivals,
                "T_cost_max": max(costs) if costs else np.nan,
                "T_cost_avg": float(np.mean(costs)) if costs else np.nan,
                "replans": sum(1 for r in commits if r.payload.get("n", 0) > 0),
                "fallbacks": sum(1 for r in commits if r.payload.get("status") == "fallback"),
                "deadlock": sum(1 for r in starts if r.payload.get("deadlock")),
            }
        )
    agents = pd.DataFrame(rows, columns=["agent"] + AGENT_COLUMNS).set_index("agent")
    min_distance, _ = min_center_distance(paths, times)
    metrics = Metrics(agents, _interval_frame(trace), min_distance)
    if rows:
        logger.info(
            "Metrics: max T_t %.2f s, max L %.2f m, min distance %.3f m",
            agents["T_t"].max(), agents["L"].max(), min_distance,
        )
    return metrics


def export_plot_data(trace: TraceLog, out_dir: Path) -> List[Path]:
    """Per-agent position CSVs plus the swarm's minimum center distance over time."""
    out_dir = Path(out_dir)
    paths = executed_paths(trace)
    if not paths:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    times = dense_times(trace, _check_step(trace))
    written: List[Path] = []
    for i in sorted(paths):
        states = paths[i].states_at(times)
        frame = pd.DataFrame({"t": times, "x": states[:, 0], "y": states[:, 1]})
        path = out_dir / f"agent_{i}.csv"
        frame.to_csv(path, index=False, float_format="%.6f")
        written.append(path)
    if len(paths) > 1:
        _, series = min_center_distance(paths, times)
        path = out_dir / "min_distance.csv"
        pd.DataFrame({"t": times, "min_distance": series}).to_csv(path, index=False, float_format="%.6f")
        written.append(path)
    logger.info("Wrote %d plot data files to %s", len(written), out_dir)
    return written


def save_metrics(metrics: Metrics, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agents_path = out_dir / "metrics_agents.csv"
    intervals_path = out_dir / "metrics_intervals.csv"
    metrics.agents.to_csv(agents_path)
    metrics.intervals.to_csv(intervals_path, index=False)
    return [agents_path, intervals_path]
