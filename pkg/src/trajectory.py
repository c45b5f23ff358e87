"""Committed trajectories: knot lists with linear interpolation and a constant tail.

A trajectory is exactly what agents exchange: (start_time, knot_dt, knots,
model_kind). Between knots every component is interpolated linearly
(headings along the shorter arc); past the last knot the last state holds
forever.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np

from src.config import snap
from src.dynamics import DynamicsModel, ModelKind, is_equilibrium, wrap_angle
from src.geometry import Polygon, polygons_intersect, transform_footprint

TIME_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class Trajectory:
    start_time: float
    knot_dt: float
    knots: np.ndarray
    model_kind: ModelKind

    def __post_init__(self) -> None:
        if self.knot_dt <= 0:
            raise ValueError("knot_dt must be positive")
        knots = np.array(self.knots, dtype=float)
        if knots.ndim != 2 or knots.shape[0] < 1 or knots.shape[1] != 4:
            raise ValueError(f"knots must be a non-empty (n, 4) array, got shape {knots.shape}")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        object.__setattr__(self, "start_time", float(self.start_time))
        object.__setattr__(self, "knot_dt", float(self.knot_dt))

    @property
    def has_heading(self) -> bool:
        return self.model_kind is not ModelKind.DOUBLE_INTEGRATOR

    @property
    def horizon(self) -> float:
        return self.knot_dt * (len(self.knots) - 1)

    @property
    def end_time(self) -> float:
        return self.start_time + self.horizon

    @property
    def knot_times(self) -> np.ndarray:
        return self.start_time + self.knot_dt * np.arange(len(self.knots))

    def _check_time(self, t: float) -> None:
        if t < self.start_time - TIME_SLACK:
            raise ValueError(f"t={t} precedes trajectory start {self.start_time}")

    def sample(self, t: float) -> np.ndarray:
        self._check_time(t)
        s = max(t - self.start_time, 0.0) / self.knot_dt
        last = len(self.knots) - 1
        k = int(math.floor(s))
        if k >= last:
            return self.knots[last].copy()
        frac = s - k
        a, b = self.knots[k], self.knots[k + 1]
        if frac <= 0.0:
            return a.copy()
        out = a + frac * (b - a)
        if self.has_heading:
            out[2] = wrap_angle(a[2] + frac * wrap_angle(b[2] - a[2]))
        return out

    def states_at(self, times: Sequence[float]) -> np.ndarray:
        """Vectorized ``sample`` over many times."""
        ts = np.asarray(times, dtype=float)
        if ts.size and float(ts.min()) < self.start_time - TIME_SLACK:
            raise ValueError(f"t={float(ts.min())} precedes trajectory start {self.start_time}")
        if len(self.knots) == 1:
            return np.repeat(self.knots[:1], ts.size, axis=0)
        kt = self.knot_times
        out = np.empty((ts.size, 4))
        for c in range(4):
            column = self.knots[:, c]
            if self.has_heading and c == 2:
                column = np.unwrap(column)
            out[:, c] = np.interp(ts, kt, column)
        if self.has_heading:
            wrapped = np.remainder(out[:, 2] + math.pi, 2 * math.pi) - math.pi
            wrapped[wrapped <= -math.pi] = math.pi
            out[:, 2] = wrapped
        return out

    def positions_at(self, times: Sequence[float]) -> np.ndarray:
        return self.states_at(times)[:, :2]

    def headings_at(self, times: Sequence[float]) -> np.ndarray:
        if not self.has_heading:
            return np.zeros(np.asarray(times).size)
        return self.states_at(times)[:, 2]

    def shape_at(self, footprint: Polygon, t: float) -> Polygon:
        x = self.sample(t)
        return transform_footprint(footprint, x[:2], float(x[2]) if self.has_heading else 0.0)

    def shifted(self, dt: float) -> "Trajectory":
        """Same knots with the time axis moved by dt (a clock-frame change)."""
        return Trajectory(snap(self.start_time + dt), self.knot_dt, self.knots, self.model_kind)

    def to_record(self) -> Dict[str, Any]:
        return {
            "start": self.start_time,
            "dt": self.knot_dt,
            "model": self.model_kind.value,
            "knots": [[float(v) for v in knot] for knot in self.knots],
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Trajectory":
        return cls(record["start"], record["dt"], np.array(record["knots"], dtype=float), record["model"])


def constant_trajectory(model: DynamicsModel, state, t0: float, knot_dt: float = 1.0) -> Trajectory:
    """Single-knot trajectory resting at ``state`` from ``t0`` onward."""
    x = np.asarray(state, dtype=float)
    if not is_equilibrium(model, x):
        raise ValueError(f"constant trajectory needs an equilibrium state, got {x.tolist()}")
    return Trajectory(t0, knot_dt, x[None, :], model.kind)


def check_times(t0: float, t1: float, dt_check: float) -> np.ndarray:
    if not t0 < t1:
        raise ValueError("check window needs t0 < t1")
    if dt_check <= 0:
        raise ValueError("dt_check must be positive")
    count = int(math.floor((t1 - t0) / dt_check + 1e-9)) + 1
    times = t0 + dt_check * np.arange(count)
    if times[-1] < t1 - TIME_SLACK:
        times = np.append(times, t1)
    return times


def first_collision(
    traj_i: Trajectory,
    footprint_i: Polygon,
    traj_j: Trajectory,
    footprint_j: Polygon,
    t0: float,
    t1: float,
    dt_check: float,
) -> Optional[float]:
    """Earliest sampled time in [t0, t1] at which the two shapes intersect."""
    times = check_times(t0, t1, dt_check)
    states_i = traj_i.states_at(times)
    states_j = traj_j.states_at(times)
    reach = footprint_i.circumradius + footprint_j.circumradius
    gaps = np.linalg.norm(states_i[:, :2] - states_j[:, :2], axis=1)
    for k in np.flatnonzero(gaps <= reach + 1e-9):
        shape_i = transform_footprint(footprint_i, states_i[k, :2], states_i[k, 2] if traj_i.has_heading else 0.0)
        shape_j = transform_footprint(footprint_j, states_j[k, :2], states_j[k, 2] if traj_j.has_heading else 0.0)
        if polygons_intersect(shape_i, shape_j):
            return float(times[k])
    return None
