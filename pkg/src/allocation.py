"""Spatial-temporal allocations between pairs of agents.

An allocation maps every time from its establishment onward to a half space
the owning agent's shape must stay in. It is the concatenation of renewal
segments: each renewal covers [t_start, next renewal's t_start), holds its
half space between stamps, and keeps its last half space forever after
t_settle. A new renewal never touches the allocation before its t_start.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import snap
from src.dynamics import DynamicsModel, ModelKind
from src.geometry import HalfSpace, NotSeparable, Polygon, regular_polygon, separating_hyperplane, sweep_polygon
from src.trajectory import TIME_SLACK, Trajectory

logger = logging.getLogger(__name__)

DISK_SIDES = 16


class RenewalFailure(RuntimeError):
    def __init__(self, stamp: float, reason: str) -> None:
        super().__init__(f"renewal failed at stamp t={stamp:.6f}: {reason}")
        self.stamp = stamp


class ProtocolViolation(RuntimeError):
    """An allocation update that breaks the ordering rules."""


def mirror(half_space: HalfSpace) -> HalfSpace:
    return half_space.mirror()


def swept_body(footprint: Polygon, model_kind: ModelKind) -> Polygon:
    """Heading-independent body used for swept shapes and planner supports.

    Fixed-orientation agents use the footprint itself. Agents that turn use a
    polygon circumscribing the disk that contains the footprint at any heading.
    """
    if ModelKind(model_kind) is ModelKind.DOUBLE_INTEGRATOR:
        return footprint
    return regular_polygon(footprint.circumradius, DISK_SIDES, circumscribe=True)


def inflation_margin(model: DynamicsModel, h: float) -> float:
    """Clearance the planner keeps between its body and every half space."""
    return model.v_max * h / 2.0


@dataclass(frozen=True)
class Renewal:
    t_start: float
    t_settle: float
    stamps: Tuple[Tuple[float, HalfSpace], ...]
    tail: HalfSpace

    def __post_init__(self) -> None:
        stamps = tuple((float(t), h) for t, h in self.stamps)
        object.__setattr__(self, "stamps", stamps)
        if self.t_start > self.t_settle:
            raise ValueError("renewal needs t_start <= t_settle")
        if not stamps:
            raise ValueError("renewal needs at least one stamp")
        times = [t for t, _ in stamps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("renewal stamps must be strictly increasing")
        if self.tail != stamps[-1][1]:
            raise ValueError("renewal tail must equal the last stamp's half space")

    @cached_property
    def stamp_times(self) -> List[float]:
        return [t for t, _ in self.stamps]

    def at(self, t: float) -> HalfSpace:
        if t > self.t_settle:
            return self.tail
        k = bisect.bisect_right(self.stamp_times, t + TIME_SLACK) - 1
        return self.stamps[max(k, 0)][1]

    def mirrored(self) -> "Renewal":
        return Renewal(
            self.t_start,
            self.t_settle,
            tuple((t, h.mirror()) for t, h in self.stamps),
            self.tail.mirror(),
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            "t_start": self.t_start,
            "t_settle": self.t_settle,
            "stamps": [[t, *h.to_record()] for t, h in self.stamps],
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Renewal":
        stamps = tuple((row[0], HalfSpace.from_record(row[1:])) for row in record["stamps"])
        return cls(record["t_start"], record["t_settle"], stamps, stamps[-1][1])


def stamp_schedule(
    t_start: float,
    t_settle: float,
    dt_alloc: float,
    grid_origin: Optional[float] = None,
    extra: Sequence[float] = (),
) -> List[float]:
    """Stamp times covering [t_start, t_settle], final stamp clamped to t_settle.

    Without a grid origin the stamps are t_start + k*dt_alloc. With one, the
    interior stamps sit on the grid origin + k*dt_alloc so successive renewals
    of a pair share stamp boundaries. ``extra`` times inside the window are
    merged in as additional stamps.
    """
    if dt_alloc <= 0:
        raise ValueError("dt_alloc must be positive")
    if t_start > t_settle:
        raise ValueError("stamp schedule needs t_start <= t_settle")
    first, settle = snap(t_start), snap(t_settle)
    origin = t_start if grid_origin is None else grid_origin
    inner = set()
    k = int(math.floor((t_start - origin) / dt_alloc + 1e-9)) + 1
    while True:
        t = snap(origin + k * dt_alloc)
        if t >= settle - TIME_SLACK:
            break
        inner.add(t)
        k += 1
    inner.update(snap(t) for t in extra)
    times = [first]
    for t in sorted(inner):
        if first + TIME_SLACK < t < settle - TIME_SLACK and t > times[-1] + TIME_SLACK:
            times.append(t)
    if settle > times[-1] + TIME_SLACK:
        times.append(settle)
    return times


def swept_shape(traj: Trajectory, footprint: Polygon, t_a: float, t_b: Optional[float]) -> Polygon:
    """Hull of the shape over [t_a, t_b]; a single instant when t_b is None."""
    body = swept_body(footprint, traj.model_kind)
    if t_b is None or t_b <= t_a:
        times = np.array([t_a])
    else:
        knots = traj.knot_times
        inner = knots[(knots > t_a) & (knots < t_b)]
        times = np.concatenate([[t_a], inner, [t_b]])
    return sweep_polygon(body, traj.positions_at(times))


def make_renewal(
    traj_i: Trajectory,
    footprint_i: Polygon,
    traj_j: Trajectory,
    footprint_j: Polygon,
    t_start: float,
    t_settle: float,
    dt_alloc: float,
    grid_origin: Optional[float] = None,
    extra_stamps: Sequence[float] = (),
    margin_i: float = 0.0,
    margin_j: float = 0.0,
) -> Renewal:
    """Renewal for agent i against agent j; agent j's side is ``mirrored()``.

    Each stamp's half space separates the shapes both trajectories sweep until
    the next stamp, so holding it between stamps keeps both sides disjoint.
    Passing the current allocation's switch times as ``extra_stamps`` keeps
    every swept interval inside one old half space, where the two sweeps are
    already separated. The margins are the inflation each planner keeps
    from its half space; each stamp leaves them clear when the gap allows.
    """
    times = stamp_schedule(t_start, t_settle, dt_alloc, grid_origin, extra_stamps)
    stamps: List[Tuple[float, HalfSpace]] = []
    for k, t in enumerate(times):
        t_next = times[k + 1] if k + 1 < len(times) else None
        shape_i = swept_shape(traj_i, footprint_i, t, t_next)
        shape_j = swept_shape(traj_j, footprint_j, t, t_next)
        try:
            stamps.append((t, separating_hyperplane(shape_i, shape_j, margin_i, margin_j)))
        except NotSeparable as exc:
            raise RenewalFailure(t, str(exc)) from exc
    return Renewal(times[0], times[-1], tuple(stamps), stamps[-1][1])


@dataclass(frozen=True)
class Allocation:
    established_at: float
    segments: Tuple[Tuple[float, Renewal], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        starts = [v for v, _ in self.segments]
        if starts and abs(starts[0] - self.established_at) > TIME_SLACK:
            raise ValueError("first allocation segment must start at established_at")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("allocation segment starts must be strictly increasing")

    @property
    def is_empty(self) -> bool:
        return not self.segments

    @property
    def renewal_count(self) -> int:
        return len(self.segments)

    @property
    def live(self) -> Renewal:
        if not self.segments:
            raise ValueError("allocation has no renewal yet")
        return self.segments[-1][1]

    @property
    def settle_time(self) -> float:
        return self.live.t_settle

    @cached_property
    def table(self) -> Tuple[List[float], List[HalfSpace]]:
        """Flattened piecewise-constant form: half space k holds from times[k]."""
        times: List[float] = []
        spaces: List[HalfSpace] = []
        for m, (valid_from, renewal) in enumerate(self.segments):
            valid_to = self.segments[m + 1][0] if m + 1 < len(self.segments) else math.inf
            for t, h in renewal.stamps:
                if t < valid_to - TIME_SLACK:
                    times.append(max(t, valid_from))
                    spaces.append(h)
        return times, spaces

    @cached_property
    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        times, spaces = self.table
        normals = np.array([h.normal for h in spaces]).reshape(-1, 2)
        offsets = np.array([h.offset for h in spaces])
        return np.array(times), normals, offsets

    def breakpoints(self, t_lo: float, t_hi: float = math.inf) -> List[float]:
        """Times in (t_lo, t_hi] at which a different half space takes over."""
        times, _ = self.table
        return [t for t in times if t_lo + TIME_SLACK < t <= t_hi + TIME_SLACK]

    def to_records(self) -> List[Dict[str, Any]]:
        return [{"valid_from": v, **r.to_record()} for v, r in self.segments]


def update(alloc: Allocation, renewal: Renewal) -> Allocation:
    """Replace the allocation from renewal.t_start onward; keep the prefix."""
    if alloc.is_empty:
        if abs(renewal.t_start - alloc.established_at) > TIME_SLACK:
            raise ProtocolViolation(
                f"first renewal must start at establishment {alloc.established_at}, got {renewal.t_start}"
            )
        return Allocation(alloc.established_at, ((alloc.established_at, renewal),))
    last_start = alloc.segments[-1][0]
    if renewal.t_start < last_start - TIME_SLACK:
        raise ProtocolViolation(f"renewal start {renewal.t_start} precedes live segment start {last_start}")
    kept = tuple(seg for seg in alloc.segments if seg[0] < renewal.t_start - TIME_SLACK)
    return Allocation(alloc.established_at, kept + ((renewal.t_start, renewal),))


def query(alloc: Allocation, t: float) -> HalfSpace:
    if t < alloc.established_at - TIME_SLACK:
        raise ValueError(f"t={t} precedes allocation establishment at {alloc.established_at}")
    times, spaces = alloc.table
    if not times:
        raise ValueError("allocation has no renewal yet")
    k = bisect.bisect_right(times, t + TIME_SLACK) - 1
    return spaces[max(k, 0)]


def query_before(alloc: Allocation, t: float) -> HalfSpace:
    """Half space in force just before t (the left limit of ``query``)."""
    times, spaces = alloc.table
    if not times or t <= times[0] + TIME_SLACK:
        return query(alloc, t)
    k = bisect.bisect_left(times, t - TIME_SLACK) - 1
    return spaces[max(k, 0)]


def query_many(alloc: Allocation, times: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized ``query``: (normals, offsets) for each time."""
    ts = np.asarray(times, dtype=float)
    if ts.size and float(ts.min()) < alloc.established_at - TIME_SLACK:
        raise ValueError(f"t={float(ts.min())} precedes allocation establishment at {alloc.established_at}")
    stamp_times, normals, offsets = alloc.arrays
    idx = np.searchsorted(stamp_times, ts + TIME_SLACK, side="right") - 1
    idx = np.clip(idx, 0, len(stamp_times) - 1)
    return normals[idx], offsets[idx]
