"""The simulator: every agent runs the same replanning loop on its own clock.

The loop is commit a trajectory (FinishReplan), broadcast it, wait T_w,
start the next solve (StartReplan), commit its result T_c later. While an
agent waits it can renew allocations: when a neighbor's broadcast reaches it
and both are waiting, the pair agrees on new half spaces starting at the
later of their next finish times.

Time is counted in integer ticks and same-tick events always run in the same
order (finish, deliver, renewal, start, then agent ids), so scenario + seed
gives the same trace every time. Solves can go to a thread pool, results are
still applied in event order.
"""

from __future__ import annotations

import heapq
import logging
import math
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.allocation import (
    Allocation,
    ProtocolViolation,
    Renewal,
    RenewalFailure,
    inflation_margin,
    make_renewal,
    update,
)
from src.config import D_ARR, V_ARR, get_env_int, snap, to_seconds, to_ticks
from src.dynamics import speed, velocity
from src.geometry import polygons_intersect
from src.planner import (
    Infeasible,
    Plan,
    PlanningProblem,
    SolveResult,
    SolverError,
    DeadlockMonitor,
    build_problem,
    constraint_counts,
    fallback,
    shifted_controls,
    solve,
)
from src.scenario import AgentConfig, Scenario, ScenarioError, to_record
from src.trace_log import TraceLog, agent_subject, pair_subject
from src.trajectory import Trajectory, constant_trajectory

logger = logging.getLogger(__name__)

__all__ = [
    "AgentConfig",
    "Event",
    "EventKind",
    "PairSession",
    "Simulator",
    "bound_applies",
    "frequency_bound",
    "next_finish_time",
    "run",
]


class Phase(str, Enum):
    WAITING = "waiting"
    COMPUTING = "computing"


class EventKind(IntEnum):
    FINISH_REPLAN = 0
    MSG_DELIVER = 1
    RENEWAL_COMMIT = 2
    START_REPLAN = 3


@dataclass(order=True, frozen=True)
class Event:
    tick: int
    kind: EventKind
    agents: Tuple[int, ...]
    seq: int
    payload: Any = field(default=None, compare=False)

    @property
    def time(self) -> float:
        return to_seconds(self.tick)


@dataclass(frozen=True)
class Broadcast:
    """A committed trajectory as sent; all times are in the sender's clock."""

    sender: int
    finish_index: int
    sent_local: float
    next_finish_local: float
    trajectory: Trajectory


@dataclass
class PairSession:
    pair: Tuple[int, int]
    established_at: float
    m: int = 0
    intervals: List[float] = field(default_factory=list)
    last_commit: Optional[float] = None
    pending_tick: Optional[int] = None

    def record_commit(self, now: float) -> None:
        if self.last_commit is not None:
            self.intervals.append(snap(now - self.last_commit))
        self.last_commit = now
        self.m += 1


@dataclass
class AgentRuntime:
    cfg: AgentConfig
    committed: Trajectory
    phase: Phase = Phase.WAITING
    finish_index: int = -1
    next_finish: float = 0.0
    last_plan: Optional[Plan] = None
    pending: Optional[SolveResult] = None
    allocations: Dict[int, Allocation] = field(default_factory=dict)
    rel_offset: Dict[int, float] = field(default_factory=dict)
    monitor: DeadlockMonitor = field(default_factory=DeadlockMonitor)
    arrived: bool = False

    @property
    def agent_id(self) -> int:
        return self.cfg.agent_id

    def local(self, t: float) -> float:
        return snap(t + self.cfg.clock_offset)

    def to_global(self, t_local: float) -> float:
        return snap(t_local - self.cfg.clock_offset)

    def state_at(self, t: float) -> np.ndarray:
        return self.committed.sample(t)

    def position_at(self, t: float) -> np.ndarray:
        return self.state_at(t)[:2]

    def shape_at(self, t: float):
        return self.committed.shape_at(self.cfg.footprint, t)

    def is_arrived(self, t: float) -> bool:
        x = self.state_at(t)
        gap = float(np.linalg.norm(x[:2] - self.cfg.target[:2]))
        return gap < D_ARR and speed(self.cfg.model, x) < V_ARR


def next_finish_time(cfg: AgentConfig, last_finish: float) -> float:
    return snap(last_finish + cfg.T_w + cfg.T_c)


def frequency_bound(cfg_i: AgentConfig, cfg_j: AgentConfig) -> float:
    """Longest possible gap between two renewals of the pair."""
    return min(cfg_i.T_c, cfg_j.T_c) + max(cfg_i.T_c + cfg_i.T_w, cfg_j.T_c + cfg_j.T_w)


def bound_applies(cfg_i: AgentConfig, cfg_j: AgentConfig) -> bool:
    """True when each agent waits longer than the other computes.

    Only then is every gap between renewals capped by ``frequency_bound``.
    """
    return cfg_i.T_w > cfg_j.T_c and cfg_j.T_w > cfg_i.T_c


class Simulator:
    def __init__(
        self,
        scenario: Scenario,
        seed: Optional[int] = None,
        t_max: Optional[float] = None,
        delay: Optional[float] = None,
        jitter: Optional[float] = None,
        workers: Optional[int] = None,
        real_time: bool = False,
        record_wall_clock: bool = False,
    ) -> None:
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.t_max = scenario.t_max if t_max is None else t_max
        self.delay = snap(scenario.delay if delay is None else delay)
        self.jitter = scenario.jitter if jitter is None else jitter
        self.workers = max(1, workers if workers is not None else get_env_int("ASTA_WORKERS", 1))
        self.real_time = real_time
        self.record_wall_clock = record_wall_clock or real_time
        self.rng = random.Random(self.seed)
        self.trace = TraceLog()
        self.sessions: Dict[Tuple[int, int], PairSession] = {}
        self.agents: Dict[int, AgentRuntime] = {}
        self._queue: List[Event] = []
        self._seq = 0
        self.now = 0.0
        self.timeout = False

        for cfg in sorted(scenario.agents, key=lambda a: a.agent_id):
            agent = AgentRuntime(cfg, constant_trajectory(cfg.model, cfg.initial_state, 0.0))
            agent.next_finish = cfg.start_time
            self.agents[cfg.agent_id] = agent
            self._push(cfg.start_time, EventKind.FINISH_REPLAN, (cfg.agent_id,), 0)

        self.trace.add(
            0.0,
            "run",
            "meta",
            scenario=to_record(scenario),
            seed=self.seed,
            t_max=self.t_max,
            delay=self.delay,
            jitter=self.jitter,
            real_time=self.real_time,
        )

    # event queue

    def _push(self, t: float, kind: EventKind, agents: Tuple[int, ...], payload: Any = None) -> Event:
        event = Event(to_ticks(t), kind, agents, self._seq, payload)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def _pop_starts(self, first: Event) -> List[Event]:
        batch = [first]
        while self._queue and self._queue[0].tick == first.tick and self._queue[0].kind is EventKind.START_REPLAN:
            batch.append(heapq.heappop(self._queue))
        return batch

    # geometry helpers

    def _pair(self, i: int, j: int) -> Tuple[int, int]:
        return (i, j) if i < j else (j, i)

    def _within_radius(self, i: int, j: int, t: float) -> bool:
        a, b = self.agents[i], self.agents[j]
        radius = min(a.cfg.comm_radius, b.cfg.comm_radius)
        if math.isinf(radius):
            return True
        return float(np.linalg.norm(a.position_at(t) - b.position_at(t))) <= radius

    def _violation(self, subject: str, reason: str, **payload: Any) -> None:
        logger.warning("Protocol violation at t=%.6f (%s): %s", self.now, subject, reason)
        self.trace.add(self.now, subject, "violation", reason=reason, **payload)

    # sessions and renewals

    def establish_session(self, i: int, j: int, now: float) -> PairSession:
        """Open a session and commit its first renewal starting right now."""
        lo, hi = self._pair(i, j)
        if (lo, hi) in self.sessions:
            raise ProtocolViolation(f"pair {lo}-{hi} already has a session")
        a, b = self.agents[lo], self.agents[hi]
        if polygons_intersect(a.shape_at(now), b.shape_at(now)):
            raise ScenarioError(
                f"agents {lo} and {hi} overlap when establishing communication at t={now:.6f}; "
                "they must be collision-free at that moment"
            )
        t_settle = snap(max(a.committed.end_time, b.committed.end_time, now))
        dt_alloc = min(a.cfg.h, b.cfg.h)
        renewal = make_renewal(
            a.committed,
            a.cfg.footprint,
            b.committed,
            b.cfg.footprint,
            now,
            t_settle,
            dt_alloc,
            grid_origin=now,
            margin_i=inflation_margin(a.cfg.model, a.cfg.h),
            margin_j=inflation_margin(b.cfg.model, b.cfg.h),
        )
        session = PairSession((lo, hi), now)
        self.sessions[(lo, hi)] = session
        # relative clock offset from one two-way exchange of local readings
        a.rel_offset[hi] = snap(b.local(now) - a.local(now))
        b.rel_offset[lo] = snap(a.local(now) - b.local(now))
        a.allocations[hi] = update(Allocation(now), renewal)
        b.allocations[lo] = update(Allocation(now), renewal.mirrored())
        session.record_commit(now)
        self.trace.add(now, pair_subject(lo, hi), "session", established_at=now)
        self._trace_renewal(now, session, renewal, trigger=i)
        logger.debug("Session %d-%d established at t=%.6f", lo, hi, now)
        return session

    def _trace_renewal(self, now: float, session: PairSession, renewal: Renewal, trigger: int) -> None:
        self.trace.add(
            now,
            pair_subject(*session.pair),
            "renewal",
            m=session.m,
            trigger=trigger,
            **renewal.to_record(),
        )

    def try_renewal(
        self,
        finisher: int,
        other: int,
        now: float,
        finisher_traj: Optional[Trajectory] = None,
        finisher_next: Optional[float] = None,
    ) -> Optional[Renewal]:
        """Commit a renewal if both agents are waiting; None otherwise."""
        lo, hi = self._pair(finisher, other)
        session = self.sessions.get((lo, hi))
        if session is None:
            return None
        f, o = self.agents[finisher], self.agents[other]
        if f.phase is not Phase.WAITING or o.phase is not Phase.WAITING:
            logger.debug("No renewal for %d-%d at t=%.6f: not both waiting", lo, hi, now)
            return None
        if session.last_commit is not None and to_ticks(session.last_commit) == to_ticks(now):
            return None
        traj_f = finisher_traj if finisher_traj is not None else f.committed
        next_f = finisher_next if finisher_next is not None else f.next_finish
        t_start = snap(max(next_f, o.next_finish))
        trajs = {finisher: traj_f, other: o.committed}
        t_settle = snap(max(traj_f.end_time, o.committed.end_time, t_start))
        a, b = self.agents[lo], self.agents[hi]
        current = a.allocations[hi]
        try:
            renewal = make_renewal(
                trajs[lo],
                a.cfg.footprint,
                trajs[hi],
                b.cfg.footprint,
                t_start,
                t_settle,
                min(a.cfg.h, b.cfg.h),
                grid_origin=session.established_at,
                extra_stamps=current.breakpoints(t_start, t_settle),
                margin_i=inflation_margin(a.cfg.model, a.cfg.h),
                margin_j=inflation_margin(b.cfg.model, b.cfg.h),
            )
            updated_lo = update(current, renewal)
            updated_hi = update(b.allocations[lo], renewal.mirrored())
        except RenewalFailure as exc:
            self._violation(pair_subject(lo, hi), "renewal_failure", stamp=exc.stamp, detail=str(exc))
            return None
        except ProtocolViolation as exc:
            self._violation(pair_subject(lo, hi), "out_of_order_renewal", detail=str(exc))
            return None
        a.allocations[hi] = updated_lo
        b.allocations[lo] = updated_hi
        session.record_commit(now)
        self._trace_renewal(now, session, renewal, trigger=finisher)
        return renewal

    # event handlers

    def _broadcast(self, agent: AgentRuntime, now: float) -> None:
        message = Broadcast(
            sender=agent.agent_id,
            finish_index=agent.finish_index,
            sent_local=agent.local(now),
            next_finish_local=agent.local(agent.next_finish),
            trajectory=agent.committed.shifted(agent.cfg.clock_offset),
        )
        for other in self.agents:
            if other == agent.agent_id:
                continue
            lag = self.delay + (self.jitter * self.rng.random() if self.jitter > 0 else 0.0)
            self._push(snap(now + lag), EventKind.MSG_DELIVER, (agent.agent_id, other), message)

    def _on_finish(self, event: Event) -> None:
        i, n = event.agents[0], event.payload
        agent = self.agents[i]
        now = self.now
        extra: Dict[str, Any] = {}
        if n == 0:
            status = "init"
        else:
            result = agent.pending
            agent.pending = None
            if isinstance(result, Plan):
                agent.committed = result.trajectory
                agent.last_plan = result
                status = "planned"
                extra.update(iterations=result.iterations, objective=result.objective)
                if self.record_wall_clock:
                    extra["runtime_ms"] = round(result.runtime_ms, 3)
            else:
                agent.committed = fallback(agent.committed, now)
                status = "fallback"
                if result is not None:
                    extra.update(reason=result.reason, solver_status=result.status, iterations=result.iterations)
                    if self.record_wall_clock:
                        extra["runtime_ms"] = round(result.runtime_ms, 3)
                logger.info("Agent %d falls back at t=%.6f", i, now)
        agent.finish_index = n
        agent.phase = Phase.WAITING
        agent.next_finish = next_finish_time(agent.cfg, now)
        self._push(snap(now + agent.cfg.T_w), EventKind.START_REPLAN, (i,), n + 1)
        self.trace.add(
            now,
            agent_subject(i),
            "commit",
            n=n,
            status=status,
            local=agent.local(now),
            state=agent.state_at(now),
            trajectory=agent.committed.to_record(),
            **extra,
        )
        self._broadcast(agent, now)
        if not agent.arrived and agent.is_arrived(now):
            agent.arrived = True
            self.trace.add(now, agent_subject(i), "arrive", local=agent.local(now))
            logger.info("Agent %d arrived at t=%.6f", i, now)

    def _on_deliver(self, event: Event) -> None:
        sender_id, receiver_id = event.agents
        message: Broadcast = event.payload
        sender, receiver = self.agents[sender_id], self.agents[receiver_id]
        now = self.now
        if receiver.phase is not Phase.WAITING:
            logger.debug("Agent %d busy when %d's trajectory arrived", receiver_id, sender_id)
            return
        if sender.phase is not Phase.WAITING or sender.finish_index != message.finish_index:
            return
        pair = self._pair(sender_id, receiver_id)
        session = self.sessions.get(pair)
        if session is None:
            if self._within_radius(sender_id, receiver_id, now):
                self._establish_or_report(receiver_id, sender_id, now)
            return
        if session.pending_tick == event.tick or (
            session.last_commit is not None and to_ticks(session.last_commit) == event.tick
        ):
            return
        # bring the sender's times into the receiver's clock, then to simulation time
        rel = receiver.rel_offset[sender_id]
        finisher_next = receiver.to_global(snap(message.next_finish_local - rel))
        finisher_traj = message.trajectory.shifted(-rel - receiver.cfg.clock_offset)
        session.pending_tick = event.tick
        self._push(now, EventKind.RENEWAL_COMMIT, pair, (sender_id, finisher_traj, finisher_next))

    def _on_renewal(self, event: Event) -> None:
        session = self.sessions[event.agents]
        session.pending_tick = None
        finisher, traj, next_finish = event.payload
        other = event.agents[1] if event.agents[0] == finisher else event.agents[0]
        self.try_renewal(finisher, other, self.now, traj, next_finish)

    def _establish_or_report(self, i: int, j: int, now: float) -> None:
        try:
            self.establish_session(i, j, now)
        except RenewalFailure as exc:
            lo, hi = self._pair(i, j)
            self._violation(pair_subject(lo, hi), "establish_failure", stamp=exc.stamp, detail=str(exc))
        except ScenarioError:
            if now <= 0.0:
                raise
            lo, hi = self._pair(i, j)
            self._violation(pair_subject(lo, hi), "overlap_at_establishment")

    def _prepare_start(self, event: Event) -> Tuple[AgentRuntime, PlanningProblem, Optional[np.ndarray]]:
        i, n = event.agents[0], event.payload
        agent = self.agents[i]
        now = self.now
        for j in self.agents:
            if j == i or self._pair(i, j) in self.sessions:
                continue
            if self.agents[j].phase is Phase.WAITING and self._within_radius(i, j, now):
                self._establish_or_report(i, j, now)
        t_n = agent.next_finish
        x0 = agent.state_at(t_n)
        here = agent.state_at(now)
        agent.monitor.record(now, here[:2])
        neighbors = [
            (self.agents[j].position_at(now), velocity(self.agents[j].cfg.model, self.agents[j].state_at(now)))
            for j in sorted(agent.allocations)
        ]
        own_velocity = velocity(agent.cfg.model, here)
        target = agent.monitor.adjust(now, here, own_velocity, agent.cfg.target, neighbors)
        problem = build_problem(agent.cfg, x0, t_n, agent.allocations, target)
        warm = shifted_controls(agent.last_plan, t_n) if agent.last_plan is not None else None
        agent.phase = Phase.COMPUTING
        self._push(t_n, EventKind.FINISH_REPLAN, (i,), n)
        perturbed = not np.array_equal(target, agent.cfg.target)
        self.trace.add(
            now,
            agent_subject(i),
            "start",
            n=n,
            local=agent.local(now),
            t_n=t_n,
            deadlock=perturbed,
            constraints=constraint_counts(problem),
        )
        return agent, problem, warm

    def _solve_one(self, job: Tuple[AgentRuntime, PlanningProblem, Optional[np.ndarray]]) -> SolveResult:
        agent, problem, warm = job
        started = time.perf_counter()
        try:
            result = solve(problem, warm)
        except SolverError as exc:
            logger.warning("Solver error for agent %d at t=%.6f: %s", agent.agent_id, problem.t_n, exc)
            return Infeasible(str(exc), "solver_error", 0, (time.perf_counter() - started) * 1e3)
        if self.real_time and result.runtime_ms > agent.cfg.T_c * 1e3:
            return Infeasible(
                f"solve took {result.runtime_ms:.1f} ms, over the {agent.cfg.T_c * 1e3:.0f} ms budget",
                "overrun",
                result.iterations,
                result.runtime_ms,
            )
        return result

    def _on_starts(self, events: Sequence[Event], pool: Optional[ThreadPoolExecutor]) -> None:
        jobs = [self._prepare_start(e) for e in events]
        if pool is not None and len(jobs) > 1:
            results = list(pool.map(self._solve_one, jobs))
        else:
            results = [self._solve_one(job) for job in jobs]
        for (agent, _, _), result in zip(jobs, results):
            agent.pending = result

    def _all_arrived(self, now: float) -> bool:
        return all(a.finish_index >= 0 and a.is_arrived(now) for a in self.agents.values())

    # main loop

    def run(self) -> TraceLog:
        limit = to_ticks(self.t_max)
        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        logger.info(
            "Running %s: %d agents, seed %d, t_max %.1f s, %d worker(s)",
            self.scenario.name, len(self.agents), self.seed, self.t_max, self.workers,
        )
        try:
            done = False
            while self._queue and not done:
                event = heapq.heappop(self._queue)
                if event.tick > limit:
                    self.timeout = True
                    self.now = self.t_max
                    break
                self.now = event.time
                if event.kind is EventKind.FINISH_REPLAN:
                    self._on_finish(event)
                    nxt = self._queue[0] if self._queue else None
                    if (nxt is None or nxt.tick != event.tick or nxt.kind is not EventKind.FINISH_REPLAN) and (
                        self._all_arrived(self.now)
                    ):
                        done = True
                elif event.kind is EventKind.MSG_DELIVER:
                    self._on_deliver(event)
                elif event.kind is EventKind.RENEWAL_COMMIT:
                    self._on_renewal(event)
                else:
                    self._on_starts(self._pop_starts(event), pool)
        finally:
            if pool is not None:
                pool.shutdown()

        arrived = sorted(i for i, a in self.agents.items() if a.arrived)
        renewals = sum(s.m for s in self.sessions.values())
        self.trace.add(
            self.now,
            "run",
            "end",
            timeout=self.timeout,
            arrived=arrived,
            renewals=renewals,
            violations=len(self.trace.of_kind("violation")),
        )
        if self.timeout:
            logger.warning("Run hit t_max=%.1f s before every agent arrived", self.t_max)
        logger.info("Finished at t=%.3f with %d renewals", self.now, renewals)
        return self.trace


def run(
    scenario: Scenario,
    seed: Optional[int] = None,
    t_max: Optional[float] = None,
    delay: Optional[float] = None,
    jitter: Optional[float] = None,
    workers: Optional[int] = None,
    real_time: bool = False,
    record_wall_clock: bool = False,
) -> TraceLog:
    """Simulate ``scenario`` and return its trace; a timeout is flagged in the end record."""
    sim = Simulator(scenario, seed, t_max, delay, jitter, workers, real_time, record_wall_clock)
    return sim.run()
