"""Receding-horizon planning against pairwise allocations.

Each replanning solves a tracking problem over K knots spaced h apart:

    minimize   sum_k (x_k - x_target)' Q (x_k - x_target) h + sum_k u_k' P u_k h
    subject to dynamics, state/input bounds and half-space constraints

Half-space constraints keep the agent's body (plus an inflation margin) in
the allocation at every knot, at every time the allocation switches half
space inside the horizon, and at every later stamp for the final knot.
Since positions are linear between knots, that covers every instant.

Double integrators are solved as one convex QP. Unicycles and bicycles use a
short SQP: linearize about a reference rollout, solve the convex subproblem
inside a trust region, roll the inputs out through the true dynamics and keep
the best rollout that satisfies every constraint.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Deque, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np

from src.allocation import Allocation, inflation_margin, query, query_before, swept_body
from src.config import EPS_DYN, EPS_SEP, get_env, snap
from src.dynamics import (
    DynamicsModel,
    ModelKind,
    bound_violation,
    double_integrator_matrices,
    input_bounds,
    linearize,
    rollout,
    speed,
    wrap_angle,
)
from src.geometry import HalfSpace, Polygon, support_value
from src.trajectory import TIME_SLACK, Trajectory

if TYPE_CHECKING:
    from src.scenario import AgentConfig

logger = logging.getLogger(__name__)

DEFAULT_SOLVER = "CLARABEL"
DEFAULT_Q = np.diag([10.0, 10.0, 1.0, 1.0])
DEFAULT_P = np.eye(2)

# QP half-space rows require EPS_SEP + QP_SLACK
QP_SLACK = 1e-5
SQP_MAX_ITERATIONS = 5
SQP_MARGIN = 2e-3
SQP_TRUST_POSITION = 0.5
SQP_TRUST_HEADING = 0.5
SQP_CONVERGED = 1e-4
SQP_REL_IMPROVEMENT = 1e-3
# plans end at rest so the constant tail is an equilibrium
TERMINAL_SPEED_TOL = 1e-3


class SolverError(RuntimeError):
    """The numerical backend failed in a way that is not plain infeasibility."""


@dataclass(frozen=True)
class HalfSpaceConstraint:
    """Keep the body at knot-segment position (index, lam) inside half_space.

    The constrained point is (1 - lam) * p[index] + lam * p[index + 1].
    """

    neighbor: int
    kind: str  # "knot", "switch" or "terminal"
    index: int
    lam: float
    time: float
    half_space: HalfSpace
    support: float


@dataclass(frozen=True, eq=False)
class PlanningProblem:
    model: DynamicsModel
    footprint: Polygon
    h: float
    K: int
    Q: np.ndarray
    P: np.ndarray
    x0: np.ndarray
    t_n: float
    target: np.ndarray
    inflation: float
    constraints: Tuple[HalfSpaceConstraint, ...] = ()

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("planning horizon needs K >= 1")
        Q = np.asarray(self.Q, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if Q.shape != (4, 4) or P.shape != (2, 2):
            raise ValueError("Q must be 4x4 and P must be 2x2")
        if not np.allclose(Q, Q.T) or not np.allclose(P, P.T):
            raise ValueError("weight matrices must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("P must be positive definite")
        for c in self.constraints:
            if not 0 <= c.index <= self.K or not 0.0 <= c.lam < 1.0:
                raise ValueError(f"constraint position ({c.index}, {c.lam}) outside the horizon")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))

    @property
    def knot_times(self) -> np.ndarray:
        return self.t_n + self.h * np.arange(self.K + 1)

    def constraint_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(M, normals, bounds) with constraint rows normal . (M @ p) >= bound."""
        m = len(self.constraints)
        M = np.zeros((m, self.K + 1))
        normals = np.zeros((m, 2))
        bounds = np.zeros(m)
        for row, c in enumerate(self.constraints):
            M[row, c.index] += 1.0 - c.lam
            if c.lam > 0.0:
                M[row, c.index + 1] += c.lam
            normals[row] = c.half_space.normal
            bounds[row] = c.half_space.offset + c.support + self.inflation
        return M, normals, bounds

    def margins(self, knots: np.ndarray) -> np.ndarray:
        """Per-constraint clearance of a knot array; positive means satisfied."""
        if not self.constraints:
            return np.zeros(0)
        M, normals, bounds = self.constraint_arrays()
        points = M @ np.asarray(knots, dtype=float)[:, :2]
        return np.sum(normals * points, axis=1) - bounds

    def objective(self, knots: np.ndarray, controls: np.ndarray) -> float:
        dx = np.asarray(knots, dtype=float)[1:] - self.target
        u = np.asarray(controls, dtype=float)
        state_cost = np.einsum("ki,ij,kj->", dx, self.Q, dx)
        input_cost = np.einsum("ki,ij,kj->", u, self.P, u)
        return float((state_cost + input_cost) * self.h)


@dataclass(frozen=True, eq=False)
class Plan:
    trajectory: Trajectory
    controls: np.ndarray
    status: str
    iterations: int
    objective: float
    runtime_ms: float = 0.0
    min_margin: float = math.inf


@dataclass(frozen=True)
class Infeasible:
    reason: str
    status: str = "infeasible"
    iterations: int = 0
    runtime_ms: float = 0.0


SolveResult = Union[Plan, Infeasible]


def horizon_knots(horizon: float, h: float) -> int:
    return int(math.floor(horizon / h + 1e-9))


def _planning_target(model: DynamicsModel, x0: np.ndarray, target) -> np.ndarray:
    goal = np.asarray(target, dtype=float).copy()
    if model.has_heading:
        # unwrap relative to the start heading so the cost turns the short way
        goal[2] = x0[2] + wrap_angle(goal[2] - x0[2])
    return goal


def _segment_position(t_n: float, h: float, K: int, t: float) -> Tuple[int, float]:
    s = (t - t_n) / h
    index = int(math.floor(s + 1e-9))
    if index >= K:
        return K, 0.0
    lam = s - index
    return index, (0.0 if lam < 1e-9 else lam)


def build_problem(
    cfg: "AgentConfig",
    x0,
    t_n: float,
    allocations: Mapping[int, Allocation],
    target,
) -> PlanningProblem:
    x0 = np.asarray(x0, dtype=float)
    model = cfg.model
    h = cfg.h
    K = horizon_knots(cfg.horizon, h)
    body = swept_body(cfg.footprint, model.kind)
    t_end = snap(t_n + K * h)
    constraints: List[HalfSpaceConstraint] = []

    def add(neighbor: int, kind: str, t: float, half_space: HalfSpace) -> None:
        index, lam = _segment_position(t_n, h, K, t)
        normal = np.asarray(half_space.normal)
        constraints.append(
            HalfSpaceConstraint(neighbor, kind, index, lam, t, half_space, support_value(body, -normal))
        )

    for neighbor in sorted(allocations):
        alloc = allocations[neighbor]
        if alloc.is_empty:
            continue
        for k in range(1, K + 1):
            t_k = snap(t_n + k * h)
            add(neighbor, "knot", t_k, query(alloc, t_k))
        for tau in alloc.breakpoints(t_n, t_end):
            add(neighbor, "switch", tau, query_before(alloc, tau))
            if abs((tau - t_n) / h - round((tau - t_n) / h)) > 1e-9:
                add(neighbor, "switch", tau, query(alloc, tau))
        for tau in alloc.breakpoints(t_end):
            add(neighbor, "terminal", tau, query(alloc, tau))

    weights_q = getattr(cfg, "Q", None)
    weights_p = getattr(cfg, "P", None)
    return PlanningProblem(
        model=model,
        footprint=cfg.footprint,
        h=h,
        K=K,
        Q=DEFAULT_Q if weights_q is None else weights_q,
        P=DEFAULT_P if weights_p is None else weights_p,
        x0=x0,
        t_n=t_n,
        target=_planning_target(model, x0, target),
        inflation=inflation_margin(model, h),
        constraints=tuple(constraints),
    )


def _psd_factor(M: np.ndarray) -> np.ndarray:
    """F with F.T @ F == M for a symmetric PSD matrix."""
    w, V = np.linalg.eigh(M)
    if w.min() < -1e-9:
        raise SolverError(f"weight matrix is not positive semidefinite (eigenvalue {w.min():.3e})")
    return np.diag(np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _solver_name() -> str:
    return (get_env("ASTA_SOLVER", DEFAULT_SOLVER) or DEFAULT_SOLVER).upper()


def _base_program(problem: PlanningProblem, margin: float):
    K = problem.K
    X = cp.Variable((K + 1, 4))
    U = cp.Variable((K, 2))
    Fq = _psd_factor(problem.Q)
    Fp = _psd_factor(problem.P)
    goal = np.tile(problem.target, (K, 1))
    cost = problem.h * (cp.sum_squares((X[1:] - goal) @ Fq.T) + cp.sum_squares(U @ Fp.T))

    lo, hi = input_bounds(problem.model)
    cons = [X[0] == problem.x0, U >= np.tile(lo, (K, 1)), U <= np.tile(hi, (K, 1))]
    if problem.model.kind is ModelKind.DOUBLE_INTEGRATOR:
        cons += [cp.abs(X[1:, 2:]) <= problem.model.v_max, X[K, 2:] == 0.0]
    else:
        cons += [X[1:, 3] >= 0.0, X[1:, 3] <= problem.model.v_max, X[K, 3] == 0.0]
    if problem.constraints:
        M, normals, bounds = problem.constraint_arrays()
        points = M @ X[:, :2]
        cons.append(cp.sum(cp.multiply(normals, points), axis=1) >= bounds + margin)
    return X, U, cost, cons


def _run_program(cost, cons) -> cp.Problem:
    program = cp.Problem(cp.Minimize(cost), cons)
    try:
        program.solve(solver=_solver_name())
    except cp.error.SolverError as exc:
        raise SolverError(str(exc)) from exc
    return program


def _clip_controls(model: DynamicsModel, controls) -> np.ndarray:
    lo, hi = input_bounds(model)
    return np.clip(np.asarray(controls, dtype=float), lo, hi)


def _rollout_ok(problem: PlanningProblem, knots: np.ndarray) -> Tuple[bool, float]:
    margins = problem.margins(knots)
    low = float(margins.min()) if margins.size else math.inf
    in_bounds = all(bound_violation(problem.model, x) <= EPS_DYN for x in knots[1:])
    at_rest = speed(problem.model, knots[-1]) <= TERMINAL_SPEED_TOL
    return in_bounds and at_rest and low >= EPS_SEP, low


def _make_plan(problem, knots, controls, status, iterations, started, low) -> Plan:
    stored = knots.copy()
    if problem.model.has_heading:
        stored[:, 2] = [wrap_angle(theta) for theta in stored[:, 2]]
    traj = Trajectory(problem.t_n, problem.h, stored, problem.model.kind)
    return Plan(
        trajectory=traj,
        controls=controls,
        status=status,
        iterations=iterations,
        objective=problem.objective(knots, controls),
        runtime_ms=(time.perf_counter() - started) * 1e3,
        min_margin=low,
    )


def _solve_qp(problem: PlanningProblem, started: float) -> SolveResult:
    A, B = double_integrator_matrices(problem.h)
    X, U, cost, cons = _base_program(problem, EPS_SEP + QP_SLACK)
    cons.append(X[1:] == X[:-1] @ A.T + U @ B.T)
    program = _run_program(cost, cons)
    iterations = int(program.solver_stats.num_iters or 0)
    if program.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or U.value is None:
        return Infeasible(f"QP status {program.status}", program.status, iterations,
                          (time.perf_counter() - started) * 1e3)
    controls = _clip_controls(problem.model, U.value)
    knots = rollout(problem.model, problem.x0, controls, problem.h)
    ok, low = _rollout_ok(problem, knots)
    if not ok:
        return Infeasible(f"QP solution fails re-verification (margin {low:.3e})", "verification",
                          iterations, (time.perf_counter() - started) * 1e3)
    return _make_plan(problem, knots, controls, program.status, iterations, started, low)


def braking_controls(model: DynamicsModel, x0, K: int, h: float) -> np.ndarray:
    """Full braking with the wheel straight until the speed reaches zero."""
    controls = np.zeros((K, 2))
    v = float(np.asarray(x0, dtype=float)[3])
    for k in range(K):
        a = max(-model.a_max, -v / h)
        controls[k, 0] = a
        v = max(v + a * h, 0.0)
    return controls


def _linearized_dynamics(model: DynamicsModel, X, U, ref_x: np.ndarray, ref_u: np.ndarray, h: float) -> list:
    """x_{k+1} = x_next + A_k (x_k - ref_x_k) + B_k (u_k - ref_u_k), one constraint per state component."""
    K = len(ref_u)
    A = np.zeros((K, 4, 4))
    B = np.zeros((K, 4, 2))
    offset = np.zeros((K, 4))
    for k in range(K):
        A[k], B[k], x_next = linearize(model, ref_x[k], ref_u[k], h)
        offset[k] = x_next - A[k] @ ref_x[k] - B[k] @ ref_u[k]
    cons = []
    for i in range(4):
        terms = [cp.multiply(A[:, i, j], X[:-1, j]) for j in range(4) if np.any(A[:, i, j])]
        terms += [cp.multiply(B[:, i, j], U[:, j]) for j in range(2) if np.any(B[:, i, j])]
        # A_k is near identity, so terms is never empty
        cons.append(X[1:, i] == sum(terms[1:], terms[0]) + offset[:, i])
    return cons


def _solve_sqp(problem: PlanningProblem, warm_start: Optional[np.ndarray], started: float) -> SolveResult:
    K, h, model = problem.K, problem.h, problem.model
    references = [braking_controls(model, problem.x0, K, h)]
    if warm_start is not None and np.shape(warm_start) == (K, 2):
        references.insert(0, _clip_controls(model, warm_start))
    best: Optional[Tuple[float, np.ndarray, np.ndarray, float]] = None

    def consider(knots: np.ndarray, controls: np.ndarray, low: float) -> float:
        nonlocal best
        value = problem.objective(knots, controls)
        if best is None or value < best[0]:
            best = (value, knots, controls, low)
        return value

    # the references themselves are plans if they already fit
    for candidate in references:
        knots = rollout(model, problem.x0, candidate, h, wrap=False)
        ok, low = _rollout_ok(problem, knots)
        if ok:
            consider(knots, candidate, low)

    ref_u = references[0]
    restarted = len(references) == 1
    margin, trust = SQP_MARGIN, SQP_TRUST_POSITION
    last_status = "not_run"
    last_value = math.inf
    iterations = 0
    for iterations in range(1, SQP_MAX_ITERATIONS + 1):
        ref_x = rollout(model, problem.x0, ref_u, h, wrap=False)
        X, U, cost, cons = _base_program(problem, EPS_SEP + QP_SLACK + margin)
        cons += _linearized_dynamics(model, X, U, ref_x, ref_u, h)
        cons += [
            cp.abs(X[1:, :2] - ref_x[1:, :2]) <= trust,
            cp.abs(X[1:, 2] - ref_x[1:, 2]) <= SQP_TRUST_HEADING,
        ]
        program = _run_program(cost, cons)
        last_status = program.status
        if program.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or U.value is None:
            if restarted:
                break
            # the warm start led nowhere; linearize about the braking rollout instead
            ref_u, restarted = references[-1], True
            margin, trust = SQP_MARGIN, SQP_TRUST_POSITION
            continue
        controls = _clip_controls(model, U.value)
        knots = rollout(model, problem.x0, controls, h, wrap=False)
        ok, low = _rollout_ok(problem, knots)
        step_size = float(np.max(np.abs(controls - ref_u)))
        ref_u = controls
        if not ok:
            # linearization error ate the margin
            margin = 2.0 * margin + max(EPS_SEP - low, 0.0)
            trust *= 0.5
            continue
        value = consider(knots, controls, low)
        if step_size < SQP_CONVERGED or last_value - value < SQP_REL_IMPROVEMENT * abs(value):
            break
        last_value = value

    if best is None:
        return Infeasible(f"SQP found no admissible rollout (last status {last_status})", last_status,
                          iterations, (time.perf_counter() - started) * 1e3)
    _, knots, controls, low = best
    return _make_plan(problem, knots, controls, "optimal", iterations, started, low)


def solve(problem: PlanningProblem, warm_start: Optional[np.ndarray] = None) -> SolveResult:
    """Plan for ``problem`` or report Infeasible; raises SolverError on backend failure."""
    started = time.perf_counter()
    if problem.model.kind is ModelKind.DOUBLE_INTEGRATOR:
        result = _solve_qp(problem, started)
    else:
        result = _solve_sqp(problem, warm_start, started)
    if isinstance(result, Infeasible):
        logger.info("Planning at t=%.6f infeasible: %s", problem.t_n, result.reason)
    else:
        logger.debug(
            "Planned at t=%.6f: objective %.4f, %d iterations, margin %.4f",
            problem.t_n, result.objective, result.iterations, result.min_margin,
        )
    return result


def shifted_controls(previous: Plan, t_n: float) -> np.ndarray:
    """Previous plan's inputs advanced to start at t_n, padded with zero input."""
    K = len(previous.controls)
    shift = max(int(round((t_n - previous.trajectory.start_time) / previous.trajectory.knot_dt)), 1)
    out = np.zeros((K, 2))
    if shift < K:
        out[: K - shift] = previous.controls[shift:]
    return out


def fallback(previous: Trajectory, now: float) -> Trajectory:
    """Keep following the previous committed trajectory."""
    if now < previous.start_time - TIME_SLACK:
        raise ValueError(f"fallback at t={now} precedes trajectory start {previous.start_time}")
    return previous


@dataclass(frozen=True)
class DeadlockParams:
    window: float = 1.0
    min_speed: float = 0.1
    min_distance: float = 0.3
    angle: float = math.pi / 3
    radius: float = 1.5
    # once rotated, keep rotating for this long
    hold: float = 1.0
    front_angle: float = math.pi / 6
    closing_speed: float = 0.3


def deadlock_adjust(
    state,
    target,
    neighbor_positions: Sequence[Sequence[float]],
    mean_speed: Optional[float],
    params: DeadlockParams = DeadlockParams(),
) -> np.ndarray:
    """Rotate the target about the agent when it is stuck near a neighbor."""
    goal = np.asarray(target, dtype=float).copy()
    pos = np.asarray(state, dtype=float)[:2]
    offset = goal[:2] - pos
    if mean_speed is None or mean_speed >= params.min_speed:
        return goal
    if float(np.linalg.norm(offset)) <= params.min_distance:
        return goal
    near = [p for p in neighbor_positions if float(np.linalg.norm(np.asarray(p) - pos)) <= params.radius]
    if not near:
        return goal
    c, s = math.cos(params.angle), math.sin(params.angle)
    goal[:2] = pos + np.array([c * offset[0] - s * offset[1], s * offset[0] + c * offset[1]])
    return goal


def head_on(
    position,
    velocity,
    target,
    neighbors: Sequence[Tuple[Sequence[float], Sequence[float]]],
    params: DeadlockParams = DeadlockParams(),
) -> bool:
    """True if a neighbor sits between us and the target and we are closing in on it.

    ``neighbors`` holds (position, velocity) pairs. Two agents driving
    nose to nose end up blocking each other for good (bicycles can't back
    up), so this catches them before they stop.
    """
    pos = np.asarray(position, dtype=float)[:2]
    heading = np.asarray(target, dtype=float)[:2] - pos
    span = float(np.linalg.norm(heading))
    if span <= params.min_distance:
        return False
    heading /= span
    own = np.asarray(velocity, dtype=float)
    for other, other_velocity in neighbors:
        d = np.asarray(other, dtype=float)[:2] - pos
        dist = float(np.linalg.norm(d))
        if dist <= 0.0 or dist > params.radius:
            continue
        d /= dist
        if float(d @ heading) < math.cos(params.front_angle):
            continue
        if float((own - np.asarray(other_velocity, dtype=float)) @ d) >= params.closing_speed:
            return True
    return False


@dataclass
class DeadlockMonitor:
    """Recent positions of one agent plus the current perturbation window."""

    params: DeadlockParams = field(default_factory=DeadlockParams)
    _history: Deque[Tuple[float, np.ndarray]] = field(default_factory=deque)
    _hold_until: Optional[float] = None

    def record(self, t: float, position) -> None:
        self._history.append((t, np.asarray(position, dtype=float)[:2].copy()))
        start = t - self.params.window
        while len(self._history) > 1 and self._history[1][0] <= start + TIME_SLACK:
            self._history.popleft()

    def mean_speed(self, now: float) -> Optional[float]:
        """Net displacement over the window divided by its length.

        Jittering in place doesn't count as moving.
        """
        if len(self._history) < 2 or self._history[0][0] > now - self.params.window + TIME_SLACK:
            return None
        (t0, p0), (t1, p1) = self._history[0], self._history[-1]
        return float(np.linalg.norm(p1 - p0)) / (t1 - t0)

    def holding(self, now: float) -> bool:
        return self._hold_until is not None and now < self._hold_until - TIME_SLACK

    def adjust(self, now: float, state, velocity, target, neighbors) -> np.ndarray:
        """Tracking target for the replanning started at ``now``.

        ``neighbors`` holds (position, velocity) pairs of agents we share an
        allocation with.
        """
        positions = [p for p, _ in neighbors]
        mean = self.mean_speed(now)
        if self.holding(now) or head_on(state, velocity, target, neighbors, self.params):
            mean = 0.0
        goal = deadlock_adjust(state, target, positions, mean, self.params)
        if not np.array_equal(goal, np.asarray(target, dtype=float)) and not self.holding(now):
            self._hold_until = now + self.params.hold
            logger.info("Deadlock suspected at t=%.3f; rotating target to %s", now, goal[:2].round(3).tolist())
        return goal


def constraint_counts(problem: PlanningProblem) -> Dict[str, int]:
    """Number of constraints of each kind, as logged with each plan."""
    counts = {"knot": 0, "switch": 0, "terminal": 0}
    for c in problem.constraints:
        counts[c.kind] += 1
    return counts
