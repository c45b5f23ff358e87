"""Scenario files (YAML): agent configs plus run settings.

The fields are listed in data/schema.txt. Loading is strict: unknown keys,
missing keys or broken invariants all raise ScenarioError with the file and
field in the message.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from src.config import DT_CHECK, SCENARIO_DIR, snap
from src.dynamics import DynamicsModel, ModelKind, is_equilibrium
from src.geometry import Polygon, polygons_intersect, regular_polygon, transform_footprint
from src.planner import DEFAULT_P, DEFAULT_Q, horizon_knots

logger = logging.getLogger(__name__)

DISK_FOOTPRINT_SIDES = 12


class ScenarioError(ValueError):
    def __init__(self, message: str, path: Optional[Path] = None, field_name: Optional[str] = None) -> None:
        where = []
        if path is not None:
            where.append(str(path))
        if field_name is not None:
            where.append(field_name)
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")
        self.path = path
        self.field = field_name


def disk_footprint(radius: float) -> Polygon:
    """Polygon containing the disk of ``radius`` around the body origin."""
    return regular_polygon(radius, DISK_FOOTPRINT_SIDES, circumscribe=True)


@dataclass(frozen=True, eq=False)
class AgentConfig:
    agent_id: int
    model: DynamicsModel
    footprint: Polygon
    T_c: float
    T_w: float
    h: float
    horizon: float
    target: np.ndarray
    initial_state: np.ndarray
    clock_offset: float = 0.0
    comm_radius: float = math.inf
    start_time: float = 0.0
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    P: np.ndarray = field(default_factory=lambda: DEFAULT_P.copy())

    def __post_init__(self) -> None:
        if self.T_c <= 0:
            raise ValueError(f"agent {self.agent_id}: T_c must be positive")
        if self.T_w <= self.T_c:
            raise ValueError(
                f"agent {self.agent_id}: waiting time T_w={self.T_w} must exceed computation time T_c={self.T_c}"
            )
        if self.h <= 0:
            raise ValueError(f"agent {self.agent_id}: sampling time h must be positive")
        if self.horizon < self.h:
            raise ValueError(f"agent {self.agent_id}: horizon must be at least one sampling time")
        if self.comm_radius <= 0:
            raise ValueError(f"agent {self.agent_id}: comm_radius must be positive")
        if self.start_time < 0:
            raise ValueError(f"agent {self.agent_id}: start_time must be non-negative")
        state = np.array(self.initial_state, dtype=float)
        goal = np.array(self.target, dtype=float)
        if state.shape != (4,) or goal.shape != (4,):
            raise ValueError(f"agent {self.agent_id}: states must have 4 components")
        if not is_equilibrium(self.model, state):
            raise ValueError(f"agent {self.agent_id}: initial state must be at rest")
        state.setflags(write=False)
        goal.setflags(write=False)
        object.__setattr__(self, "initial_state", state)
        object.__setattr__(self, "target", goal)
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        # offsets and cadences live on the virtual-time lattice
        for name in ("T_c", "T_w", "h", "clock_offset", "start_time"):
            object.__setattr__(self, name, snap(getattr(self, name)))

    @property
    def K(self) -> int:
        return horizon_knots(self.horizon, self.h)

    @property
    def cycle(self) -> float:
        return self.T_c + self.T_w

    def initial_shape(self) -> Polygon:
        heading = float(self.initial_state[2]) if self.model.has_heading else 0.0
        return transform_footprint(self.footprint, self.initial_state[:2], heading)


@dataclass(frozen=True)
class Scenario:
    name: str
    agents: Tuple[AgentConfig, ...]
    t_max: float = 60.0
    dt_check: float = DT_CHECK
    delay: float = 0.0
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"agent ids must be unique, got {ids}", field_name="agents")
        if self.t_max <= 0 or self.dt_check <= 0:
            raise ScenarioError("t_max and dt_check must be positive")
        if self.delay < 0 or self.jitter < 0:
            raise ScenarioError("message delay and jitter must be non-negative", field_name="delay")
        for a, b in combinations(self.agents, 2):
            if polygons_intersect(a.initial_shape(), b.initial_shape()):
                raise ScenarioError(
                    f"initial shapes of agents {a.agent_id} and {b.agent_id} intersect; "
                    "agents must start collision-free",
                    field_name="agents",
                )

    def agent(self, agent_id: int) -> AgentConfig:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def agent_ids(self) -> List[int]:
        return sorted(a.agent_id for a in self.agents)


SCENARIO_KEYS = {"name", "t_max", "dt_check", "delay", "jitter", "seed", "defaults", "agents"}
AGENT_KEYS = {
    "id", "model", "v_max", "a_max", "omega_max", "delta_max", "wheelbase", "footprint",
    "T_c", "T_w", "h", "horizon", "start", "target", "clock_offset", "comm_radius",
    "start_time", "weights",
}
AGENT_REQUIRED = {"id", "model", "v_max", "a_max", "footprint", "T_c", "T_w", "h", "horizon", "start", "target"}


def _check_keys(block: Mapping[str, Any], allowed: set, path: Optional[Path], where: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ScenarioError(f"unknown field(s) {unknown}", path, where)


def _parse_footprint(raw: Any, path: Optional[Path], where: str) -> Polygon:
    if not isinstance(raw, Mapping) or len(raw) != 1:
        raise ScenarioError("footprint must be {disk: radius} or {vertices: [[x, y], ...]}", path, where)
    try:
        if "disk" in raw:
            return disk_footprint(float(raw["disk"]))
        if "vertices" in raw:
            return Polygon(np.array(raw["vertices"], dtype=float))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc), path, where) from None
    raise ScenarioError(f"unknown footprint kind {sorted(raw)}", path, where)


def _pose(raw: Any, kind: ModelKind, path: Optional[Path], where: str) -> np.ndarray:
    """[x, y] or [x, y, heading] as a rest state of the model."""
    try:
        values = [float(v) for v in raw]
    except TypeError:
        raise ScenarioError("pose must be a list [x, y] or [x, y, heading]", path, where) from None
    if len(values) not in (2, 3):
        raise ScenarioError("pose must be a list [x, y] or [x, y, heading]", path, where)
    heading = values[2] if len(values) == 3 else 0.0
    if kind is ModelKind.DOUBLE_INTEGRATOR:
        if len(values) == 3:
            raise ScenarioError("double integrators have no heading", path, where)
        return np.array([values[0], values[1], 0.0, 0.0])
    return np.array([values[0], values[1], heading, 0.0])


def _parse_agent(raw: Any, defaults: Mapping[str, Any], path: Optional[Path], index: int) -> AgentConfig:
    where = f"agents[{index}]"
    if not isinstance(raw, Mapping):
        raise ScenarioError("agent entry must be a mapping", path, where)
    block = {**defaults, **raw}
    _check_keys(block, AGENT_KEYS, path, where)
    missing = sorted(AGENT_REQUIRED - set(block))
    if missing:
        raise ScenarioError(f"missing required field(s) {missing}", path, where)
    try:
        kind = ModelKind(block["model"])
    except ValueError:
        raise ScenarioError(f"unknown model {block['model']!r}", path, f"{where}.model") from None
    try:
        model = DynamicsModel(
            kind,
            float(block["v_max"]),
            float(block["a_max"]),
            omega_max=block.get("omega_max"),
            delta_max=block.get("delta_max"),
            wheelbase=block.get("wheelbase"),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc), path, f"{where}.model") from None
    weights = block.get("weights") or {}
    _check_keys(weights, {"Q", "P"}, path, f"{where}.weights")
    T_c, T_w = float(block["T_c"]), float(block["T_w"])
    if T_w <= T_c:
        raise ScenarioError(
            f"waiting time T_w={T_w} must exceed computation time T_c={T_c} (T_w > T_c)",
            path,
            f"{where}.T_w",
        )
    try:
        return AgentConfig(
            agent_id=int(block["id"]),
            model=model,
            footprint=_parse_footprint(block["footprint"], path, f"{where}.footprint"),
            T_c=T_c,
            T_w=T_w,
            h=float(block["h"]),
            horizon=float(block["horizon"]),
            target=_pose(block["target"], kind, path, f"{where}.target"),
            initial_state=_pose(block["start"], kind, path, f"{where}.start"),
            clock_offset=float(block.get("clock_offset", 0.0)),
            comm_radius=float(block.get("comm_radius", math.inf)),
            start_time=float(block.get("start_time", 0.0)),
            Q=np.diag(weights["Q"]) if "Q" in weights else DEFAULT_Q.copy(),
            P=np.diag(weights["P"]) if "P" in weights else DEFAULT_P.copy(),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(str(exc), path, where) from None


def parse_scenario(data: Any, path: Optional[Path] = None) -> Scenario:
    if not isinstance(data, Mapping):
        raise ScenarioError("scenario must be a mapping", path)
    _check_keys(data, SCENARIO_KEYS, path, "scenario")
    agents = data.get("agents")
    if not isinstance(agents, list) or not agents:
        raise ScenarioError("at least one agent is required", path, "agents")
    defaults = data.get("defaults") or {}
    _check_keys(defaults, AGENT_KEYS - {"id", "start", "target"}, path, "defaults")
    configs = tuple(_parse_agent(raw, defaults, path, k) for k, raw in enumerate(agents))
    try:
        return Scenario(
            name=str(data.get("name", path.stem if path else "scenario")),
            agents=configs,
            t_max=float(data.get("t_max", 60.0)),
            dt_check=float(data.get("dt_check", DT_CHECK)),
            delay=float(data.get("delay", 0.0)),
            jitter=float(data.get("jitter", 0.0)),
            seed=int(data.get("seed", 0)),
        )
    except ScenarioError as exc:
        raise ScenarioError(str(exc), path) from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        candidate = SCENARIO_DIR / f"{path.name}.yaml"
        if path.suffix or not candidate.exists():
            raise FileNotFoundError(f"Scenario not found at {path}")
        path = candidate
    with path.open(encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = f"line {mark.line + 1}" if mark is not None else None
            raise ScenarioError(f"YAML parse error: {getattr(exc, 'problem', exc)}", path, line) from None
    scenario = parse_scenario(data, path)
    logger.info("Loaded scenario %s with %d agents from %s", scenario.name, len(scenario.agents), path)
    return scenario


def antipodal_scenario(
    models: Sequence[Tuple[str, float, float, float]],
    diameter: float = 4.0,
    footprint_radius: float = 0.2,
    h: float = 0.15,
    horizon: float = 3.0,
    t_max: float = 40.0,
) -> Scenario:
    """Agents evenly spaced on a circle, each heading for the opposite point.

    ``models`` lists (model kind, v_max, T_c, T_w) per agent.
    """
    n = len(models)
    agents = []
    for k, (kind, v_max, T_c, T_w) in enumerate(models):
        angle = 2.0 * math.pi * k / n
        start = 0.5 * diameter * np.array([math.cos(angle), math.sin(angle)])
        goal = -start
        heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
        model = _default_model(ModelKind(kind), v_max)
        if model.has_heading:
            x0 = np.array([start[0], start[1], heading, 0.0])
            xt = np.array([goal[0], goal[1], heading, 0.0])
        else:
            x0 = np.array([start[0], start[1], 0.0, 0.0])
            xt = np.array([goal[0], goal[1], 0.0, 0.0])
        agents.append(
            AgentConfig(k + 1, model, disk_footprint(footprint_radius), T_c, T_w, h, horizon, xt, x0)
        )
    return Scenario(f"antipodal{n}", tuple(agents), t_max=t_max)


def _default_model(kind: ModelKind, v_max: float) -> DynamicsModel:
    if kind is ModelKind.UNICYCLE:
        return DynamicsModel(kind, v_max, 1.5, omega_max=1.5)
    if kind is ModelKind.BICYCLE:
        return DynamicsModel(kind, v_max, 1.5, delta_max=0.6, wheelbase=0.25)
    return DynamicsModel(kind, v_max, 1.5)


def _spread_points(rng: random.Random, count: int, half_width: float, min_gap: float) -> List[np.ndarray]:
    points: List[np.ndarray] = []
    attempts = 0
    while len(points) < count:
        attempts += 1
        if attempts > 10_000:
            raise ScenarioError(f"could not place {count} agents {min_gap} m apart")
        p = np.array([rng.uniform(-half_width, half_width), rng.uniform(-half_width, half_width)])
        if all(np.linalg.norm(p - q) >= min_gap for q in points):
            points.append(p)
    return points


def random_scenario(
    seed: int,
    n_agents: Optional[int] = None,
    side: float = 6.0,
    footprint_radius: float = 0.2,
    h: float = 0.15,
    horizon: float = 3.0,
    t_max: float = 30.0,
) -> Scenario:
    """Random mixed-model scenario in a ``side`` x ``side`` square.

    Each agent draws T_c from [0.05, 0.2] and its own T_w from (T_c, 0.3], so
    some pairs fall outside the renewal-gap bound (see ``bound_applies``).
    """
    rng = random.Random(seed)
    n = n_agents if n_agents is not None else rng.randint(4, 10)
    gap = 3.0 * footprint_radius
    starts = _spread_points(rng, n, side / 2 - footprint_radius, gap)
    goals = _spread_points(rng, n, side / 2 - footprint_radius, gap)
    compute = [round(rng.uniform(0.05, 0.2), 3) for _ in range(n)]
    agents = []
    for k in range(n):
        kind = rng.choice(list(ModelKind))
        model = _default_model(kind, round(rng.uniform(0.6, 1.0), 2))
        T_w = round(rng.uniform(compute[k] + 0.005, 0.3), 3)
        heading = math.atan2(goals[k][1] - starts[k][1], goals[k][0] - starts[k][0])
        if model.has_heading:
            x0 = np.array([starts[k][0], starts[k][1], heading, 0.0])
            xt = np.array([goals[k][0], goals[k][1], heading, 0.0])
        else:
            x0 = np.array([starts[k][0], starts[k][1], 0.0, 0.0])
            xt = np.array([goals[k][0], goals[k][1], 0.0, 0.0])
        agents.append(
            AgentConfig(
                agent_id=k + 1,
                model=model,
                footprint=disk_footprint(footprint_radius),
                T_c=compute[k],
                T_w=T_w,
                h=h,
                horizon=horizon,
                target=xt,
                initial_state=x0,
                clock_offset=round(rng.uniform(-1.0, 1.0), 6),
            )
        )
    return Scenario(f"random{seed}", tuple(agents), t_max=t_max, seed=seed)


def to_record(scenario: Scenario) -> Dict[str, Any]:
    """Short per-agent summary written into trace headers.

    Clock offsets are left out: traces must not depend on them.
    """
    return {
        "name": scenario.name,
        "dt_check": scenario.dt_check,
        "agents": [
            {
                "id": a.agent_id,
                "model": a.model.kind.value,
                "T_c": a.T_c,
                "T_w": a.T_w,
                "h": a.h,
                "K": a.K,
                "v_max": a.model.v_max,
                "start_time": a.start_time,
                "target": a.target[:2].tolist(),
            }
            for a in scenario.agents
        ],
    }
