"""Heterogeneous agent dynamics: double integrator, unicycle and bicycle.

States are 4-vectors and inputs 2-vectors for every model:

    double integrator  x = [px, py, vx, vy]   u = [ax, ay]
    unicycle           x = [px, py, theta, v] u = [a, omega]
    bicycle            x = [px, py, theta, v] u = [a, delta]

Inputs are held constant between knots. The double integrator is stepped in
closed form, the others with classical RK4.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from src.config import EPS_DYN

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


class ModelKind(str, Enum):
    DOUBLE_INTEGRATOR = "double_integrator"
    UNICYCLE = "unicycle"
    BICYCLE = "bicycle"


@dataclass(frozen=True)
class DynamicsModel:
    kind: ModelKind
    v_max: float
    a_max: float
    omega_max: Optional[float] = None
    delta_max: Optional[float] = None
    wheelbase: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.v_max <= 0 or self.a_max <= 0:
            raise ValueError("v_max and a_max must be strictly positive")
        if self.kind is ModelKind.UNICYCLE and (self.omega_max is None or self.omega_max <= 0):
            raise ValueError("unicycle needs a strictly positive omega_max")
        if self.kind is ModelKind.BICYCLE:
            if self.delta_max is None or not 0 < self.delta_max < math.pi / 2:
                raise ValueError("bicycle needs delta_max in (0, pi/2)")
            if self.wheelbase is None or self.wheelbase <= 0:
                raise ValueError("bicycle needs a strictly positive wheelbase")
        elif self.wheelbase is not None:
            raise ValueError(f"wheelbase is only valid for bicycle models, not {self.kind.value}")

    @property
    def has_heading(self) -> bool:
        return self.kind is not ModelKind.DOUBLE_INTEGRATOR


def _check_dims(state: np.ndarray, control: Optional[np.ndarray] = None) -> None:
    if state.shape != (4,):
        raise ValueError(f"state must have 4 components, got shape {state.shape}")
    if control is not None and control.shape != (2,):
        raise ValueError(f"input must have 2 components, got shape {control.shape}")


def derivative(model: DynamicsModel, state, control) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    _check_dims(x, u)
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        return np.array([x[2], x[3], u[0], u[1]])
    theta, v = x[2], x[3]
    if model.kind is ModelKind.UNICYCLE:
        turn_rate = u[1]
    else:
        turn_rate = v * math.tan(u[1]) / model.wheelbase
    return np.array([v * math.cos(theta), v * math.sin(theta), turn_rate, u[0]])


def rk4(model: DynamicsModel, state, control, h: float) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    k1 = derivative(model, x, control)
    k2 = derivative(model, x + 0.5 * h * k1, control)
    k3 = derivative(model, x + 0.5 * h * k2, control)
    k4 = derivative(model, x + h * k3, control)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def double_integrator_matrices(h: float) -> Tuple[np.ndarray, np.ndarray]:
    A = np.eye(4)
    A[0, 2] = A[1, 3] = h
    B = np.zeros((4, 2))
    B[0, 0] = B[1, 1] = 0.5 * h * h
    B[2, 0] = B[3, 1] = h
    return A, B


def integrate(model: DynamicsModel, state, control, h: float) -> np.ndarray:
    """One zero-order-hold step without heading wrap or clamping."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    _check_dims(x, u)
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        A, B = double_integrator_matrices(h)
        return A @ x + B @ u
    return rk4(model, x, u, h)


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


def state_bounds(model: DynamicsModel) -> Tuple[np.ndarray, np.ndarray]:
    inf = np.inf
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        return (
            np.array([-inf, -inf, -model.v_max, -model.v_max]),
            np.array([inf, inf, model.v_max, model.v_max]),
        )
    return np.array([-inf, -inf, -inf, 0.0]), np.array([inf, inf, inf, model.v_max])


def input_bounds(model: DynamicsModel) -> Tuple[np.ndarray, np.ndarray]:
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        hi = np.array([model.a_max, model.a_max])
    elif model.kind is ModelKind.UNICYCLE:
        hi = np.array([model.a_max, model.omega_max])
    else:
        hi = np.array([model.a_max, model.delta_max])
    return -hi, hi


def bound_violation(model: DynamicsModel, state) -> float:
    lo, hi = state_bounds(model)
    x = np.asarray(state, dtype=float)
    return float(np.max(np.concatenate([lo - x, x - hi, [0.0]])))


def canonicalize(model: DynamicsModel, state) -> np.ndarray:
    """Wrap the heading and clamp states that drifted past the bounds."""
    x = np.array(state, dtype=float)
    if model.has_heading:
        x[2] = wrap_angle(x[2])
    excess = bound_violation(model, x)
    if excess > EPS_DYN:
        logger.warning("State %s left the %s state set by %.3e; clamping", x, model.kind.value, excess)
        lo, hi = state_bounds(model)
        x = np.clip(x, lo, hi)
    return x


def step(model: DynamicsModel, state, control, h: float) -> np.ndarray:
    return canonicalize(model, integrate(model, state, control, h))


def rollout(model: DynamicsModel, state, controls, h: float, wrap: bool = True) -> np.ndarray:
    """Knots reached by holding each input for h, starting from ``state``.

    With ``wrap=False`` headings are left continuous, which is what the
    planner linearizes around.
    """
    u = np.asarray(controls, dtype=float).reshape(-1, 2)
    knots = np.empty((u.shape[0] + 1, 4))
    knots[0] = np.asarray(state, dtype=float)
    for k in range(u.shape[0]):
        knots[k + 1] = integrate(model, knots[k], u[k], h)
    if wrap and model.has_heading:
        knots[:, 2] = [wrap_angle(theta) for theta in knots[:, 2]]
    return knots


def is_equilibrium(model: DynamicsModel, state) -> bool:
    x = np.asarray(state, dtype=float)
    _check_dims(x)
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        return bool(abs(x[2]) <= EPS_DYN and abs(x[3]) <= EPS_DYN)
    return bool(abs(x[3]) <= EPS_DYN)


def equilibrium_input(model: DynamicsModel) -> np.ndarray:
    """An input that holds every equilibrium state of the model fixed."""
    return np.zeros(2)


def position(state) -> np.ndarray:
    return np.asarray(state, dtype=float)[:2]


def heading(model: DynamicsModel, state) -> float:
    return float(state[2]) if model.has_heading else 0.0


def speed(model: DynamicsModel, state) -> float:
    x = np.asarray(state, dtype=float)
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        return float(math.hypot(x[2], x[3]))
    return float(abs(x[3]))


def velocity(model: DynamicsModel, state) -> np.ndarray:
    """Planar velocity vector."""
    x = np.asarray(state, dtype=float)
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        return x[2:4].copy()
    return x[3] * np.array([math.cos(x[2]), math.sin(x[2])])


def state_error(model: DynamicsModel, a, b) -> np.ndarray:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if model.has_heading:
        diff[2] = wrap_angle(diff[2])
    return diff


def linearize(model: DynamicsModel, state, control, h: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Discrete-time Jacobians of ``integrate`` by central differences.

    Returns (A, B, x_next) with x_next = integrate(state, control).
    """
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    x_next = integrate(model, x, u, h)
    if model.kind is ModelKind.DOUBLE_INTEGRATOR:
        A, B = double_integrator_matrices(h)
        return A, B, x_next
    A = np.zeros((4, 4))
    B = np.zeros((4, 2))
    for k in range(4):
        dx = np.zeros(4)
        dx[k] = FD_STEP
        A[:, k] = (integrate(model, x + dx, u, h) - integrate(model, x - dx, u, h)) / (2 * FD_STEP)
    for k in range(2):
        du = np.zeros(2)
        du[k] = FD_STEP
        B[:, k] = (integrate(model, x, u + du, h) - integrate(model, x, u - du, h)) / (2 * FD_STEP)
    return A, B, x_next
