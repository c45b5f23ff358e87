import math

import numpy as np
import pytest

from src.dynamics import DynamicsModel, ModelKind
from src.geometry import regular_polygon
from src.trajectory import Trajectory, check_times, constant_trajectory, first_collision

DI = DynamicsModel(ModelKind.DOUBLE_INTEGRATOR, 1.0, 2.0)
UNI = DynamicsModel(ModelKind.UNICYCLE, 1.0, 2.0, omega_max=1.5)
DISK = regular_polygon(0.2, 12)


def line(start_time: float, p0, p1, kind=ModelKind.DOUBLE_INTEGRATOR, knots: int = 5, dt: float = 0.5) -> Trajectory:
    xs = np.linspace(p0[0], p1[0], knots)
    ys = np.linspace(p0[1], p1[1], knots)
    states = np.column_stack([xs, ys, np.zeros(knots), np.zeros(knots)])
    return Trajectory(start_time, dt, states, kind)


def test_sample_interpolates_and_holds_tail():
    traj = line(1.0, (0.0, 0.0), (2.0, 0.0))
    assert traj.end_time == pytest.approx(3.0)
    assert traj.sample(1.25)[:2] == pytest.approx([0.25, 0.0])
    assert traj.sample(3.0)[:2] == pytest.approx([2.0, 0.0])
    assert traj.sample(100.0)[:2] == pytest.approx([2.0, 0.0])
    with pytest.raises(ValueError):
        traj.sample(0.5)


def test_heading_interpolates_along_shorter_arc():
    states = np.array([[0.0, 0.0, 3.0, 0.0], [0.0, 0.0, -3.0, 0.0]])
    traj = Trajectory(0.0, 1.0, states, ModelKind.UNICYCLE)
    mid = traj.sample(0.5)[2]
    assert abs(abs(mid) - math.pi) < 1e-9
    vec = traj.states_at([0.5])[0, 2]
    assert abs(abs(vec) - math.pi) < 1e-9


def test_states_at_matches_sample():
    rng = np.random.default_rng(3)
    states = np.column_stack(
        [rng.normal(size=8), rng.normal(size=8), rng.uniform(-3, 3, size=8), rng.uniform(0, 1, size=8)]
    )
    traj = Trajectory(0.3, 0.15, states, ModelKind.UNICYCLE)
    times = rng.uniform(0.3, 2.0, size=40)
    batch = traj.states_at(times)
    for t, row in zip(times, batch):
        single = traj.sample(t)
        assert row[[0, 1, 3]] == pytest.approx(single[[0, 1, 3]])
        assert math.cos(row[2] - single[2]) == pytest.approx(1.0)


def test_shifted_moves_time_axis_only():
    traj = line(1.0, (0.0, 0.0), (2.0, 0.0))
    moved = traj.shifted(-0.25)
    assert moved.start_time == pytest.approx(0.75)
    assert moved.sample(1.0)[:2] == pytest.approx(traj.sample(1.25)[:2])


def test_record_round_trip():
    traj = line(0.5, (0.0, 0.0), (1.0, 1.0))
    back = Trajectory.from_record(traj.to_record())
    assert back.start_time == traj.start_time
    assert back.model_kind is ModelKind.DOUBLE_INTEGRATOR
    assert np.array_equal(back.knots, traj.knots)


def test_constant_trajectory_needs_rest_state():
    traj = constant_trajectory(DI, [1.0, 2.0, 0.0, 0.0], 0.0)
    assert traj.sample(50.0)[:2] == pytest.approx([1.0, 2.0])
    with pytest.raises(ValueError):
        constant_trajectory(DI, [1.0, 2.0, 0.5, 0.0], 0.0)


def test_check_times_includes_both_ends():
    times = check_times(0.0, 0.105, 0.01)
    assert times[0] == 0.0
    assert times[-1] == pytest.approx(0.105)
    assert np.all(np.diff(times) > 0)
    with pytest.raises(ValueError):
        check_times(1.0, 1.0, 0.01)


def test_first_collision_finds_crossing_and_is_symmetric():
    a = line(0.0, (-1.0, 0.0), (1.0, 0.0))
    b = line(0.0, (1.0, 0.0), (-1.0, 0.0))
    hit_ab = first_collision(a, DISK, b, DISK, 0.0, 2.0, 0.01)
    hit_ba = first_collision(b, DISK, a, DISK, 0.0, 2.0, 0.01)
    assert hit_ab is not None
    assert hit_ab == hit_ba
    # centers close at 2 m/s from 2 m apart; disks touch when 0.4 m apart
    assert hit_ab == pytest.approx(0.8, abs=0.02)


def test_first_collision_none_for_parallel_lanes():
    a = line(0.0, (-1.0, 0.0), (1.0, 0.0))
    b = line(0.0, (-1.0, 1.0), (1.0, 1.0))
    assert first_collision(a, DISK, b, DISK, 0.0, 5.0, 0.01) is None
