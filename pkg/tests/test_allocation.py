import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.allocation import (
    Allocation,
    ProtocolViolation,
    Renewal,
    RenewalFailure,
    make_renewal,
    mirror,
    query,
    query_before,
    query_many,
    stamp_schedule,
    swept_body,
    update,
)
from src.dynamics import ModelKind
from src.geometry import HalfSpace, Polygon, regular_polygon, transform_footprint
from src.trajectory import Trajectory

SQUARE = Polygon(np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]))
DISK = regular_polygon(0.2, 12)


def resting(x: float, y: float) -> Trajectory:
    return Trajectory(0.0, 0.25, np.array([[x, y, 0.0, 0.0]]), ModelKind.DOUBLE_INTEGRATOR)


def path(times, xs, ys) -> Trajectory:
    dt = times[1] - times[0]
    knots = np.column_stack([xs, ys, np.zeros(len(xs)), np.zeros(len(xs))])
    return Trajectory(times[0], dt, knots, ModelKind.DOUBLE_INTEGRATOR)


def random_renewal(rng: np.random.Generator, t_start: float, count: int, spacing: float = 0.2) -> Renewal:
    stamps = []
    for k in range(count):
        angle = rng.uniform(-math.pi, math.pi)
        stamps.append((t_start + k * spacing, HalfSpace((math.cos(angle), math.sin(angle)), rng.normal())))
    return Renewal(t_start, stamps[-1][0], tuple(stamps), stamps[-1][1])


def test_static_pair_gets_axis_aligned_half_spaces():
    renewal = make_renewal(resting(0.0, 0.0), SQUARE, resting(2.0, 0.0), SQUARE, 0.0, 1.0, 0.25)
    assert renewal.stamp_times == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
    for _, h in renewal.stamps:
        assert h.normal == pytest.approx((-1.0, 0.0))
        assert h.offset == pytest.approx(-1.0)
    assert renewal.tail == renewal.stamps[-1][1]
    other = renewal.mirrored()
    assert other.tail.normal == pytest.approx((1.0, 0.0))
    assert other.tail.offset == pytest.approx(1.0)


def test_renewal_keeps_inflation_clear_on_both_sides():
    renewal = make_renewal(
        resting(0.0, 0.0), SQUARE, resting(2.0, 0.0), SQUARE, 0.0, 0.5, 0.25, margin_i=0.1, margin_j=0.3
    )
    for _, h in renewal.stamps:
        assert h.normal == pytest.approx((-1.0, 0.0))
        # plane at x = 0.9: 0.4 clear of agent i, 0.6 clear of agent j
        assert h.offset == pytest.approx(-0.9)


def test_degenerate_window_has_single_stamp():
    renewal = make_renewal(resting(0.0, 0.0), SQUARE, resting(2.0, 0.0), SQUARE, 0.5, 0.5, 0.25)
    assert len(renewal.stamps) == 1
    assert renewal.tail == renewal.stamps[0][1]


def test_crossing_paths_separated_in_time_pass_sign_oracle():
    times = np.arange(17) * 0.25
    a = path(times, np.clip(-3.0 + 2.0 * times, -3.0, 3.0), np.zeros(17))
    b = path(times, np.zeros(17), np.clip(-2.0 + (times - 2.5) * (4.0 / 1.5), -2.0, 2.0))
    renewal = make_renewal(a, DISK, b, DISK, 0.0, 4.0, 0.25)
    stamps = renewal.stamp_times
    for k, (t, h) in enumerate(renewal.stamps):
        t_next = stamps[k + 1] if k + 1 < len(stamps) else t
        for s in np.linspace(t, t_next, 6):
            shape_a = transform_footprint(DISK, a.sample(s)[:2], 0.0)
            shape_b = transform_footprint(DISK, b.sample(s)[:2], 0.0)
            assert h.contains_polygon(shape_a)
            assert mirror(h).contains_polygon(shape_b)


def test_overlapping_shapes_raise_renewal_failure():
    with pytest.raises(RenewalFailure) as info:
        make_renewal(resting(0.0, 0.0), SQUARE, resting(0.5, 0.0), SQUARE, 1.0, 2.0, 0.25)
    assert info.value.stamp == pytest.approx(1.0)


def test_swept_body_uses_disk_for_heading_models():
    assert swept_body(SQUARE, ModelKind.DOUBLE_INTEGRATOR) is SQUARE
    disk = swept_body(SQUARE, ModelKind.UNICYCLE)
    # contains the square at every heading
    assert disk.circumradius >= SQUARE.circumradius
    assert np.min(np.linalg.norm(disk.vertices, axis=1)) >= SQUARE.circumradius - 1e-12


def test_stamp_schedule_grid_and_extra_stamps():
    assert stamp_schedule(0.3, 1.0, 0.25) == pytest.approx([0.3, 0.55, 0.8, 1.0])
    on_grid = stamp_schedule(0.3, 1.0, 0.25, grid_origin=0.0)
    assert on_grid == pytest.approx([0.3, 0.5, 0.75, 1.0])
    merged = stamp_schedule(0.3, 1.0, 0.25, grid_origin=0.0, extra=[0.6, 2.0, 0.1])
    assert merged == pytest.approx([0.3, 0.5, 0.6, 0.75, 1.0])
    with pytest.raises(ValueError):
        stamp_schedule(1.0, 0.5, 0.25)


def test_renewal_invariants():
    h1, h2 = HalfSpace((1.0, 0.0), 0.0), HalfSpace((0.0, 1.0), 0.0)
    with pytest.raises(ValueError):
        Renewal(0.0, 1.0, ((0.5, h1), (0.2, h2)), h2)
    with pytest.raises(ValueError):
        Renewal(0.0, 1.0, ((0.0, h1), (1.0, h2)), h1)
    with pytest.raises(ValueError):
        Renewal(1.0, 0.0, ((1.0, h1),), h1)
    renewal = Renewal(0.0, 1.0, ((0.0, h1), (1.0, h2)), h2)
    assert Renewal.from_record(renewal.to_record()).stamps == renewal.stamps


def test_first_update_initializes_allocation():
    rng = np.random.default_rng(0)
    renewal = random_renewal(rng, 2.0, 5)
    alloc = update(Allocation(2.0), renewal)
    assert query(alloc, 2.0) == renewal.stamps[0][1]
    for t in np.linspace(2.0, 10.0, 50):
        assert query(alloc, t) == renewal.at(t)
    assert query(alloc, renewal.t_settle + 100.0) == renewal.tail
    with pytest.raises(ValueError):
        query(alloc, 1.5)
    with pytest.raises(ProtocolViolation):
        update(Allocation(1.0), renewal)
    with pytest.raises(ValueError):
        query(Allocation(0.0), 1.0)


def test_update_preserves_prefix_and_rejects_out_of_order():
    rng = np.random.default_rng(1)
    alloc = update(Allocation(0.0), random_renewal(rng, 0.0, 10))
    later = random_renewal(rng, 0.9, 4)
    after = update(alloc, later)
    for t in np.linspace(0.0, 0.9 - 1e-3, 30):
        assert query(after, t) == query(alloc, t)
    assert query(after, 0.9) == later.stamps[0][1]
    assert after.renewal_count == 2
    with pytest.raises(ProtocolViolation):
        update(after, random_renewal(rng, 0.5, 3))


def test_three_updates_match_piecewise_oracle():
    rng = np.random.default_rng(2)
    renewals = [random_renewal(rng, 0.0, 12), random_renewal(rng, 1.3, 8), random_renewal(rng, 2.1, 6)]
    alloc = Allocation(0.0)
    for renewal in renewals:
        alloc = update(alloc, renewal)

    def oracle(t: float) -> HalfSpace:
        live = [r for r in renewals if r.t_start <= t][-1]
        return live.at(t)

    times = rng.uniform(0.0, 5.0, size=100)
    for t in times:
        assert query(alloc, t) == oracle(t)
    normals, offsets = query_many(alloc, times)
    for t, n, b in zip(times, normals, offsets):
        h = query(alloc, t)
        assert tuple(n) == h.normal
        assert b == h.offset


def test_query_before_is_left_limit():
    rng = np.random.default_rng(4)
    renewal = random_renewal(rng, 0.0, 4, spacing=0.5)
    alloc = update(Allocation(0.0), renewal)
    assert alloc.breakpoints(0.0) == pytest.approx([0.5, 1.0, 1.5])
    assert query_before(alloc, 1.0) == renewal.stamps[1][1]
    assert query(alloc, 1.0) == renewal.stamps[2][1]
    assert query_before(alloc, 0.0) == renewal.stamps[0][1]


def test_mirror_example_and_involution():
    h = HalfSpace((1.0, 0.0), 1.0)
    m = mirror(h)
    assert m.normal == (-1.0, 0.0)
    assert m.offset == -1.0
    assert mirror(m) == h


@given(
    angle=st.floats(-math.pi, math.pi),
    offset=st.floats(-10.0, 10.0),
    x=st.floats(-10.0, 10.0),
    y=st.floats(-10.0, 10.0),
)
def test_half_space_and_mirror_are_disjoint(angle, offset, x, y):
    h = HalfSpace((math.cos(angle), math.sin(angle)), offset)
    assert not (h.contains([x, y]) and mirror(h).contains([x, y]))
