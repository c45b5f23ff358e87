import dataclasses

import pytest

from conftest import build_scenario, crossing, slow
from src import runtime
from src.allocation import ProtocolViolation
from src.config import SCENARIO_DIR
from src.metrics import compute_metrics
from src.runtime import Event, EventKind, frequency_bound, next_finish_time
from src.scenario import Scenario, load_scenario, random_scenario
from src.verification import verify_trace


def strip_local(trace):
    rows = []
    for record in trace:
        payload = {k: v for k, v in record.payload.items() if k != "local"}
        rows.append((record.t, record.subject, record.kind, payload))
    return rows


def test_next_finish_time():
    scenario = crossing()
    cfg = scenario.agent(1)
    assert next_finish_time(cfg, 1.0) == pytest.approx(1.25)
    assert next_finish_time(cfg, 0.0) == 0.25


def test_frequency_bound_for_table_agents():
    scenario = load_scenario(SCENARIO_DIR / "antipodal8.yaml")
    assert frequency_bound(scenario.agent(1), scenario.agent(2)) == pytest.approx(0.33)
    assert frequency_bound(scenario.agent(3), scenario.agent(4)) == pytest.approx(0.47)
    assert frequency_bound(scenario.agent(4), scenario.agent(3)) == pytest.approx(0.47)


def test_events_order_by_tick_then_kind_then_agents():
    events = [
        Event(10, EventKind.START_REPLAN, (1,), 0),
        Event(10, EventKind.FINISH_REPLAN, (2,), 1),
        Event(10, EventKind.MSG_DELIVER, (2, 1), 2),
        Event(10, EventKind.FINISH_REPLAN, (1,), 3),
        Event(9, EventKind.START_REPLAN, (3,), 4),
    ]
    ordered = sorted(events)
    assert [(e.tick, e.kind, e.agents) for e in ordered] == [
        (9, EventKind.START_REPLAN, (3,)),
        (10, EventKind.FINISH_REPLAN, (1,)),
        (10, EventKind.FINISH_REPLAN, (2,)),
        (10, EventKind.MSG_DELIVER, (2, 1)),
        (10, EventKind.START_REPLAN, (1,)),
    ]


def test_single_agent_reaches_target():
    scenario = build_scenario([{"id": 1, "start": [0.0, 0.0], "target": [1.0, 0.0]}], t_max=20.0)
    trace = runtime.run(scenario)
    assert trace.summary["arrived"] == [1]
    assert trace.summary["timeout"] is False
    assert trace.summary["renewals"] == 0
    assert not trace.of_kind("session")
    statuses = {r.payload["status"] for r in trace.for_agent(1, "commit")}
    assert statuses == {"init", "planned"}
    assert len(trace.for_agent(1, "arrive")) == 1


def test_trace_starts_with_meta_and_ends_with_end(crossing_trace):
    records = list(crossing_trace)
    assert records[0].kind == "meta"
    assert records[-1].kind == "end"
    assert crossing_trace.meta["scenario"]["name"] == "crossing"
    times = [r.t for r in records]
    assert times == sorted(times)


def test_pair_session_and_renewal_cadence(crossing_trace, crossing_scenario):
    sessions = crossing_trace.for_pair(1, 2, "session")
    assert len(sessions) == 1
    assert sessions[0].t == 0.0
    renewals = crossing_trace.for_pair(1, 2, "renewal")
    assert [r.payload["m"] for r in renewals] == list(range(1, len(renewals) + 1))
    bound = frequency_bound(crossing_scenario.agent(1), crossing_scenario.agent(2))
    gaps = [b.t - a.t for a, b in zip(renewals, renewals[1:])]
    assert gaps
    assert max(gaps) <= bound + 1e-6


def test_crossing_run_verifies(crossing_trace, crossing_scenario):
    report = verify_trace(crossing_trace, crossing_scenario)
    assert report.verdict == "PASS", report.to_dict()
    assert report.renewals_checked > 10


def test_runs_are_deterministic():
    scenario = crossing(t_max=2.0, jitter=0.02)
    first = runtime.run(scenario, seed=5).dumps()
    assert runtime.run(scenario, seed=5).dumps() == first
    assert runtime.run(scenario, seed=5, workers=2).dumps() == first


def test_clock_offsets_only_change_local_times():
    scenario = crossing(t_max=2.0, delay=0.01)
    shifted_agents = (
        dataclasses.replace(scenario.agent(1), clock_offset=0.731),
        dataclasses.replace(scenario.agent(2), clock_offset=-2.5),
    )
    shifted = Scenario(scenario.name, shifted_agents, t_max=scenario.t_max, delay=scenario.delay)
    plain_trace = runtime.run(scenario)
    shifted_trace = runtime.run(shifted)
    assert strip_local(plain_trace) == strip_local(shifted_trace)
    local_times = [r.payload["local"] for r in shifted_trace.for_agent(2, "commit")]
    assert local_times[0] == pytest.approx(-2.5)


def test_dormant_agent_waits_for_start_time():
    scenario = build_scenario(
        [
            {"id": 1, "start": [0.0, 0.0], "target": [1.0, 0.0]},
            {"id": 2, "start": [0.0, 2.0], "target": [1.0, 2.0], "start_time": 1.0},
        ],
        t_max=2.0,
    )
    trace = runtime.run(scenario)
    commits = trace.for_agent(2, "commit")
    assert commits[0].t == pytest.approx(1.0)
    assert commits[0].payload["status"] == "init"
    assert all(r.t >= 1.0 for r in trace.for_agent(2, "start"))
    assert trace.for_pair(1, 2, "session")


def test_out_of_range_agents_never_pair():
    scenario = build_scenario(
        [
            {"id": 1, "start": [0.0, 0.0], "target": [0.5, 0.0], "comm_radius": 1.0},
            {"id": 2, "start": [0.0, 3.0], "target": [0.5, 3.0], "comm_radius": 1.0},
        ],
        t_max=1.0,
    )
    trace = runtime.run(scenario)
    assert not trace.of_kind("session")
    assert trace.summary["renewals"] == 0


def test_three_way_swap_arrives():
    scenario = build_scenario(
        [
            {"id": 1, "start": [1.5, 0.0], "target": [-1.5, 0.0]},
            {
                "id": 2,
                "model": "unicycle",
                "omega_max": 1.5,
                "T_c": 0.12,
                "T_w": 0.16,
                "start": [-0.75, 1.299038, -1.047198],
                "target": [0.75, -1.299038, -1.047198],
            },
            {"id": 3, "start": [-0.75, -1.299038], "target": [0.75, 1.299038], "T_c": 0.08, "T_w": 0.13},
        ],
        name="swap3",
        t_max=15.0,
    )
    trace = runtime.run(scenario)
    assert trace.summary["arrived"] == [1, 2, 3]
    assert trace.summary["timeout"] is False
    report = verify_trace(trace, scenario)
    assert report.collisions == []
    assert report.conformance == []


def test_t_max_cuts_the_run():
    trace = runtime.run(crossing(t_max=1.0))
    assert trace.summary["timeout"] is True
    assert trace.of_kind("end")[0].t == pytest.approx(1.0)


@slow
@pytest.mark.parametrize("name", ["head_on", "lane_change8", "late_joiner"])
def test_bundled_scenarios_complete(name):
    scenario = load_scenario(name)
    trace = runtime.run(scenario)
    assert trace.summary["timeout"] is False
    report = verify_trace(trace, scenario)
    assert report.collisions == []
    assert report.conformance == []


@slow
def test_antipodal_swap():
    scenario = load_scenario("antipodal8")
    trace = runtime.run(scenario)
    assert trace.summary["arrived"] == list(range(1, 9))
    report = verify_trace(trace, scenario)
    assert report.collisions == []
    assert report.conformance == []
    metrics = compute_metrics(trace)
    assert metrics.min_distance >= 0.40
    assert metrics.agents["T_t"].max() <= 12.0
    assert metrics.agents["L"].max() <= 5.5


def test_sessions_and_renewals_by_hand():
    sim = runtime.Simulator(crossing())
    session = sim.establish_session(2, 1, 0.0)
    assert session.pair == (1, 2)
    assert session.m == 1
    assert sim.agents[1].rel_offset[2] == 0.0
    with pytest.raises(ProtocolViolation):
        sim.establish_session(1, 2, 0.0)

    for agent in sim.agents.values():
        agent.next_finish = 0.25
    assert sim.try_renewal(1, 2, 0.0) is None  # one renewal per tick
    renewal = sim.try_renewal(1, 2, 0.1)
    assert renewal is not None
    assert renewal.t_start == pytest.approx(0.25)
    assert session.m == 2
    sim.agents[2].phase = runtime.Phase.COMPUTING
    assert sim.try_renewal(1, 2, 0.2) is None
    assert session.m == 2


@slow
def test_sixteen_agent_swap():
    scenario = load_scenario("antipodal16")
    trace = runtime.run(scenario)
    assert trace.summary["arrived"] == list(range(1, 17))
    report = verify_trace(trace, scenario)
    assert report.collisions == []
    assert report.conformance == []
    assert compute_metrics(trace).min_distance >= 0.40


@slow
@pytest.mark.parametrize("seed, n_agents", [(0, 10), (1, 5)])
def test_random_scenarios_arrive(seed, n_agents):
    trace = runtime.run(random_scenario(seed, n_agents=n_agents))
    assert trace.summary["timeout"] is False
    assert trace.summary["arrived"] == list(range(1, n_agents + 1))
