import math

import numpy as np
import pytest

from src.config import SCENARIO_DIR
from src.dynamics import ModelKind
from src.scenario import (
    AgentConfig,
    ScenarioError,
    antipodal_scenario,
    load_scenario,
    parse_scenario,
    random_scenario,
    to_record,
)


def minimal(**agent_overrides):
    base = {
        "model": "double_integrator",
        "v_max": 1.0,
        "a_max": 1.5,
        "footprint": {"disk": 0.2},
        "T_c": 0.1,
        "T_w": 0.15,
        "h": 0.15,
        "horizon": 3.0,
    }
    first = {**base, "id": 1, "start": [0.0, 0.0], "target": [2.0, 0.0], **agent_overrides}
    second = {**base, "id": 2, "start": [0.0, 2.0], "target": [2.0, 2.0]}
    return {"name": "tiny", "agents": [first, second]}


def test_antipodal8_matches_agent_table():
    scenario = load_scenario(SCENARIO_DIR / "antipodal8.yaml")
    assert scenario.name == "antipodal8"
    assert scenario.agent_ids == list(range(1, 9))
    table = {
        1: ("bicycle", 0.07, 0.09),
        2: ("double_integrator", 0.12, 0.14),
        3: ("unicycle", 0.16, 0.21),
        4: ("double_integrator", 0.10, 0.17),
        5: ("bicycle", 0.08, 0.10),
        6: ("double_integrator", 0.10, 0.14),
        7: ("unicycle", 0.12, 0.16),
        8: ("unicycle", 0.16, 0.18),
    }
    for agent_id, (model, T_c, T_w) in table.items():
        cfg = scenario.agent(agent_id)
        assert cfg.model.kind.value == model
        assert cfg.T_c == pytest.approx(T_c)
        assert cfg.T_w == pytest.approx(T_w)
        assert cfg.h == pytest.approx(0.15)
        assert cfg.K == 20
        # antipodal targets
        assert cfg.target[:2] == pytest.approx(-cfg.initial_state[:2], abs=1e-5)


def test_bare_name_resolves_to_bundled_scenario():
    assert load_scenario("head_on").name == "head_on"
    with pytest.raises(FileNotFoundError):
        load_scenario("no_such_scenario")


def test_all_bundled_scenarios_load():
    for path in sorted(SCENARIO_DIR.glob("*.yaml")):
        scenario = load_scenario(path)
        assert scenario.agents


def test_waiting_time_must_exceed_computation_time():
    with pytest.raises(ScenarioError) as info:
        parse_scenario(minimal(T_w=0.1))
    assert "T_w > T_c" in str(info.value)
    assert info.value.field == "agents[0].T_w"


def test_overlapping_starts_are_rejected():
    with pytest.raises(ScenarioError) as info:
        parse_scenario(minimal(start=[0.0, 1.9]))
    assert "intersect" in str(info.value)


@pytest.mark.parametrize(
    "override, field",
    [
        ({"colour": "red"}, "agents[0]"),
        ({"model": "hovercraft"}, "agents[0].model"),
        ({"start": [0.0, 0.0, 1.0]}, "agents[0].start"),
        ({"footprint": {"ellipse": 1.0}}, "agents[0].footprint"),
    ],
)
def test_bad_agent_fields_name_the_field(override, field):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(minimal(**override))
    assert info.value.field == field


def test_missing_required_field():
    data = minimal()
    del data["agents"][1]["horizon"]
    with pytest.raises(ScenarioError) as info:
        parse_scenario(data)
    assert "horizon" in str(info.value)
    with pytest.raises(ScenarioError):
        parse_scenario({"name": "empty", "agents": []})
    with pytest.raises(ScenarioError):
        parse_scenario({"name": "x", "agents": minimal()["agents"], "gravity": 9.8})


def test_yaml_errors_carry_the_path(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("name: broken\nagents: [\n  {id: 1\n", encoding="utf-8")
    with pytest.raises(ScenarioError) as info:
        load_scenario(path)
    assert "YAML parse error" in str(info.value)
    assert info.value.path == path


def test_defaults_and_weights_apply():
    data = minimal()
    data["agents"][0]["weights"] = {"Q": [2.0, 2.0, 0.5, 0.5], "P": [20.0, 20.0, 5.0, 5.0]}
    scenario = parse_scenario(data)
    first = scenario.agent(1)
    assert np.diag(first.Q).tolist() == [2.0, 2.0, 0.5, 0.5]
    assert first.comm_radius == math.inf
    assert scenario.t_max == 60.0
    assert scenario.agent(2).clock_offset == 0.0


def test_agent_config_snaps_times_and_requires_rest():
    scenario = parse_scenario(minimal(T_c=0.1000004))
    assert scenario.agent(1).T_c == 0.1
    cfg = scenario.agent(1)
    with pytest.raises(ValueError):
        AgentConfig(
            9, cfg.model, cfg.footprint, 0.1, 0.15, 0.15, 3.0, cfg.target, np.array([5.0, 5.0, 0.3, 0.0])
        )


def test_antipodal_builder():
    scenario = antipodal_scenario([("unicycle", 1.0, 0.1, 0.15), ("double_integrator", 0.8, 0.1, 0.2)])
    assert scenario.name == "antipodal2"
    uni = scenario.agent(1)
    assert uni.model.kind is ModelKind.UNICYCLE
    assert uni.initial_state[:2] == pytest.approx([2.0, 0.0])
    assert uni.target[:2] == pytest.approx([-2.0, 0.0])
    assert uni.initial_state[2] == pytest.approx(math.pi)


@pytest.mark.parametrize("seed", range(6))
def test_random_scenarios_are_valid(seed):
    scenario = random_scenario(seed)
    assert 4 <= len(scenario.agents) <= 10
    assert all(0.05 <= a.T_c <= 0.2 and a.T_c < a.T_w <= 0.3 for a in scenario.agents)
    assert random_scenario(seed).agent(1).T_c == scenario.agent(1).T_c


def test_record_leaves_out_clock_offsets():
    record = to_record(random_scenario(3))
    assert record["name"] == "random3"
    assert record["dt_check"] == pytest.approx(0.01)
    assert all("clock_offset" not in agent for agent in record["agents"])


def test_random_waiting_times_are_drawn_per_agent():
    # with one floor for everybody no T_w would ever fall below another agent's T_c
    crossed = 0
    for seed in range(20):
        agents = random_scenario(seed).agents
        crossed += any(a.T_w <= b.T_c for a in agents for b in agents)
    assert crossed > 0
