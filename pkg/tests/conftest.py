import os

import pytest

from src import runtime
from src.scenario import parse_scenario


def build_scenario(agents, name="small", t_max=8.0, **settings):
    """Scenario from short agent dicts; unspecified fields get DI defaults."""
    defaults = {
        "model": "double_integrator",
        "v_max": 0.8,
        "a_max": 1.5,
        "footprint": {"disk": 0.2},
        "T_c": 0.10,
        "T_w": 0.15,
        "h": 0.15,
        "horizon": 3.0,
    }
    data = {"name": name, "t_max": t_max, "defaults": defaults, "agents": list(agents), **settings}
    return parse_scenario(data)


def crossing(t_max=8.0, **settings):
    return build_scenario(
        [
            {"id": 1, "start": [-1.5, 0.0], "target": [1.5, 0.0]},
            {"id": 2, "start": [0.0, -1.5], "target": [0.0, 1.5], "T_c": 0.08, "T_w": 0.13},
        ],
        name="crossing",
        t_max=t_max,
        **settings,
    )


@pytest.fixture(scope="session")
def crossing_scenario():
    return crossing()


@pytest.fixture(scope="session")
def crossing_trace(crossing_scenario):
    return runtime.run(crossing_scenario, seed=0)


slow = pytest.mark.skipif(os.getenv("ASTA_SLOW_TESTS") != "1", reason="set ASTA_SLOW_TESTS=1 for full scenarios")
