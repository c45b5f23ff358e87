from pathlib import Path

import pytest
import yaml

from src import cli


def write_scenario(tmp_path: Path) -> Path:
    data = {
        "name": "short_hop",
        "t_max": 15.0,
        "agents": [
            {
                "id": 1,
                "model": "double_integrator",
                "v_max": 0.8,
                "a_max": 1.5,
                "footprint": {"disk": 0.2},
                "T_c": 0.1,
                "T_w": 0.15,
                "h": 0.15,
                "horizon": 3.0,
                "start": [0.0, 0.0],
                "target": [0.4, 0.0],
            }
        ],
    }
    path = tmp_path / "short_hop.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def test_run_verify_metrics_plot(tmp_path, capsys):
    scenario = write_scenario(tmp_path)
    trace = tmp_path / "traces" / "short_hop.trace"
    assert cli.main(["run", "--scenario", str(scenario), "--trace", str(trace)]) == cli.EXIT_OK
    assert trace.exists()
    assert "arrived 1/1" in capsys.readouterr().out

    report = tmp_path / "report.json"
    code = cli.main(
        ["verify", "--trace", str(trace), "--scenario", str(scenario), "--report-json", str(report)]
    )
    assert code == cli.EXIT_OK
    assert capsys.readouterr().out.startswith("PASS")
    assert report.exists()

    assert cli.main(["metrics", "--trace", str(trace), "--out", str(tmp_path / "metrics")]) == cli.EXIT_OK
    assert (tmp_path / "metrics" / "metrics_agents.csv").exists()

    assert cli.main(["plot", "--trace", str(trace), "--out", str(tmp_path / "plots")]) == cli.EXIT_OK
    assert (tmp_path / "plots" / "agent_1.csv").exists()


def test_timeout_exits_with_findings(tmp_path):
    scenario = write_scenario(tmp_path)
    trace = tmp_path / "cut.trace"
    assert cli.main(["run", "--scenario", str(scenario), "--trace", str(trace), "--t-max", "0.5"]) == cli.EXIT_FINDINGS


def test_missing_files_exit_with_error(tmp_path):
    assert cli.main(["metrics", "--trace", str(tmp_path / "nope.trace")]) == cli.EXIT_ERROR
    assert cli.main(["run", "--scenario", str(tmp_path / "nope.yaml")]) == cli.EXIT_ERROR


def test_malformed_trace_exits_with_error(tmp_path):
    trace = tmp_path / "bad.trace"
    trace.write_text("not a trace line\n", encoding="utf-8")
    scenario = write_scenario(tmp_path)
    assert cli.main(["verify", "--trace", str(trace), "--scenario", str(scenario)]) == cli.EXIT_ERROR


def test_negative_delay_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--scenario", "head_on", "--delay-ms", "-5"])
    assert info.value.code == 2


@pytest.mark.parametrize("step", ["0", "-0.01", "abc"])
def test_bad_dt_check_is_a_usage_error(tmp_path, step):
    scenario = write_scenario(tmp_path)
    with pytest.raises(SystemExit) as info:
        cli.main(["verify", "--trace", str(tmp_path / "x.trace"), "--scenario", str(scenario), "--dt-check", step])
    assert info.value.code == 2


def test_bad_scenario_step_exits_with_error(tmp_path):
    # a zero step in the scenario file is rejected on load
    scenario = write_scenario(tmp_path)
    trace = tmp_path / "hop.trace"
    assert cli.main(["run", "--scenario", str(scenario), "--trace", str(trace)]) == cli.EXIT_OK
    data = yaml.safe_load(scenario.read_text())
    data["dt_check"] = 0.0
    scenario.write_text(yaml.safe_dump(data), encoding="utf-8")
    assert cli.main(["verify", "--trace", str(trace), "--scenario", str(scenario)]) == cli.EXIT_ERROR
