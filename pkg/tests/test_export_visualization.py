import json

import numpy as np
import plotly.graph_objects as go
import pytest

from conftest import make_scenario
from utils.baseline_metrics import baseline_run
from utils.export_manager import (
    RunExporter,
    atomic_write,
    load_run,
    operating_points_series,
    powertrain_series,
    soc_series,
    trajectory_series,
)
from utils.mpc import summarize_run
from utils.schemas import RunConfig
from utils.traffic import Intersection
from utils.visualization import (
    create_operating_points_chart,
    create_powertrain_chart,
    create_speed_soc_chart,
    create_summary_table,
    create_trajectory_chart,
)


@pytest.fixture(scope="module")
def scenario():
    v = 10.0 + np.sin(np.arange(101) / 15.0)
    return make_scenario(v, intersections=[Intersection("I1", 60.0, 20.0, ((10.0, 18.0),))], name="wave")


@pytest.fixture(scope="module")
def log(scenario, system):
    return baseline_run(scenario, system)


def test_save_and_load_run(tmp_path, log):
    exporter = RunExporter(tmp_path)
    cfg = RunConfig(scenario="wave")
    paths = exporter.save_run(log, summarize_run(log), cfg, "wave_baseline")
    assert {p.name for p in paths.values()} == {
        "wave_baseline_runlog.csv", "wave_baseline_summary.json", "wave_baseline_config.ini",
    }
    loaded, loaded_cfg, summary = load_run(tmp_path, "wave_baseline")
    assert loaded_cfg == cfg
    assert summary["run"] == "wave_baseline"
    assert loaded.final_state == log.final_state
    for column in ("t", "d", "v", "soc", "T_f", "T_r", "P_bat", "F_b"):
        np.testing.assert_array_equal(loaded.frame[column].to_numpy(), log.frame[column].to_numpy())
    assert loaded.frame["gap"].isna().all()
    assert exporter.load_summaries()[0]["scenario"] == "wave"


def test_json_runlog(log):
    artifact = RunExporter("unused").export_runlog(log, "wave", format="json")
    assert artifact["filename"] == "wave_runlog.json"
    assert len(json.loads(artifact["content"])) == len(log.frame)


def test_unsupported_format(log):
    with pytest.raises(ValueError, match="Unsupported format"):
        RunExporter("unused").export_runlog(log, "wave", format="xlsx")


def test_atomic_write_replaces(tmp_path):
    path = atomic_write(tmp_path / "deep" / "file.txt", "one")
    atomic_write(path, "two")
    assert path.read_text() == "two"
    assert [p.name for p in path.parent.iterdir()] == ["file.txt"]


class TestSeries:
    def test_trajectory_marks_red(self, log, scenario):
        series = trajectory_series(log, scenario)
        assert {"t", "d_ego", "d_preceding", "gap", "I1_d_sig", "I1_red"} <= set(series.columns)
        assert series["I1_red"].iloc[0] == 1
        assert series["I1_red"].iloc[-1] == 1

    def test_soc_with_baseline(self, log):
        series = soc_series(log, log)
        np.testing.assert_array_equal(series["soc_ego"], series["soc_preceding"])

    def test_powertrain_share(self, log):
        series = powertrain_series(log)
        share = series["front_share"].dropna()
        np.testing.assert_allclose(share, 0.5)

    def test_operating_points(self, log, system):
        points = operating_points_series(log, system)
        assert list(points.columns) == ["t", "omega", "T_f", "T_r", "eta_f", "eta_r"]
        assert (points["omega"] <= system.powertrain.omega_max).all()


def test_figures_build(log, scenario, system):
    figures = [
        create_trajectory_chart(trajectory_series(log, scenario)),
        create_speed_soc_chart(soc_series(log, log)),
        create_powertrain_chart(powertrain_series(log)),
        create_operating_points_chart(operating_points_series(log, system), system.powertrain.front_map),
        create_summary_table([{"scenario": "wave", "R_SOC": 12.3456789}]),
    ]
    for fig in figures:
        assert isinstance(fig, go.Figure)
        assert len(fig.data) >= 1
    assert len(figures[0].data) == 3
