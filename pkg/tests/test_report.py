import json

import pandas as pd
import pytest

from voltcontrol.opf import build_opf, solve_opf
from voltcontrol.powerflow import nominal_setpoints, solve_power_flow
from voltcontrol.profiles import ScenarioProfile
from voltcontrol.report import (
    RunManifest,
    summary_text,
    write_comparison,
    write_opf,
    write_power_flow,
    write_trace,
)
from voltcontrol.simulation import ControlConfig, LossComparison, compare_scenarios, cost_savings, run_scenario

from .conftest import GOLDEN_DIR


def _header(path):
    with open(path, encoding="utf-8") as fh:
        return fh.readline()


def _assert_golden_headers(paths):
    for path in paths:
        if path.suffix == ".csv":
            assert _header(path) == _header(GOLDEN_DIR / path.name), path.name


def test_power_flow_files(tmp_path, reference_net):
    sol = solve_power_flow(reference_net, nominal_setpoints(reference_net))
    paths = write_power_flow(tmp_path, reference_net, sol)
    assert sorted(p.name for p in paths) == ["branches.csv", "buses.csv", "gens.csv", "losses.csv"]
    _assert_golden_headers(paths)
    buses = pd.read_csv(tmp_path / "buses.csv")
    assert len(buses) == 21
    assert buses["bus"].iloc[0] == "B1"
    assert len(pd.read_csv(tmp_path / "branches.csv")) == 26
    losses = pd.read_csv(tmp_path / "losses.csv")
    assert losses["losses_mw"].iloc[0] == pytest.approx(sol.losses_mw, rel=1e-8)


def test_opf_files(tmp_path, three_bus_net):
    op = solve_power_flow(three_bus_net, nominal_setpoints(three_bus_net))
    sol = solve_opf(build_opf(three_bus_net, op))
    paths = write_opf(tmp_path, three_bus_net, sol)
    _assert_golden_headers(paths)
    setpoints = pd.read_csv(tmp_path / "setpoints.csv")
    assert list(setpoints["gen"]) == ["G1", "G2"]
    assert list(pd.read_csv(tmp_path / "shunts.csv")["shunt"]) == ["C1"]
    summary = json.loads((tmp_path / "opf_summary.json").read_text(encoding="utf-8"))
    assert summary["status"] == sol.status
    assert set(summary["pilot_refs"]) == {"B3"}


@pytest.fixture
def two_bus_trace(two_bus_net):
    cfg = ControlConfig(mode="baseline", svr_dt_s=10.0, tvr_period_s=10.0, duration_s=30.0)
    return run_scenario(two_bus_net, ScenarioProfile.for_network(two_bus_net), cfg)


def test_trace_files_are_long_format(tmp_path, two_bus_net, two_bus_trace):
    paths = write_trace(tmp_path, two_bus_net, two_bus_trace)
    _assert_golden_headers(paths)
    buses = pd.read_csv(tmp_path / "buses.csv")
    assert len(buses) == 3 * 2
    assert list(buses["time_s"]) == [0.0, 0.0, 10.0, 10.0, 20.0, 20.0]
    assert list(buses["bus"][:2]) == ["B1", "B2"]
    assert len(pd.read_csv(tmp_path / "gens.csv")) == 3
    assert len(pd.read_csv(tmp_path / "losses.csv")) == 3
    assert pd.read_csv(tmp_path / "events.csv").empty


def test_comparison_file(tmp_path, two_bus_trace):
    path = write_comparison(tmp_path, compare_scenarios(two_bus_trace, two_bus_trace))
    _assert_golden_headers([path])
    df = pd.read_csv(path)
    assert (df["delta_mw"] == 0).all()


def test_summary_text():
    cmp = LossComparison.from_losses([0.0, 10.0], [1.0, 1.0], [0.59, 0.59])
    text = summary_text(cmp, cost_savings(cmp, 10.0), 10.0, 8)
    assert "TVR updates:        8" in text
    assert "4.10 €/h" in text
    assert "98.40 €/day" in text
    assert "35916.00 €/year" in text
    assert "100 €/day / 36 000 €/year" in text
    assert "41.0 %" in text


def test_manifest(tmp_path):
    manifest = RunManifest(command="pf", case_path="x.case", profile_path=None, config_path=None, out_dir=str(tmp_path))
    manifest.add(tmp_path / "buses.csv", tmp_path / "losses.csv", tmp_path / "buses.csv")
    path = manifest.write()
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["files"] == ["buses.csv", "losses.csv", "manifest.json"]
    assert data["command"] == "pf"
    assert {"python", "numpy", "scipy", "pandas"} <= set(data["versions"])
