import json

import pytest

from voltcontrol.config import (
    DEFAULT_SCENARIO,
    REFERENCE_SCENARIO,
    load_scenario,
    normalize_scenario,
    save_scenario,
    scenario_from_dict,
)
from voltcontrol.errors import ConfigError
from voltcontrol.simulation import ControlConfig


def test_defaults():
    assert normalize_scenario(None) == normalize_scenario({})
    cfg = scenario_from_dict({})
    assert cfg.mode == "svr_tvr"
    assert cfg.gains.ki_c == 0.02
    assert cfg.gains.ki_j == 0.01
    assert cfg.gains.kp_c == 0.0
    assert cfg.tvr_period_s == 10800.0
    assert cfg.price_eur_per_mwh == 10.0
    assert cfg.opf.phi_lead_pf == 0.86
    assert not cfg.opf.alpha_refresh


def test_shipped_scenario():
    cfg = load_scenario(REFERENCE_SCENARIO)
    assert cfg.opf.alpha_refresh
    assert cfg.n_samples == 8640


def test_partial_section_is_merged():
    cfg = scenario_from_dict({"gains": {"ki_c": 0.05}})
    assert cfg.gains.ki_c == 0.05
    assert cfg.gains.ki_j == DEFAULT_SCENARIO["gains"]["ki_j"]


def test_unknown_top_level_key_is_ignored(caplog):
    with caplog.at_level("WARNING"):
        cfg = scenario_from_dict({"colour": "blue"})
    assert cfg.mode == "svr_tvr"
    assert "colour" in caplog.text


def test_initial_pilots():
    cfg = scenario_from_dict({"initial_pilot_pu": {"1": 1.02, "2": 1.01}})
    assert cfg.initial_pilot_pu == {1: 1.02, 2: 1.01}
    with pytest.raises(ConfigError, match="integers"):
        scenario_from_dict({"initial_pilot_pu": {"north": 1.0}})


@pytest.mark.parametrize(
    "raw, message",
    [
        ({"gains": {"ki_x": 1.0}}, "unknown keys ki_x"),
        ({"gains": {"ki_c": 0}}, "gains.ki_c"),
        ({"gains": []}, "expected an object"),
        ({"svr_dt_s": "fast"}, "expected a number"),
        ({"duration_s": True}, "expected a number"),
        ({"opf": {"max_iterations": 2.5}}, "positive integer"),
        ({"opf": {"alpha_refresh": "yes"}}, "true or false"),
        ({"opf": {"phi_lead_pf": 1.2}}, "power factor"),
        ({"price_eur_per_mwh": -5}, "non-negative"),
        ({"mode": "manual"}, "unknown mode"),
        ({"opf_failure": "retry"}, "opf_failure"),
        ({"svr": {"v_ref_min": 1.2}}, "v_ref_min"),
        ({"tvr_period_s": 15.0}, "multiple"),
    ],
)
def test_invalid_scenarios(raw, message):
    with pytest.raises(ConfigError, match=message):
        scenario_from_dict(raw)


def test_save_and_load(tmp_path):
    cfg = ControlConfig(mode="svr_only", duration_s=3600.0, initial_pilot_pu={1: 1.03})
    path = save_scenario(cfg, tmp_path / "nested" / "scenario.json")
    assert path.exists()
    again = load_scenario(path)
    assert again == cfg


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"mode\": \n}", encoding="utf-8")
    with pytest.raises(ConfigError, match="line"):
        load_scenario(bad)
    bad.write_text(json.dumps([1, 2]), encoding="utf-8")
    with pytest.raises(ConfigError, match="JSON object"):
        load_scenario(bad)


def test_malformed_user_scenario_is_an_error(tmp_path, monkeypatch):
    import voltcontrol.config as cfgmod

    user = tmp_path / "scenario.json"
    monkeypatch.setattr(cfgmod, "SCENARIO_PATH", user)
    assert load_scenario() == ControlConfig()

    user.write_text("{\"mode\": \"svr_only\",,}", encoding="utf-8")
    with pytest.raises(ConfigError, match="scenario.json: line 1"):
        load_scenario()
