from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict

from .errors import ConfigError, SvrError
from .opf import OpfOptions
from .powerflow import PowerFlowOptions
from .simulation import ControlConfig
from .svr import SvrGains, SvrLimits

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(os.environ.get("XDG_CONFIG_HOME", Path.home() / ".config")) / "voltcontrol"

SCENARIO_PATH = CONFIG_DIR / "scenario.json"

# shipped reference case, profiles and scenario
DATA_DIR = Path(__file__).resolve().parent / "data"
REFERENCE_CASE = DATA_DIR / "norway21.case"
REFERENCE_PROFILE = DATA_DIR / "day.csv"
REFERENCE_SCENARIO = DATA_DIR / "scenario.json"

DEFAULT_SCENARIO: Dict[str, Any] = {
    "mode": "svr_tvr",
    "svr_dt_s": 10.0,
    "tvr_period_s": 10800.0,
    "duration_s": 86400.0,
    "gains": {"kp_c": 0.0, "ki_c": 0.02, "kp_j": 0.0, "ki_j": 0.01},
    "price_eur_per_mwh": 10.0,
    "opf": {
        "tolerance": 1e-6,
        "max_iterations": 100,
        "phi_lead_pf": 0.86,
        "alpha_refresh": False,
        "machine_defaults": True,
    },
    "power_flow": {"tolerance_pu": 1e-8, "max_iterations": 25, "enforce_gen_q_limits": True},
    "svr": {"v_ref_min": 0.95, "v_ref_max": 1.10, "q_total_floor_mvar": 0.1},
    "initial_pilot_pu": {},
    "opf_failure": "hold",
}


def ensure_dirs() -> None:
    CONFIG_DIR.mkdir(parents=True, exist_ok=True)


def _number(value: Any, key: str) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _positive_float(value: Any, key: str) -> float:
    val = _number(value, key)
    if val <= 0:
        raise ConfigError(f"{key}: must be positive")
    return val


def _non_negative_float(value: Any, key: str) -> float:
    val = _number(value, key)
    if val < 0:
        raise ConfigError(f"{key}: must be non-negative")
    return val


def _positive_int(value: Any, key: str) -> int:
    val = _number(value, key)
    if val < 1 or val != int(val):
        raise ConfigError(f"{key}: must be a positive integer")
    return int(val)


def _bool(value: Any, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true or false")
    return value


def _section(cfg: Dict[str, Any], name: str) -> Dict[str, Any]:
    raw = cfg.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = sorted(set(raw) - set(DEFAULT_SCENARIO[name]))
    if unknown:
        raise ConfigError(f"{name}: unknown keys {', '.join(unknown)}")
    merged = dict(DEFAULT_SCENARIO[name])
    merged.update(raw)
    return merged


def normalize_scenario(cfg: Dict[str, Any] | None) -> Dict[str, Any]:
    """Fully populated scenario dict; invalid values raise ConfigError."""
    cfg = cfg if isinstance(cfg, dict) else {}
    for key in sorted(set(cfg) - set(DEFAULT_SCENARIO)):
        logger.warning("ignoring unknown scenario key %r", key)

    gains = _section(cfg, "gains")
    opf = _section(cfg, "opf")
    pf = _section(cfg, "power_flow")
    svr = _section(cfg, "svr")
    pilots = cfg.get("initial_pilot_pu", {})
    if not isinstance(pilots, dict):
        raise ConfigError("initial_pilot_pu: expected an object mapping area id to pu")
    mode = cfg.get("mode", DEFAULT_SCENARIO["mode"])
    if not isinstance(mode, str):
        raise ConfigError("mode: expected a string")
    failure = cfg.get("opf_failure", DEFAULT_SCENARIO["opf_failure"])

    out = {
        "mode": mode,
        "svr_dt_s": _positive_float(cfg.get("svr_dt_s", DEFAULT_SCENARIO["svr_dt_s"]), "svr_dt_s"),
        "tvr_period_s": _positive_float(cfg.get("tvr_period_s", DEFAULT_SCENARIO["tvr_period_s"]), "tvr_period_s"),
        "duration_s": _positive_float(cfg.get("duration_s", DEFAULT_SCENARIO["duration_s"]), "duration_s"),
        "gains": {
            "kp_c": _non_negative_float(gains["kp_c"], "gains.kp_c"),
            "ki_c": _positive_float(gains["ki_c"], "gains.ki_c"),
            "kp_j": _non_negative_float(gains["kp_j"], "gains.kp_j"),
            "ki_j": _positive_float(gains["ki_j"], "gains.ki_j"),
        },
        "price_eur_per_mwh": _non_negative_float(
            cfg.get("price_eur_per_mwh", DEFAULT_SCENARIO["price_eur_per_mwh"]), "price_eur_per_mwh"
        ),
        "opf": {
            "tolerance": _positive_float(opf["tolerance"], "opf.tolerance"),
            "max_iterations": _positive_int(opf["max_iterations"], "opf.max_iterations"),
            "phi_lead_pf": _positive_float(opf["phi_lead_pf"], "opf.phi_lead_pf"),
            "alpha_refresh": _bool(opf["alpha_refresh"], "opf.alpha_refresh"),
            "machine_defaults": _bool(opf["machine_defaults"], "opf.machine_defaults"),
        },
        "power_flow": {
            "tolerance_pu": _positive_float(pf["tolerance_pu"], "power_flow.tolerance_pu"),
            "max_iterations": _positive_int(pf["max_iterations"], "power_flow.max_iterations"),
            "enforce_gen_q_limits": _bool(pf["enforce_gen_q_limits"], "power_flow.enforce_gen_q_limits"),
        },
        "svr": {
            "v_ref_min": _positive_float(svr["v_ref_min"], "svr.v_ref_min"),
            "v_ref_max": _positive_float(svr["v_ref_max"], "svr.v_ref_max"),
            "q_total_floor_mvar": _non_negative_float(svr["q_total_floor_mvar"], "svr.q_total_floor_mvar"),
        },
        "initial_pilot_pu": {
            str(k): _positive_float(v, f"initial_pilot_pu.{k}") for k, v in sorted(pilots.items(), key=lambda kv: str(kv[0]))
        },
        "opf_failure": failure,
    }
    if out["opf"]["phi_lead_pf"] > 1:
        raise ConfigError("opf.phi_lead_pf: a power factor must not exceed 1")
    return out


def scenario_from_dict(cfg: Dict[str, Any] | None) -> ControlConfig:
    norm = normalize_scenario(cfg)
    try:
        pilots = {int(k): v for k, v in norm["initial_pilot_pu"].items()}
    except ValueError:
        raise ConfigError("initial_pilot_pu: area ids must be integers") from None
    try:
        return ControlConfig(
            mode=norm["mode"],
            svr_dt_s=norm["svr_dt_s"],
            tvr_period_s=norm["tvr_period_s"],
            duration_s=norm["duration_s"],
            gains=SvrGains(**norm["gains"]),
            svr_limits=SvrLimits(**norm["svr"]),
            opf=OpfOptions(**norm["opf"]),
            power_flow=PowerFlowOptions(**norm["power_flow"]),
            initial_pilot_pu=pilots,
            opf_failure=norm["opf_failure"],
            price_eur_per_mwh=norm["price_eur_per_mwh"],
        )
    except (SvrError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_scenario(path: Path | None = None) -> ControlConfig:
    """Scenario from ``path``, else from the user config dir, else the defaults.

    A user scenario file that exists but does not parse is an error, not a
    reason to fall back.
    """
    if path is None:
        if not SCENARIO_PATH.exists():
            return scenario_from_dict({})
        path = SCENARIO_PATH
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return scenario_from_dict(raw)


def save_scenario(cfg: ControlConfig | Dict[str, Any], path: Path | None = None) -> Path:
    target = Path(path) if path is not None else SCENARIO_PATH
    data = cfg.to_dict() if isinstance(cfg, ControlConfig) else copy.deepcopy(cfg)
    normalized = normalize_scenario(data)
    if path is None:
        ensure_dirs()
    else:
        target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(normalized, indent=2), encoding="utf-8")
    return target
