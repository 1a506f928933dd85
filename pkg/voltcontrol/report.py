from __future__ import annotations

import json
import math
import platform
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .network import Network
from .opf import OpfSolution
from .powerflow import PowerFlowSolution
from .simulation import CostSavings, LossComparison, SimulationTrace

FLOAT_FORMAT = "%.9g"

BUS_COLUMNS = ["time_s", "bus", "v_pu", "theta_rad"]
GEN_COLUMNS = ["time_s", "gen", "p_mw", "q_mvar"]
LOSS_COLUMNS = ["time_s", "losses_mw"]
COMPARE_COLUMNS = ["time_s", "baseline_mw", "controlled_mw", "delta_mw"]
BRANCH_COLUMNS = ["from_bus", "to_bus", "p_from_mw", "q_from_mvar", "p_to_mw", "q_to_mvar", "loading_pct"]
SETPOINT_COLUMNS = ["gen", "bus", "v_set_pu", "p_mw", "q_mvar"]
SHUNT_COLUMNS = ["shunt", "bus", "q_mvar"]
EVENT_COLUMNS = ["time_s", "kind", "payload"]


def _write(df: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def _gen_names(net: Network) -> List[str]:
    return [f"G{k + 1}" for k in range(len(net.generators))]


def _long(times: np.ndarray, names: List[str], columns: List[str], *blocks: np.ndarray) -> pd.DataFrame:
    k, m = len(times), len(names)
    data = {columns[0]: np.repeat(times, m), columns[1]: np.tile(names, k)}
    for col, block in zip(columns[2:], blocks):
        data[col] = np.asarray(block).reshape(k * m)
    return pd.DataFrame(data, columns=columns)


def write_power_flow(out_dir: Path, net: Network, sol: PowerFlowSolution, time_s: float = 0.0) -> List[Path]:
    times = np.array([time_s])
    buses = [b.name for b in net.buses]
    branches = pd.DataFrame(
        {
            "from_bus": [net.buses[br.from_bus].name for br in net.branches],
            "to_bus": [net.buses[br.to_bus].name for br in net.branches],
            "p_from_mw": sol.flows.p_from_mw,
            "q_from_mvar": sol.flows.q_from_mvar,
            "p_to_mw": sol.flows.p_to_mw,
            "q_to_mvar": sol.flows.q_to_mvar,
            "loading_pct": sol.flows.loading_pct,
        },
        columns=BRANCH_COLUMNS,
    )
    return [
        _write(_long(times, buses, BUS_COLUMNS, sol.v_pu[None, :], sol.theta_rad[None, :]), out_dir / "buses.csv"),
        _write(
            _long(times, _gen_names(net), GEN_COLUMNS, sol.gen_p_mw[None, :], sol.gen_q_mvar[None, :]),
            out_dir / "gens.csv",
        ),
        _write(branches, out_dir / "branches.csv"),
        _write(pd.DataFrame({"time_s": times, "losses_mw": [sol.losses_mw]}, columns=LOSS_COLUMNS), out_dir / "losses.csv"),
    ]


def write_opf(out_dir: Path, net: Network, sol: OpfSolution) -> List[Path]:
    gens = pd.DataFrame(
        {
            "gen": _gen_names(net),
            "bus": [net.buses[g.bus].name for g in net.generators],
            "v_set_pu": sol.gen_v_pu,
            "p_mw": sol.gen_p_mw,
            "q_mvar": sol.gen_q_mvar,
        },
        columns=SETPOINT_COLUMNS,
    )
    shunts = pd.DataFrame(
        {
            "shunt": [f"C{i + 1}" for i in range(len(net.shunts))],
            "bus": [net.buses[c.bus].name for c in net.shunts],
            "q_mvar": sol.shunt_q_mvar,
        },
        columns=SHUNT_COLUMNS,
    )
    buses = [b.name for b in net.buses]
    summary = {
        "status": sol.status,
        "objective_mw": sol.objective_mw,
        "start_losses_mw": sol.start_losses_mw,
        "iterations": sol.iterations,
        "delta_f_hz": sol.delta_f_hz,
        "pilot_refs": {net.buses[a.pilot_bus].name: sol.pilot_refs[a.id] for a in net.areas},
        "kkt": asdict(sol.kkt),
    }
    summary_path = out_dir / "opf_summary.json"
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return [
        _write(gens, out_dir / "setpoints.csv"),
        _write(shunts, out_dir / "shunts.csv"),
        _write(
            _long(np.array([0.0]), buses, BUS_COLUMNS, sol.v_setpoints[None, :], sol.theta_rad[None, :]),
            out_dir / "buses.csv",
        ),
        summary_path,
    ]


def write_trace(out_dir: Path, net: Network, trace: SimulationTrace) -> List[Path]:
    buses = [b.name for b in net.buses]
    events = pd.DataFrame(
        {
            "time_s": [e.time_s for e in trace.events],
            "kind": [e.kind for e in trace.events],
            "payload": [json.dumps(e.payload, sort_keys=True) for e in trace.events],
        },
        columns=EVENT_COLUMNS,
    )
    return [
        _write(_long(trace.times_s, buses, BUS_COLUMNS, trace.v_pu, trace.theta_rad), out_dir / "buses.csv"),
        _write(_long(trace.times_s, _gen_names(net), GEN_COLUMNS, trace.gen_p_mw, trace.gen_q_mvar), out_dir / "gens.csv"),
        _write(pd.DataFrame({"time_s": trace.times_s, "losses_mw": trace.losses_mw}, columns=LOSS_COLUMNS), out_dir / "losses.csv"),
        _write(events, out_dir / "events.csv"),
    ]


def write_comparison(out_dir: Path, cmp: LossComparison) -> Path:
    df = pd.DataFrame(
        {
            "time_s": cmp.times_s,
            "baseline_mw": cmp.baseline_mw,
            "controlled_mw": cmp.controlled_mw,
            "delta_mw": cmp.delta_mw,
        },
        columns=COMPARE_COLUMNS,
    )
    return _write(df, out_dir / "compare.csv")


def _round_sig(value: float, digits: int = 2) -> float:
    if value == 0:
        return 0.0
    return round(value, digits - 1 - int(math.floor(math.log10(abs(value)))))


def _grouped(value: float) -> str:
    return f"{value:,.0f}".replace(",", " ")


def _clock(t_s: float) -> str:
    minutes = int(round(t_s / 60.0))
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def summary_text(
    cmp: LossComparison,
    savings: CostSavings,
    price_eur_per_mwh: float,
    tvr_updates: int,
    controlled_mode: str = "svr_tvr",
) -> str:
    dt = float(cmp.times_s[1] - cmp.times_s[0]) if len(cmp.times_s) > 1 else 0.0
    lines = [
        f"Loss comparison: baseline vs {controlled_mode}",
        f"  samples:            {len(cmp.times_s)} (dt {dt:g} s)",
        f"  TVR updates:        {tvr_updates}",
        f"  baseline average:   {float(np.mean(cmp.baseline_mw)):.3f} MW",
        f"  peak reduction:     {cmp.peak_reduction_mw:.3f} MW ({cmp.peak_reduction_pct:.1f} %) at {_clock(cmp.peak_time_s)}",
        f"  average reduction:  {cmp.avg_reduction_mw:.3f} MW ({cmp.avg_reduction_pct:.1f} %)",
        f"  cost savings at {price_eur_per_mwh:g} €/MWh:",
        f"    {savings.eur_per_hour:.2f} €/h",
        f"    {savings.eur_per_day:.2f} €/day",
        f"    {savings.eur_per_year:.2f} €/year",
        f"  (exact values; rounded: {_grouped(_round_sig(savings.eur_per_day, 1))} €/day"
        f" / {_grouped(_round_sig(savings.eur_per_year))} €/year)",
    ]
    return "\n".join(lines) + "\n"


def _version(dist: str) -> str:
    try:
        return metadata.version(dist)
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    command: str
    case_path: Optional[str]
    profile_path: Optional[str]
    config_path: Optional[str]
    out_dir: str
    case_hash: Optional[str] = None
    wall_clock_s: float = 0.0
    versions: Dict[str, str] = field(
        default_factory=lambda: {
            "voltcontrol": _version("voltcontrol"),
            "python": platform.python_version(),
            "numpy": _version("numpy"),
            "scipy": _version("scipy"),
            "pandas": _version("pandas"),
        }
    )
    files: List[str] = field(default_factory=list)

    def add(self, *paths: Path) -> None:
        base = Path(self.out_dir)
        for p in paths:
            try:
                rel = str(Path(p).relative_to(base))
            except ValueError:
                rel = str(p)
            if rel not in self.files:
                self.files.append(rel)

    def write(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        data = asdict(self)
        data["files"] = sorted(self.files) + ["manifest.json"]
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path
