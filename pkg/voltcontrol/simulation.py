"""
Quasi-steady-state daily run.

Each sample: scale loads and wind, optionally run the tertiary OPF, step the
secondary controllers on the previous sample's measurements, solve the power
flow with the resulting references and record the operating point.

While secondary control is active, a bus voltage guard shifts the references
of an area whose buses leave [v_min, v_max] and holds its integrators from
pushing further out until the area is back inside.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, OpfBuildError, OpfError, PowerFlowError, SimulationError, TraceMismatchError
from .network import Network, build_admittance, case_hash
from .opf import OpfOptions, build_opf, participation_factors, solve_opf
from .powerflow import (
    PowerFlowOptions,
    PowerFlowSolution,
    Setpoints,
    nominal_setpoints,
    scaled_setpoints,
    solve_power_flow,
)
from .profiles import ScenarioProfile
from .svr import (
    SvrAreaState,
    SvrGains,
    SvrLimits,
    SvrMeasurement,
    init_area_state,
    shift_area_references,
    svr_step,
)

logger = logging.getLogger(__name__)

MODES = ("baseline", "svr_only", "svr_tvr")
OPF_FAILURE_POLICIES = ("hold", "abort")
HOURS_PER_DAY = 24.0
HOURS_PER_YEAR = 8760.0

VOLTAGE_GUARD_TOL_PU = 1e-6
# the guard aims this far inside the violated bound
VOLTAGE_GUARD_MARGIN_PU = 1e-4
VOLTAGE_GUARD_RELEASE_PU = 2e-3
VOLTAGE_GUARD_PASSES = 8


@dataclass(frozen=True)
class ControlConfig:
    mode: str = "svr_tvr"
    svr_dt_s: float = 10.0
    tvr_period_s: float = 10800.0
    duration_s: float = 86400.0
    gains: SvrGains = field(default_factory=SvrGains)
    svr_limits: SvrLimits = field(default_factory=SvrLimits)
    opf: OpfOptions = field(default_factory=OpfOptions)
    power_flow: PowerFlowOptions = field(default_factory=PowerFlowOptions)
    # area id -> pilot setpoint used until the first TVR update
    initial_pilot_pu: Dict[int, float] = field(default_factory=dict)
    opf_failure: str = "hold"
    price_eur_per_mwh: float = 10.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.svr_dt_s <= 0 or self.tvr_period_s <= 0 or self.duration_s <= 0:
            raise ConfigError("svr_dt_s, tvr_period_s and duration_s must be positive")
        if not _is_multiple(self.tvr_period_s, self.svr_dt_s):
            raise ConfigError("tvr_period_s must be a multiple of svr_dt_s")
        if not _is_multiple(self.duration_s, self.svr_dt_s):
            raise ConfigError("duration_s must be a multiple of svr_dt_s")
        if self.opf_failure not in OPF_FAILURE_POLICIES:
            raise ConfigError(f"opf_failure must be one of {', '.join(OPF_FAILURE_POLICIES)}")
        if self.price_eur_per_mwh < 0:
            raise ConfigError("price_eur_per_mwh must be non-negative")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s / self.svr_dt_s))

    @property
    def tvr_every(self) -> int:
        return int(round(self.tvr_period_s / self.svr_dt_s))

    def with_mode(self, mode: str) -> "ControlConfig":
        return dataclasses.replace(self, mode=mode)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "svr_dt_s": self.svr_dt_s,
            "tvr_period_s": self.tvr_period_s,
            "duration_s": self.duration_s,
            "gains": dataclasses.asdict(self.gains),
            "svr": dataclasses.asdict(self.svr_limits),
            "opf": {
                "tolerance": self.opf.tolerance,
                "max_iterations": self.opf.max_iterations,
                "phi_lead_pf": self.opf.phi_lead_pf,
                "alpha_refresh": self.opf.alpha_refresh,
                "machine_defaults": self.opf.machine_defaults,
            },
            "power_flow": {
                "tolerance_pu": self.power_flow.tolerance_pu,
                "max_iterations": self.power_flow.max_iterations,
                "enforce_gen_q_limits": self.power_flow.enforce_gen_q_limits,
            },
            "initial_pilot_pu": {str(k): v for k, v in sorted(self.initial_pilot_pu.items())},
            "opf_failure": self.opf_failure,
            "price_eur_per_mwh": self.price_eur_per_mwh,
        }


def _is_multiple(value: float, step: float) -> bool:
    ratio = value / step
    return abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1


@dataclass(frozen=True)
class TraceEvent:
    time_s: float
    kind: str
    payload: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    mode: str
    times_s: np.ndarray
    v_pu: np.ndarray
    theta_rad: np.ndarray
    gen_p_mw: np.ndarray
    gen_q_mvar: np.ndarray
    gen_v_ref_pu: np.ndarray
    shunt_q_mvar: np.ndarray
    losses_mw: np.ndarray
    events: Tuple[TraceEvent, ...]
    metadata: Dict[str, Any]

    def events_of(self, kind: str) -> List[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    @property
    def tvr_updates(self) -> int:
        return len(self.events_of("tvr_update"))


class _Recorder:
    def __init__(self, n: int, net: Network) -> None:
        nb, ng, nc = net.n_bus, len(net.generators), len(net.shunts)
        self.times = np.zeros(n)
        self.v = np.zeros((n, nb))
        self.theta = np.zeros((n, nb))
        self.p = np.zeros((n, ng))
        self.q = np.zeros((n, ng))
        self.v_ref = np.zeros((n, ng))
        self.shunt = np.zeros((n, nc))
        self.losses = np.zeros(n)
        self.events: List[TraceEvent] = []

    def record(self, k: int, t: float, sol: PowerFlowSolution, v_ref: np.ndarray) -> None:
        self.times[k] = t
        self.v[k] = sol.v_pu
        self.theta[k] = sol.theta_rad
        self.p[k] = sol.gen_p_mw
        self.q[k] = sol.gen_q_mvar
        self.v_ref[k] = v_ref
        self.shunt[k] = sol.shunt_q_mvar
        self.losses[k] = sol.losses_mw


def _solve(net, sp: Setpoints, opts: PowerFlowOptions, prev, adm, t: float) -> PowerFlowSolution:
    try:
        sol = solve_power_flow(net, sp, opts, initial=prev, admittance=adm)
    except PowerFlowError as e:
        raise SimulationError(str(e), time_s=t) from e
    if not sol.converged:
        raise SimulationError(
            f"power flow did not converge (mismatch {sol.max_mismatch_pu:.3e} pu)",
            time_s=t,
        )
    return sol


def _area_states(net: Network, v_ref: np.ndarray, pilots: Dict[int, float], alphas: Dict[int, float]):
    return {
        a.id: init_area_state(
            net,
            a.id,
            v_ref,
            pilots[a.id],
            [alphas[k] for k in net.generators_in_area(a.id)],
        )
        for a in net.areas
        if net.generators_in_area(a.id)
    }


def _guard_voltages(
    net: Network,
    sp: Setpoints,
    v_ref: np.ndarray,
    shunt_q: np.ndarray,
    states: Dict[int, SvrAreaState],
    sol: PowerFlowSolution,
    cfg: ControlConfig,
    opts: PowerFlowOptions,
    adm,
    t: float,
    events: List[TraceEvent],
) -> PowerFlowSolution:
    """Move area references until every bus of a controlled area is inside [v_min, v_max].

    ``states`` and ``v_ref`` are updated in place; the returned solution is the
    one solved with the final references. A latched guard is released once the
    area is back inside its bounds by at least VOLTAGE_GUARD_RELEASE_PU.
    """
    v_max = np.array([b.v_max for b in net.buses])
    v_min = np.array([b.v_min for b in net.buses])
    buses = {area_id: np.array(net.area(area_id).buses, dtype=np.int64) for area_id in states}

    for area_id, state in states.items():
        v = sol.v_pu[buses[area_id]]
        bound = v_max[buses[area_id]] - v if state.guard == "max" else v - v_min[buses[area_id]]
        if state.guard is not None and float(np.min(bound)) > VOLTAGE_GUARD_RELEASE_PU:
            states[area_id] = dataclasses.replace(state, guard=None)

    gain = {area_id: 1.0 for area_id in states}
    shifted: Dict[int, float] = {}
    for _ in range(VOLTAGE_GUARD_PASSES):
        moves: Dict[int, Tuple[float, str, int]] = {}
        for area_id in states:
            idx = buses[area_id]
            over = sol.v_pu[idx] - v_max[idx]
            under = v_min[idx] - sol.v_pu[idx]
            if over.max() > VOLTAGE_GUARD_TOL_PU:
                i = int(np.argmax(over))
                moves[area_id] = (-(over[i] + VOLTAGE_GUARD_MARGIN_PU) / gain[area_id], "max", int(idx[i]))
            elif under.max() > VOLTAGE_GUARD_TOL_PU:
                i = int(np.argmax(under))
                moves[area_id] = ((under[i] + VOLTAGE_GUARD_MARGIN_PU) / gain[area_id], "min", int(idx[i]))
        if not moves:
            break
        before = sol.v_pu.copy()
        for area_id, (shift, side, bus) in moves.items():
            if states[area_id].guard != side and area_id not in shifted:
                events.append(
                    TraceEvent(t, "voltage_guard", {"area": area_id, "bus": net.buses[bus].name, "side": side})
                )
            state = shift_area_references(states[area_id], shift, side, cfg.svr_limits)
            states[area_id] = state
            shifted[area_id] = shifted.get(area_id, 0.0) + shift
            for g in state.generators:
                v_ref[g.gen] = g.v_ref
        sol = _solve(net, sp.replace(gen_v_pu=v_ref, shunt_q_mvar=shunt_q), opts, sol, adm, t)
        for area_id, (shift, _, bus) in moves.items():
            # observed share of the reference shift that reached the worst bus
            gain[area_id] = min(max((sol.v_pu[bus] - before[bus]) / shift, 0.2), 1.0)

    worst = float(np.max(np.maximum(sol.v_pu - v_max, v_min - sol.v_pu)))
    if worst > VOLTAGE_GUARD_TOL_PU:
        logger.warning("t=%g s: bus voltages still %.2e pu outside their bounds after the guard", t, worst)
    elif shifted:
        logger.debug("t=%g s: voltage guard shifted references %s", t, shifted)
    return sol


def run_scenario(net: Network, profile: ScenarioProfile, cfg: ControlConfig) -> SimulationTrace:
    """Run one scenario over [0, duration) and return its trace."""
    profile.require(net)
    adm = build_admittance(net)
    warm = dataclasses.replace(cfg.power_flow, flat_start=False)
    nominal = nominal_setpoints(net)
    v_ref = nominal.gen_v_pu.copy()
    shunt_q = nominal.shunt_q_mvar.copy()
    alphas = {k: g.alpha for k, g in enumerate(net.generators)}
    svr_on = cfg.mode != "baseline"
    tvr_on = cfg.mode == "svr_tvr"

    rec = _Recorder(cfg.n_samples, net)
    states: Dict[int, SvrAreaState] = {}
    prev: Optional[PowerFlowSolution] = None
    prev_limited: Tuple[Optional[str], ...] = (None,) * len(net.generators)
    prev_clamped: Dict[int, Optional[str]] = {}

    logger.info("running %s scenario: %d samples of %g s", cfg.mode, cfg.n_samples, cfg.svr_dt_s)
    for k in range(cfg.n_samples):
        t = k * cfg.svr_dt_s
        sp = scaled_setpoints(net, profile, t / 3600.0, base=nominal)

        if tvr_on and k % cfg.tvr_every == 0:
            op = _solve(net, sp.replace(gen_v_pu=v_ref, shunt_q_mvar=shunt_q), warm, prev, adm, t)
            opf_sol = None
            try:
                opf_sol = solve_opf(build_opf(net, op, cfg.opf), cfg.opf)
            except OpfBuildError:
                raise
            except (OpfError, PowerFlowError) as e:
                logger.warning("t=%g s: OPF raised %s", t, e)
            if opf_sol is not None and opf_sol.optimal:
                v_ref = np.asarray(opf_sol.gen_v_pu, dtype=float).copy()
                shunt_q = np.asarray(opf_sol.shunt_q_mvar, dtype=float).copy()
                if cfg.opf.alpha_refresh:
                    alphas.update(participation_factors(net, opf_sol, cfg.opf.alpha_floor))
                states = _area_states(net, v_ref, opf_sol.pilot_refs, alphas)
                rec.events.append(
                    TraceEvent(
                        t,
                        "tvr_update",
                        {
                            "pilot_refs": {str(a): round(v, 9) for a, v in sorted(opf_sol.pilot_refs.items())},
                            "objective_mw": opf_sol.objective_mw,
                            "start_losses_mw": opf_sol.start_losses_mw,
                            "iterations": opf_sol.iterations,
                        },
                    )
                )
            else:
                status = opf_sol.status if opf_sol is not None else "error"
                if cfg.opf_failure == "abort":
                    raise SimulationError(f"OPF failed with status {status}", time_s=t, kind="opf")
                logger.warning("t=%g s: OPF failed (%s); holding previous setpoints", t, status)
                rec.events.append(TraceEvent(t, "opf_failure", {"status": status}))
                if svr_on and not states:
                    states = _area_states(net, v_ref, _initial_pilots(net, cfg, op), alphas)
        elif svr_on and prev is not None:
            if not states:
                states = _area_states(net, v_ref, _initial_pilots(net, cfg, prev), alphas)
            for area_id, state in states.items():
                meas = SvrMeasurement.from_solution(prev, state)
                state = svr_step(state, meas, cfg.gains, cfg.svr_dt_s, cfg.svr_limits)
                states[area_id] = state
                for g in state.generators:
                    v_ref[g.gen] = g.v_ref
                    if g.clamped is not None and prev_clamped.get(g.gen) is None:
                        rec.events.append(
                            TraceEvent(t, "clamp_active", {"gen": net.generator_label(g.gen), "side": g.clamped})
                        )
                    prev_clamped[g.gen] = g.clamped

        sol = _solve(net, sp.replace(gen_v_pu=v_ref, shunt_q_mvar=shunt_q), warm, prev, adm, t)
        if states:
            sol = _guard_voltages(net, sp, v_ref, shunt_q, states, sol, cfg, warm, adm, t, rec.events)
        for g_idx, (before, now) in enumerate(zip(prev_limited, sol.gen_q_limited)):
            if now is not None and before is None:
                rec.events.append(TraceEvent(t, "q_limit_hit", {"gen": net.generator_label(g_idx), "side": now}))
        prev_limited = sol.gen_q_limited
        rec.record(k, t, sol, v_ref)
        prev = sol

    trace = SimulationTrace(
        mode=cfg.mode,
        times_s=rec.times,
        v_pu=rec.v,
        theta_rad=rec.theta,
        gen_p_mw=rec.p,
        gen_q_mvar=rec.q,
        gen_v_ref_pu=rec.v_ref,
        shunt_q_mvar=rec.shunt,
        losses_mw=rec.losses,
        events=tuple(rec.events),
        metadata={
            "case_hash": case_hash(net),
            "profile_hash": profile.fingerprint(),
            "svr_dt_s": cfg.svr_dt_s,
            "duration_s": cfg.duration_s,
            "config": cfg.to_dict(),
        },
    )
    logger.info(
        "%s scenario done: mean losses %.4f MW, %d TVR updates",
        cfg.mode,
        float(np.mean(trace.losses_mw)),
        trace.tvr_updates,
    )
    return trace


def _initial_pilots(net: Network, cfg: ControlConfig, sol: PowerFlowSolution) -> Dict[int, float]:
    return {a.id: float(cfg.initial_pilot_pu.get(a.id, sol.v_pu[a.pilot_bus])) for a in net.areas}


@dataclass(frozen=True, eq=False)
class LossComparison:
    times_s: np.ndarray
    baseline_mw: np.ndarray
    controlled_mw: np.ndarray
    delta_mw: np.ndarray
    peak_reduction_mw: float
    peak_reduction_pct: float
    peak_time_s: float
    avg_reduction_mw: float
    avg_reduction_pct: float
    baseline_trace: Optional[SimulationTrace] = field(default=None, repr=False)
    controlled_trace: Optional[SimulationTrace] = field(default=None, repr=False)

    @classmethod
    def from_losses(cls, times_s, baseline_mw, controlled_mw, **traces) -> "LossComparison":
        """Peak: largest per-sample delta, in % of the baseline at that instant. Average: in % of the baseline mean."""
        times = np.asarray(times_s, dtype=float)
        base = np.asarray(baseline_mw, dtype=float)
        ctrl = np.asarray(controlled_mw, dtype=float)
        delta = base - ctrl
        i = int(np.argmax(delta))
        avg = float(np.mean(delta))
        base_avg = float(np.mean(base))
        return cls(
            times_s=times,
            baseline_mw=base,
            controlled_mw=ctrl,
            delta_mw=delta,
            peak_reduction_mw=float(delta[i]),
            peak_reduction_pct=float(delta[i] / base[i] * 100.0) if base[i] != 0 else 0.0,
            peak_time_s=float(times[i]),
            avg_reduction_mw=avg,
            avg_reduction_pct=avg / base_avg * 100.0 if base_avg != 0 else 0.0,
            **traces,
        )


def compare_scenarios(baseline: SimulationTrace, controlled: SimulationTrace) -> LossComparison:
    for key in ("case_hash", "profile_hash", "svr_dt_s", "duration_s"):
        if baseline.metadata.get(key) != controlled.metadata.get(key):
            raise TraceMismatchError(f"traces differ in {key}")
    if baseline.times_s.shape != controlled.times_s.shape or not np.array_equal(baseline.times_s, controlled.times_s):
        raise TraceMismatchError("traces have different sample times")
    return LossComparison.from_losses(
        baseline.times_s,
        baseline.losses_mw,
        controlled.losses_mw,
        baseline_trace=baseline,
        controlled_trace=controlled,
    )


@dataclass(frozen=True)
class CostSavings:
    eur_per_hour: float
    eur_per_day: float
    eur_per_year: float


def cost_savings(cmp: LossComparison, price_eur_per_mwh: float) -> CostSavings:
    if price_eur_per_mwh < 0:
        raise ConfigError("price must be non-negative")
    per_hour = cmp.avg_reduction_mw * price_eur_per_mwh
    return CostSavings(
        eur_per_hour=per_hour,
        eur_per_day=per_hour * HOURS_PER_DAY,
        eur_per_year=per_hour * HOURS_PER_YEAR,
    )


def run_pair(net: Network, profile: ScenarioProfile, cfg: ControlConfig) -> Tuple[SimulationTrace, SimulationTrace]:
    """Baseline and controlled runs side by side; the controlled mode comes from cfg."""
    with ThreadPoolExecutor(max_workers=2) as pool:
        base = pool.submit(run_scenario, net, profile, cfg.with_mode("baseline"))
        ctrl = pool.submit(run_scenario, net, profile, cfg)
        return base.result(), ctrl.result()
