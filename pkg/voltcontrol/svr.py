"""
Secondary voltage regulation: one central pilot-bus PI controller per area and
one PI power-plant controller per participating generator, summed onto each
generator's AVR reference. Discrete, sampled every ``dt`` seconds.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from .errors import PowerFlowError, SvrError
from .network import Network
from .powerflow import PowerFlowOptions, PowerFlowSolution, Setpoints, solve_power_flow

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-12
DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class SvrGains:
    kp_c: float = 0.0
    ki_c: float = 0.02
    kp_j: float = 0.0
    ki_j: float = 0.01

    def __post_init__(self) -> None:
        if self.ki_c <= 0 or self.ki_j <= 0:
            raise SvrError("integral gains ki_c and ki_j must be positive")
        if self.kp_c < 0 or self.kp_j < 0:
            raise SvrError("proportional gains must be non-negative")


@dataclass(frozen=True)
class SvrLimits:
    v_ref_min: float = 0.95
    v_ref_max: float = 1.10
    q_total_floor_mvar: float = 0.1

    def __post_init__(self) -> None:
        if not self.v_ref_min < self.v_ref_max:
            raise SvrError("v_ref_min must be below v_ref_max")


@dataclass(frozen=True)
class SvrGenerator:
    gen: int
    alpha: float
    v_ref_base: float
    v_ref: float
    integ: float = 0.0
    # "max" / "min" while the output sits on a clamp
    clamped: Optional[str] = None
    # reference before the band clamp, kept only while clamped
    unclamped: Optional[float] = None

    @property
    def windup_flag(self) -> bool:
        return self.clamped is not None


@dataclass(frozen=True)
class SvrAreaState:
    area: int
    pilot_bus: int
    v_ref_svr: float
    integ_c: float
    generators: Tuple[SvrGenerator, ...]
    s_base_mva: float = 100.0
    # "max" / "min" while a bus of the area is held on its voltage bound
    guard: Optional[str] = None

    @property
    def gen_ids(self) -> Tuple[int, ...]:
        return tuple(g.gen for g in self.generators)

    @property
    def v_refs(self) -> np.ndarray:
        return np.array([g.v_ref for g in self.generators])

    @property
    def alphas(self) -> np.ndarray:
        return np.array([g.alpha for g in self.generators])


@dataclass(frozen=True)
class SvrMeasurement:
    v_pilot: float
    gen_ids: Tuple[int, ...]
    gen_q: Tuple[float, ...]
    q_total: float

    def __post_init__(self) -> None:
        if len(self.gen_ids) != len(self.gen_q):
            raise SvrError("measurement has a different number of generator ids and outputs")
        if abs(self.q_total - float(np.sum(self.gen_q))) > 1e-9:
            raise SvrError("q_total does not equal the sum of generator outputs")

    @classmethod
    def from_solution(cls, sol: PowerFlowSolution, state: SvrAreaState) -> "SvrMeasurement":
        q = tuple(float(sol.gen_q_mvar[k]) for k in state.gen_ids)
        return cls(
            v_pilot=float(sol.v_pu[state.pilot_bus]),
            gen_ids=state.gen_ids,
            gen_q=q,
            q_total=float(np.sum(q)),
        )


def init_area_state(
    net: Network,
    area_id: int,
    gen_v_pu: Sequence[float],
    v_ref_svr: float,
    alphas: Optional[Sequence[float]] = None,
) -> SvrAreaState:
    """Fresh controller state: integrators at zero, references at their bases."""
    area = net.area(area_id)
    ids = net.generators_in_area(area_id)
    if not ids:
        raise SvrError(f"area {area_id} has no generator taking part in SVR")
    alpha = list(alphas) if alphas is not None else [net.generators[k].alpha for k in ids]
    gens = tuple(
        SvrGenerator(gen=k, alpha=float(a), v_ref_base=float(gen_v_pu[k]), v_ref=float(gen_v_pu[k]))
        for k, a in zip(ids, alpha)
    )
    return SvrAreaState(
        area=area_id,
        pilot_bus=area.pilot_bus,
        v_ref_svr=float(v_ref_svr),
        integ_c=0.0,
        generators=gens,
        s_base_mva=net.s_base_mva,
    )


def svr_step(
    state: SvrAreaState,
    meas: SvrMeasurement,
    gains: SvrGains,
    dt: float,
    limits: SvrLimits = SvrLimits(),
) -> SvrAreaState:
    """Advance one area by one sample.

    Integrators use forward Euler. Conditional integration: an integrator is
    frozen while the output it drives is clamped and its increment would push
    further into the clamp. The central integrator is frozen only when every
    generator of the area is clamped in the direction the pilot error drives.
    A latched voltage guard counts as a clamp on its side for every integrator.
    """
    if dt <= 0:
        raise SvrError("dt must be positive")
    if tuple(meas.gen_ids) != state.gen_ids:
        raise SvrError(f"area {state.area}: generator set mismatch {tuple(meas.gen_ids)} vs {state.gen_ids}")

    v_err = state.v_ref_svr - meas.v_pilot
    q_total_pu = meas.q_total / state.s_base_mva

    guard = state.guard
    clamps = [g.clamped for g in state.generators]
    if (v_err > 0 and (guard == "max" or all(c == "max" for c in clamps))) or (
        v_err < 0 and (guard == "min" or all(c == "min" for c in clamps))
    ):
        integ_c = state.integ_c
    else:
        integ_c = state.integ_c + v_err * dt
    central = gains.kp_c * v_err + gains.ki_c * integ_c

    out = []
    for g, q in zip(state.generators, meas.gen_q):
        q_err = g.alpha * q_total_pu - q / state.s_base_mva
        held = (g.clamped, guard)
        if (q_err > 0 and "max" in held) or (q_err < 0 and "min" in held):
            integ = g.integ
        else:
            integ = g.integ + q_err * dt
        raw = g.v_ref_base + central + gains.kp_j * q_err + gains.ki_j * integ
        v_ref = min(max(raw, limits.v_ref_min), limits.v_ref_max)
        if raw >= limits.v_ref_max - CLAMP_EPS:
            clamped = "max"
        elif raw <= limits.v_ref_min + CLAMP_EPS:
            clamped = "min"
        else:
            clamped = None
        unclamped = raw if clamped is not None else None
        out.append(dataclasses.replace(g, integ=integ, v_ref=v_ref, clamped=clamped, unclamped=unclamped))
    return dataclasses.replace(state, integ_c=integ_c, generators=tuple(out))


def shift_area_references(
    state: SvrAreaState,
    shift_pu: float,
    side: str,
    limits: SvrLimits = SvrLimits(),
) -> SvrAreaState:
    """Move every reference of the area by ``shift_pu`` and latch the voltage guard on ``side``.

    The base references absorb the shift, so the next sample starts from the
    moved references instead of pulling them back.
    """
    if side not in ("max", "min"):
        raise SvrError(f"guard side must be 'max' or 'min', got {side!r}")
    out = []
    for g in state.generators:
        v_ref = min(max(g.v_ref + shift_pu, limits.v_ref_min), limits.v_ref_max)
        raw = g.unclamped if g.unclamped is not None else g.v_ref
        out.append(
            dataclasses.replace(g, v_ref_base=g.v_ref_base + (v_ref - raw), v_ref=v_ref, clamped=None, unclamped=None)
        )
    return dataclasses.replace(state, generators=tuple(out), guard=side)


def sharing_errors(
    state: SvrAreaState,
    meas: SvrMeasurement,
    limits: SvrLimits = SvrLimits(),
) -> Tuple[np.ndarray, bool]:
    """Per-generator Q_j / Q_total - alpha_j, and whether Q_total was below the floor."""
    if tuple(meas.gen_ids) != state.gen_ids:
        raise SvrError(f"area {state.area}: generator set mismatch")
    if abs(meas.q_total) < limits.q_total_floor_mvar:
        return np.zeros(len(state.generators)), True
    q = np.asarray(meas.gen_q, dtype=float)
    return q / meas.q_total - state.alphas, False


@dataclass(frozen=True)
class LinearPlant:
    """Sensitivities around an operating point, per unit of v_ref change.

    g_pilot[j] = dV_pilot / dv_ref_j; g_q[i, j] = dQ_i / dv_ref_j with Q in pu on s_base.
    """

    g_pilot: np.ndarray
    g_q: np.ndarray
    alpha: np.ndarray

    def __post_init__(self) -> None:
        m = len(self.alpha)
        if np.shape(self.g_pilot) != (m,) or np.shape(self.g_q) != (m, m):
            raise SvrError("linear plant dimensions do not match the participation factors")

    @classmethod
    def scalar(cls, gain: float = 1.0) -> "LinearPlant":
        return cls(g_pilot=np.array([gain]), g_q=np.zeros((1, 1)), alpha=np.array([1.0]))

    @property
    def error_sensitivity(self) -> np.ndarray:
        # rows: pilot error, then each sharing error; E = E0 - H @ dv
        m = len(self.alpha)
        share = np.eye(m) - np.outer(self.alpha, np.ones(m))
        return np.vstack([self.g_pilot[None, :], share @ self.g_q])


@dataclass(frozen=True)
class LoopResponse:
    times_s: np.ndarray
    # columns: pilot error, then per-generator sharing errors (pu)
    errors: np.ndarray
    v_ref_delta: np.ndarray
    diverged: bool = False

    @property
    def pilot_error(self) -> np.ndarray:
        return self.errors[:, 0]


def _gain_matrices(m: int, gains: SvrGains) -> Tuple[np.ndarray, np.ndarray]:
    p = np.hstack([np.full((m, 1), gains.kp_c), gains.kp_j * np.eye(m)])
    k = np.hstack([np.full((m, 1), gains.ki_c), gains.ki_j * np.eye(m)])
    return p, k


def _initial_error(plant: LinearPlant, step_pu: float) -> np.ndarray:
    e0 = np.zeros(len(plant.alpha) + 1)
    e0[0] = step_pu
    return e0


def closed_loop_response(
    plant: LinearPlant,
    gains: SvrGains,
    horizon_s: float,
    dt: float,
    step_pu: float = 0.02,
) -> LoopResponse:
    """Discrete closed loop on the linear plant after a pilot setpoint step.

    Same update order as svr_step (measurements one sample old), without clamps.
    """
    if dt <= 0 or horizon_s <= 0:
        raise SvrError("dt and horizon must be positive")
    h = plant.error_sensitivity
    m = len(plant.alpha)
    p, k = _gain_matrices(m, gains)
    e0 = _initial_error(plant, step_pu)
    limit = DIVERGENCE_FACTOR * max(float(np.max(np.abs(e0))), 1e-300)

    n = int(round(horizon_s / dt)) + 1
    errors = np.zeros((n, m + 1))
    dv = np.zeros((n, m))
    integ = np.zeros(m + 1)
    errors[0] = e0
    diverged = False
    for i in range(1, n):
        integ = integ + errors[i - 1] * dt
        dv[i] = p @ errors[i - 1] + k @ integ
        errors[i] = e0 - h @ dv[i]
        if not np.all(np.isfinite(errors[i])) or np.max(np.abs(errors[i])) > limit:
            diverged = True
            logger.warning("closed loop diverges at t=%g s with dt=%g s", i * dt, dt)
            errors, dv, n = errors[: i + 1], dv[: i + 1], i + 1
            break
    return LoopResponse(times_s=np.arange(n) * dt, errors=errors, v_ref_delta=dv, diverged=diverged)


def continuous_response(
    plant: LinearPlant,
    gains: SvrGains,
    times_s: Sequence[float],
    step_pu: float = 0.02,
) -> LoopResponse:
    """Exact solution of the continuous PI loop (dt -> 0 limit of closed_loop_response)."""
    h = plant.error_sensitivity
    m = len(plant.alpha)
    p, k = _gain_matrices(m, gains)
    e0 = _initial_error(plant, step_pu)
    mix = np.linalg.inv(np.eye(m + 1) + h @ p)
    a = -mix @ h @ k
    b = mix @ e0

    size = m + 1
    aug = np.zeros((size + 1, size + 1))
    aug[:size, :size] = a
    aug[:size, size] = b
    times = np.asarray(times_s, dtype=float)
    errors = np.zeros((len(times), size))
    dv = np.zeros((len(times), m))
    for i, t in enumerate(times):
        integ = (expm(aug * t) @ np.r_[np.zeros(size), 1.0])[:size]
        errors[i] = mix @ (e0 - h @ k @ integ)
        dv[i] = p @ errors[i] + k @ integ
    return LoopResponse(times_s=times, errors=errors, v_ref_delta=dv)


def settling_time(response: LoopResponse, band: float = 0.02) -> float:
    """First time after which the pilot error stays within band * |initial error|."""
    err = np.abs(response.pilot_error)
    if response.diverged or err.size == 0:
        return float("inf")
    tol = band * err[0]
    outside = np.flatnonzero(err > tol)
    if outside.size == 0:
        return float(response.times_s[0])
    last = outside[-1]
    if last + 1 >= err.size:
        return float("inf")
    return float(response.times_s[last + 1])


def linearize_area(
    net: Network,
    setpoints: Setpoints,
    area_id: int,
    *,
    step_pu: float = 1e-4,
    opts: Optional[PowerFlowOptions] = None,
) -> LinearPlant:
    """Finite-difference plant of one area around the operating point given by ``setpoints``."""
    opts = opts or PowerFlowOptions(enforce_gen_q_limits=False)
    ids = net.generators_in_area(area_id)
    pilot = net.area(area_id).pilot_bus
    m = len(ids)
    g_pilot = np.zeros(m)
    g_q = np.zeros((m, m))
    for col, k in enumerate(ids):
        sols = []
        for sign in (1.0, -1.0):
            v = np.array(setpoints.gen_v_pu, dtype=float)
            v[k] += sign * step_pu
            sol = solve_power_flow(net, setpoints.replace(gen_v_pu=v), opts)
            if not sol.converged:
                raise PowerFlowError(f"linearization of area {area_id}: power flow did not converge")
            sols.append(sol)
        up, down = sols
        g_pilot[col] = (up.v_pu[pilot] - down.v_pu[pilot]) / (2 * step_pu)
        g_q[:, col] = (up.gen_q_mvar[ids] - down.gen_q_mvar[ids]) / (2 * step_pu * net.s_base_mva)
    alpha = np.array([net.generators[k].alpha for k in ids])
    return LinearPlant(g_pilot=g_pilot, g_q=g_q, alpha=alpha)
