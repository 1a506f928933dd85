"""
AC power flow by Newton-Raphson in polar coordinates.

Generator buses hold their terminal voltage at the current reference (the
AVR / primary regulation layer). With ``enforce_gen_q_limits`` a generator
whose required reactive output leaves [q_min, q_max] is pinned at the limit
and its bus is solved as PQ; it is released again once its voltage moves
back to the side where the reference can be held. The slack generator is
never switched.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .errors import PowerFlowError, SingularJacobianError
from .network import AdmittanceMatrix, BusKind, Network, build_admittance

logger = logging.getLogger(__name__)

Q_LIMIT_TOL_MVAR = 1e-9


@dataclass(frozen=True)
class PowerFlowOptions:
    tolerance_pu: float = 1e-8
    max_iterations: int = 25
    enforce_gen_q_limits: bool = True
    flat_start: bool = True
    max_limit_passes: int = 10

    def __post_init__(self) -> None:
        if self.tolerance_pu <= 0:
            raise ValueError("tolerance_pu must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.max_limit_passes < 1:
            raise ValueError("max_limit_passes must be at least 1")


@dataclass(frozen=True)
class Setpoints:
    """Everything a power flow needs besides the network: references and scaled injections."""

    gen_v_pu: np.ndarray
    gen_p_mw: np.ndarray
    shunt_q_mvar: np.ndarray
    load_p_mw: np.ndarray
    load_q_mvar: np.ndarray
    wind_p_mw: np.ndarray

    def replace(self, **changes) -> "Setpoints":
        return dataclasses.replace(self, **{k: np.asarray(v, dtype=float) for k, v in changes.items()})


def nominal_setpoints(net: Network) -> Setpoints:
    return Setpoints(
        gen_v_pu=np.array([g.v_set_pu for g in net.generators], dtype=float),
        gen_p_mw=np.array([g.p0_mw for g in net.generators], dtype=float),
        shunt_q_mvar=np.array([s.q_set_mvar for s in net.shunts], dtype=float),
        load_p_mw=np.array([ld.p_mw for ld in net.loads], dtype=float),
        load_q_mvar=np.array([ld.q_mvar for ld in net.loads], dtype=float),
        wind_p_mw=np.array([w.p_max_mw for w in net.wind_parks], dtype=float),
    )


def droop_dispatch(net: Network, gen_p_mw: np.ndarray, demand_change_mw: float) -> np.ndarray:
    """Share a change of net demand among the generators in proportion to their droop gains.

    Non-slack units are kept inside [p_min, p_max]; what they cannot take is
    left to the slack, which balances the power flow anyway.
    """
    p = np.asarray(gen_p_mw, dtype=float).copy()
    kp = np.array([g.k_p_mw_per_hz for g in net.generators], dtype=float)
    total = float(kp.sum())
    if total == 0.0 or demand_change_mw == 0.0:
        return p
    p += kp / total * demand_change_mw
    for k, g in enumerate(net.generators):
        if g.bus != net.slack_bus:
            p[k] = min(max(p[k], g.p_min_mw), g.p_max_mw)
    return p


def scaled_setpoints(net: Network, profile, t_h: float, base: Optional[Setpoints] = None) -> Setpoints:
    """Scale nominal loads and wind capability by the profile multipliers at hour t_h.

    The change of net demand (load minus wind) against ``base`` is redispatched
    over the generators by droop, as primary frequency control would settle it.
    """
    base = base if base is not None else nominal_setpoints(net)
    load_p = np.array([ld.p_mw * profile.value(ld.profile_key, t_h) for ld in net.loads], dtype=float)
    wind_p = np.array([w.p_max_mw * profile.value(w.profile_key, t_h) for w in net.wind_parks], dtype=float)
    change = float((load_p.sum() - wind_p.sum()) - (np.sum(base.load_p_mw) - np.sum(base.wind_p_mw)))
    return base.replace(
        gen_p_mw=droop_dispatch(net, base.gen_p_mw, change),
        load_p_mw=load_p,
        load_q_mvar=[ld.q_mvar * profile.value(profile.q_key(ld.profile_key), t_h) for ld in net.loads],
        wind_p_mw=wind_p,
    )


@dataclass(frozen=True)
class BranchFlows:
    p_from_mw: np.ndarray
    q_from_mvar: np.ndarray
    p_to_mw: np.ndarray
    q_to_mvar: np.ndarray
    loading_pct: np.ndarray

    @property
    def losses_mw(self) -> np.ndarray:
        return self.p_from_mw + self.p_to_mw


@dataclass(frozen=True)
class PowerFlowSolution:
    v_pu: np.ndarray
    theta_rad: np.ndarray
    gen_p_mw: np.ndarray
    gen_q_mvar: np.ndarray
    flows: BranchFlows
    losses_mw: float
    converged: bool
    iterations: int
    max_mismatch_pu: float
    # per generator: "max", "min" or None
    gen_q_limited: Tuple[Optional[str], ...] = ()
    shunt_q_mvar: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))

    @property
    def v_complex(self) -> np.ndarray:
        return self.v_pu * np.exp(1j * self.theta_rad)


def dsbus_dv(ybus: sp.csr_matrix, v: np.ndarray) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Partial derivatives of the bus injections w.r.t. voltage magnitude and angle."""
    ibus = ybus @ v
    diag_v = sp.diags(v)
    diag_i = sp.diags(ibus)
    diag_vnorm = sp.diags(v / np.abs(v))
    ds_dvm = diag_v @ (ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - ybus @ diag_v).conj()
    return ds_dvm.tocsr(), ds_dva.tocsr()


def d2sbus_dv2(ybus: sp.csr_matrix, v: np.ndarray, lam: np.ndarray):
    """Second derivatives of lam' * Sbus(V); returns (aa, av, va, vv) blocks."""
    n = len(v)
    ibus = ybus @ v
    diag_lam = sp.diags(lam)
    diag_v = sp.diags(v)
    a = sp.diags(lam * v)
    b = ybus @ diag_v
    c = a @ b.conj()
    d = ybus.conj().T @ diag_v
    e = diag_v.conj() @ (d @ diag_lam - sp.diags(d @ lam))
    f = c - a @ sp.diags(ibus.conj())
    g = sp.diags(np.ones(n) / np.abs(v))
    gaa = e + f
    gva = 1j * g @ (e - f)
    gav = gva.T
    gvv = g @ (c + c.T) @ g
    return gaa, gav, gva, gvv


def branch_incidence(net: Network) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Branch-by-bus incidence of the from and to ends."""
    nl, n = len(net.branches), net.n_bus
    f = [br.from_bus for br in net.branches]
    t = [br.to_bus for br in net.branches]
    ones = np.ones(nl)
    cf = sp.csr_matrix((ones, (np.arange(nl), f)), shape=(nl, n))
    ct = sp.csr_matrix((ones, (np.arange(nl), t)), shape=(nl, n))
    return cf, ct


def dsbr_dv(ybr: sp.csr_matrix, cbr: sp.csr_matrix, v: np.ndarray):
    """Branch-end complex power and its derivatives w.r.t. voltage magnitude and angle.

    ``ybr`` and ``cbr`` select one end (yf/cf or yt/ct). Returns (s, ds_dvm, ds_dva).
    """
    ibr = ybr @ v
    vbr = cbr @ v
    diag_v = sp.diags(v)
    diag_vnorm = sp.diags(v / np.abs(v))
    diag_vbr = sp.diags(vbr)
    diag_ibr_conj = sp.diags(np.conj(ibr))
    ds_dva = 1j * (diag_ibr_conj @ cbr @ diag_v - diag_vbr @ (ybr @ diag_v).conj())
    ds_dvm = diag_vbr @ (ybr @ diag_vnorm).conj() + diag_ibr_conj @ cbr @ diag_vnorm
    return vbr * np.conj(ibr), ds_dvm.tocsr(), ds_dva.tocsr()


def d2sbr_dv2(ybr: sp.csr_matrix, cbr: sp.csr_matrix, v: np.ndarray, lam: np.ndarray):
    """Second derivatives of lam' * Sbr(V) for one branch end; returns (aa, av, va, vv) blocks."""
    n = len(v)
    diag_v = sp.diags(v)
    a = ybr.conj().T @ sp.diags(lam) @ cbr
    b = diag_v.conj() @ a @ diag_v
    d = sp.diags((a @ v) * np.conj(v))
    e = sp.diags((a.T @ np.conj(v)) * v)
    f = b + b.T
    g = sp.diags(np.ones(n) / np.abs(v))
    gaa = f - d - e
    gva = 1j * g @ (b - b.T - d + e)
    gav = gva.T
    gvv = g @ f @ g
    return gaa, gav, gva, gvv


def d2asbr_dv2(ybr: sp.csr_matrix, cbr: sp.csr_matrix, v: np.ndarray, mu: np.ndarray):
    """Second derivatives of mu' * |Sbr(V)|^2 for one branch end; returns real (aa, av, va, vv) blocks."""
    s, ds_dvm, ds_dva = dsbr_dv(ybr, cbr, v)
    saa, sav, sva, svv = d2sbr_dv2(ybr, cbr, v, np.conj(s) * mu)
    dm = sp.diags(mu)
    haa = 2 * (saa + ds_dva.T @ dm @ ds_dva.conj()).real
    hav = 2 * (sav + ds_dva.T @ dm @ ds_dvm.conj()).real
    hva = 2 * (sva + ds_dvm.T @ dm @ ds_dva.conj()).real
    hvv = 2 * (svv + ds_dvm.T @ dm @ ds_dvm.conj()).real
    return haa, hav, hva, hvv


def _newton(ybus, sbus, v0, pv, pq, tol, max_it):
    v = v0.copy()
    va = np.angle(v)
    vm = np.abs(v)
    pvpq = np.r_[pv, pq]
    n_pvpq = len(pvpq)
    # rows and columns of the reduced Jacobian inside the full [angle, magnitude] one
    keep = np.r_[pvpq, len(v0) + np.asarray(pq, dtype=np.int64)]

    def mismatch(v):
        mis = v * np.conj(ybus @ v) - sbus
        return np.r_[mis[pvpq].real, mis[pq].imag]

    f = mismatch(v)
    norm_f = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while norm_f > tol and it < max_it:
        it += 1
        ds_dvm, ds_dva = dsbus_dv(ybus, v)
        full = sp.bmat([[ds_dva.real, ds_dvm.real], [ds_dva.imag, ds_dvm.imag]], format="csr")
        jac = full[keep][:, keep].tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                dx = -spsolve(jac, f)
            except MatrixRankWarning:
                raise SingularJacobianError("singular Jacobian (islanded or degenerate network)") from None
        dx = np.atleast_1d(dx)
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError("singular Jacobian (islanded or degenerate network)")
        va[pvpq] += dx[:n_pvpq]
        vm[pq] += dx[n_pvpq:]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm_f = float(np.max(np.abs(f))) if f.size else 0.0
    return v, norm_f <= tol, it, norm_f


def line_flows(sol: PowerFlowSolution, net: Network, admittance: Optional[AdmittanceMatrix] = None) -> BranchFlows:
    adm = admittance if admittance is not None else build_admittance(net)
    v = sol.v_complex
    f = np.array([br.from_bus for br in net.branches], dtype=np.int64)
    t = np.array([br.to_bus for br in net.branches], dtype=np.int64)
    s_from = v[f] * np.conj(adm.yf @ v) * net.s_base_mva
    s_to = v[t] * np.conj(adm.yt @ v) * net.s_base_mva
    rating = np.array([br.rating_mva for br in net.branches], dtype=float)
    loading = np.maximum(np.abs(s_from), np.abs(s_to)) / rating * 100.0 if len(rating) else np.zeros(0)
    return BranchFlows(
        p_from_mw=s_from.real,
        q_from_mvar=s_from.imag,
        p_to_mw=s_to.real,
        q_to_mvar=s_to.imag,
        loading_pct=loading,
    )


def compute_losses(sol: PowerFlowSolution) -> float:
    if not sol.converged:
        raise PowerFlowError("losses requested for a non-converged power flow")
    return float(np.sum(sol.flows.p_from_mw + sol.flows.p_to_mw))


def solve_power_flow(
    net: Network,
    setpoints: Setpoints,
    opts: Optional[PowerFlowOptions] = None,
    *,
    initial: Optional[PowerFlowSolution] = None,
    admittance: Optional[AdmittanceMatrix] = None,
) -> PowerFlowSolution:
    """Solve the AC power flow; a diverged solve comes back with converged=False."""
    opts = opts or PowerFlowOptions()
    adm = admittance if admittance is not None else build_admittance(net)
    s_base = net.s_base_mva
    n = net.n_bus
    slack = net.slack_bus

    gen_bus = np.array([g.bus for g in net.generators], dtype=np.int64)
    load_bus = np.array([ld.bus for ld in net.loads], dtype=np.int64)
    wind_bus = np.array([w.bus for w in net.wind_parks], dtype=np.int64)
    shunt_bus = np.array([s.bus for s in net.shunts], dtype=np.int64)

    p_inj = np.zeros(n)
    q_inj = np.zeros(n)
    np.add.at(p_inj, wind_bus, setpoints.wind_p_mw)
    np.add.at(p_inj, load_bus, -setpoints.load_p_mw)
    np.add.at(q_inj, load_bus, -setpoints.load_q_mvar)
    np.add.at(q_inj, shunt_bus, setpoints.shunt_q_mvar)
    p_gen_bus = np.zeros(n)
    np.add.at(p_gen_bus, gen_bus, setpoints.gen_p_mw)

    # one voltage reference per controlled bus: the first generator found there
    v_ref: Dict[int, float] = {}
    q_lo: Dict[int, float] = {}
    q_hi: Dict[int, float] = {}
    for k, g in enumerate(net.generators):
        v_ref.setdefault(g.bus, float(setpoints.gen_v_pu[k]))
        q_lo[g.bus] = q_lo.get(g.bus, 0.0) + g.q_min_mvar
        q_hi[g.bus] = q_hi.get(g.bus, 0.0) + g.q_max_mvar
    pv_candidates = net.bus_ids(BusKind.PV).tolist()

    if initial is not None and initial.converged and not opts.flat_start:
        vm = initial.v_pu.copy()
        va = initial.theta_rad.copy()
    else:
        vm = np.ones(n)
        va = np.zeros(n)
    va[slack] = 0.0
    for bus, value in v_ref.items():
        vm[bus] = value
    v = vm * np.exp(1j * va)

    limited: Dict[int, str] = {}
    total_it = 0
    converged = False
    settled = False
    norm_f = np.inf
    for _ in range(opts.max_limit_passes):
        held = [b for b in pv_candidates if b not in limited]
        pv = np.array(held, dtype=np.int64)
        pq = np.array([b.id for b in net.buses if b.id != slack and b.id not in held], dtype=np.int64)
        q_fix = q_inj.copy()
        for bus, side in limited.items():
            q_fix[bus] += q_hi[bus] if side == "max" else q_lo[bus]
        sbus = ((p_inj + p_gen_bus) + 1j * q_fix) / s_base

        v, converged, it, norm_f = _newton(adm.ybus, sbus, v, pv, pq, opts.tolerance_pu, opts.max_iterations)
        total_it += it
        if not converged or not opts.enforce_gen_q_limits:
            settled = True
            break

        s_calc = v * np.conj(adm.ybus @ v) * s_base
        changed = False
        for bus in pv_candidates:
            q_need = s_calc[bus].imag - q_inj[bus]
            side = limited.get(bus)
            if (side == "max" and abs(v[bus]) > v_ref[bus]) or (side == "min" and abs(v[bus]) < v_ref[bus]):
                # back off: the reference is reachable again from inside the limits
                del limited[bus]
                v[bus] = v_ref[bus] * np.exp(1j * np.angle(v[bus]))
                changed = True
            elif side is None and q_need > q_hi[bus] + Q_LIMIT_TOL_MVAR:
                limited[bus] = "max"
                changed = True
            elif side is None and q_need < q_lo[bus] - Q_LIMIT_TOL_MVAR:
                limited[bus] = "min"
                changed = True
        if not changed:
            settled = True
            break
        logger.debug("Q-limit switching: %s", {net.buses[b].name: s for b, s in sorted(limited.items())})

    if converged and not settled:
        # the last pass changed the bus types, so v no longer solves the system being reported
        logger.warning("Q-limit switching did not settle after %d passes", opts.max_limit_passes)
        converged = False

    if not converged:
        logger.info("power flow did not converge: mismatch %.3e pu after %d iterations", norm_f, total_it)

    s_calc = v * np.conj(adm.ybus @ v) * s_base
    gen_p = np.asarray(setpoints.gen_p_mw, dtype=float).copy()
    gen_q = np.zeros(len(net.generators))
    gen_limited = []
    for bus in sorted(set(gen_bus.tolist())):
        ks = np.flatnonzero(gen_bus == bus)
        q_need = s_calc[bus].imag - q_inj[bus]
        side = limited.get(int(bus))
        if bus == slack:
            p_need = s_calc[bus].real - p_inj[bus]
            others = [k for k in ks[1:]]
            gen_p[ks[0]] = p_need - float(np.sum(gen_p[others])) if others else p_need
        if side is not None:
            for k in ks:
                g = net.generators[k]
                gen_q[k] = g.q_max_mvar if side == "max" else g.q_min_mvar
        else:
            spans = np.array([net.generators[k].q_max_mvar - net.generators[k].q_min_mvar for k in ks])
            gen_q[ks] = q_need * spans / spans.sum()
    for k, g in enumerate(net.generators):
        gen_limited.append(limited.get(g.bus))

    sol = PowerFlowSolution(
        v_pu=np.abs(v),
        theta_rad=np.angle(v),
        gen_p_mw=gen_p,
        gen_q_mvar=gen_q,
        flows=BranchFlows(*(np.zeros(len(net.branches)) for _ in range(5))),
        losses_mw=float("nan"),
        converged=bool(converged),
        iterations=total_it,
        max_mismatch_pu=float(norm_f),
        gen_q_limited=tuple(gen_limited),
        shunt_q_mvar=np.asarray(setpoints.shunt_q_mvar, dtype=float).copy(),
    )
    flows = line_flows(sol, net, adm)
    return dataclasses.replace(sol, flows=flows, losses_mw=float(np.sum(flows.losses_mw)))
