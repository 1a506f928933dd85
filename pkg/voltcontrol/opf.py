"""
Loss-minimising optimal power flow solved by a primal-dual interior point method.

Decision vector, in order:

    theta  non-slack bus angles (rad)
    V      bus voltage magnitudes (pu)
    dQ     per-generator reactive change on top of the operating point (pu)
    Qsh    per-shunt reactive output (pu)
    df     system frequency deviation (Hz), shared by every droop governor

Equalities are the nodal P/Q balances with P_G = P0 + Kp*df. Inequalities
are the generator P and Q boxes, MVA circle, leading power-factor half plane,
field-current circle, the voltage-scaled shunt box, bus voltage bounds,
bounds on df and theta, and the MVA rating of every branch at both ends.
All quantities inside the solver are per unit.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .errors import OpfBuildError
from .network import Network, build_admittance
from .powerflow import PowerFlowSolution, branch_incidence, d2asbr_dv2, d2sbus_dv2, dsbr_dv, dsbus_dv

logger = logging.getLogger(__name__)

MULTIPLIER_LIMIT = 1e10
# how far outside its P box a generator may start before the box is widened around it
ELASTIC_P_MARGIN_PU = 0.01


@dataclass(frozen=True)
class OpfOptions:
    tolerance: float = 1e-6
    max_iterations: int = 100
    phi_lead_pf: float = 0.86
    alpha_refresh: bool = False
    machine_defaults: bool = True
    x_d_default_pu: float = 1.8
    e_q_max_default_pu: float = 2.0
    delta_f_max_hz: float = 0.5
    tau: float = 0.995
    sigma: float = 0.2
    alpha_floor: float = 0.05

    @property
    def lead_slope(self) -> float:
        # tan(arccos(pf))
        return math.sqrt(1.0 - self.phi_lead_pf**2) / self.phi_lead_pf


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float

    def within(self, tol: float) -> bool:
        return max(self.stationarity, self.primal, self.complementarity) <= tol


@dataclass(frozen=True)
class OpfSolution:
    objective_mw: float
    start_losses_mw: float
    v_setpoints: np.ndarray
    theta_rad: np.ndarray
    pilot_refs: Dict[int, float]
    gen_v_pu: np.ndarray
    gen_p_mw: np.ndarray
    gen_q_mvar: np.ndarray
    shunt_q_mvar: np.ndarray
    delta_f_hz: float
    status: str
    kkt: KktResiduals
    iterations: int
    x: np.ndarray = field(repr=False)
    lam: np.ndarray = field(repr=False)
    mu: np.ndarray = field(repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _machine_params(net: Network, opts: OpfOptions) -> Tuple[np.ndarray, np.ndarray]:
    """x_d on the system base and E_q,max per generator."""
    xd = np.zeros(len(net.generators))
    eq = np.zeros(len(net.generators))
    for k, g in enumerate(net.generators):
        x_d, e_q = g.x_d_pu, g.e_q_max_pu
        if x_d is None or e_q is None:
            if not opts.machine_defaults:
                missing = "x_d_pu" if x_d is None else "e_q_max_pu"
                raise OpfBuildError(f"generator {net.generator_label(k)}: missing machine parameter {missing}")
            x_d = opts.x_d_default_pu if x_d is None else x_d
            e_q = opts.e_q_max_default_pu if e_q is None else e_q
        if x_d <= 0 or e_q <= 0:
            raise OpfBuildError(f"generator {net.generator_label(k)}: x_d and e_q_max must be positive")
        xd[k] = x_d * net.s_base_mva / g.s_max_mva
        eq[k] = e_q
    return xd, eq


@dataclass(frozen=True, eq=False)
class OpfProblem:
    net: Network
    operating_point: PowerFlowSolution
    options: OpfOptions
    ybus: sp.csr_matrix = field(repr=False)
    yf: sp.csr_matrix = field(repr=False)
    yt: sp.csr_matrix = field(repr=False)
    cf: sp.csr_matrix = field(repr=False)
    ct: sp.csr_matrix = field(repr=False)
    rating: np.ndarray = field(repr=False)
    fixed_injection: np.ndarray = field(repr=False)
    p0: np.ndarray = field(repr=False)
    q0: np.ndarray = field(repr=False)
    kp: np.ndarray = field(repr=False)
    # generator P box, widened where the operating point starts outside it
    p_min: np.ndarray = field(repr=False)
    p_max: np.ndarray = field(repr=False)
    x_d: np.ndarray = field(repr=False)
    e_q_max: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)
    labels: Tuple[str, ...] = field(repr=False)

    # ---- layout -------------------------------------------------------

    @property
    def n_bus(self) -> int:
        return self.net.n_bus

    @property
    def nonref(self) -> np.ndarray:
        return np.array([i for i in range(self.n_bus) if i != self.net.slack_bus], dtype=np.int64)

    @property
    def n_var(self) -> int:
        return 2 * self.n_bus - 1 + len(self.net.generators) + len(self.net.shunts) + 1

    @property
    def n_eq(self) -> int:
        return 2 * self.n_bus

    @property
    def n_ineq(self) -> int:
        return len(self.labels)

    def _slices(self) -> Tuple[slice, slice, slice, slice, int]:
        n, ng, nc = self.n_bus, len(self.net.generators), len(self.net.shunts)
        ia = slice(0, n - 1)
        iv = slice(n - 1, 2 * n - 1)
        iq = slice(2 * n - 1, 2 * n - 1 + ng)
        ish = slice(iq.stop, iq.stop + nc)
        return ia, iv, iq, ish, ish.stop

    def unpack(self, x: np.ndarray):
        ia, iv, iq, ish, idf = self._slices()
        theta = np.full(self.n_bus, self.operating_point.theta_rad[self.net.slack_bus])
        theta[self.nonref] = x[ia]
        return theta, x[iv], x[iq], x[ish], float(x[idf])

    def gen_pq(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        _, _, dq, _, df = self.unpack(x)
        return self.p0 + self.kp * df, self.q0 + dq

    # ---- constant incidence / embedding matrices ------------------------

    def _gen_incidence(self) -> sp.csr_matrix:
        ng = len(self.net.generators)
        rows = [g.bus for g in self.net.generators]
        return sp.csr_matrix((np.ones(ng), (rows, np.arange(ng))), shape=(self.n_bus, ng))

    def _shunt_incidence(self) -> sp.csr_matrix:
        nc = len(self.net.shunts)
        rows = [s.bus for s in self.net.shunts]
        return sp.csr_matrix((np.ones(nc), (rows, np.arange(nc))), shape=(self.n_bus, nc))

    def _embed(self) -> sp.csr_matrix:
        # maps full [theta; V] (2n) into the decision vector
        n = self.n_bus
        ia, iv, _, _, _ = self._slices()
        rows = np.r_[np.arange(ia.start, ia.stop), np.arange(iv.start, iv.stop)]
        cols = np.r_[self.nonref, n + np.arange(n)]
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_var, 2 * n))

    # ---- objective ------------------------------------------------------

    def objective(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        theta, v, _, _, _ = self.unpack(x)
        vc = v * np.exp(1j * theta)
        s = vc * np.conj(self.ybus @ vc)
        ds_dvm, ds_dva = dsbus_dv(self.ybus, vc)
        ones = np.ones(self.n_bus)
        full = np.r_[(ones @ ds_dva).real, (ones @ ds_dvm).real]
        return float(np.sum(s.real)), self._embed() @ full

    # ---- equalities -----------------------------------------------------

    def equalities(self, x: np.ndarray) -> Tuple[np.ndarray, sp.csr_matrix]:
        theta, v, _, qsh, _ = self.unpack(x)
        p, q = self.gen_pq(x)
        cg, cs = self._gen_incidence(), self._shunt_incidence()
        vc = v * np.exp(1j * theta)
        mis = vc * np.conj(self.ybus @ vc) - cg @ (p + 1j * q) - 1j * (cs @ qsh) - self.fixed_injection
        h = np.r_[mis.real, mis.imag]

        ds_dvm, ds_dva = dsbus_dv(self.ybus, vc)
        jac_v = sp.bmat([[ds_dva.real, ds_dvm.real], [ds_dva.imag, ds_dvm.imag]]) @ self._embed().T
        n, ng, nc = self.n_bus, len(self.net.generators), len(self.net.shunts)
        _, _, iq, ish, idf = self._slices()
        gen_bus = np.array([g.bus for g in self.net.generators], dtype=np.int64)
        shunt_bus = np.array([c.bus for c in self.net.shunts], dtype=np.int64)
        rows = np.r_[gen_bus, n + gen_bus, n + shunt_bus]
        cols = np.r_[np.full(ng, idf), iq.start + np.arange(ng), ish.start + np.arange(nc)]
        vals = np.r_[-self.kp, -np.ones(ng), -np.ones(nc)]
        extra = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, self.n_var))
        return h, (jac_v + extra).tocsr()

    # ---- inequalities ---------------------------------------------------

    def _bounds(self):
        net, s = self.net, self.net.s_base_mva
        gens, shunts = net.generators, net.shunts
        arr = lambda vals: np.array(vals, dtype=float)  # noqa: E731
        return dict(
            p_max=self.p_max,
            p_min=self.p_min,
            q_max=arr([g.q_max_mvar for g in gens]) / s,
            q_min=arr([g.q_min_mvar for g in gens]) / s,
            s_max=arr([g.s_max_mva for g in gens]) / s,
            sh_max=arr([c.q_max_mvar for c in shunts]) / s / arr([net.buses[c.bus].v_max for c in shunts]) ** 2
            if shunts
            else np.zeros(0),
            sh_min=arr([c.q_min_mvar for c in shunts]) / s / arr([net.buses[c.bus].v_min for c in shunts]) ** 2
            if shunts
            else np.zeros(0),
            v_max=arr([b.v_max for b in net.buses]),
            v_min=arr([b.v_min for b in net.buses]),
        )

    def inequalities(self, x: np.ndarray) -> Tuple[np.ndarray, sp.csr_matrix]:
        theta, v, _, qsh, df = self.unpack(x)
        p, q = self.gen_pq(x)
        b = self._bounds()
        ia, iv, iq, ish, idf = self._slices()
        ng, nc, n = len(p), len(qsh), self.n_bus
        gen_bus = np.array([g.bus for g in self.net.generators], dtype=np.int64)
        shunt_bus = np.array([c.bus for c in self.net.shunts], dtype=np.int64)
        col_q = iq.start + np.arange(ng)
        col_sh = ish.start + np.arange(nc)
        col_vg = iv.start + gen_bus
        col_vs = iv.start + shunt_bus
        c = self.kp
        t = self.options.lead_slope
        vg = v[gen_bus]
        u = q + vg**2 / self.x_d
        e2 = (self.e_q_max / self.x_d) ** 2
        vs = v[shunt_bus]

        parts: List[np.ndarray] = []
        rows: List[np.ndarray] = []
        cols: List[np.ndarray] = []
        vals: List[np.ndarray] = []
        offset = 0

        def add(values, *derivs):
            nonlocal offset
            m = len(values)
            local = offset + np.arange(m)
            for col, d in derivs:
                rows.append(local)
                cols.append(np.broadcast_to(col, (m,)))
                vals.append(np.broadcast_to(d, (m,)).astype(float))
            parts.append(np.asarray(values, dtype=float))
            offset += m

        add(p - b["p_max"], (idf, c))
        add(b["p_min"] - p, (idf, -c))
        add(q - b["q_max"], (col_q, 1.0))
        add(b["q_min"] - q, (col_q, -1.0))
        add(p**2 + q**2 - b["s_max"] ** 2, (idf, 2 * p * c), (col_q, 2 * q))
        add(-t * p - q, (idf, -t * c), (col_q, -1.0))
        add(
            p**2 + u**2 - vg**2 * e2,
            (idf, 2 * p * c),
            (col_q, 2 * u),
            (col_vg, 4 * u * vg / self.x_d - 2 * vg * e2),
        )
        add(qsh - b["sh_max"] * vs**2, (col_sh, 1.0), (col_vs, -2 * b["sh_max"] * vs))
        add(b["sh_min"] * vs**2 - qsh, (col_sh, -1.0), (col_vs, 2 * b["sh_min"] * vs))
        add(v - b["v_max"], (iv.start + np.arange(n), 1.0))
        add(b["v_min"] - v, (iv.start + np.arange(n), -1.0))
        dfm = self.options.delta_f_max_hz
        add(np.array([df - dfm]), (idf, 1.0))
        add(np.array([-dfm - df]), (idf, -1.0))
        th = theta[self.nonref]
        add(th - np.pi, (ia.start + np.arange(n - 1), 1.0))
        add(-np.pi - th, (ia.start + np.arange(n - 1), -1.0))

        jac = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, self.n_var),
        )
        blocks = [jac]
        vc = v * np.exp(1j * theta)
        embed_t = self._embed().T
        for ybr, cbr in ((self.yf, self.cf), (self.yt, self.ct)):
            s_br, ds_dvm, ds_dva = dsbr_dv(ybr, cbr, vc)
            parts.append(np.abs(s_br) ** 2 - self.rating**2)
            d_full = 2 * (
                sp.diags(s_br.real) @ sp.hstack([ds_dva.real, ds_dvm.real])
                + sp.diags(s_br.imag) @ sp.hstack([ds_dva.imag, ds_dvm.imag])
            )
            blocks.append(d_full @ embed_t)
        return np.concatenate(parts), sp.vstack(blocks, format="csr")

    @property
    def branch_offset(self) -> int:
        """Index of the first branch-rating row among the inequalities."""
        return self.n_ineq - 2 * len(self.net.branches)

    # ---- Hessian of the Lagrangian ---------------------------------------

    def hessian(self, x: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> sp.csr_matrix:
        theta, v, _, _, _ = self.unpack(x)
        n, ng, nc = self.n_bus, len(self.net.generators), len(self.net.shunts)
        vc = v * np.exp(1j * theta)

        faa, fav, fva, fvv = d2sbus_dv2(self.ybus, vc, np.ones(n))
        paa, pav, pva, pvv = d2sbus_dv2(self.ybus, vc, lam[:n])
        qaa, qav, qva, qvv = d2sbus_dv2(self.ybus, vc, lam[n:])
        nl, k0 = len(self.net.branches), self.branch_offset
        saa, sav, sva, svv = d2asbr_dv2(self.yf, self.cf, vc, mu[k0 : k0 + nl])
        taa, tav, tva, tvv = d2asbr_dv2(self.yt, self.ct, vc, mu[k0 + nl : k0 + 2 * nl])
        full = sp.bmat(
            [
                [faa.real + paa.real + qaa.imag + saa + taa, fav.real + pav.real + qav.imag + sav + tav],
                [fva.real + pva.real + qva.imag + sva + tva, fvv.real + pvv.real + qvv.imag + svv + tvv],
            ]
        )
        embed = self._embed()
        lxx = embed @ full @ embed.T

        p, q = self.gen_pq(x)
        _, iv, iq, ish, idf = self._slices()
        gen_bus = np.array([g.bus for g in self.net.generators], dtype=np.int64)
        shunt_bus = np.array([c.bus for c in self.net.shunts], dtype=np.int64)
        b = self._bounds()
        c = self.kp
        vg = v[gen_bus]
        u = q + vg**2 / self.x_d
        e2 = (self.e_q_max / self.x_d) ** 2

        mu_s = mu[4 * ng : 5 * ng]
        mu_f = mu[6 * ng : 7 * ng]
        mu_hi = mu[7 * ng : 7 * ng + nc]
        mu_lo = mu[7 * ng + nc : 7 * ng + 2 * nc]

        col_q = iq.start + np.arange(ng)
        col_vg = iv.start + gen_bus
        col_vs = iv.start + shunt_bus
        dfdf = np.full(ng, idf)
        cross = 4 * vg / self.x_d * mu_f
        r = np.concatenate(
            [dfdf, col_q, dfdf, col_q, col_q, col_vg, col_vg, col_vs, col_vs]
        )
        k = np.concatenate(
            [dfdf, col_q, dfdf, col_q, col_vg, col_q, col_vg, col_vs, col_vs]
        )
        d = np.concatenate(
            [
                2 * c**2 * mu_s,
                2 * mu_s,
                2 * c**2 * mu_f,
                2 * mu_f,
                cross,
                cross,
                (4 * u / self.x_d + 8 * vg**2 / self.x_d**2 - 2 * e2) * mu_f,
                -2 * b["sh_max"] * mu_hi,
                2 * b["sh_min"] * mu_lo,
            ]
        )
        lgg = sp.csr_matrix((d, (r, k)), shape=(self.n_var, self.n_var))
        return (lxx + lgg).tocsr()

    def solution_from(
        self,
        x: np.ndarray,
        lam: Optional[np.ndarray] = None,
        mu: Optional[np.ndarray] = None,
        *,
        status: str = "candidate",
        iterations: int = 0,
    ) -> OpfSolution:
        """Wrap a decision vector and multipliers as a solution record."""
        x = np.asarray(x, dtype=float)
        lam = np.zeros(self.n_eq) if lam is None else np.asarray(lam, dtype=float)
        mu = np.zeros(self.n_ineq) if mu is None else np.asarray(mu, dtype=float)
        theta, v, _, qsh, df = self.unpack(x)
        p, q = self.gen_pq(x)
        s = self.net.s_base_mva
        f, _ = self.objective(x)
        gen_bus = [g.bus for g in self.net.generators]
        sol = OpfSolution(
            objective_mw=f * s,
            start_losses_mw=float(self.operating_point.losses_mw),
            v_setpoints=v.copy(),
            theta_rad=theta,
            pilot_refs={a.id: float(v[a.pilot_bus]) for a in self.net.areas},
            gen_v_pu=v[gen_bus].copy(),
            gen_p_mw=p * s,
            gen_q_mvar=q * s,
            shunt_q_mvar=qsh * s,
            delta_f_hz=df,
            status=status,
            kkt=KktResiduals(np.nan, np.nan, np.nan),
            iterations=iterations,
            x=x.copy(),
            lam=lam.copy(),
            mu=mu.copy(),
        )
        return dataclasses.replace(sol, kkt=kkt_residuals(self, sol))


def _constraint_labels(net: Network) -> Tuple[str, ...]:
    gens = [net.generator_label(k) for k in range(len(net.generators))]
    shunts = [f"{c.kind.value} at {net.buses[c.bus].name}" for c in net.shunts]
    buses = [b.name for b in net.buses]
    nonref = [b.name for b in net.buses if b.id != net.slack_bus]
    out: List[str] = []
    for kind in ("p_max", "p_min", "q_max", "q_min", "s_max", "lead_pf", "field"):
        out += [f"{kind}:{g}" for g in gens]
    out += [f"shunt_max:{s}" for s in shunts]
    out += [f"shunt_min:{s}" for s in shunts]
    out += [f"v_max:{b}" for b in buses]
    out += [f"v_min:{b}" for b in buses]
    out += ["df_max", "df_min"]
    out += [f"theta_max:{b}" for b in nonref]
    out += [f"theta_min:{b}" for b in nonref]
    ends = [f"{net.buses[br.from_bus].name}-{net.buses[br.to_bus].name}" for br in net.branches]
    out += [f"s_from:{e}" for e in ends]
    out += [f"s_to:{e}" for e in ends]
    return tuple(out)


def _elastic_p_box(net: Network, p0: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Generator P box in pu, widened around any unit whose operating point lies outside it.

    P only moves through the shared frequency deviation, so a start outside
    the box may have no feasible way back into it.
    """
    s = net.s_base_mva
    p_min = np.array([g.p_min_mw for g in net.generators], dtype=float) / s
    p_max = np.array([g.p_max_mw for g in net.generators], dtype=float) / s
    for k in np.flatnonzero(p0 < p_min):
        logger.warning(
            "%s starts at %.2f MW, below p_min %.2f MW; relaxing the bound",
            net.generator_label(int(k)), p0[k] * s, p_min[k] * s,
        )
        p_min[k] = p0[k] - ELASTIC_P_MARGIN_PU
    for k in np.flatnonzero(p0 > p_max):
        logger.warning(
            "%s starts at %.2f MW, above p_max %.2f MW; relaxing the bound",
            net.generator_label(int(k)), p0[k] * s, p_max[k] * s,
        )
        p_max[k] = p0[k] + ELASTIC_P_MARGIN_PU
    return p_min, p_max


def build_opf(net: Network, op_point: PowerFlowSolution, config: Optional[OpfOptions] = None) -> OpfProblem:
    """Instantiate the loss-minimisation problem around a converged operating point.

    The non-controllable injections (loads and wind) are recovered from the
    operating point itself, so the start is power-flow feasible by construction.
    """
    opts = config or OpfOptions()
    if not op_point.converged:
        raise OpfBuildError("operating point is not a converged power flow")
    if not 0 < opts.phi_lead_pf <= 1:
        raise OpfBuildError("phi_lead_pf must be a power factor in (0, 1]")
    x_d, e_q = _machine_params(net, opts)

    s = net.s_base_mva
    adm = build_admittance(net)
    v0 = op_point.v_complex
    s_calc = v0 * np.conj(adm.ybus @ v0)
    p0 = np.asarray(op_point.gen_p_mw, dtype=float) / s
    q0 = np.asarray(op_point.gen_q_mvar, dtype=float) / s
    qsh0 = np.asarray(op_point.shunt_q_mvar, dtype=float) / s
    inj = np.zeros(net.n_bus, dtype=complex)
    np.add.at(inj, [g.bus for g in net.generators], p0 + 1j * q0)
    np.add.at(inj, [c.bus for c in net.shunts], 1j * qsh0)

    nonref = [i for i in range(net.n_bus) if i != net.slack_bus]
    x0 = np.r_[
        op_point.theta_rad[nonref],
        op_point.v_pu,
        np.zeros(len(net.generators)),
        qsh0,
        0.0,
    ]
    p_min, p_max = _elastic_p_box(net, p0)
    cf, ct = branch_incidence(net)
    prob = OpfProblem(
        net=net,
        operating_point=op_point,
        options=opts,
        ybus=adm.ybus,
        yf=adm.yf,
        yt=adm.yt,
        cf=cf,
        ct=ct,
        rating=np.array([br.rating_mva for br in net.branches], dtype=float) / s,
        fixed_injection=s_calc - inj,
        p0=p0,
        q0=q0,
        kp=np.array([g.k_p_mw_per_hz for g in net.generators], dtype=float) / s,
        p_min=p_min,
        p_max=p_max,
        x_d=x_d,
        e_q_max=e_q,
        x0=x0,
        labels=_constraint_labels(net),
    )
    logger.debug("OPF built: %d variables, %d equalities, %d inequalities", prob.n_var, prob.n_eq, prob.n_ineq)
    return prob


def kkt_residuals(prob: OpfProblem, candidate: OpfSolution) -> KktResiduals:
    """Stationarity, primal feasibility and complementarity, recomputed from x and the multipliers."""
    x, lam, mu = candidate.x, candidate.lam, candidate.mu
    _, df = prob.objective(x)
    h, jh = prob.equalities(x)
    g, jg = prob.inequalities(x)
    grad = df + jh.T @ lam + jg.T @ mu
    primal = max(float(np.max(np.abs(h))), float(np.max(np.maximum(g, 0.0))) if g.size else 0.0)
    comp = float(np.max(np.abs(mu * g))) if g.size else 0.0
    return KktResiduals(
        stationarity=float(np.max(np.abs(grad))),
        primal=primal,
        complementarity=comp,
    )


def _step_length(v: np.ndarray, dv: np.ndarray, tau: float) -> float:
    k = dv < 0
    if not np.any(k):
        return 1.0
    return min(tau * float(np.min(v[k] / -dv[k])), 1.0)


def solve_opf(prob: OpfProblem, opts: Optional[OpfOptions] = None) -> OpfSolution:
    """Primal-dual interior point iterations from the operating point.

    Barrier parameter gamma = sigma * z'mu / niq after every step; step lengths
    follow the fraction-to-boundary rule with tau. Returns the last iterate with
    status ``optimal``, ``infeasible`` or ``max_iterations``.
    """
    opts = opts or prob.options
    x = prob.x0.copy()
    h, jh = prob.equalities(x)
    g, jg = prob.inequalities(x)
    neq, niq = len(h), len(g)

    z0 = 1.0
    gamma = 1.0
    lam = np.zeros(neq)
    z = np.full(niq, z0)
    mu = np.full(niq, z0)
    k = g < -z0
    z[k] = -g[k]
    k = gamma / z > z0
    mu[k] = gamma / z[k]
    e = np.ones(niq)

    status = "max_iterations"
    it = 0
    while it < opts.max_iterations:
        it += 1
        _, df = prob.objective(x)
        lx = df + jh.T @ lam + jg.T @ mu
        lxx = prob.hessian(x, lam, mu)
        zinv = sp.diags(1.0 / z)
        jg_t_zinv = jg.T @ zinv
        m = lxx + jg_t_zinv @ sp.diags(mu) @ jg
        n_vec = lx + jg_t_zinv @ (mu * g + gamma * e)
        kkt = sp.bmat([[m, jh.T], [jh, None]], format="csc")
        rhs = np.r_[-n_vec, -h]
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                step = spsolve(kkt, rhs)
            except MatrixRankWarning:
                step = np.full(len(rhs), np.nan)
        if not np.all(np.isfinite(step)):
            logger.info("OPF: singular Newton system at iteration %d", it)
            status = "infeasible"
            break
        dx, dlam = step[: prob.n_var], step[prob.n_var :]
        dz = -g - z - jg @ dx
        dmu = -mu + (gamma * e - mu * dz) / z
        alpha_p = _step_length(z, dz, opts.tau)
        alpha_d = _step_length(mu, dmu, opts.tau)
        x = x + alpha_p * dx
        z = z + alpha_p * dz
        lam = lam + alpha_d * dlam
        mu = mu + alpha_d * dmu
        if niq:
            gamma = opts.sigma * float(z @ mu) / niq

        h, jh = prob.equalities(x)
        g, jg = prob.inequalities(x)
        if np.max(np.abs(mu)) > MULTIPLIER_LIMIT or np.max(np.abs(lam), initial=0.0) > MULTIPLIER_LIMIT:
            status = "infeasible"
            break
        cand = prob.solution_from(x, lam, mu, iterations=it)
        if cand.kkt.within(opts.tolerance):
            status = "optimal"
            break

    sol = prob.solution_from(x, lam, mu, status=status, iterations=it)
    logger.info(
        "OPF %s after %d iterations: losses %.4f MW (start %.4f MW)",
        status,
        it,
        sol.objective_mw,
        sol.start_losses_mw,
    )
    return sol


def capability_values(
    net: Network,
    opts: OpfOptions,
    *,
    v_pu: np.ndarray,
    gen_p_mw: np.ndarray,
    gen_q_mvar: np.ndarray,
    shunt_q_mvar: np.ndarray,
    theta_rad: Optional[np.ndarray] = None,
) -> List[Tuple[str, np.ndarray]]:
    """Generator, shunt and voltage constraints evaluated from raw case data (pu, feasible when <= 0).

    Works on batches: every value argument may carry leading candidate axes,
    with the element axis last. Branch ratings are checked when angles are given.
    """
    s = net.s_base_mva
    x_d, e_q = _machine_params(net, opts)
    t = opts.lead_slope
    v = np.asarray(v_pu, dtype=float)
    p = np.asarray(gen_p_mw, dtype=float) / s
    q = np.asarray(gen_q_mvar, dtype=float) / s
    qsh = np.asarray(shunt_q_mvar, dtype=float) / s
    gens, shunts, buses = net.generators, net.shunts, net.buses
    col = lambda vals: np.array(vals, dtype=float)  # noqa: E731
    vg = v[..., [g.bus for g in gens]]
    vs = v[..., [c.bus for c in shunts]]
    sh_vmax = col([buses[c.bus].v_max for c in shunts])
    sh_vmin = col([buses[c.bus].v_min for c in shunts])
    out = [
        ("p_max", p - col([g.p_max_mw for g in gens]) / s),
        ("p_min", col([g.p_min_mw for g in gens]) / s - p),
        ("q_max", q - col([g.q_max_mvar for g in gens]) / s),
        ("q_min", col([g.q_min_mvar for g in gens]) / s - q),
        ("s_max", p**2 + q**2 - (col([g.s_max_mva for g in gens]) / s) ** 2),
        ("lead_pf", -t * p - q),
        ("field", p**2 + (q + vg**2 / x_d) ** 2 - (vg * e_q / x_d) ** 2),
        ("shunt_max", qsh - col([c.q_max_mvar for c in shunts]) / s * vs**2 / sh_vmax**2),
        ("shunt_min", col([c.q_min_mvar for c in shunts]) / s * vs**2 / sh_vmin**2 - qsh),
        ("v_max", v - col([b.v_max for b in buses])),
        ("v_min", col([b.v_min for b in buses]) - v),
    ]
    if theta_rad is not None:
        adm = build_admittance(net)
        vc = (v * np.exp(1j * np.asarray(theta_rad, dtype=float))).reshape(-1, net.n_bus)
        rating = col([br.rating_mva for br in net.branches]) / s
        lead = v.shape[:-1]
        for name, ybr, ends in (
            ("s_from", adm.yf, [br.from_bus for br in net.branches]),
            ("s_to", adm.yt, [br.to_bus for br in net.branches]),
        ):
            s_br = vc[:, ends] * np.conj((ybr @ vc.T).T)
            out.append((name, (np.abs(s_br) ** 2 - rating**2).reshape(*lead, len(ends))))
    return out


def audit_constraints(prob: OpfProblem, sol: OpfSolution, tol: float = 1e-6) -> List[str]:
    """Re-evaluate every constraint from the case data and the solution outputs.

    Returns one message per violation larger than ``tol`` (pu); empty when clean.
    """
    net, s = prob.net, prob.net.s_base_mva
    out: List[str] = []
    for name, values in capability_values(
        net,
        prob.options,
        v_pu=sol.v_setpoints,
        gen_p_mw=sol.gen_p_mw,
        gen_q_mvar=sol.gen_q_mvar,
        shunt_q_mvar=sol.shunt_q_mvar,
        theta_rad=sol.theta_rad,
    ):
        if name == "p_max":
            values = sol.gen_p_mw / s - prob.p_max
        elif name == "p_min":
            values = prob.p_min - sol.gen_p_mw / s
        for i in np.flatnonzero(values > tol):
            out.append(f"{name}[{i}] violated by {values[i]:.3g} pu")

    kp_mw = np.array([g.k_p_mw_per_hz for g in net.generators])
    droop = sol.gen_p_mw - (prob.operating_point.gen_p_mw + kp_mw * sol.delta_f_hz)
    for k in np.flatnonzero(np.abs(droop) / s > tol):
        out.append(f"droop coupling of {net.generator_label(int(k))} off by {droop[k]:.3g} MW")
    if abs(sol.delta_f_hz) > prob.options.delta_f_max_hz + tol:
        out.append(f"frequency deviation {sol.delta_f_hz:.4g} Hz outside bounds")

    adm = build_admittance(net)
    v = sol.v_setpoints * np.exp(1j * sol.theta_rad)
    inj = np.zeros(net.n_bus, dtype=complex)
    np.add.at(inj, [g.bus for g in net.generators], (sol.gen_p_mw + 1j * sol.gen_q_mvar) / s)
    np.add.at(inj, [c.bus for c in net.shunts], 1j * sol.shunt_q_mvar / s)
    mis = v * np.conj(adm.ybus @ v) - inj - prob.fixed_injection
    for i in np.flatnonzero(np.abs(mis) > tol):
        out.append(f"power balance at {net.buses[i].name} off by {abs(mis[i]):.3g} pu")
    return out


def participation_factors(net: Network, sol: OpfSolution, floor: float = 0.05) -> Dict[int, float]:
    """Per-area SVR shares taken from the optimal reactive distribution, floored and renormalised."""
    out: Dict[int, float] = {}
    for area in net.areas:
        ids = net.generators_in_area(area.id)
        if not ids:
            continue
        q = np.array([sol.gen_q_mvar[k] for k in ids])
        total = float(np.sum(q))
        if abs(total) < 1e-9:
            share = np.array([net.generators[k].alpha for k in ids])
        else:
            share = q / total
        share = np.maximum(share, floor)
        share = share / share.sum()
        out.update({k: float(a) for k, a in zip(ids, share)})
    return out
