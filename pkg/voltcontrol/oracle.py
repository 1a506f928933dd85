"""
Exhaustive grid search over generator voltage setpoints and shunt outputs.

Used as an independent check of the OPF on small networks: every candidate
gets its own power flow (generator buses held at their setpoint, the slack
generator closing the balance) and is kept only if all capability, shunt and
voltage constraints hold.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import OracleError
from .network import Network, build_admittance
from .opf import OpfOptions, capability_values
from .powerflow import Setpoints, nominal_setpoints

logger = logging.getLogger(__name__)

MAX_CANDIDATES = 10_000_000
MAX_FREE_SETPOINTS = 4
TIE_TOL_MW = 1e-9


@dataclass(frozen=True)
class OracleResult:
    gen_v_pu: np.ndarray
    shunt_q_mvar: np.ndarray
    losses_mw: float
    v_pu: np.ndarray
    gen_q_mvar: np.ndarray
    # largest loss change to a feasible grid neighbour of the optimum
    cell_variation_mw: float
    n_candidates: int
    n_feasible: int


def _axes(net: Network, resolution: float) -> Tuple[List[int], List[np.ndarray]]:
    gen_buses = sorted({g.bus for g in net.generators})
    axes = []
    for bus in gen_buses:
        b = net.buses[bus]
        axes.append(b.v_min + resolution * np.arange(int(np.floor((b.v_max - b.v_min) / resolution + 1e-9)) + 1))
    for c in net.shunts:
        lo, hi = c.q_min_mvar / net.s_base_mva, c.q_max_mvar / net.s_base_mva
        axes.append((lo + resolution * np.arange(int(np.floor((hi - lo) / resolution + 1e-9)) + 1)) * net.s_base_mva)
    return gen_buses, axes


def _batched_newton(ybus: np.ndarray, v0: np.ndarray, s_spec: np.ndarray, pv: np.ndarray, pq: np.ndarray, tol: float, max_it: int):
    """Dense Newton-Raphson over a stack of independent cases (rows of v0 / s_spec)."""
    v = v0.copy()
    pvpq = np.r_[pv, pq]
    npvpq = len(pvpq)
    eye = np.eye(ybus.shape[0], dtype=bool)

    def mismatch(v):
        s = v * np.conj(v @ ybus.T)
        mis = s - s_spec
        return np.concatenate([mis[:, pvpq].real, mis[:, pq].imag], axis=1)

    f = mismatch(v)
    for _ in range(max_it):
        if np.all(np.max(np.abs(f), axis=1, initial=0.0) <= tol):
            break
        vm = np.abs(v)
        vn = v / vm
        i = v @ ybus.T
        ds_dvm = v[:, :, None] * np.conj(ybus[None, :, :] * vn[:, None, :]) + eye * (np.conj(i) * vn)[:, :, None]
        ds_dva = 1j * v[:, :, None] * np.conj(eye * i[:, :, None] - ybus[None, :, :] * v[:, None, :])
        jac = np.concatenate(
            [
                np.concatenate([ds_dva[:, pvpq][:, :, pvpq].real, ds_dvm[:, pvpq][:, :, pq].real], axis=2),
                np.concatenate([ds_dva[:, pq][:, :, pvpq].imag, ds_dvm[:, pq][:, :, pq].imag], axis=2),
            ],
            axis=1,
        )
        # diverged candidates are parked so they cannot poison the batched solve
        bad = ~(np.all(np.isfinite(f), axis=1) & np.all(np.isfinite(jac), axis=(1, 2)))
        jac[bad] = np.eye(jac.shape[1])
        f = np.where(bad[:, None], 0.0, f)
        try:
            dx = -np.linalg.solve(jac, f[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            dx = -(np.linalg.pinv(jac) @ f[:, :, None])[:, :, 0]
        va = np.angle(v)
        va[:, pvpq] += dx[:, :npvpq]
        vm[:, pq] += dx[:, npvpq:]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
    ok = np.all(np.isfinite(f), axis=1) & (np.max(np.abs(np.nan_to_num(f, nan=np.inf)), axis=1, initial=0.0) <= tol)
    return v, ok


def brute_force_oracle(
    net: Network,
    grid_resolution: float,
    *,
    setpoints: Optional[Setpoints] = None,
    opts: Optional[OpfOptions] = None,
    tolerance: float = 1e-6,
    chunk_size: int = 50_000,
) -> OracleResult:
    """Loss-minimal feasible candidate on a regular grid of setpoints.

    Ties within 1e-9 MW go to the first candidate in enumeration order, i.e.
    the lowest setpoints.
    """
    if grid_resolution <= 0:
        raise OracleError("grid resolution must be positive")
    opts = opts or OpfOptions()
    base = setpoints if setpoints is not None else nominal_setpoints(net)
    gen_buses, axes = _axes(net, grid_resolution)
    if len(axes) > MAX_FREE_SETPOINTS:
        raise OracleError(f"{len(axes)} free setpoints; grid search supports at most {MAX_FREE_SETPOINTS}")
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape, dtype=np.int64))
    if total > MAX_CANDIDATES:
        raise OracleError(f"resolution too fine: {total} candidates exceed the cap of {MAX_CANDIDATES}")

    s = net.s_base_mva
    n = net.n_bus
    slack = net.slack_bus
    ybus = build_admittance(net).ybus.toarray()
    pv = np.array([b for b in gen_buses if b != slack], dtype=np.int64)
    pq = np.array([i for i in range(n) if i not in gen_buses], dtype=np.int64)
    n_gen_axes = len(gen_buses)

    gen_bus = np.array([g.bus for g in net.generators], dtype=np.int64)
    shunt_bus = np.array([c.bus for c in net.shunts], dtype=np.int64)
    p_fixed = np.zeros(n)
    q_fixed = np.zeros(n)
    np.add.at(p_fixed, [w.bus for w in net.wind_parks], base.wind_p_mw)
    np.add.at(p_fixed, [ld.bus for ld in net.loads], -base.load_p_mw)
    np.add.at(q_fixed, [ld.bus for ld in net.loads], -base.load_q_mvar)
    p_gen = np.zeros(n)
    np.add.at(p_gen, gen_bus, base.gen_p_mw)
    spans = np.array([g.q_max_mvar - g.q_min_mvar for g in net.generators])
    span_at_bus = np.zeros(n)
    np.add.at(span_at_bus, gen_bus, spans)

    losses = np.full(total, np.nan)
    grids = np.meshgrid(*axes, indexing="ij")
    flat = [gr.reshape(-1) for gr in grids]
    for start in range(0, total, chunk_size):
        stop = min(start + chunk_size, total)
        m = stop - start
        vm = np.ones((m, n))
        for a, bus in enumerate(gen_buses):
            vm[:, bus] = flat[a][start:stop]
        q_sh = np.stack([flat[n_gen_axes + i][start:stop] for i in range(len(net.shunts))], axis=1) if len(net.shunts) else np.zeros((m, 0))
        q_bus = np.tile(q_fixed, (m, 1))
        for i, bus in enumerate(shunt_bus):
            q_bus[:, bus] += q_sh[:, i]
        s_spec = ((p_fixed + p_gen)[None, :] + 1j * q_bus) / s

        v, ok = _batched_newton(ybus, vm.astype(complex), s_spec, pv, pq, 1e-8, 20)
        s_calc = v * np.conj(v @ ybus.T) * s
        gen_p = np.tile(np.asarray(base.gen_p_mw, dtype=float), (m, 1))
        slack_gens = np.flatnonzero(gen_bus == slack)
        if slack_gens.size:
            others = gen_p[:, slack_gens[1:]].sum(axis=1)
            gen_p[:, slack_gens[0]] = s_calc[:, slack].real - p_fixed[slack] - others
        q_need = s_calc.imag - q_bus
        gen_q = q_need[:, gen_bus] * spans / span_at_bus[gen_bus]

        vmag = np.abs(v)
        feasible = ok.copy()
        for _, values in capability_values(
            net, opts, v_pu=vmag, gen_p_mw=gen_p, gen_q_mvar=gen_q, shunt_q_mvar=q_sh, theta_rad=np.angle(v)
        ):
            if values.shape[-1]:
                feasible &= np.all(values <= tolerance, axis=1)
        chunk_losses = s_calc.real.sum(axis=1)
        losses[start:stop] = np.where(feasible, chunk_losses, np.nan)

    n_feasible = int(np.count_nonzero(~np.isnan(losses)))
    if n_feasible == 0:
        raise OracleError("no feasible candidate")
    best_loss = float(np.nanmin(losses))
    best = int(np.flatnonzero(losses <= best_loss + TIE_TOL_MW)[0])
    idx = np.unravel_index(best, shape)

    variation = 0.0
    for axis, step in itertools.product(range(len(shape)), (-1, 1)):
        nb = list(idx)
        nb[axis] += step
        if 0 <= nb[axis] < shape[axis]:
            value = losses[np.ravel_multi_index(tuple(nb), shape)]
            if not np.isnan(value):
                variation = max(variation, abs(float(value) - float(losses[best])))

    # re-solve the winner alone to report its operating point
    vm = np.ones((1, n))
    for a, bus in enumerate(gen_buses):
        vm[0, bus] = axes[a][idx[a]]
    q_sh = np.array([axes[n_gen_axes + i][idx[n_gen_axes + i]] for i in range(len(net.shunts))], dtype=float)
    q_bus = q_fixed.copy()
    np.add.at(q_bus, shunt_bus, q_sh)
    v, _ = _batched_newton(ybus, vm.astype(complex), (((p_fixed + p_gen) + 1j * q_bus) / s)[None, :], pv, pq, 1e-8, 20)
    s_calc = v[0] * np.conj(ybus @ v[0]) * s
    gen_q = (s_calc.imag - q_bus)[gen_bus] * spans / span_at_bus[gen_bus]

    logger.info(
        "oracle: %d candidates, %d feasible, best losses %.6f MW (cell variation %.3g MW)",
        total,
        n_feasible,
        losses[best],
        variation,
    )
    return OracleResult(
        gen_v_pu=np.array([vm[0, g.bus] for g in net.generators]),
        shunt_q_mvar=q_sh,
        losses_mw=float(losses[best]),
        v_pu=np.abs(v[0]),
        gen_q_mvar=gen_q,
        cell_variation_mw=variation,
        n_candidates=total,
        n_feasible=n_feasible,
    )
