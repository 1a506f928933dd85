import json

import numpy as np
import pytest

from voltcontrol.config import DATA_DIR
from voltcontrol.errors import OpfBuildError
from voltcontrol.network import build_admittance
from voltcontrol.opf import (
    OpfOptions,
    audit_constraints,
    build_opf,
    capability_values,
    kkt_residuals,
    participation_factors,
    solve_opf,
)
from voltcontrol.powerflow import PowerFlowOptions, nominal_setpoints, scaled_setpoints, solve_power_flow


def _three_bus_raw():
    return json.loads((DATA_DIR / "three_bus.case").read_text(encoding="utf-8"))


def _problem(net, setpoints=None, opts=None):
    op = solve_power_flow(net, setpoints if setpoints is not None else nominal_setpoints(net))
    assert op.converged
    return build_opf(net, op, opts)


@pytest.fixture(scope="module")
def three_bus_problem(three_bus_net):
    return _problem(three_bus_net)


@pytest.fixture(scope="module")
def three_bus_solution(three_bus_problem):
    return solve_opf(three_bus_problem)


def _fd_jacobian(fun, x, h=1e-7):
    cols = []
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.column_stack(cols)


def _interior_points(prob, count=10, seed=7):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield prob.x0 + rng.uniform(-0.02, 0.02, prob.n_var)


def test_problem_layout(reference_net):
    prob = _problem(reference_net)
    ng, nc, n, nl = 4, 5, 21, len(reference_net.branches)
    assert prob.n_var == 2 * n - 1 + ng + nc + 1
    assert prob.n_eq == 2 * n
    assert prob.n_ineq == 7 * ng + 2 * nc + 2 * n + 2 + 2 * (n - 1) + 2 * nl
    assert len(prob.labels) == prob.n_ineq
    assert prob.labels[0] == "p_max:G1 (bus B1)"
    assert prob.labels[6 * ng] == "field:G1 (bus B1)"
    assert prob.branch_offset == prob.n_ineq - 2 * nl
    assert prob.labels[prob.branch_offset] == "s_from:B1-B2"
    assert prob.labels[-1] == "s_to:B20-B21"


def test_start_point_is_power_flow_feasible(reference_net):
    prob = _problem(reference_net)
    h, _ = prob.equalities(prob.x0)
    assert np.max(np.abs(h)) < 1e-10
    f, _ = prob.objective(prob.x0)
    assert f * reference_net.s_base_mva == pytest.approx(prob.operating_point.losses_mw, abs=1e-6)


def test_first_derivatives_match_finite_differences(three_bus_problem):
    prob = three_bus_problem
    for x in _interior_points(prob):
        _, grad = prob.objective(x)
        num = _fd_jacobian(lambda y: np.array([prob.objective(y)[0]]), x)[0]
        np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-6)

        _, jh = prob.equalities(x)
        np.testing.assert_allclose(jh.toarray(), _fd_jacobian(lambda y: prob.equalities(y)[0], x), rtol=1e-5, atol=1e-6)

        _, jg = prob.inequalities(x)
        np.testing.assert_allclose(jg.toarray(), _fd_jacobian(lambda y: prob.inequalities(y)[0], x), rtol=1e-5, atol=1e-6)


def test_hessian_matches_finite_differences(three_bus_problem):
    prob = three_bus_problem
    rng = np.random.default_rng(3)
    lam = rng.normal(size=prob.n_eq)
    mu = rng.uniform(0.1, 2.0, prob.n_ineq)

    def grad_lagrangian(y):
        _, df = prob.objective(y)
        _, jh = prob.equalities(y)
        _, jg = prob.inequalities(y)
        return df + jh.T @ lam + jg.T @ mu

    for x in _interior_points(prob, count=3):
        hess = prob.hessian(x, lam, mu).toarray()
        np.testing.assert_allclose(hess, _fd_jacobian(grad_lagrangian, x, h=1e-6), rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(hess, hess.T, atol=1e-10)


def test_three_bus_optimum(three_bus_problem, three_bus_solution):
    sol = three_bus_solution
    assert sol.optimal
    assert sol.objective_mw <= sol.start_losses_mw + 1e-6
    assert sol.kkt.within(1e-6)
    assert audit_constraints(three_bus_problem, sol) == []
    assert set(sol.pilot_refs) == {1}
    assert sol.pilot_refs[1] == pytest.approx(sol.v_setpoints[2])


def test_kkt_residuals_recomputed(three_bus_problem, three_bus_solution):
    again = kkt_residuals(three_bus_problem, three_bus_solution)
    assert again == three_bus_solution.kkt


def test_perturbed_optimum_is_not_stationary(three_bus_problem, three_bus_solution):
    sol = three_bus_solution
    x = sol.x.copy()
    x[three_bus_problem.n_bus - 1 + 2] += 0.01
    moved = three_bus_problem.solution_from(x, sol.lam, sol.mu)
    assert moved.kkt.stationarity > sol.kkt.stationarity


def test_interior_non_optimal_point_has_residual(three_bus_problem):
    cand = three_bus_problem.solution_from(three_bus_problem.x0)
    assert cand.kkt.stationarity > 1e-4


def test_resolving_at_the_optimum_is_a_fixed_point(three_bus_net, three_bus_solution):
    sp_ = nominal_setpoints(three_bus_net).replace(
        gen_v_pu=three_bus_solution.gen_v_pu,
        gen_p_mw=three_bus_solution.gen_p_mw,
        shunt_q_mvar=three_bus_solution.shunt_q_mvar,
    )
    again = solve_opf(_problem(three_bus_net, sp_))
    assert again.optimal
    assert again.start_losses_mw == pytest.approx(three_bus_solution.objective_mw, abs=1e-3)
    assert abs(again.objective_mw - again.start_losses_mw) < 1e-3


def test_reference_case_at_noon(reference_net, day_profile):
    sp_ = scaled_setpoints(reference_net, day_profile, 12.0)
    prob = _problem(reference_net, sp_)
    sol = solve_opf(prob)
    assert sol.optimal
    assert sol.objective_mw < sol.start_losses_mw
    assert audit_constraints(prob, sol, tol=1e-5) == []
    assert abs(sol.delta_f_hz) <= prob.options.delta_f_max_hz


def test_lead_power_factor_bound():
    opts = OpfOptions()
    assert 10.0 * opts.lead_slope == pytest.approx(5.932, abs=1e-3)


def _with_shunt(case_from):
    raw = json.loads((DATA_DIR / "two_bus.case").read_text(encoding="utf-8"))
    raw["shunts"] = [{"bus": 1, "kind": "svc", "q_min_mvar": -10.0, "q_max_mvar": 10.0}]
    return case_from(raw)


def _shunt_max(net, v2, q):
    values = dict(
        capability_values(
            net,
            OpfOptions(),
            v_pu=np.array([1.0, v2]),
            gen_p_mw=np.array([50.0]),
            gen_q_mvar=np.array([0.0]),
            shunt_q_mvar=np.array([q]),
        )
    )
    return values["shunt_max"][0]


def test_shunt_bound_scales_with_voltage(case_from):
    net = _with_shunt(case_from)
    assert _shunt_max(net, 1.1, 10.0) == pytest.approx(0.0, abs=1e-12)
    # 10 MVar * (0.95 / 1.1)^2
    assert _shunt_max(net, 0.95, 7.459) == pytest.approx(0.0, abs=1e-5)
    assert _shunt_max(net, 0.95, 8.0) > 0


def test_missing_machine_parameters(two_bus_net):
    op = solve_power_flow(two_bus_net, nominal_setpoints(two_bus_net))
    with pytest.raises(OpfBuildError, match=r"G1 \(bus B1\): missing machine parameter x_d_pu"):
        build_opf(two_bus_net, op, OpfOptions(machine_defaults=False))


def test_non_converged_operating_point(reference_net):
    op = solve_power_flow(reference_net, nominal_setpoints(reference_net), PowerFlowOptions(max_iterations=1))
    with pytest.raises(OpfBuildError, match="not a converged"):
        build_opf(reference_net, op)


def test_participation_factors(reference_net, day_profile):
    prob = _problem(reference_net, scaled_setpoints(reference_net, day_profile, 12.0))
    sol = solve_opf(prob)
    alphas = participation_factors(reference_net, sol, floor=0.05)
    assert set(alphas) == {0, 1, 2, 3}
    for area in reference_net.areas:
        shares = [alphas[k] for k in reference_net.generators_in_area(area.id)]
        assert sum(shares) == pytest.approx(1.0)
        assert min(shares) > 0


def _branch_mva(net, sol):
    adm = build_admittance(net)
    v = sol.v_setpoints * np.exp(1j * sol.theta_rad)
    f = [br.from_bus for br in net.branches]
    t = [br.to_bus for br in net.branches]
    s_from = np.abs(v[f] * np.conj(adm.yf @ v)) * net.s_base_mva
    s_to = np.abs(v[t] * np.conj(adm.yt @ v)) * net.s_base_mva
    return s_from, s_to


def test_tight_branch_rating_binds(case_from, three_bus_net, three_bus_solution):
    s_from, _ = _branch_mva(three_bus_net, three_bus_solution)
    busiest = int(np.argmax(s_from))
    rating = 0.99 * float(s_from[busiest])

    raw = _three_bus_raw()
    raw["branches"][busiest]["rating_mva"] = rating
    net = case_from(raw)
    prob = _problem(net)
    sol = solve_opf(prob)
    assert sol.optimal
    assert audit_constraints(prob, sol, tol=1e-5) == []
    loaded, _ = _branch_mva(net, sol)
    assert loaded[busiest] <= rating + 1e-3
    assert sol.objective_mw >= three_bus_solution.objective_mw - 1e-6
    row = prob.branch_offset + busiest
    assert prob.labels[row].startswith("s_from:")
    assert sol.mu[row] > 1e-6


def test_branch_rating_in_capability_values(two_bus_net):
    # lossless 0.1 pu line, 50 MW across it: |S| at the sending end just above 50 MVA
    op = solve_power_flow(two_bus_net, nominal_setpoints(two_bus_net))
    values = dict(
        capability_values(
            two_bus_net,
            OpfOptions(),
            v_pu=op.v_pu,
            gen_p_mw=op.gen_p_mw,
            gen_q_mvar=op.gen_q_mvar,
            shunt_q_mvar=np.zeros(0),
            theta_rad=op.theta_rad,
        )
    )
    s_from = np.hypot(op.flows.p_from_mw[0], op.flows.q_from_mvar[0]) / 100.0
    assert values["s_from"][0] == pytest.approx(s_from**2 - 1.0, abs=1e-9)
    assert "s_from" not in dict(
        capability_values(
            two_bus_net,
            OpfOptions(),
            v_pu=op.v_pu,
            gen_p_mw=op.gen_p_mw,
            gen_q_mvar=op.gen_q_mvar,
            shunt_q_mvar=np.zeros(0),
        )
    )


def test_start_outside_p_box_is_relaxed(case_from, caplog):
    raw = _three_bus_raw()
    # the slack starts near 52 MW once losses are covered
    raw["generators"][0].update(p_min_mw=55.0, p0_mw=55.0)
    net = case_from(raw)
    with caplog.at_level("WARNING", logger="voltcontrol.opf"):
        prob = _problem(net)
    assert "below p_min" in caplog.text
    start_p = prob.operating_point.gen_p_mw[0]
    assert start_p < 55.0
    assert prob.p_min[0] == pytest.approx(start_p / 100.0 - 0.01)
    assert prob.p_min[1] == 0.0
    sol = solve_opf(prob)
    assert sol.optimal
    assert audit_constraints(prob, sol) == []
