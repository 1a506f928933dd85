import dataclasses

import numpy as np
import pytest

from voltcontrol.errors import SvrError
from voltcontrol.powerflow import nominal_setpoints, solve_power_flow
from voltcontrol.svr import (
    LinearPlant,
    SvrAreaState,
    SvrGains,
    SvrGenerator,
    SvrLimits,
    SvrMeasurement,
    closed_loop_response,
    continuous_response,
    init_area_state,
    linearize_area,
    settling_time,
    shift_area_references,
    sharing_errors,
    svr_step,
)


def _state(*alphas, v_ref_svr=1.02, base=1.0):
    gens = tuple(SvrGenerator(gen=k, alpha=a, v_ref_base=base, v_ref=base) for k, a in enumerate(alphas))
    return SvrAreaState(area=1, pilot_bus=2, v_ref_svr=v_ref_svr, integ_c=0.0, generators=gens)


def _meas(v_pilot, *q):
    return SvrMeasurement(v_pilot=v_pilot, gen_ids=tuple(range(len(q))), gen_q=tuple(q), q_total=float(sum(q)))


@pytest.mark.parametrize("kwargs", [{"ki_c": 0.0}, {"ki_j": -0.1}, {"kp_c": -1.0}])
def test_gain_validation(kwargs):
    with pytest.raises(SvrError):
        SvrGains(**kwargs)


def test_limits_validation():
    with pytest.raises(SvrError):
        SvrLimits(v_ref_min=1.1, v_ref_max=1.0)


def test_measurement_sum_is_checked():
    with pytest.raises(SvrError, match="q_total"):
        SvrMeasurement(v_pilot=1.0, gen_ids=(0, 1), gen_q=(1.0, 2.0), q_total=4.0)


def test_integral_step_single_generator():
    state = svr_step(_state(1.0), _meas(1.0, 20.0), SvrGains(), dt=10.0)
    assert state.integ_c == pytest.approx(0.02 * 10.0)
    (g,) = state.generators
    # alone in the area: the sharing error is zero
    assert g.integ == pytest.approx(0.0)
    assert g.v_ref == pytest.approx(1.0 + 0.02 * 0.2)
    assert g.clamped is None


def test_proportional_terms():
    gains = SvrGains(kp_c=0.5, ki_c=0.02, kp_j=0.0, ki_j=0.01)
    (g,) = svr_step(_state(1.0), _meas(1.0, 0.0), gains, dt=1.0).generators
    assert g.v_ref == pytest.approx(1.0 + 0.5 * 0.02 + 0.02 * 0.02)


def test_sharing_moves_references_apart():
    # G1 carries 30 of 40 MVar with a 50 % share: its reference goes down, G2's up
    state = svr_step(_state(0.5, 0.5, v_ref_svr=1.0), _meas(1.0, 30.0, 10.0), SvrGains(), dt=10.0)
    g1, g2 = state.generators
    assert g1.integ == pytest.approx((0.5 * 0.4 - 0.3) * 10.0)
    assert g2.integ == pytest.approx((0.5 * 0.4 - 0.1) * 10.0)
    assert g1.v_ref < 1.0 < g2.v_ref
    assert state.integ_c == 0.0


def test_clamp_and_conditional_integration():
    state = dataclasses.replace(_state(1.0, v_ref_svr=1.05), integ_c=10.0)
    state = svr_step(state, _meas(1.0, 0.0), SvrGains(), dt=10.0)
    (g,) = state.generators
    assert g.v_ref == pytest.approx(1.10)
    assert g.clamped == "max"
    assert g.windup_flag
    frozen = state.integ_c

    # still pushing up: the central integrator holds
    state = svr_step(state, _meas(1.0, 0.0), SvrGains(), dt=10.0)
    assert state.integ_c == pytest.approx(frozen)

    # error reverses: it unwinds immediately
    state = svr_step(state, _meas(1.10, 0.0), SvrGains(), dt=10.0)
    assert state.integ_c == pytest.approx(frozen - 0.05 * 10.0)


def test_lower_clamp():
    state = dataclasses.replace(_state(1.0, v_ref_svr=0.9), integ_c=-10.0)
    (g,) = svr_step(state, _meas(1.0, 0.0), SvrGains(), dt=10.0).generators
    assert g.v_ref == pytest.approx(0.95)
    assert g.clamped == "min"


def test_references_stay_in_band():
    state = _state(0.5, 0.5, v_ref_svr=1.3)
    for _ in range(200):
        state = svr_step(state, _meas(0.9, 50.0, -50.0), SvrGains(), dt=10.0)
        assert np.all(state.v_refs >= 0.95) and np.all(state.v_refs <= 1.10)


def test_generator_set_mismatch():
    with pytest.raises(SvrError, match="mismatch"):
        svr_step(_state(0.5, 0.5), _meas(1.0, 1.0), SvrGains(), dt=10.0)


def test_non_positive_dt():
    with pytest.raises(SvrError):
        svr_step(_state(1.0), _meas(1.0, 1.0), SvrGains(), dt=0.0)


def test_sharing_errors():
    errs, degenerate = sharing_errors(_state(0.25, 0.75), _meas(1.0, 10.0, 30.0))
    np.testing.assert_allclose(errs, [0.0, 0.0], atol=1e-12)
    assert not degenerate
    errs, degenerate = sharing_errors(_state(0.25, 0.75), _meas(1.0, 0.01, 0.02))
    assert degenerate
    np.testing.assert_array_equal(errs, [0.0, 0.0])


def test_init_area_state(reference_net):
    v = nominal_setpoints(reference_net).gen_v_pu
    state = init_area_state(reference_net, 2, v, 1.01)
    assert state.gen_ids == (2, 3)
    assert state.pilot_bus == reference_net.bus_by_name("B14").id
    np.testing.assert_allclose(state.v_refs, v[[2, 3]])
    assert state.integ_c == 0.0
    assert all(g.integ == 0.0 and not g.windup_flag for g in state.generators)


def test_measurement_from_solution(reference_net):
    sp_ = nominal_setpoints(reference_net)
    sol = solve_power_flow(reference_net, sp_)
    state = init_area_state(reference_net, 1, sp_.gen_v_pu, 1.0)
    meas = SvrMeasurement.from_solution(sol, state)
    assert meas.v_pilot == pytest.approx(sol.v_pu[4])
    assert meas.q_total == pytest.approx(sol.gen_q_mvar[0] + sol.gen_q_mvar[1])


def test_scalar_loop_matches_exponential():
    plant = LinearPlant.scalar()
    gains = SvrGains()
    discrete = closed_loop_response(plant, gains, horizon_s=100.0, dt=0.1)
    exact = continuous_response(plant, gains, discrete.times_s)
    np.testing.assert_allclose(exact.pilot_error, 0.02 * np.exp(-0.02 * discrete.times_s), atol=1e-12)
    np.testing.assert_allclose(discrete.pilot_error, exact.pilot_error, atol=2e-5)
    assert not discrete.diverged


def test_scalar_loop_settling_time():
    resp = closed_loop_response(LinearPlant.scalar(), SvrGains(), horizon_s=600.0, dt=10.0)
    # error shrinks by 0.8 per sample
    np.testing.assert_allclose(resp.pilot_error[:4], 0.02 * 0.8 ** np.arange(4))
    assert settling_time(resp) == pytest.approx(180.0)


def test_too_long_sample_period_diverges():
    resp = closed_loop_response(LinearPlant.scalar(), SvrGains(), horizon_s=3000.0, dt=150.0)
    assert resp.diverged
    assert settling_time(resp) == float("inf")


def test_plant_dimension_check():
    with pytest.raises(SvrError):
        LinearPlant(g_pilot=np.ones(2), g_q=np.zeros((1, 1)), alpha=np.array([1.0]))


def test_linearized_reference_area(reference_net):
    plant = linearize_area(reference_net, nominal_setpoints(reference_net), 1)
    assert plant.g_pilot.shape == (2,)
    assert np.all(plant.g_pilot > 0)
    assert np.all(np.diag(plant.g_q) > 0)
    assert plant.error_sensitivity.shape == (3, 2)
    resp = closed_loop_response(plant, SvrGains(), horizon_s=3000.0, dt=1.0)
    assert not resp.diverged
    assert abs(resp.pilot_error[-1]) < 0.05 * 0.02


def test_zero_error_is_a_fixed_point():
    state = _state(0.5, 0.5, v_ref_svr=1.0)
    after = svr_step(state, _meas(1.0, 5.0, 5.0), SvrGains(), dt=10.0)
    assert after == state


def test_single_step_pi_law():
    gains = SvrGains(kp_c=1.0, ki_c=0.1, kp_j=0.0, ki_j=0.01)
    (g,) = svr_step(_state(1.0, v_ref_svr=1.01), _meas(1.0, 0.0), gains, dt=1.0).generators
    assert g.v_ref - 1.0 == pytest.approx(0.011)


def test_unequal_shares():
    errs, degenerate = sharing_errors(_state(0.7, 0.3), _meas(1.0, 10.0, 10.0))
    np.testing.assert_allclose(errs, [-0.2, 0.2])
    assert not degenerate


def test_pure_integral_ratio():
    resp = closed_loop_response(LinearPlant.scalar(), SvrGains(ki_c=0.1), horizon_s=20.0, dt=1.0)
    ratios = resp.pilot_error[1:] / resp.pilot_error[:-1]
    np.testing.assert_allclose(ratios, 0.9)


def test_discretisation_error_is_first_order():
    plant = LinearPlant(
        g_pilot=np.array([0.6, 0.4]),
        g_q=np.array([[4.0, -1.5], [-1.0, 3.0]]),
        alpha=np.array([0.6, 0.4]),
    )
    gains = SvrGains()

    def deviation(dt):
        resp = closed_loop_response(plant, gains, horizon_s=300.0, dt=dt)
        exact = continuous_response(plant, gains, resp.times_s)
        return float(np.max(np.abs(resp.errors - exact.errors)))

    ratio = deviation(1.0) / deviation(0.5)
    assert 1.7 < ratio < 2.3


def test_reference_settling_within_minutes(reference_net):
    plant = linearize_area(reference_net, nominal_setpoints(reference_net), 2)
    resp = closed_loop_response(plant, SvrGains(), horizon_s=1200.0, dt=1.0)
    assert 10.0 <= settling_time(resp) < 300.0


def test_reference_discretisation_from_10_to_5_seconds(reference_net):
    plant = linearize_area(reference_net, nominal_setpoints(reference_net), 1)
    gains = SvrGains()

    def deviation(dt):
        resp = closed_loop_response(plant, gains, horizon_s=1800.0, dt=dt)
        exact = continuous_response(plant, gains, resp.times_s)
        # pilot error trajectory
        return float(np.max(np.abs(resp.pilot_error - exact.pilot_error)))

    assert 1.5 <= deviation(10.0) / deviation(5.0) <= 2.5
    resp = closed_loop_response(plant, gains, horizon_s=1800.0, dt=10.0)
    assert not resp.diverged
    assert settling_time(resp) < 900.0


def test_shift_moves_references_and_latches_the_guard():
    state = shift_area_references(_state(0.5, 0.5), -0.01, "max")
    assert state.guard == "max"
    np.testing.assert_allclose(state.v_refs, 0.99)
    assert all(g.v_ref_base == pytest.approx(0.99) for g in state.generators)
    # balanced and on target: nothing moves the shifted references back
    after = svr_step(dataclasses.replace(state, v_ref_svr=1.0), _meas(1.0, 5.0, 5.0), SvrGains(), dt=10.0)
    np.testing.assert_allclose(after.v_refs, 0.99)


def test_shift_of_a_clamped_reference_starts_from_the_clamp():
    state = dataclasses.replace(_state(1.0, v_ref_svr=1.05), integ_c=10.0)
    state = svr_step(state, _meas(1.0, 0.0), SvrGains(), dt=10.0)
    (g,) = state.generators
    assert g.clamped == "max"
    assert g.unclamped == pytest.approx(1.0 + 0.02 * 10.5)

    state = shift_area_references(state, -0.01, "max")
    (g,) = state.generators
    assert g.v_ref == pytest.approx(1.09)
    assert g.clamped is None
    # pilot on target: the shifted reference holds instead of snapping back to the clamp
    (g,) = svr_step(state, _meas(1.05, 0.0), SvrGains(), dt=10.0).generators
    assert g.v_ref == pytest.approx(1.09)


def test_latched_guard_freezes_outward_integration():
    state = shift_area_references(_state(0.5, 0.5, v_ref_svr=1.05), -0.01, "max")
    # pilot below target would push references up: held
    pushed = svr_step(state, _meas(1.0, 10.0, 0.0), SvrGains(), dt=10.0)
    assert pushed.integ_c == 0.0
    g0, g1 = pushed.generators
    # G1 is over its share (q_err < 0) and keeps integrating down; G2 would go up and is held
    assert g0.integ < 0.0
    assert g1.integ == 0.0
    # pilot above target pulls down: integrates
    released = svr_step(state, _meas(1.06, 5.0, 5.0), SvrGains(), dt=10.0)
    assert released.integ_c == pytest.approx(-0.01 * 10.0)
    assert released.guard == "max"


def test_guard_side_is_checked():
    with pytest.raises(SvrError, match="guard side"):
        shift_area_references(_state(1.0), 0.01, "up")
