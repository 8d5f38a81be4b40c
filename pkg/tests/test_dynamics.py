"""Simulator correctness: derivative closed forms, RK4 order, invariants."""

import math

import numpy as np
import pytest

from ctsel import dynamics
from ctsel.datagen import sample_initial_conditions
from ctsel.dynamics import (CovidParams, CovidState, CvsParams, CvsState,
                            CvsSystem, CovidSystem, SimulationDivergence,
                            TimeGrid, covid_derivative, cvs_derivative,
                            make_system, rk4_step, simulate_trajectory)


def test_cvs_zero_dose_freezes_stroke_volume():
    d = cvs_derivative(CvsState(0.95, 0.8, 0.5, 0.2), dose=0.0, t_in_cycle=2.0)
    assert d.sv == 0.0


def test_cvs_zero_pressure_gradient_term():
    # with Pa = Pv the runoff term vanishes: dPa = -SV * f_HR / Ca exactly
    p = CvsParams()
    s = 0.3
    f_hr = s * (p.f_hr_max - p.f_hr_min) + p.f_hr_min
    d = cvs_derivative(CvsState(1.0, 0.6, 0.6, s), dose=0.0, t_in_cycle=0.0)
    assert d.pa == pytest.approx(-1.0 * f_hr / p.ca, abs=1e-15)


def test_cvs_derivative_hand_evaluation():
    # independent arithmetic for state (0.95, 0.8, 0.5, 0.2), theta=0.5, t=0
    r_tpr = 0.2 * (2.134 - 0.5335) + 0.5335 + 0.0
    f_hr = 0.2 * (3.0 - 0.6666) + 0.6666
    i_ext = 0.5 * math.exp(-(5.0 - 0.0) / 5.0)
    d_sv = i_ext
    d_pa = ((0.8 - 0.5) / r_tpr - 0.95 * f_hr) / 4.0
    d_pv = (-4.0 * d_pa + i_ext) / 111.0
    d_s = (1.0 - 1.0 / (1.0 + math.exp(-0.1838 * (0.8 - 70.0))) - 0.2) / 20.0
    d = cvs_derivative(CvsState(0.95, 0.8, 0.5, 0.2), dose=0.5, t_in_cycle=0.0)
    assert d.sv == pytest.approx(d_sv, rel=1e-12)
    assert d.pa == pytest.approx(d_pa, rel=1e-12)
    assert d.pv == pytest.approx(d_pv, rel=1e-12)
    assert d.s == pytest.approx(d_s, rel=1e-12)


def test_cvs_derivative_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        cvs_derivative(CvsState(np.nan, 0.8, 0.5, 0.2), 0.0, 0.0)


def test_covid_origin_is_fixed_point():
    d = covid_derivative(CovidState(0, 0, 0, 0), dose_input=0.0)
    assert d.as_array().tolist() == [0.0, 0.0, 0.0, 0.0]


def test_covid_hill_half_saturation():
    # at Z2 = k_cp the Hill term contributes exactly k_ep / 2 to dZ2
    p = CovidParams()
    d = covid_derivative(CovidState(0.0, p.k_cp, 0.0, 0.0), dose_input=0.0, params=p)
    assert d.z2 == pytest.approx(-p.k_io * p.k_cp + p.k_ep / 2.0, abs=1e-15)


def test_covid_derivative_all_ones_hand_evaluation():
    # Z = (1,1,1,1), C = 1, all rate constants 1, h_p = 2
    d = covid_derivative(CovidState(1, 1, 1, 1), dose_input=1.0)
    assert d.z1 == pytest.approx(1.0 - 1.0 - 1.0, abs=1e-15)            # -1
    assert d.z2 == pytest.approx(1 - 1 + 1 + 0.5 - 1, abs=1e-15)        # 0.5
    assert d.z3 == pytest.approx(1.0, abs=1e-15)
    assert d.z4 == pytest.approx(0.0, abs=1e-15)  # first-order elimination


def test_covid_drug_coupling_flag():
    state = CovidState(2.0, 1.0, 0.5, 3.0)
    printed = covid_derivative(state, 0.0, CovidParams(drug_coupling="as-printed"))
    coupled = covid_derivative(state, 0.0, CovidParams())
    # as printed, Z3 (=0.5) gates the interaction; substituted, Z4 (=3) does
    assert printed.z1 == pytest.approx(2.0 - 2.0 * 0.5 - 2.0, abs=1e-15)
    assert coupled.z1 == pytest.approx(2.0 - 2.0 * 3.0 - 2.0, abs=1e-15)


def test_covid_rejects_negative_state():
    with pytest.raises(ValueError, match="nonnegative"):
        covid_derivative(CovidState(-0.1, 0, 0, 0), 0.0)


def test_rk4_exponential_decay():
    def f(y, inputs, stage_dt):
        return -y
    out = rk4_step(np.array([1.0]), (0.0, 0.0, 0.0), 0.1, f)
    assert out[0] == pytest.approx(0.90483750, abs=5e-9)


def test_rk4_constant_state():
    def f(y, inputs, stage_dt):
        return np.zeros_like(y)
    y = np.array([2.0, -3.0])
    assert np.array_equal(rk4_step(y, (0.0, 0.0, 0.0), 1.0, f), y)


def test_rk4_divergence_carries_time():
    def f(y, inputs, stage_dt):
        with np.errstate(over="ignore"):
            return y * y * 1e200
    with pytest.raises(SimulationDivergence):
        rk4_step(np.array([1e200]), (0.0, 7.0, 0.0), 1.0, f)


def _reference_states(system, y0, cycle_doses, horizon_doses, dt):
    grid = TimeGrid(dt=dt, n_obs=int(round(30 / dt)) + 1,
                    n_horizon=int(round(10 / dt)), n_cycles=5)
    return system.integrate(
        y0, dynamics.expand_dose_schedule(cycle_doses, horizon_doses, grid), grid)


@pytest.mark.parametrize("name", ["cvs", "covid"])
def test_rk4_dt1_matches_fine_reference(name):
    system = make_system(name)
    rng = np.random.default_rng(42)
    y0 = sample_initial_conditions(name, rng)
    doses = np.full(5, 0.5)
    horizon = np.full(10, 0.5)
    coarse = simulate_trajectory(system, y0, doses, horizon).states[-1]
    fine = _reference_states(system, y0, doses, np.full(1000, 0.5), 0.01)[-1]
    rel = np.abs(coarse - fine) / np.maximum(np.abs(fine), 1e-6)
    assert np.all(rel < 1e-3)


@pytest.mark.parametrize("name", ["cvs", "covid"])
def test_rk4_halving_dt_is_fourth_order(name):
    # error vs a dt/100 reference shrinks by >= 8x when dt halves, over [0, 10]
    system = make_system(name)
    rng = np.random.default_rng(24)
    y0 = sample_initial_conditions(name, rng)
    doses = np.full(5, 0.4)

    def final_state(dt, t_end=10.0):
        n = int(round(t_end / dt))
        grid = TimeGrid(dt=dt, n_obs=int(round(30 / dt)) + 1,
                        n_horizon=int(round(10 / dt)), n_cycles=5)
        return system.integrate(y0, np.full(n, 0.4), grid)[-1]

    err = {}
    for dt in (0.5, 0.25):
        ref = final_state(dt / 100)
        err[dt] = np.linalg.norm(final_state(dt) - ref) / np.linalg.norm(ref)
    assert err[0.5] / err[0.25] >= 8.0


def test_simulate_zero_dose_cvs_matches_homogeneous_dynamics():
    system = CvsSystem()
    y0 = np.array([0.95, 0.8, 0.5, 0.2])
    treated = simulate_trajectory(system, y0, np.zeros(5), np.zeros(10))
    grid = TimeGrid()
    manual = system.integrate(y0, np.zeros(40), grid)
    assert np.array_equal(treated.states, manual)
    assert np.array_equal(treated.outcomes[:, 0], manual[:, 2])


def test_simulate_determinism_bit_identical():
    system = CovidSystem()
    y0 = np.array([0.01, 0.02, 0.005, 0.0])
    a = simulate_trajectory(system, y0, np.full(5, 0.3), np.full(10, 0.2))
    b = simulate_trajectory(system, y0, np.full(5, 0.3), np.full(10, 0.2))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.treatments, b.treatments)


@pytest.mark.parametrize("name", ["cvs", "covid"])
def test_counterfactual_prefix_consistency(name):
    # schedules agreeing on [0, t] give identical trajectories on [0, t]
    system = make_system(name)
    rng = np.random.default_rng(9)
    y0 = sample_initial_conditions(name, rng)
    base = np.array([0.2, 0.4, 0.6, 0.3, 0.5])
    alt = base.copy()
    alt[3:] = [0.9, 0.1]  # diverge from cycle 4 (t = 18)
    ta = simulate_trajectory(system, y0, base, np.full(10, 0.5))
    tb = simulate_trajectory(system, y0, alt, np.full(10, 0.5))
    boundary = 3 * 6  # grid index where schedules stop agreeing
    assert np.array_equal(ta.states[:boundary + 1], tb.states[:boundary + 1])
    assert not np.allclose(ta.states[-1], tb.states[-1])


def test_cvs_baroreflex_tone_stays_in_unit_interval():
    system = CvsSystem()
    rng = np.random.default_rng(77)
    for _ in range(25):
        y0 = sample_initial_conditions("cvs", rng)
        doses = rng.uniform(0.0, 1.0, size=5)
        horizon = rng.uniform(0.0, 1.0, size=10)
        result = simulate_trajectory(system, y0, doses, horizon)
        assert np.all(result.states[:, 3] >= 0.0)
        assert np.all(result.states[:, 3] <= 1.0)


def test_covid_states_stay_nonnegative():
    system = CovidSystem()
    rng = np.random.default_rng(78)
    for _ in range(25):
        y0 = sample_initial_conditions("covid", rng)
        doses = rng.uniform(0.0, 1.0, size=5)
        horizon = rng.uniform(0.0, 1.0, size=10)
        result = simulate_trajectory(system, y0, doses, horizon)
        assert np.all(result.states >= 0.0)


def test_cvs_dose_monotonicity_hook():
    # raising the final-cycle dose never lowers the horizon-averaged P_v;
    # violations are counted (flagged), not silently ignored
    system = CvsSystem()
    rng = np.random.default_rng(123)
    violations = 0
    for _ in range(100):
        y0 = sample_initial_conditions("cvs", rng)
        doses = rng.uniform(0.0, 1.0, size=5)
        theta = rng.uniform(0.0, 0.9)
        lo = simulate_trajectory(system, y0, doses, np.full(10, theta))
        hi = simulate_trajectory(system, y0, doses, np.full(10, theta + 0.1))
        if hi.outcomes[31:, 0].mean() < lo.outcomes[31:, 0].mean() - 1e-12:
            violations += 1
    assert violations == 0


def test_expand_dose_schedule_shapes():
    grid = TimeGrid()
    with pytest.raises(ValueError, match="cycle doses"):
        dynamics.expand_dose_schedule(np.zeros(4), np.zeros(10), grid)
    with pytest.raises(ValueError, match="horizon doses"):
        dynamics.expand_dose_schedule(np.zeros(5), np.zeros(9), grid)
    steps = dynamics.expand_dose_schedule(np.arange(5), np.full(10, 7.0), grid)
    assert steps.shape == (40,)
    assert np.array_equal(steps[:30], np.repeat(np.arange(5), 6))


def test_resimulate_horizon_clamps_negative_doses():
    system = CovidSystem()
    rng = np.random.default_rng(5)
    y0 = sample_initial_conditions("covid", rng)
    base = simulate_trajectory(system, y0, np.full(5, 0.3), np.zeros(10))
    state30 = base.states[30]
    neg = dynamics.resimulate_horizon(system, state30, np.full(10, -2.0))
    zero = dynamics.resimulate_horizon(system, state30, np.zeros(10))
    assert np.array_equal(neg, zero)
