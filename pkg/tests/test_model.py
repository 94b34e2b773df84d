"""Core model: feedback term, pulses, and the two integrators."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glucopi.analysis import equilibrium
from glucopi.model import (
    InputPulse,
    ModelParams,
    ModelState,
    constant_external_input,
    feedback_concentration,
    input_f,
    simulate_integral,
    simulate_planar,
)
from conftest import table1_draw


class TestFeedbackConcentration:
    def test_at_set_point_both_branches_agree(self):
        assert feedback_concentration(0.0, 5.0) == 5.0

    def test_positive_deviation_adds_to_set_point(self):
        assert feedback_concentration(2.0, 5.0) == 7.0

    def test_negative_deviation_saturates_at_set_point(self):
        assert feedback_concentration(-2.0, 5.0) == 5.0
        assert feedback_concentration(-4.9, 5.0) == 5.0

    def test_domain_violation(self):
        with pytest.raises(ValueError):
            feedback_concentration(-5.0, 5.0)
        with pytest.raises(ValueError):
            feedback_concentration(-5.1, 5.0)

    @given(e=st.floats(-4.999, 50.0), e_bar=st.floats(0.1, 10.0))
    def test_never_below_set_point(self, e, e_bar):
        if e <= -e_bar:
            return
        assert feedback_concentration(e, e_bar) >= e_bar

    def test_continuous_at_zero(self):
        eps = 1e-9
        lo = feedback_concentration(-eps, 5.0)
        hi = feedback_concentration(eps, 5.0)
        assert abs(hi - lo) < 1e-8


class TestInputPulse:
    def test_peak_value_at_center(self):
        pulse = InputPulse(amplitude=0.1, center=60.0, width=20.0)
        assert input_f(pulse, 60.0) == pytest.approx(0.1)

    def test_one_sigma_points(self):
        pulse = InputPulse(amplitude=0.1, center=60.0, width=20.0)
        expected = 0.1 * math.exp(-0.5)
        assert input_f(pulse, 80.0) == pytest.approx(expected, abs=1e-12)
        assert input_f(pulse, 40.0) == pytest.approx(expected, abs=1e-12)

    def test_negative_amplitude_pulse(self):
        pulse = InputPulse(amplitude=-0.05, center=30.0, width=10.0)
        assert input_f(pulse, 30.0) == pytest.approx(-0.05)

    def test_width_must_be_positive(self):
        with pytest.raises(ValueError):
            InputPulse(amplitude=0.1, center=0.0, width=0.0)


class TestModelParams:
    def test_rejects_negative_gains(self):
        with pytest.raises(ValueError):
            ModelParams(a1=-0.01, a2=0.01, lam=0.03, e_bar=5.0)

    def test_rejects_absent_control(self):
        with pytest.raises(ValueError):
            ModelParams(a1=0.0, a2=0.0, lam=0.03, e_bar=5.0)

    def test_rejects_nonpositive_lambda_and_ebar(self):
        with pytest.raises(ValueError):
            ModelParams(a1=0.01, a2=0.01, lam=0.0, e_bar=5.0)
        with pytest.raises(ValueError):
            ModelParams(a1=0.01, a2=0.01, lam=0.03, e_bar=0.0)

    def test_warns_outside_expected_ranges(self):
        with pytest.warns(UserWarning):
            ModelParams(a1=0.2, a2=0.01, lam=0.03, e_bar=5.0)

    def test_midpoint_values(self):
        p = ModelParams.table1_midpoint()
        assert p.a1 == pytest.approx(0.01637)
        assert p.a2 == pytest.approx(0.023135)
        assert p.lam == pytest.approx(0.04119)
        assert p.e_bar == pytest.approx(4.95)
        assert p.a3 == 0.0003


class TestSimulatePlanar:
    def test_zero_net_input_zero_state_is_fixed(self):
        p = ModelParams(a1=0.0073, a2=0.0033, lam=0.0289, e_bar=5.0, a3=0.0)
        traj = simulate_planar(p, 0.0, t_end=100.0, dt=0.1)
        assert np.all(traj.e == 0.0)
        assert np.all(traj.u == 0.0)

    def test_constant_input_converges_to_equilibrium(self):
        # a1 + a2 = 0.01, ebar = 5, g = 0.05: the balance point solves
        # 0.01 * e * (e + 5) = 0.05, root (-0.05 + sqrt(0.0045)) / 0.02
        p = ModelParams(a1=0.007, a2=0.003, lam=0.03, e_bar=5.0)
        e_star = (-0.05 + math.sqrt(0.0045)) / 0.02
        traj = simulate_planar(p, constant_external_input(p, 0.05),
                               t_end=3000.0, dt=0.1)
        assert abs(traj.e[-1] - e_star) < 1e-4
        assert e_star == pytest.approx(0.8541, abs=1e-4)

    def test_escape_is_truncated_and_flagged(self):
        p = ModelParams(a1=0.01, a2=0.01, lam=0.03, e_bar=4.0)
        # heavy constant drain forces e through -e_bar
        traj = simulate_planar(p, -0.5, t_end=600.0, dt=0.1)
        assert traj.escaped
        assert traj.e[-1] <= -p.e_bar
        assert len(traj) < 6001

    def test_rejects_bad_arguments(self):
        p = ModelParams.table1_midpoint()
        with pytest.raises(ValueError):
            simulate_planar(p, 0.0, t_end=100.0, dt=0.0)
        with pytest.raises(ValueError):
            simulate_planar(p, 0.0, ModelState(u=0.0, e=-5.0), t_end=10.0)

    def test_trajectory_csv_header(self):
        p = ModelParams.table1_midpoint()
        traj = simulate_planar(p, 0.0, t_end=1.0, dt=0.5)
        text = traj.to_csv_string()
        assert text.splitlines()[0] == "t_min,e_mmol_per_l,u,glucose_mmol_per_l"
        row = text.splitlines()[1].split(",")
        assert float(row[3]) == pytest.approx(float(row[1]) + p.e_bar)


class TestSimulateIntegral:
    def test_zero_everything_is_fixed(self):
        p = ModelParams(a1=0.0073, a2=0.0033, lam=0.0289, e_bar=5.0, a3=0.0)
        traj = simulate_integral(p, 0.0, initial_e=0.0, t_end=100.0, dt=0.1)
        assert np.all(traj.e == 0.0)

    def test_constant_history_control_value(self):
        # with e(tau) = c for all past time the kernel integrates to one,
        # so u(t0) = (a1 + a2) * c
        p = ModelParams(a1=0.0073, a2=0.0033, lam=0.0289, e_bar=5.0)
        c = 1.3
        traj = simulate_integral(p, constant_external_input(p, 0.0),
                                 initial_e=c, t_end=1.0, dt=0.1)
        assert traj.u[0] == pytest.approx((p.a1 + p.a2) * c, rel=1e-9)

    def test_matches_planar_formulation(self, rng):
        # same equations, different discretization: O(dt) agreement
        for _ in range(5):
            p = table1_draw(rng)
            pulse = InputPulse(amplitude=float(rng.uniform(0.02, 0.2)),
                               center=float(rng.uniform(60, 200)),
                               width=float(rng.uniform(10, 40)))
            planar = simulate_planar(p, pulse, t_end=600.0, dt=0.1)
            integral = simulate_integral(p, pulse, initial_e=0.0,
                                         history=0.0, t_end=600.0, dt=0.1)
            assert np.max(np.abs(planar.e - integral.e)) < 0.01

    def test_matching_nonzero_history(self):
        # constant history c gives the planar system initial control
        # u0 = a1*e0 + a2*c
        p = ModelParams(a1=0.01, a2=0.02, lam=0.04, e_bar=5.0)
        c = 0.8
        integral = simulate_integral(p, 0.0, initial_e=c, t_end=400.0, dt=0.05)
        planar = simulate_planar(p, 0.0,
                                 ModelState(u=p.a1 * c + p.a2 * c, e=c),
                                 t_end=400.0, dt=0.05)
        assert np.max(np.abs(planar.e - integral.e)) < 0.01

    def test_explicit_history_array(self):
        # a supplied ramp history must shift u(t0) relative to a flat one
        p = ModelParams(a1=0.01, a2=0.02, lam=0.04, e_bar=5.0)
        flat = simulate_integral(p, 0.0, 0.0, history=None, t_end=10.0, dt=0.1)
        ramp = simulate_integral(p, 0.0, 0.0,
                                 history=np.linspace(2.0, 0.0, 200),
                                 t_end=10.0, dt=0.1)
        assert ramp.u[0] > flat.u[0]

    def test_euler_convergence_order(self):
        p = ModelParams(a1=0.0073, a2=0.0033, lam=0.0289, e_bar=5.0)
        pulse = InputPulse(0.1, 60.0, 20.0)

        def run(dt):
            return simulate_planar(p, pulse, t_end=300.0, dt=dt)

        ref = run(0.001).e[::100]
        err1 = np.max(np.abs(run(0.1).e - ref))
        err2 = np.max(np.abs(run(0.05).e[::2] - ref))
        assert err1 / err2 == pytest.approx(2.0, abs=0.2)

    def test_long_run_fixed_point_no_drift(self):
        p = ModelParams(a1=0.0073, a2=0.0033, lam=0.0289, e_bar=5.0, a3=0.0)
        n_steps = 1_000_000
        traj = simulate_planar(p, 0.0, t_end=n_steps * 0.1, dt=0.1)
        assert np.all(traj.e == 0.0) and np.all(traj.u == 0.0)


class TestFormulationEquivalenceSweep:
    def test_twenty_random_draws(self, rng):
        worst = 0.0
        for _ in range(20):
            p = table1_draw(rng)
            pulse = InputPulse(amplitude=float(rng.uniform(0.02, 0.2)),
                               center=float(rng.uniform(60, 200)),
                               width=float(rng.uniform(10, 40)))
            planar = simulate_planar(p, pulse, t_end=600.0, dt=0.1)
            integral = simulate_integral(p, pulse, initial_e=0.0,
                                         history=0.0, t_end=600.0, dt=0.1)
            worst = max(worst, float(np.max(np.abs(planar.e - integral.e))))
        assert worst < 0.01
