"""Tests for the actuated spring-mass model."""

import numpy as np
import pytest

from hopkit.legchain import LegStiffnessModel
from hopkit.slip import (
    SlipParams,
    SlipState,
    apex_height,
    flight_dynamics,
    liftoff_event,
    simulate_flight,
    simulate_stance,
    spring_force,
    stance_dynamics,
    touchdown_event,
)


def constant_model(K=20000.0, D=100.0, L_range=(0.4, 1.0)):
    return LegStiffnessModel(beta=np.array([K, 0.0, 0.0, 0.0]),
                             beta_d=np.array([D, 0.0, 0.0, 0.0]),
                             L_range=L_range, fit_residual=0.0)


def make_params(K=20000.0, D=100.0, m=32.0):
    return SlipParams(mass=m, gravity=9.81, stiffness_model=constant_model(K, D))


def stance_state(params, L=0.8, s=None, s_dot=0.0, x_dot=None):
    if s is None:  # static support deflection
        K = float(params.stiffness_model.stiffness(L))
        s = params.mass * params.gravity / K
    x = L - s
    x_dot = -s_dot if x_dot is None else x_dot
    return SlipState(x=x, x_dot=x_dot, s=s, s_dot=s_dot, L=L, L_dot=x_dot + s_dot)


class TestSpringForce:
    def test_undeflected(self):
        p = make_params()
        st = stance_state(p, s=0.0)
        assert spring_force(p, st) == 0.0

    def test_static_support(self):
        p = make_params()
        st = stance_state(p)
        assert abs(spring_force(p, st) - p.mass * p.gravity) < 1e-9

    def test_direct_evaluation(self):
        # K = 20000, D = 100, s = 0.02, s_dot = -0.1 -> 400 - 10 = 390 N
        p = make_params(K=20000.0, D=100.0)
        st = SlipState(x=0.78, x_dot=0.1, s=0.02, s_dot=-0.1, L=0.8, L_dot=0.0)
        assert abs(spring_force(p, st) - 390.0) < 1e-9

    def test_out_of_range_leg_length(self):
        p = make_params()
        st = SlipState(x=1.2, x_dot=0.0, s=0.0, s_dot=0.0, L=1.2, L_dot=0.0)
        with pytest.raises(ValueError, match="range"):
            spring_force(p, st)


class TestStanceDynamics:
    def test_equilibrium_fixed_point(self):
        p = make_params()
        st = stance_state(p)
        np.testing.assert_allclose(stance_dynamics(p, st, 0.0), 0.0, atol=1e-10)

    def test_free_fall_under_constraint(self):
        p = make_params()
        st = stance_state(p, s=0.0)
        d = stance_dynamics(p, st, 0.0)
        assert abs(d[1] + p.gravity) < 1e-12   # x_dd = -g
        assert abs(d[3] - p.gravity) < 1e-12   # s_dd = +g

    def test_constraint_drift_under_sinusoidal_actuation(self):
        p = make_params()
        st = stance_state(p)
        u = lambda t: 2.0 * np.sin(2 * np.pi * 5.0 * t)
        for dt in (5e-4, 2.5e-4):  # halved-step oracle
            tr = simulate_stance(p, st, u, 0.3, dt=dt)
            drift = np.abs(tr.y[:, 2] + tr.y[:, 0] - tr.y[:, 4])
            assert drift.max() <= 1e-7

    def test_energy_conservation_constant_stiffness(self):
        # L_dd = 0, D = 0, constant K: E = m v^2/2 + m g x + K s^2/2 conserved
        p = make_params(K=2000.0, D=0.0, m=20.0)
        st = stance_state(p, s=0.15)
        tr = simulate_stance(p, st, lambda t: 0.0, 1.0, dt=5e-4)
        x, xd, s = tr.y[:, 0], tr.y[:, 1], tr.y[:, 2]
        E = 0.5 * p.mass * xd**2 + p.mass * p.gravity * x + 0.5 * 2000.0 * s**2
        assert np.abs(E - E[0]).max() <= 1e-6 * abs(E[0])

    def test_power_balance_bookkeeping(self):
        p = make_params()
        st = stance_state(p, s=0.05, s_dot=0.2)
        tr = simulate_stance(p, st, lambda t: 3.0 * np.cos(10.0 * t), 0.3, dt=5e-4)
        x, xd = tr.y[:, 0], tr.y[:, 1]
        E = 0.5 * p.mass * xd**2 + p.mass * p.gravity * x
        dE = np.gradient(E, tr.t)
        power = tr.F_s * xd
        scale = np.abs(power).max()
        # endpoints of np.gradient are one-sided; check the interior
        assert np.abs(dE - power)[2:-2].max() <= 1e-4 * scale


class TestFlight:
    def make_flight(self, x0=0.9, v0=1.868):
        p = make_params()
        return p, SlipState(x=x0, x_dot=v0, s=0.0, s_dot=0.0, L=0.8, L_dot=0.0, phase="flight")

    def test_apex_gain_seven_inches(self):
        p, st = self.make_flight(v0=1.868)
        assert abs(apex_height(p, st) - st.x - 0.178) < 1e-3

    def test_zero_velocity_apex_is_initial(self):
        p, st = self.make_flight(v0=0.0)
        assert apex_height(p, st) == st.x

    def test_symmetric_parabola_return_time(self):
        p, st = self.make_flight(x0=2.0, v0=1.5)
        tr = simulate_flight(p, st, 2.0, stop_on_touchdown=False)
        i = np.argmin(np.abs(tr.t - 2 * 1.5 / p.gravity))
        assert abs(tr.y[i, 0] - st.x) < 1e-3

    def test_flight_dynamics_fields(self):
        p, st = self.make_flight()
        d = flight_dynamics(p, st)
        assert d[1] == -p.gravity
        assert d[2] == d[3] == 0.0


class TestEvents:
    def test_static_stance_liftoff_positive(self):
        p = make_params()
        assert liftoff_event(p, stance_state(p)) > 0

    def test_touchdown_crossing(self):
        p = make_params()
        st = SlipState(x=1.5, x_dot=0.0, s=0.0, s_dot=0.0, L=0.8, L_dot=0.0, phase="flight")
        tr = simulate_flight(p, st, 2.0, stop_on_touchdown=True)
        final = SlipState.from_array(tr.y[-1], "flight")
        assert abs(touchdown_event(p, final)) < 1e-6
        assert final.x_dot < 0

    def test_liftoff_localization(self):
        # push off with strong extension; spring force crosses zero
        p = SlipParams(mass=32.0, gravity=9.81,
                       stiffness_model=constant_model(20000.0, 50.0, L_range=(0.4, 5.0)))
        st = stance_state(p)
        push = lambda t: 40.0 if t < 0.15 else -40.0  # extend, then brake
        tr = simulate_stance(p, st, push, 1.0, event=liftoff_event)
        assert tr.t[-1] < 1.0
        final = SlipState.from_array(tr.y[-1], "stance")
        assert abs(spring_force(p, final)) < 1.0
        # halved step shifts the event by < 1e-4 s
        tr2 = simulate_stance(p, st, push, 1.0, dt=2.5e-4, event=liftoff_event)
        assert abs(tr2.t[-1] - tr.t[-1]) < 1e-4


class TestCsvExport:
    def test_columns_and_determinism(self, tmp_path):
        p = make_params()
        st = stance_state(p)
        tr = simulate_stance(p, st, lambda t: np.sin(t), 0.05)
        f1, f2 = tmp_path / "a.csv", tmp_path / "b.csv"
        tr.to_csv(f1)
        tr.to_csv(f2)
        assert f1.read_bytes() == f2.read_bytes()
        header = f1.read_text().splitlines()[0]
        assert header == "t,x,x_dot,s,s_dot,L,L_dot,L_ddot,F_s,phase"
