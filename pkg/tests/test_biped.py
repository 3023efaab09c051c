"""Tests for the planar compliant biped dynamics.

Oracles: an independent forward-kinematics routine (written here, not
imported from the package) feeds finite-difference Jacobians and an
energy-based Lagrangian assembly that the analytic dynamics must match.
"""

import numpy as np
import pytest

from hopkit import biped as bp
from hopkit.legchain import default_leg_chain, virtual_leg_length


def _R(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def fk_bodies(p: bp.BipedParams, q):
    """Independent forward kinematics: (mass, inertia, com, angle) per body."""
    base = np.array([q[0], q[1]])
    It = p.thigh_mass * p.thigh_length**2 / 12.0
    Is = p.shin_mass * p.shin_length**2 / 12.0
    If = p.foot_mass * p.foot_length**2 / 12.0
    out = [(p.pelvis_mass, p.pelvis_inertia, base, q[2])]
    for ih, ik, isp, it in ((3, 4, 5, 6), (7, 8, 9, 10)):
        a1 = q[2] + q[ih]
        a2 = a1 + q[ik] + q[isp]
        a3 = a2 + q[it]
        thigh = base + _R(a1) @ [0.0, -0.5 * p.thigh_length]
        knee = base + _R(a1) @ [0.0, -p.thigh_length]
        shin = knee + _R(a2) @ [0.0, -0.5 * p.shin_length]
        ankle = knee + _R(a2) @ [0.0, -p.shin_length]
        out += [(p.thigh_mass, It, thigh, a1),
                (p.shin_mass, Is, shin, a2),
                (p.foot_mass, If, ankle, a3)]
    return out


def mass_matrix_oracle(model, q, h=1e-6):
    """M from finite-difference body Jacobians of the independent kinematics."""
    p = model.params
    M = np.zeros((11, 11))
    for b in range(7):
        Jv = np.zeros((2, 11))
        Jw = np.zeros(11)
        for j in range(11):
            qp, qm = q.copy(), q.copy()
            qp[j] += h
            qm[j] -= h
            bp_, bm_ = fk_bodies(p, qp)[b], fk_bodies(p, qm)[b]
            Jv[:, j] = (bp_[2] - bm_[2]) / (2 * h)
            Jw[j] = (bp_[3] - bm_[3]) / (2 * h)
        m, I = fk_bodies(p, q)[b][:2]
        M += m * Jv.T @ Jv + I * np.outer(Jw, Jw)
    M[list(bp.MOTOR_IDX), list(bp.MOTOR_IDX)] += p.rotor_inertia
    return M


def potential_oracle(model, q):
    return sum(m * model.params.gravity * com[1]
               for m, _, com, _ in fk_bodies(model.params, q))


def bias_oracle(model, q, qd, h=1e-5):
    """H(q,qd) from the Lagrangian identity Mdot qd - dT/dq + dV/dq."""
    Md = (bp.mass_matrix(model, q + h * qd)
          - bp.mass_matrix(model, q - h * qd)) / (2 * h)
    out = Md @ qd
    for j in range(11):
        qp, qm = q.copy(), q.copy()
        qp[j] += h
        qm[j] -= h
        dT = (qd @ bp.mass_matrix(model, qp) @ qd
              - qd @ bp.mass_matrix(model, qm) @ qd) / (4 * h)
        dV = (potential_oracle(model, qp) - potential_oracle(model, qm)) / (2 * h)
        out[j] += dV - dT
    return out


def random_state(rng, scale_q=0.5, scale_qd=2.0):
    q = np.zeros(11)
    q[0] = rng.uniform(-1, 1)
    q[1] = rng.uniform(0.5, 1.2)
    q[2:] = scale_q * rng.standard_normal(9)
    return bp.RobotState(q, scale_qd * rng.standard_normal(11))


@pytest.fixture(scope="module")
def model():
    return bp.RobotModel()


@pytest.fixture(scope="module")
def standing(model):
    return bp.standing_state(model, 0.8)


class TestStructure:
    def test_mass_matrix_spd_and_symmetric(self, model):
        rng = np.random.default_rng(0)
        for _ in range(100):
            M = bp.mass_matrix(model, random_state(rng).q)
            assert np.abs(M - M.T).max() <= 1e-10
            assert np.linalg.eigvalsh(M).min() > 0

    def test_actuation_matrix_pattern(self, model):
        B = model.B
        assert np.linalg.matrix_rank(B) == 6
        unactuated = [0, 1, 2, 5, 9]  # base and spring joints
        assert np.all(B[unactuated] == 0)
        assert np.all(B.sum(axis=0) == 1)

    def test_param_validation(self):
        with pytest.raises(ValueError, match="positive"):
            bp.BipedParams(thigh_mass=-1.0)
        with pytest.raises(ValueError, match="nonnegative"):
            bp.BipedParams(d_shin=-1.0)


class TestLagrangianOracles:
    def test_mass_matrix_matches_fd_kinematics(self, model):
        rng = np.random.default_rng(1)
        for _ in range(10):
            q = random_state(rng).q
            np.testing.assert_allclose(bp.mass_matrix(model, q),
                                       mass_matrix_oracle(model, q),
                                       rtol=1e-6, atol=1e-6)

    def test_bias_matches_lagrangian_identity(self, model):
        rng = np.random.default_rng(2)
        for _ in range(10):
            st = random_state(rng)
            _, H, _, _ = bp.dynamics_terms(model, st)
            np.testing.assert_allclose(H, bias_oracle(model, st.q, st.qd),
                                       rtol=1e-6, atol=1e-6)

    def test_rest_bias_is_gravity_only(self, model):
        rng = np.random.default_rng(3)
        st = random_state(rng)
        st.qd[:] = 0.0
        _, H, _, _ = bp.dynamics_terms(model, st)
        np.testing.assert_allclose(H, bp.gravity_vector(model, st.q),
                                   atol=1e-10)

    def test_mdot_minus_2c_skew(self, model):
        rng = np.random.default_rng(4)
        h = 1e-6
        for _ in range(10):
            st = random_state(rng)
            C = bp.coriolis_matrix(model, st)
            Md = (bp.mass_matrix(model, st.q + h * st.qd)
                  - bp.mass_matrix(model, st.q - h * st.qd)) / (2 * h)
            S = Md - 2 * C
            assert abs(st.qd @ S @ st.qd) <= 1e-8 * (1 + st.qd @ st.qd)


class TestConstrainedDynamics:
    def test_static_equilibrium(self, model, standing):
        qdd, F_h = bp.constrained_forward_dynamics(
            model, standing.state, standing.u, "both_feet_flat")
        assert np.abs(qdd).max() <= 1e-9
        W = model.total_mass * model.params.gravity
        assert abs(F_h[1] + F_h[4] - W) <= 1e-9
        assert abs(F_h[1] - F_h[4]) <= 1e-9   # symmetric split

    def test_airborne_free_fall(self, model):
        rng = np.random.default_rng(5)
        st = random_state(rng)
        qdd, F_h = bp.constrained_forward_dynamics(model, st, np.zeros(6),
                                                   "airborne")
        assert F_h.size == 0
        _, _, J, Jd_qd = bp.com_terms(model, st)
        acc = J @ qdd + Jd_qd
        np.testing.assert_allclose(acc, [0.0, -model.params.gravity],
                                   atol=1e-9)
        H, A, Ad_qd = bp.pitch_momentum_terms(model, st)
        assert abs(A @ qdd + Ad_qd) <= 1e-9 * (1 + abs(H))

    def test_matches_independent_kkt_assembly(self, model, standing):
        rng = np.random.default_rng(6)
        st = standing.state
        for _ in range(5):
            u = rng.uniform(-50, 50, 6)
            qdd, F_h = bp.constrained_forward_dynamics(model, st, u,
                                                       "both_feet_flat")
            M = mass_matrix_oracle(model, st.q)
            H = bias_oracle(model, st.q, st.qd)
            _, J, Jd_qd = bp.holonomic_constraints(model, st, "both_feet_flat")
            tau_s = bp.spring_torques(model, st)
            KKT = np.block([[M, -J.T], [J, np.zeros((6, 6))]])
            rhs = np.concatenate([model.B @ u + model.J_s.T @ tau_s - H,
                                  -Jd_qd])
            ref = np.linalg.solve(KKT, rhs)
            np.testing.assert_allclose(qdd, ref[:11], rtol=1e-5, atol=1e-5)
            np.testing.assert_allclose(F_h, ref[11:], rtol=1e-5, atol=1e-4)

    def test_constraint_acceleration_residual(self, model, standing):
        rng = np.random.default_rng(7)
        st = bp.RobotState(standing.state.q,
                           np.zeros(11))
        u = rng.uniform(-20, 20, 6)
        qdd, _ = bp.constrained_forward_dynamics(model, st, u, "both_feet_flat")
        _, J, Jd_qd = bp.holonomic_constraints(model, st, "both_feet_flat")
        assert np.abs(J @ qdd + Jd_qd).max() <= 1e-9


class TestImpact:
    def test_consistent_velocity_is_fixed_point(self, model, standing):
        qd_post = bp.impact_map(model, standing.state)
        np.testing.assert_allclose(qd_post, standing.state.qd, atol=1e-12)

    def test_kinetic_energy_never_increases(self, model, standing):
        rng = np.random.default_rng(8)
        q = standing.state.q
        M = bp.mass_matrix(model, q)
        for _ in range(100):
            qd = rng.standard_normal(11)
            qd_post = bp.impact_map(model, bp.RobotState(q, qd))
            ke_pre = 0.5 * qd @ M @ qd
            ke_post = 0.5 * qd_post @ M @ qd_post
            assert ke_post <= ke_pre + 1e-10
            _, J, _ = bp.holonomic_constraints(model, bp.RobotState(q, qd_post),
                                               "both_feet_flat")
            assert np.abs(J @ qd_post).max() <= 1e-9

    def test_energy_equality_only_for_consistent_velocity(self, model, standing):
        rng = np.random.default_rng(9)
        q = standing.state.q
        M = bp.mass_matrix(model, q)
        qd = rng.standard_normal(11)
        qd_post = bp.impact_map(model, bp.RobotState(q, qd))
        assert 0.5 * qd_post @ M @ qd_post < 0.5 * qd @ M @ qd - 1e-6

    def test_falling_flat_stops_contact_points(self, model, standing):
        qd = np.zeros(11)
        qd[1] = -1.5
        qd_post = bp.impact_map(model, bp.RobotState(standing.state.q, qd))
        st_post = bp.RobotState(standing.state.q, qd_post)
        for leg in ("L", "R"):
            _, v, _, adot = bp.foot_point(model, st_post, leg)
            assert np.abs(v).max() <= 1e-10
            assert abs(adot) <= 1e-10


class TestCentroidal:
    def test_linear_momentum_identity(self, model):
        rng = np.random.default_rng(10)
        for _ in range(10):
            st = random_state(rng)
            H_G, A_G = bp.centroidal_momentum(model, st)
            v_com = bp.com_velocity(model, st)
            np.testing.assert_allclose(H_G[:2], model.total_mass * v_com,
                                       atol=1e-10)
            np.testing.assert_allclose(A_G @ st.qd, H_G, atol=1e-10)

    def test_single_body_spin(self):
        # pelvis-dominated model spinning about the base = its own COM
        p = bp.BipedParams(thigh_mass=1e-9, shin_mass=1e-9, foot_mass=1e-9,
                           rotor_inertia=1e-12)
        m = bp.RobotModel(p)
        qd = np.zeros(11)
        qd[2] = 1.7
        st = bp.RobotState(np.zeros(11) + 0.1, qd)
        H, _, _ = bp.pitch_momentum_terms(m, st)
        assert abs(H - p.pelvis_inertia * 1.7) <= 1e-6

    def test_flight_conservation(self, model, standing):
        st = standing.state.copy()
        st.qd[1], st.qd[2], st.qd[4] = 1.5, 0.3, -1.0
        H0 = bp.pitch_momentum_terms(model, st)[0]
        for _ in range(400):
            st = bp.integrate_step(model, st, np.zeros(6), 5e-4, "airborne")
        H1 = bp.pitch_momentum_terms(model, st)[0]
        assert abs(H1 - H0) <= 1e-6 * max(1.0, abs(H0))

    def test_pitch_momentum_rate_identity(self, model):
        # Hdot = A qdd + Adot qd along arbitrary accelerations: step audit
        rng = np.random.default_rng(11)
        st = random_state(rng)
        u = rng.uniform(-30, 30, 6)
        qdd, _ = bp.constrained_forward_dynamics(model, st, u, "airborne")
        _, A, Ad_qd = bp.pitch_momentum_terms(model, st)
        h = 1e-6
        st_p = bp.RobotState(st.q + h * st.qd + 0.5 * h * h * qdd,
                             st.qd + h * qdd)
        st_m = bp.RobotState(st.q - h * st.qd + 0.5 * h * h * qdd,
                             st.qd - h * qdd)
        Hdot_fd = (bp.pitch_momentum_terms(model, st_p)[0]
                   - bp.pitch_momentum_terms(model, st_m)[0]) / (2 * h)
        scale = 1.0 + np.abs(A * qdd).sum() + abs(Ad_qd)
        assert abs(A @ qdd + Ad_qd - Hdot_fd) <= 1e-6 * scale


class TestOutputsAndEnergy:
    def test_virtual_leg_matches_identification_chain(self, model):
        rng = np.random.default_rng(12)
        chain = default_leg_chain()
        for _ in range(10):
            st = random_state(rng)
            for leg, idx in bp.LEG_IDX.items():
                L, _, _ = bp.virtual_leg(model, st, leg)
                assert abs(L - virtual_leg_length(chain, st.q[list(idx)])) <= 1e-12

    def test_leg_length_rate_matches_finite_difference(self, model, standing):
        st = standing.state.copy()
        st.qd[:] = 0.3 * np.arange(11) / 11.0
        st.qd[list(bp.SPRING_IDX)] = 0.0   # reduced rate excludes the spring
        h = 1e-6
        for leg in ("L", "R"):
            L, Ld, _ = bp.virtual_leg(model, st, leg)
            Lp = bp.virtual_leg(model, bp.RobotState(st.q + h * st.qd, st.qd), leg)[0]
            Lm = bp.virtual_leg(model, bp.RobotState(st.q - h * st.qd, st.qd), leg)[0]
            assert abs(Ld - (Lp - Lm) / (2 * h)) <= 1e-5

    def test_com_symmetric_and_matches_oracle(self, model, standing):
        # sagittal mirror of the pose mirrors the COM; the standing COM
        # itself sits slightly behind the hip (knee bend) but inside the foot
        st = standing.state
        p_com = bp.com_position(model, st)
        mirrored = bp.RobotState(np.concatenate([[-st.q[0]], st.q[1:2],
                                                 -st.q[2:]]), np.zeros(11))
        p_mir = bp.com_position(model, mirrored)
        assert abs(p_com[0] + p_mir[0]) <= 1e-12
        assert abs(p_com[1] - p_mir[1]) <= 1e-12
        half_foot = 0.5 * model.params.foot_length
        ankle_x = bp.foot_point(model, st, "L")[0][0]
        assert abs(p_com[0] - ankle_x) < half_foot   # statically supportable
        bodies = fk_bodies(model.params, standing.state.q)
        ref = sum(m * com for m, _, com, _ in bodies) / model.total_mass
        np.testing.assert_allclose(p_com, ref, atol=1e-12)

    def test_energy_conservation_unactuated_springless(self, standing):
        m = bp.RobotModel(bp.BipedParams(k_shin=1e-12, d_shin=0.0))
        st = standing.state.copy()
        st.qd[1], st.qd[2], st.qd[3] = 1.0, 0.4, -0.8
        E0 = bp.total_energy(m, st)
        for _ in range(2000):
            st = bp.integrate_step(m, st, np.zeros(6), 5e-4, "airborne")
        assert abs(bp.total_energy(m, st) - E0) <= 1e-6 * abs(E0)

    def test_work_energy_theorem_in_stance(self, model, standing):
        dt = 5e-4
        st = standing.state.copy()
        E0 = bp.total_energy(model, st)
        work = 0.0
        peak = 1.0
        for k in range(600):
            u = standing.u + 8.0 * np.sin(2 * np.pi * 3.0 * k * dt) * \
                np.array([1.0, -1.0, 0.3, 1.0, -1.0, 0.3])
            qdm0 = st.qd[list(bp.MOTOR_IDX)]
            qds0 = st.qd[list(bp.SPRING_IDX)]
            st = bp.integrate_step(model, st, u, dt, "both_feet_flat")
            qdm1 = st.qd[list(bp.MOTOR_IDX)]
            qds1 = st.qd[list(bp.SPRING_IDX)]
            # zero-order-hold torque: per-step trapezoid of motor power
            # minus spring damping dissipation
            work += dt * float(u @ (qdm0 + qdm1)) / 2.0
            work -= dt * model.params.d_shin * float(qds0 @ qds0
                                                     + qds1 @ qds1) / 2.0
            peak = max(peak, abs(float(u @ qdm1)))
        dE = bp.total_energy(model, st) - E0
        assert abs(dE - work) <= 1e-4 * peak * 600 * dt

    def test_holonomic_drift_bounded(self, model, standing):
        st = standing.state.copy()
        c0, _, _ = bp.holonomic_constraints(model, st, "both_feet_flat")
        for k in range(2000):
            u = standing.u + 5.0 * np.sin(12.0 * k * 5e-4) * np.ones(6)
            st = bp.integrate_step(model, st, u, 5e-4, "both_feet_flat")
        c1, J, _ = bp.holonomic_constraints(model, st, "both_feet_flat")
        assert np.abs(c1 - c0).max() <= 1e-6
        assert np.abs(J @ st.qd).max() <= 1e-10   # velocity projection


class TestStanding:
    def test_requested_leg_length_and_ground_contact(self, model, standing):
        st = standing.state
        LL, LR, LdL, LdR = bp.leg_length_outputs(model, st)
        assert abs(LL - 0.8) <= 1e-9 and abs(LR - 0.8) <= 1e-9
        assert LdL == LdR == 0.0
        for leg in ("L", "R"):
            p_a, _, ang, _ = bp.foot_point(model, st, leg)
            assert abs(p_a[1]) <= 1e-9 and abs(ang) <= 1e-9
            assert abs(p_a[0] - st.q[0]) <= 1e-9   # ankle below the hip

    def test_grf_static_split(self, model, standing):
        F = bp.ground_reaction_force(model, standing.state, standing.u)
        W = model.total_mass * model.params.gravity
        np.testing.assert_allclose(F[:, 1], W / 2.0, atol=1e-8)
        np.testing.assert_allclose(F[:, 0], 0.0, atol=1e-8)

    def test_newton_audit_along_trajectory(self, model, standing):
        st = standing.state.copy()
        for k in range(50):
            u = standing.u + 20.0 * np.sin(10.0 * k * 5e-4) * np.ones(6)
            F = bp.ground_reaction_force(model, st, u)
            qdd, _ = bp.constrained_forward_dynamics(model, st, u,
                                                     "both_feet_flat")
            _, _, J, Jd_qd = bp.com_terms(model, st)
            acc = J @ qdd + Jd_qd
            res = F[:, 1].sum() - model.total_mass * (model.params.gravity
                                                      + acc[1])
            assert abs(res) <= 1e-6
            st = bp.integrate_step(model, st, u, 5e-4, "both_feet_flat")

    def test_out_of_range_length_rejected(self, model):
        with pytest.raises(ValueError, match="range"):
            bp.standing_state(model, 1.5)
