"""Tests for planar leg kinematics, stiffness mapping, and the quartic fit."""

import io

import numpy as np
import pytest

from hopkit.legchain import (
    Joint,
    KinematicChain,
    compliance_matrix,
    default_leg_chain,
    fit_stiffness_polynomial,
    foot_jacobian,
    forward_kinematics,
    leg_stiffness,
    load_chain,
    real_leg_length,
    reduce_closed_chain,
    sample_stiffness_curve,
    stance_configuration,
    vertical_leg_stiffness,
    virtual_leg_length,
)


def numeric_jacobian(chain, q, h=1e-6):
    """Central finite differences of the toe forward kinematics."""
    J = np.zeros((2, chain.n))
    for i in range(chain.n):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        _, _, ep = forward_kinematics(chain, qp)
        _, _, em = forward_kinematics(chain, qm)
        J[:, i] = (ep - em) / (2 * h)
    return J


def two_spring_chain(k1=100.0, k2=60.0):
    return KinematicChain(joints=(
        Joint("hip", "motor", (0.0, -0.5)),
        Joint("spring_a", "spring", (0.0, -0.3), stiffness=k1, damping=2.0),
        Joint("spring_b", "spring", (0.0, -0.2), stiffness=k2, damping=1.0),
        Joint("toe", "motor", (0.0, 0.0)),
    ))


class TestJacobian:
    def test_single_link_horizontal_velocity(self):
        chain = KinematicChain(joints=(Joint("j", "spring", (0.0, -1.0), stiffness=1.0),))
        J = foot_jacobian(chain, np.zeros(1))
        np.testing.assert_allclose(np.abs(J[:, 0]), [1.0, 0.0], atol=1e-12)

    def test_full_extension_singular_leg_direction(self):
        chain = KinematicChain(joints=(
            Joint("hip", "motor", (0.0, -0.5)),
            Joint("knee", "spring", (0.0, -0.5), stiffness=1.0),
        ))
        q = np.zeros(2)
        J = foot_jacobian(chain, q)
        leg_dir = np.array([0.0, -1.0])
        np.testing.assert_allclose(leg_dir @ J, 0.0, atol=1e-12)

    def test_matches_finite_differences(self):
        chain = KinematicChain(joints=(
            Joint("a", "motor", (0.1, -0.4)),
            Joint("b", "spring", (0.0, -0.3), stiffness=1.0),
            Joint("c", "passive", (-0.05, -0.2)),
            Joint("d", "motor", (0.02, -0.1)),
        ))
        rng = np.random.default_rng(0)
        for _ in range(10):
            q = rng.uniform(-1.0, 1.0, 4)
            np.testing.assert_allclose(foot_jacobian(chain, q),
                                       numeric_jacobian(chain, q), atol=1e-6)


class TestClosedChainReduction:
    def four_bar(self, q):
        """Two planar 2R chains from the hip meeting at the toe.

        q = [q1a, q1b, q2a, q2b]; chain 2's joints are passive.
        """
        c1 = KinematicChain(joints=(
            Joint("m1", "motor", (0.0, -0.5)),
            Joint("s1", "spring", (0.0, -0.5), stiffness=50.0),
        ))
        c2 = KinematicChain(joints=(
            Joint("p1", "passive", (0.15, -0.45)),
            Joint("p2", "spring", (-0.15, -0.55), stiffness=1.0),
        ))
        return c1, c2

    def test_no_passive_identity(self):
        c1, _ = self.four_bar(np.zeros(4))
        q1 = np.array([0.2, -0.4])
        J1 = foot_jacobian(c1, q1)
        J2 = np.zeros((2, 0))
        JA = reduce_closed_chain(J1, J2, active=np.array([0, 1]), passive=np.array([], dtype=int))
        np.testing.assert_allclose(JA, J1, atol=1e-14)

    def test_loop_closure_velocity_residual(self):
        c1, c2 = self.four_bar(np.zeros(4))
        rng = np.random.default_rng(1)
        for _ in range(10):
            q1 = rng.uniform(-0.5, 0.5, 2)
            q2 = rng.uniform(-0.5, 0.5, 2)
            J1 = foot_jacobian(c1, q1)
            J2 = foot_jacobian(c2, q2)
            # chain-1 joints active, chain-2 joints passive
            active = np.array([0, 1])
            passive = np.array([2, 3])
            E = np.hstack([J1, -J2])
            qdA = rng.standard_normal(2)
            qdP = -np.linalg.solve(E[:, passive], E[:, active] @ qdA)
            res = J1 @ qdA - J2 @ qdP
            assert np.linalg.norm(res) <= 1e-10
            JA = reduce_closed_chain(J1, J2, active, passive)
            np.testing.assert_allclose(JA @ qdA, J1 @ qdA, atol=1e-10)

    def test_singular_passive_raises(self):
        J1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        J2 = np.array([[1.0, 1.0], [0.0, 0.0]])  # passive columns rank 1
        with pytest.raises(ValueError, match="singular|degenerate"):
            reduce_closed_chain(J1, J2, active=np.array([0, 1]), passive=np.array([2, 3]))


class TestLegStiffness:
    def test_single_spring_moment_arm(self):
        # torsion spring k with perpendicular moment arm l: K = k / l^2
        k, ell = 80.0, 0.7
        chain = KinematicChain(joints=(Joint("s", "spring", (0.0, -ell), stiffness=k),))
        K = leg_stiffness(chain, np.zeros(1), direction=np.array([1.0, 0.0]))
        assert abs(K - k / ell**2) < 1e-9

    def test_linear_in_joint_stiffness(self):
        q = np.array([0.1, 0.4, -0.3, 0.0])
        K1 = leg_stiffness(two_spring_chain(100.0, 60.0), q)
        K2 = leg_stiffness(two_spring_chain(200.0, 120.0), q)
        np.testing.assert_allclose(K2, 2.0 * K1, rtol=1e-12)

    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = rng.uniform(-0.8, 0.8, 4)
            K = leg_stiffness(two_spring_chain(), q)
            assert np.abs(K - K.T).max() <= 1e-10 * np.abs(K).max()
            assert np.linalg.eigvalsh(K).min() > 0

    def test_compliance_sum_identity(self):
        rng = np.random.default_rng(3)
        chain = two_spring_chain()
        for _ in range(10):
            q = rng.uniform(-0.8, 0.8, 4)
            K = leg_stiffness(chain, q)
            C = compliance_matrix(chain, q)
            np.testing.assert_allclose(K @ C, np.eye(2), atol=1e-9)

    def test_rank_deficient_full_matrix_raises(self):
        chain = default_leg_chain()  # single spring: compliance is rank 1
        q = stance_configuration(chain, "knee", "hip", 1.2)
        with pytest.raises(ValueError, match="rank deficient"):
            leg_stiffness(chain, q)

    def test_crouched_cassie_like_leg_is_stiffer(self):
        # postures with the toe held forward of the hip: flexing the knee
        # shortens the virtual leg while the spring's vertical moment arm
        # shrinks, so the vertical stiffness rises (paper-like trend)
        chain = default_leg_chain(k_spring=100.0)
        q_a = np.array([0.1, 0.5, 0.0, 0.0])
        q_b = np.array([0.9, -0.7, 0.0, 0.0])
        L_a, L_b = virtual_leg_length(chain, q_a), virtual_leg_length(chain, q_b)
        K_a = vertical_leg_stiffness(chain, q_a)
        K_b = vertical_leg_stiffness(chain, q_b)
        assert L_b < L_a
        assert K_b > K_a

    def test_toe_angle_has_no_effect(self):
        chain = default_leg_chain()
        q = stance_configuration(chain, "knee", "hip", 1.0)
        base = vertical_leg_stiffness(chain, q)
        for toe in np.linspace(-0.8, 0.8, 7):
            q2 = q.copy()
            q2[chain.index("toe")] = toe
            assert abs(vertical_leg_stiffness(chain, q2) - base) <= 0.01 * base


class TestLegLength:
    def test_virtual_equals_real_with_zero_deflection(self):
        chain = default_leg_chain()
        q = np.array([-0.6, 1.2, 0.0, 0.3])
        assert abs(virtual_leg_length(chain, q) - real_leg_length(chain, q)) < 1e-12

    def test_right_angle_knee(self):
        chain = default_leg_chain(thigh=0.5, shin=0.5)
        q = np.array([0.0, np.pi / 2, 0.0, 0.0])
        assert abs(real_leg_length(chain, q) - np.sqrt(0.5)) < 1e-12

    def test_spring_deflection_changes_real_only(self):
        chain = default_leg_chain()
        q = np.array([-0.6, 1.2, 0.0, 0.0])
        L0, Lr0 = virtual_leg_length(chain, q), real_leg_length(chain, q)
        q[chain.index("shin_spring")] = 0.05
        assert abs(virtual_leg_length(chain, q) - L0) < 1e-12
        assert real_leg_length(chain, q) != Lr0


class TestPolynomialFit:
    def test_exact_recovery_in_basis(self):
        beta = np.array([1000.0, -500.0, 200.0, 50.0])
        L = np.linspace(0.5, 0.9, 12)
        K = beta[0] + beta[1] * L + beta[2] * L**2 + beta[3] * L**4
        model = fit_stiffness_polynomial(list(zip(L, K)))
        np.testing.assert_allclose(model.beta, beta, rtol=1e-6)
        assert model.fit_residual < 1e-10

    def test_noise_monte_carlo(self):
        rng = np.random.default_rng(4)
        beta = np.array([8000.0, 2000.0, 1500.0, 900.0])
        L = np.linspace(0.5, 0.9, 25)
        K0 = beta[0] + beta[1] * L + beta[2] * L**2 + beta[3] * L**4
        for _ in range(100):
            K = K0 * (1.0 + 0.01 * rng.standard_normal(L.size))
            model = fit_stiffness_polynomial(list(zip(L, K)))
            assert model.fit_residual <= 0.02

    def test_underdetermined_guard(self):
        L = np.linspace(0.5, 0.9, 4)
        with pytest.raises(ValueError, match="8 samples"):
            fit_stiffness_polynomial(list(zip(L, np.ones(4))))

    def test_nonpositive_stiffness_rejected(self):
        L = np.linspace(0.5, 0.9, 10)
        K = np.ones(10)
        K[3] = -1.0
        with pytest.raises(ValueError, match="positive"):
            fit_stiffness_polynomial(list(zip(L, K)))

    def test_default_chain_pipeline(self):
        chain = default_leg_chain()
        samples = sample_stiffness_curve(chain, "knee", "hip", L_range=(0.5, 0.9))
        model = fit_stiffness_polynomial(samples)
        assert model.fit_residual <= 0.05
        Ls = np.array([s[0] for s in samples])
        Ks = np.array([s[1] for s in samples])
        assert np.all(np.diff(Ks[np.argsort(Ls)]) > 0) or np.all(np.diff(Ks[np.argsort(Ls)]) < 0)
        grid = np.linspace(0.5, 0.9, 50)
        assert np.all(model.stiffness(grid) > 0)


class TestConfig:
    def test_yaml_roundtrip(self):
        text = """
chain:
  base_frame: hip
  end_frame: toe
  joints:
    - {name: hip, class: motor, link: [0.0, -0.5]}
    - {name: knee, class: motor, link: [0.0, 0.0]}
    - {name: shin_spring, class: spring, stiffness: 2300.0, damping: 5.0, link: [0.0, -0.5]}
    - {name: toe, class: motor, link: [0.0, 0.0]}
"""
        chain = load_chain(io.StringIO(text))
        assert chain.n == 4
        assert chain.joints[2].stiffness == 2300.0
        ref = default_leg_chain()
        q = np.array([0.3, 0.8, 0.02, -0.1])
        assert abs(real_leg_length(chain, q) - real_leg_length(ref, q)) < 1e-12

    def test_malformed_raises_value_error(self):
        with pytest.raises(ValueError, match="malformed"):
            load_chain({"chain": {"joints": [{"name": "x"}]}})

    def test_springless_chain_rejected(self):
        with pytest.raises(ValueError, match="spring"):
            KinematicChain(joints=(Joint("a", "motor", (0.0, -1.0)),))
