"""Planar compliant biped: floating-base dynamics with holonomic contact.

The robot is an 11-DOF sagittal model: a floating base (x, z, pitch) and,
per leg, hip and knee motors, a lumped shin torsion spring, and a toe motor.
Leg geometry matches the identification chain in :mod:`hopkit.legchain`
(thigh and shin links, knee and spring joints coincident at the knee, toe
joint at the ankle), so a stiffness model fitted on that chain describes
this robot's legs.

Dynamics are assembled from per-body planar point Jacobians:

    M(q)    = sum_i m_i Jv_i' Jv_i + I_i Jw_i' Jw_i
    C(q,qd) = sum_i m_i Jv_i' Jvdot_i          (Jw_i is constant in-plane)
    H(q,qd) = C qd + G(q)

which satisfies the Euler-Lagrange equations exactly (d'Alembert form) and
makes Mdot - 2C skew-symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import root

N_Q = 11
BASE_IDX = (0, 1, 2)                 # x, z, pitch
LEG_IDX = {"L": (3, 4, 5, 6), "R": (7, 8, 9, 10)}   # hip, knee, shin spring, toe
SPRING_IDX = (5, 9)
MOTOR_IDX = (3, 4, 6, 7, 8, 10)      # actuated joints, column order of B
CONTACT_MODES = ("both_feet_flat", "airborne")


@dataclass(frozen=True)
class BipedParams:
    """Inertial, geometric, spring, and actuation parameters."""

    pelvis_mass: float = 20.0
    thigh_mass: float = 1.0
    shin_mass: float = 0.5
    foot_mass: float = 0.2
    thigh_length: float = 0.5
    shin_length: float = 0.5
    foot_length: float = 0.14
    pelvis_inertia: float = 0.5
    k_shin: float = 2300.0
    d_shin: float = 5.0
    # reflected (geared) rotor inertia at each motor coordinate; also keeps
    # M(q) positive definite with the knee motor and shin spring coincident
    rotor_inertia: float = 0.05
    gravity: float = 9.81
    mu_f: float = 0.8
    hip_torque_max: float = 300.0
    knee_torque_max: float = 300.0
    toe_torque_max: float = 100.0

    def __post_init__(self):
        for name in ("pelvis_mass", "thigh_mass", "shin_mass", "foot_mass",
                     "thigh_length", "shin_length", "foot_length",
                     "pelvis_inertia", "k_shin", "gravity", "rotor_inertia"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_shin < 0:
            raise ValueError("d_shin must be nonnegative")


@dataclass
class RobotState:
    q: np.ndarray       # (11,)
    qd: np.ndarray      # (11,)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.q.shape != (N_Q,) or self.qd.shape != (N_Q,):
            raise ValueError(f"state must have {N_Q} coordinates")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))):
            raise ValueError("state must be finite")

    def copy(self) -> "RobotState":
        return RobotState(self.q.copy(), self.qd.copy())


class RobotModel:
    """Immutable model container; all dynamics evaluations are pure."""

    def __init__(self, params: BipedParams | None = None):
        self.params = params or BipedParams()
        p = self.params
        self.total_mass = (p.pelvis_mass + 2.0 * (p.thigh_mass + p.shin_mass
                                                  + p.foot_mass))
        self.thigh_inertia = p.thigh_mass * p.thigh_length**2 / 12.0
        self.shin_inertia = p.shin_mass * p.shin_length**2 / 12.0
        self.foot_inertia = p.foot_mass * p.foot_length**2 / 12.0
        B = np.zeros((N_Q, len(MOTOR_IDX)))
        for col, row in enumerate(MOTOR_IDX):
            B[row, col] = 1.0
        self.B = B
        lim = [p.hip_torque_max, p.knee_torque_max, p.toe_torque_max]
        self.u_ub = np.array(lim + lim, dtype=float)
        self.u_lb = -self.u_ub
        Js = np.zeros((2, N_Q))
        Js[0, SPRING_IDX[0]] = 1.0
        Js[1, SPRING_IDX[1]] = 1.0
        self.J_s = Js


def _perp(w: np.ndarray) -> np.ndarray:
    return np.array([-w[1], w[0]])


def _link(angle: float, length: float) -> np.ndarray:
    # R(angle) @ (0, -length): link hangs straight down at zero angle
    return np.array([length * np.sin(angle), -length * np.cos(angle)])


class _Point:
    """A material point with position, Jacobian, and Jacobian rate."""

    __slots__ = ("p", "J", "Jd")

    def __init__(self, p, J, Jd):
        self.p, self.J, self.Jd = p, J, Jd

    def advance(self, w: np.ndarray, adot: float, cols) -> "_Point":
        """Offset by vector w rigidly rotating with the coordinates ``cols``."""
        J = self.J.copy()
        Jd = self.Jd.copy()
        pw = _perp(w)
        for j in cols:
            J[:, j] += pw
            Jd[:, j] += -adot * w
        return _Point(self.p + w, J, Jd)

    def vel(self, qd):
        return self.J @ qd


class _Body:
    __slots__ = ("m", "I", "pt", "Jw")

    def __init__(self, m, inertia, pt, Jw):
        self.m, self.I, self.pt, self.Jw = m, inertia, pt, Jw


class Kinematics:
    """Per-body and per-point kinematic quantities at one state."""

    def __init__(self, model: RobotModel, q: np.ndarray, qd: np.ndarray):
        p = model.params
        Jb = np.zeros((2, N_Q))
        Jb[0, 0] = Jb[1, 1] = 1.0
        base = _Point(np.array([q[0], q[1]]), Jb, np.zeros((2, N_Q)))

        self.bodies: list[_Body] = []
        self.ankle: dict[str, _Point] = {}
        self.knee: dict[str, _Point] = {}
        self.foot_angle: dict[str, float] = {}
        self.foot_angle_row: dict[str, np.ndarray] = {}
        self.base = base

        Jw = np.zeros(N_Q)
        Jw[2] = 1.0
        self.bodies.append(_Body(p.pelvis_mass, p.pelvis_inertia, base, Jw))

        for leg, (ih, ik, isp, it) in LEG_IDX.items():
            a1 = q[2] + q[ih]
            a1d = qd[2] + qd[ih]
            c1 = (2, ih)
            thigh_com = base.advance(_link(a1, 0.5 * p.thigh_length), a1d, c1)
            knee = base.advance(_link(a1, p.thigh_length), a1d, c1)
            Jw1 = np.zeros(N_Q)
            Jw1[[2, ih]] = 1.0
            self.bodies.append(_Body(p.thigh_mass, model.thigh_inertia,
                                     thigh_com, Jw1))

            a2 = a1 + q[ik] + q[isp]
            a2d = a1d + qd[ik] + qd[isp]
            c2 = (2, ih, ik, isp)
            shin_com = knee.advance(_link(a2, 0.5 * p.shin_length), a2d, c2)
            ankle = knee.advance(_link(a2, p.shin_length), a2d, c2)
            Jw2 = np.zeros(N_Q)
            Jw2[[2, ih, ik, isp]] = 1.0
            self.bodies.append(_Body(p.shin_mass, model.shin_inertia,
                                     shin_com, Jw2))

            a3 = a2 + q[it]
            Jw3 = np.zeros(N_Q)
            Jw3[[2, ih, ik, isp, it]] = 1.0
            # foot is a rod centered on the ankle; COM at the ankle point
            self.bodies.append(_Body(p.foot_mass, model.foot_inertia,
                                     ankle, Jw3))
            self.knee[leg] = knee
            self.ankle[leg] = ankle
            self.foot_angle[leg] = a3
            self.foot_angle_row[leg] = Jw3
        self.q = q
        self.qd = qd


def kinematics(model: RobotModel, state: RobotState) -> Kinematics:
    return Kinematics(model, state.q, state.qd)


# ---------------------------------------------------------------------------
# dynamics terms


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    kin = Kinematics(model, np.asarray(q, float), np.zeros(N_Q))
    M = np.zeros((N_Q, N_Q))
    for b in kin.bodies:
        M += b.m * (b.pt.J.T @ b.pt.J) + b.I * np.outer(b.Jw, b.Jw)
    M[MOTOR_IDX, MOTOR_IDX] += model.params.rotor_inertia
    return M


def coriolis_matrix(model: RobotModel, state: RobotState) -> np.ndarray:
    """C(q, qd) with H_coriolis = C qd and Mdot - 2C skew-symmetric."""
    kin = kinematics(model, state)
    C = np.zeros((N_Q, N_Q))
    for b in kin.bodies:
        C += b.m * (b.pt.J.T @ b.pt.Jd)
    return C


def gravity_vector(model: RobotModel, q: np.ndarray) -> np.ndarray:
    kin = Kinematics(model, np.asarray(q, float), np.zeros(N_Q))
    G = np.zeros(N_Q)
    for b in kin.bodies:
        G += b.m * model.params.gravity * b.pt.J[1]
    return G


def spring_torques(model: RobotModel, state: RobotState) -> np.ndarray:
    """Torsion-spring generalized torques tau_s = -(k q_s + d qd_s), one per leg."""
    p = model.params
    qs = state.q[list(SPRING_IDX)]
    qds = state.qd[list(SPRING_IDX)]
    return -(p.k_shin * qs + p.d_shin * qds)


def dynamics_terms(model: RobotModel, state: RobotState):
    """(M, H, tau_s, J_s) of M qdd + H = B u + J_s' tau_s + J_h' F_h."""
    kin = kinematics(model, state)
    M = np.zeros((N_Q, N_Q))
    H = np.zeros(N_Q)
    g = model.params.gravity
    for b in kin.bodies:
        M += b.m * (b.pt.J.T @ b.pt.J) + b.I * np.outer(b.Jw, b.Jw)
        H += b.m * (b.pt.J.T @ (b.pt.Jd @ state.qd)) + b.m * g * b.pt.J[1]
    M[MOTOR_IDX, MOTOR_IDX] += model.params.rotor_inertia
    return M, H, spring_torques(model, state), model.J_s


# ---------------------------------------------------------------------------
# contact constraints


def holonomic_constraints(model: RobotModel, state: RobotState, mode: str):
    """(c, J_h, Jdot_qd) for the contact mode.

    For each flat foot: ankle x, ankle z, absolute foot pitch (3 rows).
    ``c`` holds absolute values; stance anchors are the caller's concern.
    """
    if mode not in CONTACT_MODES:
        raise ValueError(f"unknown contact mode {mode!r}")
    if mode == "airborne":
        return np.zeros(0), np.zeros((0, N_Q)), np.zeros(0)
    kin = kinematics(model, state)
    c, J, Jd_qd = [], [], []
    for leg in ("L", "R"):
        a = kin.ankle[leg]
        c.extend([a.p[0], a.p[1], kin.foot_angle[leg]])
        J.append(a.J)
        J.append(kin.foot_angle_row[leg][None, :])
        acc = a.Jd @ state.qd
        Jd_qd.extend([acc[0], acc[1], 0.0])
    return np.array(c), np.vstack(J), np.array(Jd_qd)


def constrained_forward_dynamics(model: RobotModel, state: RobotState,
                                 u: np.ndarray, mode: str):
    """Solve the constrained equations of motion; returns (qdd, F_h).

    F_h is empty when airborne. Raises on a singular constraint set.
    """
    u = np.asarray(u, dtype=float)
    M, H, tau_s, J_s = dynamics_terms(model, state)
    rhs = model.B @ u + J_s.T @ tau_s - H
    _, J_h, Jd_qd = holonomic_constraints(model, state, mode)
    m = J_h.shape[0]
    if m == 0:
        return np.linalg.solve(M, rhs), np.zeros(0)
    KKT = np.block([[M, -J_h.T], [J_h, np.zeros((m, m))]])
    b = np.concatenate([rhs, -Jd_qd])
    try:
        sol = np.linalg.solve(KKT, b)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("singular contact constraint set "
                           "(redundant holonomic rows)") from exc
    qdd, F_h = sol[:N_Q], sol[N_Q:]
    res = np.abs(J_h @ qdd + Jd_qd).max()
    if res > 1e-9:
        raise RuntimeError(f"contact constraint acceleration residual {res:.2e}; "
                           "constraint set near-singular")
    return qdd, F_h


def impact_map(model: RobotModel, state: RobotState,
               mode_post: str = "both_feet_flat") -> np.ndarray:
    """Plastic impact: M (qd+ - qd-) = J_h' Lambda with J_h qd+ = 0."""
    _, J_h, _ = holonomic_constraints(model, state, mode_post)
    if J_h.shape[0] == 0:
        return state.qd.copy()
    M = mass_matrix(model, state.q)
    Minv_Jt = np.linalg.solve(M, J_h.T)
    W = J_h @ Minv_Jt                      # contact-space inverse inertia
    try:
        lam = -np.linalg.solve(W, J_h @ state.qd)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("singular contact-space inertia at impact") from exc
    qd_post = state.qd + Minv_Jt @ lam
    res = np.abs(J_h @ qd_post).max()
    if res > 1e-9:
        raise RuntimeError(f"impact constraint residual {res:.2e}")
    return qd_post


def ground_reaction_force(model: RobotModel, state: RobotState,
                          u: np.ndarray) -> np.ndarray:
    """Per-foot contact wrench, shape (2, 3): rows (left, right) of
    (F_x, F_z, M_pitch)."""
    _, F_h = constrained_forward_dynamics(model, state, u, "both_feet_flat")
    return F_h.reshape(2, 3)


# ---------------------------------------------------------------------------
# centroidal quantities and outputs


def com_terms(model: RobotModel, state: RobotState):
    """(p_com, v_com, J_com, Jdot_com qd) of the total center of mass."""
    kin = kinematics(model, state)
    mtot = model.total_mass
    p = np.zeros(2)
    J = np.zeros((2, N_Q))
    Jd_qd = np.zeros(2)
    for b in kin.bodies:
        p += b.m * b.pt.p
        J += b.m * b.pt.J
        Jd_qd += b.m * (b.pt.Jd @ state.qd)
    p /= mtot
    J /= mtot
    Jd_qd /= mtot
    return p, J @ state.qd, J, Jd_qd


def com_position(model: RobotModel, state: RobotState) -> np.ndarray:
    return com_terms(model, state)[0]


def com_velocity(model: RobotModel, state: RobotState) -> np.ndarray:
    return com_terms(model, state)[1]


def centroidal_momentum(model: RobotModel, state: RobotState):
    """(H_G, A_G): planar centroidal momentum (px, pz, pitch) = A_G qd."""
    kin = kinematics(model, state)
    p_com, _, J_com, _ = com_terms(model, state)
    A = np.zeros((3, N_Q))
    for b in kin.bodies:
        A[0] += b.m * b.pt.J[0]
        A[1] += b.m * b.pt.J[1]
        r = b.pt.p - p_com
        A[2] += b.I * b.Jw + b.m * (r[0] * b.pt.J[1] - r[1] * b.pt.J[0])
    return A @ state.qd, A


def pitch_momentum_terms(model: RobotModel, state: RobotState):
    """(H_pitch, A_pitch, Adot_pitch qd) about the COM.

    The momentum rate along the dynamics is Hdot = A_pitch qdd + Adot qd.
    """
    kin = kinematics(model, state)
    p_com, v_com, _, _ = com_terms(model, state)
    A = np.zeros(N_Q)
    Ad_qd = 0.0
    H = 0.0
    for b in kin.bodies:
        r = b.pt.p - p_com
        v = b.pt.vel(state.qd)
        rd = v - v_com
        om = float(b.Jw @ state.qd)
        H += b.I * om + b.m * (r[0] * v[1] - r[1] * v[0])
        A += b.I * b.Jw + b.m * (r[0] * b.pt.J[1] - r[1] * b.pt.J[0])
        acc_bias = b.pt.Jd @ state.qd
        Ad_qd += b.m * (rd[0] * v[1] - rd[1] * v[0]
                        + r[0] * acc_bias[1] - r[1] * acc_bias[0])
    return H, A, Ad_qd


def virtual_leg(model: RobotModel, state: RobotState, leg: str):
    """(L, Ldot, grad) of the hip-to-ankle length with the spring zeroed.

    grad is d L / d q with the spring column removed, so Ldot = grad qd
    excludes spring-deflection motion (the reduced Jacobian).
    """
    p = model.params
    ih, ik, isp, _ = LEG_IDX[leg]
    q = state.q
    a1 = q[2] + q[ih]
    a2 = a1 + q[ik]                       # spring deflection zeroed
    w1 = _link(a1, p.thigh_length)
    w2 = _link(a2, p.shin_length)
    d = w1 + w2                           # hip -> ankle (springs undeflected)
    L = float(np.linalg.norm(d))
    grad = np.zeros(N_Q)
    e = d / L
    # only the knee column survives: base translation cancels between hip
    # and ankle, and whole-leg rotations preserve the distance exactly
    grad[ik] = float(e @ _perp(w2))
    return L, float(grad @ state.qd), grad


def leg_length_outputs(model: RobotModel, state: RobotState):
    """(L_L, L_R, Ldot_L, Ldot_R) virtual leg lengths and rates."""
    LL, LdL, _ = virtual_leg(model, state, "L")
    LR, LdR, _ = virtual_leg(model, state, "R")
    return LL, LR, LdL, LdR


def foot_point(model: RobotModel, state: RobotState, leg: str):
    """(p, v, angle, angle_rate) of the ankle point and foot orientation."""
    kin = kinematics(model, state)
    a = kin.ankle[leg]
    return (a.p, a.vel(state.qd), kin.foot_angle[leg],
            float(kin.foot_angle_row[leg] @ state.qd))


def total_energy(model: RobotModel, state: RobotState) -> float:
    """Kinetic + gravitational + spring potential energy."""
    p = model.params
    M = mass_matrix(model, state.q)
    kin = kinematics(model, state)
    pe = sum(b.m * p.gravity * b.pt.p[1] for b in kin.bodies)
    qs = state.q[list(SPRING_IDX)]
    return float(0.5 * state.qd @ M @ state.qd + pe
                 + 0.5 * p.k_shin * (qs @ qs))


# ---------------------------------------------------------------------------
# integration


def project_velocity(model: RobotModel, state: RobotState, mode: str) -> RobotState:
    """Mass-metric projection of qd onto the constraint tangent space."""
    _, J_h, _ = holonomic_constraints(model, state, mode)
    if J_h.shape[0] == 0:
        return state
    M = mass_matrix(model, state.q)
    Minv_Jt = np.linalg.solve(M, J_h.T)
    W = J_h @ Minv_Jt
    qd = state.qd - Minv_Jt @ np.linalg.solve(W, J_h @ state.qd)
    return RobotState(state.q, qd)


def integrate_step(model: RobotModel, state: RobotState, u: np.ndarray,
                   dt: float, mode: str) -> RobotState:
    """One RK4 step with zero-order-hold input, then velocity projection."""

    def f(q, qd):
        qdd, _ = constrained_forward_dynamics(model, RobotState(q, qd), u, mode)
        return qd, qdd

    q, qd = state.q, state.qd
    k1q, k1v = f(q, qd)
    k2q, k2v = f(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v)
    k3q, k3v = f(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v)
    k4q, k4v = f(q + dt * k3q, qd + dt * k3v)
    q_new = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    qd_new = qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return project_velocity(model, RobotState(q_new, qd_new), mode)


# ---------------------------------------------------------------------------
# standing configuration


@dataclass
class StandingSolution:
    state: RobotState
    u: np.ndarray          # (6,) motor torques
    F_h: np.ndarray        # (6,) contact wrench, (Fx, Fz, M) per foot


def _symmetric_q(z) -> np.ndarray:
    alpha, kappa, s, tau, z_b = z[:5]
    q = np.zeros(N_Q)
    q[1] = z_b
    for ih, ik, isp, it in LEG_IDX.values():
        q[ih], q[ik], q[isp], q[it] = alpha, kappa, s, tau
    return q


def standing_state(model: RobotModel, L0: float = 0.8) -> StandingSolution:
    """Static double-support equilibrium with virtual leg length ``L0``,
    ankles directly below the hips and feet flat on the ground."""
    p = model.params
    lt, ls = p.thigh_length, p.shin_length
    if not abs(lt - ls) < L0 < lt + ls:
        raise ValueError(f"leg length {L0} outside the kinematic range")

    def residual(z):
        q = _symmetric_q(z)
        uh, uk, ut, Fx, Fz, Mf = z[5:]
        st = RobotState(q, np.zeros(N_Q))
        kin = kinematics(model, st)
        ankle = kin.ankle["L"]
        L, _, _ = virtual_leg(model, st, "L")
        u = np.array([uh, uk, ut, uh, uk, ut])
        F_h = np.array([Fx, Fz, Mf, Fx, Fz, Mf])
        _, J_h, _ = holonomic_constraints(model, st, "both_feet_flat")
        G = gravity_vector(model, q)
        eq = model.B @ u + model.J_s.T @ spring_torques(model, st) \
            + J_h.T @ F_h - G
        kin_res = [kin.foot_angle["L"], ankle.p[0], ankle.p[1], L - L0]
        return np.array(kin_res + list(eq[:7]))

    kappa0 = np.arccos(np.clip((L0**2 - lt**2 - ls**2) / (2 * lt * ls),
                               -1.0, 1.0))
    alpha0 = -kappa0 / 2.0
    W = model.total_mass * p.gravity
    z0 = np.array([alpha0, kappa0, 0.0, -(alpha0 + kappa0), L0,
                   0.0, 0.0, 0.0, 0.0, W / 2.0, 0.0])
    sol = root(residual, z0, method="hybr", tol=1e-13)
    res = np.abs(residual(sol.x)).max()
    if not sol.success or res > 1e-9:
        raise RuntimeError(f"standing equilibrium solve failed (residual {res:.2e})")
    z = sol.x
    q = _symmetric_q(z)
    uh, uk, ut, Fx, Fz, Mf = z[5:]
    return StandingSolution(state=RobotState(q, np.zeros(N_Q)),
                            u=np.array([uh, uk, ut, uh, uk, ut]),
                            F_h=np.array([Fx, Fz, Mf, Fx, Fz, Mf]))
