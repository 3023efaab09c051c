"""Output-tracking whole-body controller: Lyapunov-constrained QP.

Per contact domain an output set stacks relative-degree-1 outputs y1
(velocity-like, one derivative to the input) and relative-degree-2 outputs
y2 (position-like). With the augmented input v = (motor torques u, contact
wrench F_h), the output error eta = [y1; y2; y2dot] obeys

    etadot = F eta + G mu,      mu = [y1dot; y2ddot] = Lf + A v

A rapidly exponentially stabilizing Lyapunov function V_eps(eta) =
eta' I_eps P I_eps eta (P from a Riccati or Lyapunov equation) yields one
affine inequality in v enforcing Vdot <= -(gamma/eps) V. Each control tick
solves a small QP over (v, delta): minimize the feedback-linearization
effort ||Lf + A v||^2 plus a large penalty on the relaxation delta, subject
to the (relaxed) Lyapunov row, friction-cone and unilateral contact rows,
torque bounds, and the holonomic acceleration equalities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import biped as bp
from .solvers import INF, QpProblem, solve_care, solve_ctle, solve_qp


@dataclass
class ClfParams:
    """Lyapunov-constraint controller parameters."""

    epsilon: float = 0.1
    gamma: float = 1.0
    Q: np.ndarray | None = None        # SPD weight; defaults to identity
    riccati_kind: str = "care"         # "care" or "ctle"
    relax_penalty: float = 1e6
    # linear exact-penalty weight on the relaxation: keeps delta* at exactly
    # zero whenever the decay row is enforceable with a multiplier below it
    relax_linear: float = 100.0
    control_period: float = 5e-4
    qp_reg: float = 1e-12
    # small secondary penalty on the full joint acceleration; it breaks the
    # planar null-mode degeneracy (outputs + contact rows span only 10 of
    # the 11 accelerations) so the static optimum is gravity compensation
    accel_reg: float = 1e-4
    # penalty on the internal-force kernel of [B, J_h']: the direction
    # B u = -J_h' F_h changes no acceleration, only the actuation/contact
    # force split, and would otherwise be fixed by qp_reg alone (leaving the
    # Hessian nearly singular and the active-set solver cycling)
    null_reg: float = 1e-4

    def __post_init__(self):
        if self.epsilon <= 0 or self.gamma <= 0 or self.relax_penalty <= 0:
            raise ValueError("epsilon, gamma and relax_penalty must be positive")
        if self.control_period <= 0:
            raise ValueError("control_period must be positive")
        if self.riccati_kind not in ("care", "ctle"):
            raise ValueError("riccati_kind must be 'care' or 'ctle'")
        if self.Q is not None:
            Q = np.asarray(self.Q, dtype=float)
            if np.abs(Q - Q.T).max() > 1e-10 or np.linalg.eigvalsh(Q).min() <= 0:
                raise ValueError("Q must be symmetric positive definite")
            self.Q = Q


@dataclass
class OutputTerms:
    """Stacked output errors and their input-affine acceleration structure.

    y1dot  = W1 qdd + b1       (relative degree 1)
    y2ddot = J2 qdd + b2       (relative degree 2)

    Desired-trajectory derivatives are already folded into b1/b2 and the
    error values.
    """

    y1: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    y2: np.ndarray
    y2dot: np.ndarray
    J2: np.ndarray
    b2: np.ndarray


@dataclass
class OutputSet:
    name: str
    mode: str                     # contact mode the outputs assume
    o1: int
    o2: int
    names: tuple
    terms: object                 # callable (model, state, t) -> OutputTerms


def evaluate_outputs(outputs: OutputSet, model, state, t) -> np.ndarray:
    """eta = [y1; y2; y2dot], dimension o1 + 2 o2."""
    tm = outputs.terms(model, state, t)
    return np.concatenate([tm.y1, tm.y2, tm.y2dot])


# ---------------------------------------------------------------------------
# output-set factories


def _quintic_to_zero(p0: float, v0: float, T: float):
    """Coefficients of the quintic reaching (0, 0, 0) at T from (p0, v0, 0)."""
    A = np.zeros((6, 6))
    rhs = np.array([p0, v0, 0.0, 0.0, 0.0, 0.0])
    A[0, 0] = 1.0
    A[1, 1] = 1.0
    A[2, 2] = 2.0
    tp = T ** np.arange(6)
    A[3] = tp
    A[4] = np.arange(6) * np.concatenate([[0.0], tp[:-1]])
    A[5] = np.arange(6) * np.arange(-1, 5) * np.concatenate([[0.0, 0.0], tp[:-2]])
    coef = np.linalg.solve(A, rhs)

    def traj(t: float):
        if t >= T:
            return 0.0, 0.0, 0.0
        tv = t ** np.arange(6)
        y = float(coef @ tv)
        yd = float(coef[1:] @ (np.arange(1, 6) * t ** np.arange(5)))
        ydd = float(coef[2:] @ (np.arange(2, 6) * np.arange(1, 5)
                                * t ** np.arange(4)))
        return y, yd, ydd

    return traj


def _leg_rows(model, state, legs=("L", "R")):
    """Per-leg (L, Ldot, grad, graddot qd) with the rate by directional FD."""
    h = 1e-6
    st_p = bp.RobotState(state.q + h * state.qd, state.qd)
    st_m = bp.RobotState(state.q - h * state.qd, state.qd)
    out = []
    for leg in legs:
        L, Ld, g = bp.virtual_leg(model, state, leg)
        gp = bp.virtual_leg(model, st_p, leg)[2]
        gm = bp.virtual_leg(model, st_m, leg)[2]
        gd_qd = float(((gp - gm) / (2 * h)) @ state.qd)
        out.append((L, Ld, g, gd_qd))
    return out


def jumping_outputs(model, plan, x_com_ref: float) -> OutputSet:
    """Stance push-off outputs: pitch centroidal momentum to zero (RD1) and
    both virtual leg lengths tracking the planned L(t) plus the horizontal
    COM held at its initial value (RD2)."""

    def terms(model_, state, t):
        H, A, Ad_qd = bp.pitch_momentum_terms(model_, state)
        Ld, Ldd, Lddd = plan.L(t), plan.L_dot(t), plan.L_ddot(t)
        p_com, v_com, J_com, Jd_qd_com = bp.com_terms(model_, state)
        rows = _leg_rows(model_, state)
        y2 = np.array([rows[0][0] - Ld, rows[1][0] - Ld,
                       p_com[0] - x_com_ref])
        y2dot = np.array([rows[0][1] - Ldd, rows[1][1] - Ldd, v_com[0]])
        J2 = np.vstack([rows[0][2], rows[1][2], J_com[0]])
        b2 = np.array([rows[0][3] - Lddd, rows[1][3] - Lddd, Jd_qd_com[0]])
        return OutputTerms(y1=np.array([H]), W1=A[None, :],
                           b1=np.array([Ad_qd]),
                           y2=y2, y2dot=y2dot, J2=J2, b2=b2)

    return OutputSet(name="jumping", mode="both_feet_flat", o1=1, o2=3,
                     names=("pitch_momentum", "leg_length_L", "leg_length_R",
                            "com_x"),
                     terms=terms)


def flight_outputs(model, hold: np.ndarray) -> OutputSet:
    """Ballistic-phase outputs: hip and knee motor positions held at their
    liftoff values, toe motors steering both feet level with the ground.

    ``hold`` is (q_hip_L, q_knee_L, q_hip_R, q_knee_R) at liftoff.
    """
    hold = np.asarray(hold, dtype=float)
    sel = [3, 4, 7, 8]   # hip and knee coordinates

    def terms(model_, state, t):
        kin = bp.kinematics(model_, state)
        J2 = np.zeros((6, bp.N_Q))
        for r, j in enumerate(sel):
            J2[r, j] = 1.0
        J2[4] = kin.foot_angle_row["L"]
        J2[5] = kin.foot_angle_row["R"]
        y2 = np.concatenate([state.q[sel] - hold,
                             [kin.foot_angle["L"], kin.foot_angle["R"]]])
        y2dot = J2 @ state.qd
        return OutputTerms(y1=np.zeros(0), W1=np.zeros((0, bp.N_Q)),
                           b1=np.zeros(0), y2=y2, y2dot=y2dot, J2=J2,
                           b2=np.zeros(6))

    return OutputSet(name="flight", mode="airborne", o1=0, o2=6,
                     names=("hip_L", "knee_L", "hip_R", "knee_R",
                            "foot_angle_L", "foot_angle_R"),
                     terms=terms)


def landing_outputs(model, plan, x_com0: float, pitch0: float,
                    pitch_rate0: float, x_com_rate0: float,
                    x_com_target: float, horizon: float) -> OutputSet:
    """Touchdown absorption outputs: both virtual leg lengths tracking the
    landing plan, the horizontal COM and the base pitch steered to rest by
    quintic reference trajectories over the landing horizon."""
    x_traj = _quintic_to_zero(x_com0 - x_com_target, x_com_rate0, horizon)
    phi_traj = _quintic_to_zero(pitch0, pitch_rate0, horizon)

    def terms(model_, state, t):
        Ld, Ldd, Lddd = plan.L(t), plan.L_dot(t), plan.L_ddot(t)
        xd, xdd, xddd = x_traj(t)
        pd, pdd, pddd = phi_traj(t)
        p_com, v_com, J_com, Jd_qd_com = bp.com_terms(model_, state)
        rows = _leg_rows(model_, state)
        pitch_row = np.zeros(bp.N_Q)
        pitch_row[2] = 1.0
        y2 = np.array([rows[0][0] - Ld, rows[1][0] - Ld,
                       p_com[0] - x_com_target - xd, state.q[2] - pd])
        y2dot = np.array([rows[0][1] - Ldd, rows[1][1] - Ldd,
                          v_com[0] - xdd, state.qd[2] - pdd])
        J2 = np.vstack([rows[0][2], rows[1][2], J_com[0], pitch_row])
        b2 = np.array([rows[0][3] - Lddd, rows[1][3] - Lddd,
                       Jd_qd_com[0] - xddd, -pddd])
        return OutputTerms(y1=np.zeros(0), W1=np.zeros((0, bp.N_Q)),
                           b1=np.zeros(0), y2=y2, y2dot=y2dot, J2=J2, b2=b2)

    return OutputSet(name="landing", mode="both_feet_flat", o1=0, o2=4,
                     names=("leg_length_L", "leg_length_R", "com_x", "pitch"),
                     terms=terms)


# ---------------------------------------------------------------------------
# output dynamics and the Lyapunov machinery


def output_dynamics(outputs: OutputSet, model, state, t, mode=None):
    """(Lf, A) with [y1dot; y2ddot] = Lf + A v over v = (u, F_h)."""
    mode = outputs.mode if mode is None else mode
    M, Hb, tau_s, J_s = bp.dynamics_terms(model, state)
    _, J_h, Jd_qd = bp.holonomic_constraints(model, state, mode)
    tm = outputs.terms(model, state, t)
    Gmat = np.hstack([model.B, J_h.T])
    qdd0 = np.linalg.solve(M, J_s.T @ tau_s - Hb)
    Minv_G = np.linalg.solve(M, Gmat)
    W = np.vstack([tm.W1, tm.J2])
    A = W @ Minv_G
    Lf = W @ qdd0 + np.concatenate([tm.b1, tm.b2])
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < 1e-8 * max(1.0, sv[0]):
        U = np.linalg.svd(A)[0]
        worst = int(np.argmax(np.abs(U[:, -1])))
        raise RuntimeError("decoupling matrix is rank deficient; degenerate "
                           f"output {outputs.names[worst]!r}")
    return Lf, A


def _eta_blocks(o1: int, o2: int):
    """(F, G) of the output-error chain etadot = F eta + G mu."""
    n = o1 + 2 * o2
    F = np.zeros((n, n))
    F[o1:o1 + o2, o1 + o2:] = np.eye(o2)
    G = np.zeros((n, o1 + o2))
    G[:o1, :o1] = np.eye(o1)
    G[o1 + o2:, o1:] = np.eye(o2)
    return F, G


def explicit_gain(o1: int, o2: int, epsilon: float = 1.0) -> np.ndarray:
    """Gain of the explicit stabilizing law mu = -K eta (unit PD weights)."""
    K = np.zeros((o1 + o2, o1 + 2 * o2))
    K[:o1, :o1] = np.eye(o1) / epsilon
    K[o1:, o1:o1 + o2] = np.eye(o2) / epsilon**2
    K[o1:, o1 + o2:] = np.eye(o2) / epsilon
    return K


def build_res_clf(params: ClfParams, o1: int, o2: int):
    """(P_eps, F, G): Lyapunov matrix with the rapid-decay scaling applied."""
    n = o1 + 2 * o2
    F, G = _eta_blocks(o1, o2)
    Q = np.eye(n) if params.Q is None else params.Q
    if Q.shape != (n, n):
        raise ValueError(f"Q must be {n}x{n} for this output set")
    if params.riccati_kind == "care":
        P = solve_care(F, G, Q)
    else:
        # the pure chain F is not Hurwitz; pre-stabilize with the explicit
        # law's gain at unit rate before solving the Lyapunov equation
        P = solve_ctle(F - G @ explicit_gain(o1, o2, 1.0), Q)
    eps = params.epsilon
    scale = np.concatenate([np.ones(o1), np.full(o2, 1.0 / eps), np.ones(o2)])
    P_eps = P * np.outer(scale, scale)
    return P_eps, F, G


def lyapunov_value(P_eps: np.ndarray, eta: np.ndarray) -> float:
    return float(eta @ P_eps @ eta)


def clf_constraint(P_eps, eta, Lf, A, params: ClfParams, o1: int, o2: int):
    """(a_row, b, V): single row a_row . v <= b enforcing the decay bound."""
    F, G = _eta_blocks(o1, o2)
    V = lyapunov_value(P_eps, eta)
    LfV = float(eta @ (F.T @ P_eps + P_eps @ F) @ eta)
    LgV = 2.0 * eta @ P_eps @ G
    a_row = LgV @ A
    b = -(params.gamma / params.epsilon) * V - LfV - float(LgV @ Lf)
    return a_row, b, V


# ---------------------------------------------------------------------------
# QP assembly and the per-tick controller


@dataclass
class TickData:
    """Everything audited about one control tick."""

    t: float
    eta: np.ndarray
    V: float
    delta: float
    u: np.ndarray
    F_h: np.ndarray
    clf_row: np.ndarray
    clf_rhs: float
    Lf: np.ndarray
    A: np.ndarray
    iterations: int
    solve_us: float


def assemble_clfqp(model, outputs: OutputSet, params: ClfParams, state, t,
                   P_eps: np.ndarray | None = None):
    """QP over x = (u, F_h, delta); returns (QpProblem, aux dict)."""
    if P_eps is None:
        P_eps, _, _ = build_res_clf(params, outputs.o1, outputs.o2)
    Lf, A = output_dynamics(outputs, model, state, t)
    eta = evaluate_outputs(outputs, model, state, t)
    a_clf, b_clf, V = clf_constraint(P_eps, eta, Lf, A, params,
                                     outputs.o1, outputs.o2)

    _, J_h, Jd_qd = bp.holonomic_constraints(model, state, outputs.mode)
    m = J_h.shape[0]
    nu = 6
    nv = nu + m
    n = nv + 1   # + relaxation

    M, Hb, tau_s, J_s = bp.dynamics_terms(model, state)
    Gmat = np.hstack([model.B, J_h.T])
    qdd0 = np.linalg.solve(M, J_s.T @ tau_s - Hb)
    Minv_G = np.linalg.solve(M, Gmat)

    # the last variable is the scaled relaxation d = sqrt(p) * delta, which
    # keeps the Hessian diagonal O(1) (p delta^2 = d^2)
    s_relax = np.sqrt(params.relax_penalty)
    AtA = A.T @ A
    H = np.zeros((n, n))
    H[:nv, :nv] = 2.0 * (AtA + params.qp_reg * max(1.0, np.abs(AtA).max())
                         * np.eye(nv)
                         + params.accel_reg * Minv_G.T @ Minv_G)
    if m:
        # pin the internal-force kernel of [B, J_h'] (accelerations are
        # blind to it; see ClfParams.null_reg)
        _, sv_g, Vt_g = np.linalg.svd(Gmat)
        null = Vt_g[np.sum(sv_g > 1e-10 * sv_g[0]):]
        H[:nv, :nv] += 2.0 * params.null_reg * null.T @ null
    H[nv, nv] = 2.0
    c = np.zeros(n)
    c[:nv] = 2.0 * (A.T @ Lf + params.accel_reg * Minv_G.T @ qdd0)
    c[nv] = params.relax_linear / s_relax

    rows = [np.concatenate([a_clf, [-1.0 / s_relax]])]
    rhs = [b_clf]
    mu_f = model.params.mu_f
    for f in range(m // 3):
        ix, iz = nu + 3 * f, nu + 3 * f + 1
        for sign in (+1.0, -1.0):
            r = np.zeros(n)
            r[ix], r[iz] = sign, -mu_f
            rows.append(r)
            rhs.append(0.0)
        r = np.zeros(n)
        r[iz] = -1.0
        rows.append(r)
        rhs.append(0.0)

    eq_A = eq_b = None
    if m:
        eq_A = np.hstack([J_h @ Minv_G, np.zeros((m, 1))])
        eq_b = -Jd_qd - J_h @ qdd0

    lb = np.concatenate([model.u_lb, np.full(m, -INF), [0.0]])
    ub = np.concatenate([model.u_ub, np.full(m, INF), [INF]])
    qp = QpProblem(hessian=H, linear_cost=c,
                   ineq_matrix=np.vstack(rows), ineq_rhs=np.array(rhs),
                   eq_matrix=eq_A, eq_rhs=eq_b, lower=lb, upper=ub)
    aux = dict(eta=eta, V=V, Lf=Lf, A=A, clf_row=a_clf, clf_rhs=b_clf, m=m,
               s_relax=s_relax)
    return qp, aux


class DomainController:
    """Per-domain controller: precomputed Lyapunov matrix, warm-started QP."""

    def __init__(self, model, outputs: OutputSet, params: ClfParams):
        self.model = model
        self.outputs = outputs
        self.params = params
        self.P_eps, self.F, self.G = build_res_clf(params, outputs.o1,
                                                   outputs.o2)
        self._warm: list[int] | None = None
        self.log: list[TickData] = []

    def control_step(self, state, t) -> np.ndarray:
        t0 = time.perf_counter()
        qp, aux = assemble_clfqp(self.model, self.outputs, self.params,
                                 state, t, P_eps=self.P_eps)
        sol = solve_qp(qp, warm_start=self._warm)
        if sol.status == "infeasible":
            raise RuntimeError(
                f"control QP infeasible in domain {self.outputs.name!r} at "
                f"t={t:.4f}: eta={aux['eta']}, V={aux['V']:.3e}")
        self._warm = sol.active_set
        elapsed = (time.perf_counter() - t0) * 1e6
        nv = 6 + aux["m"]
        u = sol.x_star[:6]
        over = np.maximum(u - self.model.u_ub, 0) + np.minimum(
            u - self.model.u_lb, 0)
        if np.abs(over).max() > 1e-9:
            raise RuntimeError("torque bound violated beyond numerical slack")
        u = np.clip(u, self.model.u_lb, self.model.u_ub)
        self.log.append(TickData(
            t=t, eta=aux["eta"], V=aux["V"],
            delta=float(sol.x_star[nv] / aux["s_relax"]),
            u=u, F_h=sol.x_star[6:nv].copy(), clf_row=aux["clf_row"],
            clf_rhs=aux["clf_rhs"], Lf=aux["Lf"], A=aux["A"],
            iterations=sol.iterations, solve_us=elapsed))
        return u
