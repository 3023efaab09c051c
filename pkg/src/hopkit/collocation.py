"""Direct collocation for the actuated spring-mass model.

Jumping and landing are transcribed on an even time grid with implicit
trapezoidal defect constraints and solved with a dense SQP (l1 merit line
search, BFGS Hessian, active-set QP subproblems).  The optimal nodal leg
length is exported as a C1 cubic Hermite interpolant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .slip import SlipParams, SlipState
from .solvers import INF, QpProblem, solve_qp

STATE_DIM = 6  # x, x_dot, s, s_dot, L, L_dot


@dataclass
class CollocationGrid:
    """Nodal trajectory on an even grid: states (N, 6) plus controls (N,)."""

    T: float
    states: np.ndarray
    controls: np.ndarray  # L_ddot per node

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def dt(self) -> float:
        return self.T / (self.N - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N)


def _state_derivatives(params: SlipParams, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Vectorized stance derivative over all nodes."""
    x, xd, s, sd, L, Ld = states.T
    K = params.stiffness_model.stiffness(L, extrapolate=True)
    D = params.stiffness_model.damping(L, extrapolate=True)
    F = K * s + D * sd
    xdd = F / params.mass - params.gravity
    return np.stack([xd, xdd, sd, controls - xdd, Ld, controls], axis=1)


def node_spring_forces(params: SlipParams, states: np.ndarray) -> np.ndarray:
    x, xd, s, sd, L, Ld = states.T
    return (params.stiffness_model.stiffness(L, extrapolate=True) * s
            + params.stiffness_model.damping(L, extrapolate=True) * sd)


def _force_partials(params: SlipParams, states: np.ndarray):
    """dF/d(s, s_dot, L) of the spring force at each node."""
    x, xd, s, sd, L, Ld = states.T
    m = params.stiffness_model
    K = m.stiffness(L, extrapolate=True)
    D = m.damping(L, extrapolate=True)
    dF_dL = m.stiffness_slope(L) * s + m.damping_slope(L) * sd
    return K, D, dF_dL


def _dynamics_jacobians(params: SlipParams, states: np.ndarray):
    """Per-node df/dy (N, 6, 6) and df/du (6,) of the stance derivative."""
    K, D, dF_dL = _force_partials(params, states)
    N = states.shape[0]
    A = np.zeros((N, STATE_DIM, STATE_DIM))
    A[:, 0, 1] = 1.0
    A[:, 1, 2] = K / params.mass
    A[:, 1, 3] = D / params.mass
    A[:, 1, 4] = dF_dL / params.mass
    A[:, 2, 3] = 1.0
    A[:, 3] = -A[:, 1]  # s_dd = u - x_dd
    A[:, 4, 5] = 1.0
    Bu = np.zeros(STATE_DIM)
    Bu[3] = 1.0
    Bu[5] = 1.0
    return A, Bu


def trapezoidal_defects(grid: CollocationGrid, params: SlipParams) -> np.ndarray:
    """Implicit trapezoidal defect residuals, stacked over intervals."""
    d = _state_derivatives(params, grid.states, grid.controls)
    z = grid.states
    defects = z[1:] - z[:-1] - 0.5 * grid.dt * (d[1:] + d[:-1])
    return defects.ravel()


def _defect_jacobian(params: SlipParams, N: int, z: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of the stacked trapezoidal defects w.r.t.
    (T, states, controls)."""
    T = float(z[0])
    states = z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM)
    controls = z[1 + STATE_DIM * N:]
    dt = T / (N - 1)
    f = _state_derivatives(params, states, controls)
    A, Bu = _dynamics_jacobians(params, states)
    n = z.size
    J = np.zeros((STATE_DIM * (N - 1), n))
    eye = np.eye(STATE_DIM)
    for k in range(N - 1):
        r = slice(STATE_DIM * k, STATE_DIM * (k + 1))
        J[r, 0] = -(f[k] + f[k + 1]) / (2.0 * (N - 1))
        c_k = slice(1 + STATE_DIM * k, 1 + STATE_DIM * (k + 1))
        c_k1 = slice(1 + STATE_DIM * (k + 1), 1 + STATE_DIM * (k + 2))
        J[r, c_k] = -eye - 0.5 * dt * A[k]
        J[r, c_k1] = eye - 0.5 * dt * A[k + 1]
        J[r, 1 + STATE_DIM * N + k] = -0.5 * dt * Bu
        J[r, 1 + STATE_DIM * N + k + 1] = -0.5 * dt * Bu
    return J


def _force_row_jacobian(params: SlipParams, N: int, z: np.ndarray,
                        nodes, scale: float) -> np.ndarray:
    """Jacobian of scale * F at the given nodes w.r.t. (T, states, controls)."""
    states = z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM)
    K, D, dF_dL = _force_partials(params, states)
    nodes = np.atleast_1d(nodes)
    J = np.zeros((nodes.size, z.size))
    for r, i in enumerate(nodes):
        base = 1 + STATE_DIM * i
        J[r, base + 2] = K[i] * scale
        J[r, base + 3] = D[i] * scale
        J[r, base + 4] = dF_dL[i] * scale
    return J


@dataclass
class NlpConstraint:
    fun: object               # callable z -> vector
    lower: np.ndarray
    upper: np.ndarray
    kind: str                 # defect | boundary | path | task
    jac: object = None        # optional callable z -> matrix (analytic)


@dataclass
class NlpProblem:
    n_vars: int
    cost: object              # callable z -> float
    cost_grad: object         # callable z -> vector (analytic)
    constraints: list[NlpConstraint]
    lb: np.ndarray
    ub: np.ndarray
    N: int
    params: SlipParams
    fd_step: float = 1e-7
    initial_guess: np.ndarray | None = None
    cost_hess: object = None  # optional callable z -> matrix (analytic)

    def unpack(self, z: np.ndarray) -> CollocationGrid:
        N = self.N
        T = float(z[0])
        states = z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM)
        controls = z[1 + STATE_DIM * N:1 + (STATE_DIM + 1) * N]
        return CollocationGrid(T=T, states=states.copy(), controls=controls.copy())

    def pack(self, grid: CollocationGrid) -> np.ndarray:
        return np.concatenate([[grid.T], grid.states.ravel(), grid.controls])


def _default_bounds(N: int, L_bounds, Ldd_max, T_bounds):
    lb = np.full(1 + (STATE_DIM + 1) * N, -INF)
    ub = np.full(1 + (STATE_DIM + 1) * N, INF)
    lb[0], ub[0] = T_bounds
    states_lb = np.array([0.05, -10.0, -0.3, -10.0, L_bounds[0], -10.0])
    states_ub = np.array([3.0, 10.0, 0.3, 10.0, L_bounds[1], 10.0])
    lb[1:1 + STATE_DIM * N] = np.tile(states_lb, N)
    ub[1:1 + STATE_DIM * N] = np.tile(states_ub, N)
    lb[1 + STATE_DIM * N:] = -Ldd_max
    ub[1 + STATE_DIM * N:] = Ldd_max
    return lb, ub


def _trapezoid_cost(params, alpha=0.0):
    """Trapezoidal transcription of integral(L_ddot^2 + alpha s_dot^2) dt."""
    def cost(z, N):
        T = z[0]
        dt = T / (N - 1)
        u = z[1 + STATE_DIM * N:]
        sd = z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM)[:, 3]
        w = np.ones(N)
        w[0] = w[-1] = 0.5
        integrand = u**2 + alpha * sd**2
        return dt * float(w @ integrand)

    def grad(z, N):
        T = z[0]
        dt = T / (N - 1)
        u = z[1 + STATE_DIM * N:]
        states = z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM)
        sd = states[:, 3]
        w = np.ones(N)
        w[0] = w[-1] = 0.5
        g = np.zeros_like(z)
        g[0] = float(w @ (u**2 + alpha * sd**2)) / (N - 1)
        gs = np.zeros((N, STATE_DIM))
        gs[:, 3] = dt * w * 2.0 * alpha * sd
        g[1:1 + STATE_DIM * N] = gs.ravel()
        g[1 + STATE_DIM * N:] = dt * w * 2.0 * u
        return g

    def hess(z, N):
        T = z[0]
        dt = T / (N - 1)
        u = z[1 + STATE_DIM * N:]
        sd = z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM)[:, 3]
        w = np.ones(N)
        w[0] = w[-1] = 0.5
        n = z.size
        H = np.zeros((n, n))
        iu = np.arange(1 + STATE_DIM * N, n)
        isd = 1 + np.arange(N) * STATE_DIM + 3
        H[iu, iu] = 2.0 * dt * w
        H[isd, isd] = 2.0 * alpha * dt * w
        H[0, iu] = H[iu, 0] = 2.0 * w * u / (N - 1)
        H[0, isd] = H[isd, 0] = 2.0 * alpha * w * sd / (N - 1)
        return H

    return cost, grad, hess


def _make_problem(params, N, L_bounds, Ldd_max, T_bounds, alpha, constraints, guess):
    cost, grad, hess = _trapezoid_cost(params, alpha)
    lb, ub = _default_bounds(N, L_bounds, Ldd_max, T_bounds)
    return NlpProblem(
        n_vars=1 + (STATE_DIM + 1) * N,
        cost=lambda z: cost(z, N),
        cost_grad=lambda z: grad(z, N),
        constraints=constraints,
        lb=lb,
        ub=ub,
        N=N,
        params=params,
        initial_guess=guess,
        cost_hess=lambda z: hess(z, N),
    )


def build_jumping_nlp(params: SlipParams, initial_state: SlipState, x_des: float,
                      N: int = 21, L_bounds=(0.5, 0.9), Ldd_max: float = 60.0,
                      T_bounds=(0.1, 2.0), L_liftoff: float | None = None) -> NlpProblem:
    """Jump from standing to apex x_des: apex equality, nonnegative spring
    force along the way, zero spring force at liftoff, squared-actuation cost.

    The leg returns to ``L_liftoff`` (default: the initial length) at
    toe-off. Without this row the minimal-effort optimum rides the leg out
    to full extension and leaves with near-zero velocity; pinning the
    toe-off posture forces the apex to be reached ballistically
    (countermovement then push), which is the hopping behavior the rest of
    the pipeline assumes."""
    initial_state.validate(params)
    if x_des <= initial_state.x:
        raise ValueError("desired apex must be above the initial height")
    if L_liftoff is None:
        L_liftoff = float(initial_state.L)
    y0 = initial_state.as_array()
    mg = params.mass * params.gravity
    g = params.gravity

    def unpack(z):
        return z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM), z[1 + STATE_DIM * N:]

    def initial_condition(z):
        states, _ = unpack(z)
        return states[0] - y0

    def defects(z):
        states, u = unpack(z)
        grid = CollocationGrid(T=float(z[0]), states=states, controls=u)
        return trapezoidal_defects(grid, params)

    def apex(z):
        states, _ = unpack(z)
        xf, xdf = states[-1, 0], states[-1, 1]
        return np.array([xf + xdf**2 / (2.0 * g) - x_des])

    def terminal_force(z):
        states, _ = unpack(z)
        return node_spring_forces(params, states[-1:]) / mg

    def path_force(z):
        states, _ = unpack(z)
        return node_spring_forces(params, states) / mg

    def ic_jac(z):
        J = np.zeros((STATE_DIM, z.size))
        J[:, 1:1 + STATE_DIM] = np.eye(STATE_DIM)
        return J

    def apex_jac(z):
        states, _ = unpack(z)
        J = np.zeros((1, z.size))
        base = 1 + STATE_DIM * (N - 1)
        J[0, base] = 1.0
        J[0, base + 1] = states[-1, 1] / g
        return J

    def terminal_length(z):
        states, _ = unpack(z)
        return np.array([states[-1, 4] - L_liftoff])

    def terminal_length_jac(z):
        J = np.zeros((1, z.size))
        J[0, 1 + STATE_DIM * (N - 1) + 4] = 1.0
        return J

    nd = STATE_DIM * (N - 1)
    cons = [
        NlpConstraint(defects, np.zeros(nd), np.zeros(nd), "defect",
                      jac=lambda z: _defect_jacobian(params, N, z)),
        NlpConstraint(initial_condition, np.zeros(STATE_DIM), np.zeros(STATE_DIM), "boundary",
                      jac=ic_jac),
        NlpConstraint(apex, np.zeros(1), np.zeros(1), "task", jac=apex_jac),
        NlpConstraint(terminal_force, np.zeros(1), np.zeros(1), "boundary",
                      jac=lambda z: _force_row_jacobian(params, N, z, [N - 1], 1.0 / mg)),
        NlpConstraint(terminal_length, np.zeros(1), np.zeros(1), "boundary",
                      jac=terminal_length_jac),
        # keep a small force margin at interior nodes so the continuous plan
        # never unloads the spring mid-stance (which would register as an
        # early liftoff when the plan is simulated); the final node is pinned
        # to zero force by the toe-off equality above
        NlpConstraint(path_force, np.concatenate([np.full(N - 1, 0.05), [0.0]]),
                      np.full(N, INF), "path",
                      jac=lambda z: _force_row_jacobian(params, N, z, np.arange(N), 1.0 / mg)),
    ]
    guess = _jumping_guess(params, initial_state, x_des, N, L_bounds, Ldd_max, T_bounds)
    return _make_problem(params, N, L_bounds, Ldd_max, T_bounds, 0.0, cons, guess)


def _jumping_guess(params, initial_state, x_des, N, L_bounds, Ldd_max, T_bounds):
    """Dynamics-consistent warm start: shoot a countermovement profile
    (retract, then push back through the starting length) through the
    stance dynamics and bisect the crouch duration to hit the apex.

    A static all-nodes-equal guess makes the first linearizations nearly
    singular (the dynamics barely depend on T there) and the SQP crawls; a
    simulated push profile starts it close to the feasible manifold.  The
    quiet hold before the push keeps the total time away from its lower
    bound, where the defects would force the actuation limit.  The symmetric
    crouch-push shape passes the starting length with upward leg speed,
    matching the terminal toe-off-length equality of the jumping problem.
    """
    from .slip import apex_height, liftoff_event, simulate_stance

    # the crouch must stay gentler than gravity or the spring unloads and a
    # false liftoff fires mid-crouch; the push can use the full authority
    amp_down = 0.5 * params.gravity
    amp_up = min(0.7 * Ldd_max, 40.0)
    t_hold = 0.15
    # the crouch depth is amp_down * t1^2 / 2; keep it inside the range
    headroom = max(initial_state.L - L_bounds[0], 1e-3)
    t1_cap = np.sqrt(1.8 * headroom / amp_down)

    def shoot(t1):
        t_push = t1 * (1.0 + 3.0 * amp_down / amp_up)

        def u(t):
            tp = t - t_hold
            if tp < 0.0 or tp >= t1 + t_push:
                return 0.0
            return -amp_down if tp < t1 else amp_up
        t_sim = min(t_hold + t1 + t_push + 0.3, T_bounds[1])
        try:
            tr = simulate_stance(params, initial_state, u, t_sim,
                                 dt=1e-3, event=liftoff_event)
        except ValueError:
            return None, None  # left the fitted leg-length range: push too hard
        final = SlipState.from_array(tr.y[-1], "stance")
        if tr.t[-1] >= t_sim - 1e-9:
            return tr, None  # no liftoff
        return tr, apex_height(params, final)

    lo, hi = 0.0, t1_cap
    tr_best, err_best = None, np.inf
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        tr, apex = shoot(mid)
        if apex is None:
            if tr is None:
                hi = mid  # overran the model range
            else:
                lo = mid  # never lifted off
            continue
        if abs(apex - x_des) < err_best:
            tr_best, err_best = tr, abs(apex - x_des)
        if err_best < 1e-6:
            break
        if apex < x_des:
            lo = mid
        else:
            hi = mid
    if tr_best is None:
        y0 = initial_state.as_array()
        return np.concatenate([[0.5], np.tile(y0, N), np.zeros(N)])
    t_lo = float(tr_best.t[-1])
    T_guess = float(np.clip(t_lo, T_bounds[0], T_bounds[1]))
    times = np.linspace(0.0, t_lo, N)
    states = np.stack([np.interp(times, tr_best.t, tr_best.y[:, k])
                       for k in range(STATE_DIM)], axis=1)
    controls = np.interp(times, tr_best.t, tr_best.L_ddot)
    states[:, 4] = np.clip(states[:, 4], L_bounds[0], L_bounds[1])
    return np.concatenate([[T_guess], states.ravel(), controls])


def build_landing_nlp(params: SlipParams, post_impact_state: SlipState, x_des: float,
                      F_min: float | None = None, s_max: float = 0.07, alpha: float = 10.0,
                      N: int = 21, L_bounds=(0.5, 0.9), Ldd_max: float = 60.0,
                      T_bounds=(0.3, 2.0)) -> NlpProblem:
    """Land from a post-impact downward state to rest at x_des, keeping the
    spring force above F_min and the deflection inside +/- s_max."""
    post_impact_state.validate(params)
    if post_impact_state.x_dot >= 0:
        raise ValueError("post-impact state must be moving downward")
    if F_min is None:
        F_min = 0.2 * params.mass * params.gravity
    if F_min < 0 or s_max <= 0 or alpha < 0:
        raise ValueError("require F_min >= 0, s_max > 0, alpha >= 0")
    y0 = post_impact_state.as_array()
    mg = params.mass * params.gravity

    def unpack(z):
        return z[1:1 + STATE_DIM * N].reshape(N, STATE_DIM), z[1 + STATE_DIM * N:]

    def initial_condition(z):
        states, _ = unpack(z)
        return states[0] - y0

    def defects(z):
        states, u = unpack(z)
        grid = CollocationGrid(T=float(z[0]), states=states, controls=u)
        return trapezoidal_defects(grid, params)

    def terminal(z):
        states, u = unpack(z)
        xf, _, _, sdf, _, Ldf = states[-1]
        F = float(node_spring_forces(params, states[-1:])[0])
        return np.array([xf - x_des, Ldf, sdf, u[-1], (F - mg) / mg])

    def path_force(z):
        states, _ = unpack(z)
        return node_spring_forces(params, states) / mg

    def path_deflection(z):
        states, _ = unpack(z)
        return states[:, 2]

    def ic_jac(z):
        J = np.zeros((STATE_DIM, z.size))
        J[:, 1:1 + STATE_DIM] = np.eye(STATE_DIM)
        return J

    def terminal_jac(z):
        J = np.zeros((5, z.size))
        base = 1 + STATE_DIM * (N - 1)
        J[0, base] = 1.0       # x_f
        J[1, base + 5] = 1.0   # L_dot_f
        J[2, base + 3] = 1.0   # s_dot_f
        J[3, 1 + STATE_DIM * N + N - 1] = 1.0  # u_f
        J[4] = _force_row_jacobian(params, N, z, [N - 1], 1.0 / mg)[0]
        return J

    def deflection_jac(z):
        J = np.zeros((N, z.size))
        J[np.arange(N), 1 + np.arange(N) * STATE_DIM + 2] = 1.0
        return J

    nd = STATE_DIM * (N - 1)
    cons = [
        NlpConstraint(defects, np.zeros(nd), np.zeros(nd), "defect",
                      jac=lambda z: _defect_jacobian(params, N, z)),
        NlpConstraint(initial_condition, np.zeros(STATE_DIM), np.zeros(STATE_DIM), "boundary",
                      jac=ic_jac),
        NlpConstraint(terminal, np.zeros(5), np.zeros(5), "boundary", jac=terminal_jac),
        NlpConstraint(path_force, np.full(N, F_min / mg), np.full(N, INF), "path",
                      jac=lambda z: _force_row_jacobian(params, N, z, np.arange(N), 1.0 / mg)),
        NlpConstraint(path_deflection, np.full(N, -s_max), np.full(N, s_max), "path",
                      jac=deflection_jac),
    ]
    # guess: decelerate to rest at x_des over half a second
    guess_states = np.linspace(y0, np.array([x_des, 0.0, mg / float(params.stiffness_model.stiffness(0.5 * (L_bounds[0] + L_bounds[1]))), 0.0, 0.0, 0.0]), N)
    guess_states[:, 4] = guess_states[:, 0] + guess_states[:, 2]
    guess_states[:, 5] = guess_states[:, 1] + guess_states[:, 3]
    guess = np.concatenate([[0.6], guess_states.ravel(), np.zeros(N)])
    return _make_problem(params, N, L_bounds, Ldd_max, T_bounds, alpha, cons, guess)


class SqpFailure(RuntimeError):
    def __init__(self, message, z, residuals):
        super().__init__(message)
        self.best_point = z
        self.residuals = residuals


@dataclass
class SqpInfo:
    iterations: int
    constraint_violation: float
    stationarity: float
    objective: float


def _stack_constraints(p: NlpProblem, z: np.ndarray):
    vals = [np.atleast_1d(np.asarray(c.fun(z), dtype=float)) for c in p.constraints]
    return vals


def _linearized_rows(p: NlpProblem, z: np.ndarray, vals):
    """Jacobian of the stacked constraints: analytic blocks where provided,
    forward differences otherwise."""
    stacked = np.concatenate(vals) if vals else np.zeros(0)
    m = stacked.size
    J = np.zeros((m, p.n_vars))
    h = p.fd_step
    fd_rows = []
    off = 0
    for c, val in zip(p.constraints, vals):
        k = val.size
        if c.jac is not None:
            J[off:off + k] = np.asarray(c.jac(z), dtype=float)
        else:
            fd_rows.append((c, off, k))
        off += k
    if fd_rows:
        for j in range(p.n_vars):
            zp = z.copy()
            zp[j] += h
            for c, off, k in fd_rows:
                vj = np.atleast_1d(np.asarray(c.fun(zp), dtype=float))
                J[off:off + k, j] = (vj - stacked[off:off + k]) / h
    return stacked, J


def _violation(p: NlpProblem, vals):
    v = 0.0
    for c, val in zip(p.constraints, vals):
        v = max(v, np.maximum(0.0, c.lower - val).max(initial=0.0))
        v = max(v, np.maximum(0.0, val - c.upper).max(initial=0.0))
    return v


def _merit(p: NlpProblem, z, nu):
    vals = _stack_constraints(p, z)
    pen = 0.0
    for c, val in zip(p.constraints, vals):
        pen += np.maximum(0.0, c.lower - val).sum()
        pen += np.maximum(0.0, val - c.upper).sum()
    pen += np.maximum(0.0, p.lb - z).sum() + np.maximum(0.0, z - p.ub).sum()
    return p.cost(z) + nu * pen, vals


def _feasibility_polish(p: NlpProblem, z: np.ndarray, tol: float, iters: int = 10):
    """Newton restoration on the violated constraints: least-norm steps of
    the linearized equalities plus any violated inequality rows, projected
    onto the box.  Leaves the cost essentially untouched near a solution."""
    for _ in range(iters):
        vals = _stack_constraints(p, z)
        if _violation(p, vals) <= tol:
            break
        stacked, J = _linearized_rows(p, z, vals)
        rows, rhs = [], []
        off = 0
        for c, val in zip(p.constraints, vals):
            k = val.size
            for i in range(k):
                lo_v = c.lower[i] - val[i]
                hi_v = val[i] - c.upper[i]
                eq = (c.lower[i] > -INF) and (c.upper[i] < INF) and (c.upper[i] - c.lower[i] < 1e-14)
                if eq or lo_v > 0.0:
                    rows.append(J[off + i])
                    rhs.append(lo_v)
                elif hi_v > 0.0:
                    rows.append(J[off + i])
                    rhs.append(-hi_v)
            off += k
        if not rows:
            break
        d, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
        z_new = np.clip(z + d, p.lb, p.ub)
        if np.abs(z_new - z).max() <= 1e-15:
            break
        z = z_new
    return z


def solve_nlp(p: NlpProblem, z0: np.ndarray | None = None, max_iter: int = 100,
              tol_feas: float = 1e-6, tol_stat: float = 1e-5):
    """SQP with an l1 merit line search; returns (CollocationGrid, SqpInfo)."""
    z = (p.initial_guess if z0 is None else z0).astype(float).copy()
    z = np.clip(z, p.lb, p.ub)
    n = p.n_vars
    B = np.eye(n) * 1.0
    nu = 10.0
    warm = None
    warm_n = None
    grad_L_prev = None
    z_prev = None
    radius = 1.0
    cost_hist = []
    if p.cost_hess is not None:
        # seed the quasi-Newton model with the exact cost Hessian (the cost
        # is an explicit quadrature), floored to positive definite; BFGS
        # updates then fold in the constraint curvature
        H_exact = np.asarray(p.cost_hess(z), dtype=float)
        evals, evecs = np.linalg.eigh(0.5 * (H_exact + H_exact.T))
        B = (evecs * np.maximum(evals, 1e-4)) @ evecs.T
    for it in range(1, max_iter + 1):
        vals = _stack_constraints(p, z)
        stacked, J = _linearized_rows(p, z, vals)
        g = np.asarray(p.cost_grad(z), dtype=float)
        # split into equality and one-sided inequality rows
        eq_rows, eq_rhs, in_rows, in_rhs = [], [], [], []
        off = 0
        for c, val in zip(p.constraints, vals):
            k = val.size
            Jc = J[off:off + k]
            eqmask = (c.lower > -INF) & (c.upper < INF) & (c.upper - c.lower < 1e-14)
            for i in range(k):
                if eqmask[i]:
                    eq_rows.append(Jc[i])
                    eq_rhs.append(c.lower[i] - val[i])
                else:
                    if c.upper[i] < INF:
                        in_rows.append(Jc[i])
                        in_rhs.append(c.upper[i] - val[i])
                    if c.lower[i] > -INF:
                        in_rows.append(-Jc[i])
                        in_rhs.append(val[i] - c.lower[i])
            off += k
        A_eq = np.array(eq_rows) if eq_rows else np.zeros((0, n))
        b_eq = np.array(eq_rhs) if eq_rows else np.zeros(0)
        A_path = np.array(in_rows) if in_rows else np.zeros((0, n))
        b_path = np.array(in_rhs) if in_rows else np.zeros(0)
        d_lo = p.lb - z
        d_hi = p.ub - z
        # composite step: a box-constrained least-squares "normal" step pulls
        # the linearized equalities in, then a tangential QP in their null
        # space optimizes the cost model without undoing that progress
        if A_eq.shape[0]:
            # least-norm solve first: a Tikhonov-regularized QP would damp
            # out the small singular directions and stall once the residual
            # gets small, so regularize only in the box-clipped fallback
            d_ls, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
            d_n = np.clip(d_ls, d_lo, d_hi)
            res_now = np.abs(b_eq).max(initial=0.0)
            res_after = np.abs(A_eq @ d_n - b_eq).max(initial=0.0)
            if res_after > 0.9 * res_now + 1e-12:
                Hn = A_eq.T @ A_eq
                Hn = Hn + 1e-12 * max(1.0, np.abs(Hn).max()) * np.eye(n)
                qp_n = QpProblem(Hn, -A_eq.T @ b_eq,
                                 lower=np.where(p.lb <= -INF, -INF, d_lo),
                                 upper=np.where(p.ub >= INF, INF, d_hi))
                sol_n = solve_qp(qp_n, warm_start=warm_n, max_iter=2000)
                if sol_n.status != "optimal":
                    raise SqpFailure(f"normal step status {sol_n.status}", z,
                                     {"violation": _violation(p, vals)})
                warm_n = sol_n.active_set
                d_n = np.clip(sol_n.x_star, d_lo, d_hi)
            _, Z = _nullspace_split(A_eq, b_eq)
        else:
            d_n = np.zeros(n)
            Z = np.eye(n)
        # full-space rows of the tangential subproblem: path rows, then the
        # finite upper and lower box rows
        fin_up = np.where(p.ub < INF)[0]
        fin_lo = np.where(p.lb > -INF)[0]
        R = np.vstack([A_path,
                       np.eye(n)[fin_up],
                       -np.eye(n)[fin_lo]])
        r_rhs = np.concatenate([b_path, d_hi[fin_up], -d_lo[fin_lo]])
        H_v = Z.T @ B @ Z
        H_v = 0.5 * (H_v + H_v.T)
        H_v = H_v + 1e-10 * max(1.0, np.abs(H_v).max()) * np.eye(H_v.shape[0])
        RZ = R @ Z
        g_v = Z.T @ (g + B @ d_n)
        rhs0 = r_rhs - R @ d_n
        # rows whose gradient lies outside the null space reduce to ~zero
        # rows: the tangential step cannot affect them, so neutralize them
        vacuous = np.linalg.norm(RZ, axis=1) <= 1e-11
        if vacuous.any():
            RZ = RZ.copy()
            RZ[vacuous] = 0.0
            rhs0 = np.where(vacuous, np.maximum(rhs0, 1.0), rhs0)
        # path rows the normal step could not honor get relaxed toward v = 0
        sol = None
        for sigma in (1.0, 0.25, 0.0625, 0.0):
            # sigma = 0 asks violated rows only not to get worse, which is
            # always feasible at v = 0
            rhs = np.where(rhs0 < 0.0, sigma * rhs0, rhs0)
            # trust-region style cap: the null-space basis is orthonormal, so
            # bounding v bounds the tangential move in the original variables
            nv = H_v.shape[0]
            qp = QpProblem(H_v, g_v, ineq_matrix=RZ, ineq_rhs=rhs,
                           lower=np.full(nv, -radius), upper=np.full(nv, radius))
            sol = solve_qp(qp, warm_start=warm, max_iter=5000)
            if sol.status == "optimal":
                break
            sol = None
            warm = None
        if sol is None:
            raise SqpFailure("tangential subproblem infeasible", z,
                             {"violation": _violation(p, vals)})
        warm = sol.active_set
        d = d_n + Z @ sol.x_star
        # multiplier estimate for stationarity / penalty update
        act_rows = [A_eq] if A_eq.shape[0] else []
        # indices past the general rows are the trust-region bounds on v;
        # they are artificial and carry no problem multipliers
        act_gen = [i for i in sol.active_set if i < R.shape[0]]
        if act_gen:
            act_rows.append(R[act_gen])
        lam_norm = 0.0
        grad_L = g.copy()
        if act_rows:
            C = np.vstack(act_rows)
            # loose rcond keeps near-dependent active rows from producing
            # huge multipliers that then inflate the penalty parameter
            mult, *_ = np.linalg.lstsq(C.T, -(g + B @ d), rcond=1e-8)
            lam_norm = np.abs(mult).max(initial=0.0)
            grad_L = g + C.T @ mult
        viol = _violation(p, vals)
        viol = max(viol, np.maximum(0.0, p.lb - z).max(initial=0.0),
                   np.maximum(0.0, z - p.ub).max(initial=0.0))
        stat = np.abs(grad_L).max(initial=0.0)
        if viol <= tol_feas and (stat <= tol_stat or np.abs(d).max() <= 1e-9):
            grid = p.unpack(z)
            return grid, SqpInfo(it, viol, stat, p.cost(z))
        # the squared-actuation cost has long flat valleys (shifting the push
        # in time barely changes it); once the cost stalls near the feasible
        # manifold, polish feasibility and accept the point
        cost_hist.append(p.cost(z))
        if (len(cost_hist) >= 9 and viol <= 100.0 * tol_feas
                and cost_hist[-9] - cost_hist[-1] <= 1e-6 * (1.0 + abs(cost_hist[-1]))):
            z_pol = _feasibility_polish(p, z, 0.1 * tol_feas)
            viol_pol = _violation(p, _stack_constraints(p, z_pol))
            if viol_pol <= tol_feas:
                return p.unpack(z_pol), SqpInfo(it, viol_pol, stat, p.cost(z_pol))
        # raise the penalty when the multipliers demand it, and let it decay
        # once they shrink, but only while feasible: a stale huge nu makes
        # the merit function reject any step that moves the tiny residuals,
        # while decaying under infeasibility invites a limit cycle
        nu_req = 2.0 * lam_norm + 1.0
        if nu_req > nu:
            nu = nu_req
        elif viol <= tol_feas:
            nu = max(nu_req, 0.5 * nu)
        phi0, _ = _merit(p, z, nu)
        # merit model decrease: cost slope minus the predicted reduction of
        # the linearized l1 infeasibility over the full step
        lin_after = np.abs(A_eq @ d - b_eq).sum() if A_eq.shape[0] else 0.0
        lin_after += np.maximum(0.0, A_path @ d - b_path).sum() if A_path.shape[0] else 0.0
        pred_red = max(0.0, _l1_infeasibility(p, vals, z) - lin_after)
        dphi = g @ d - nu * pred_red
        alpha = 1.0
        accepted = False
        z_try = z
        for _ in range(40):
            # projected step: the relaxed subproblem may step through a
            # variable bound, and the model is only valid inside the box
            z_try = np.clip(z + alpha * d, p.lb, p.ub)
            phi, _ = _merit(p, z_try, nu)
            if phi <= phi0 + 1e-4 * alpha * min(dphi, 0.0) + 1e-12 * abs(phi0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            raise SqpFailure("line search failed", z,
                             {"violation": viol, "stationarity": stat})
        # adapt the tangential trust radius to how much of the step survived
        # the merit line search
        if alpha >= 1.0 - 1e-12:
            radius = min(2.0 * radius, 10.0)
        elif alpha < 0.25:
            radius = max(0.25 * radius, 1e-3)
        # damped BFGS on the Lagrangian gradient
        if z_prev is not None and grad_L_prev is not None:
            s_vec = z - z_prev
            y_vec = grad_L - grad_L_prev
            sBs = s_vec @ B @ s_vec
            sy = s_vec @ y_vec
            if sBs > 1e-14 and np.linalg.norm(s_vec) > 1e-10 * (1.0 + np.linalg.norm(z)):
                theta = 1.0 if sy >= 0.2 * sBs else (0.8 * sBs) / (sBs - sy)
                r = theta * y_vec + (1.0 - theta) * (B @ s_vec)
                B = B - np.outer(B @ s_vec, B @ s_vec) / sBs + np.outer(r, r) / (s_vec @ r)
                B = 0.5 * (B + B.T)
                # keep the model Hessian well conditioned; a blown-up B makes
                # the subproblem KKT systems numerically singular
                if np.abs(B).max() > 1e6:
                    B = np.eye(n)
        z_prev = z.copy()
        grad_L_prev = grad_L.copy()
        z = z_try
    # budget exhausted: a feasible point with a stalled cost is still a
    # usable plan, so try to hand one back before giving up
    z_pol = _feasibility_polish(p, z, 0.1 * tol_feas)
    vals = _stack_constraints(p, z_pol)
    viol_pol = _violation(p, vals)
    if viol_pol <= tol_feas:
        return p.unpack(z_pol), SqpInfo(max_iter, viol_pol, stat, p.cost(z_pol))
    raise SqpFailure("maximum SQP iterations exceeded", z,
                     {"violation": viol_pol})


def _l1_infeasibility(p: NlpProblem, vals, z):
    pen = 0.0
    for c, val in zip(p.constraints, vals):
        pen += np.maximum(0.0, c.lower - val).sum()
        pen += np.maximum(0.0, val - c.upper).sum()
    pen += np.maximum(0.0, p.lb - z).sum() + np.maximum(0.0, z - p.ub).sum()
    return pen


def _nullspace_split(A_eq: np.ndarray, b_eq: np.ndarray):
    """Particular solution and orthonormal null-space basis of A_eq d = b_eq."""
    if A_eq.shape[0] == 0:
        return np.zeros(A_eq.shape[1]), np.eye(A_eq.shape[1])
    d_p, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
    U, S, Vt = np.linalg.svd(A_eq)
    tol = max(A_eq.shape) * np.finfo(float).eps * (S[0] if S.size else 1.0)
    rank = int(np.sum(S > tol))
    return d_p, Vt[rank:].T


@dataclass
class LegLengthTrajectory:
    """C1 cubic-Hermite leg-length reference; holds the terminal value past T."""

    breakpoints: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray
    _spline: CubicHermiteSpline = field(init=False, repr=False)

    def __post_init__(self):
        self._spline = CubicHermiteSpline(self.breakpoints, self.values, self.derivatives)

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    def L(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where(t > self.T, self.values[-1], self._spline(np.clip(t, 0.0, self.T)))
        return float(out) if out.ndim == 0 else out

    def L_dot(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where(t > self.T, 0.0, self._spline(np.clip(t, 0.0, self.T), 1))
        return float(out) if out.ndim == 0 else out

    def L_ddot(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where(t > self.T, 0.0, self._spline(np.clip(t, 0.0, self.T), 2))
        return float(out) if out.ndim == 0 else out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "L", "L_dot"])
            for t, v, dv in zip(self.breakpoints, self.values, self.derivatives):
                w.writerow([f"{t:.9f}", f"{v:.9f}", f"{dv:.9f}"])

    @classmethod
    def from_csv(cls, path):
        rows = np.loadtxt(path, delimiter=",", skiprows=1)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2])


def extract_trajectory(grid: CollocationGrid) -> LegLengthTrajectory:
    """Interpolate the solved nodal (L, L_dot) with a cubic Hermite spline."""
    return LegLengthTrajectory(breakpoints=grid.times.copy(),
                               values=grid.states[:, 4].copy(),
                               derivatives=grid.states[:, 5].copy())


def export_grid_csv(grid: CollocationGrid, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "x_dot", "s", "s_dot", "L", "L_dot", "L_ddot"])
        for t, row, u in zip(grid.times, grid.states, grid.controls):
            w.writerow([f"{t:.9f}", *[f"{v:.9f}" for v in row], f"{u:.9f}"])
