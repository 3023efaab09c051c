"""Dense convex QP and Lyapunov/Riccati equation solvers.

The QP solver is a primal active-set method for strictly convex problems,
warm-startable with a working set.  Feasible starting points are found with a
big-M elastic phase, which also produces a Farkas (separating hyperplane)
certificate when the constraints are inconsistent.  The continuous algebraic
Riccati equation is solved by Newton-Kleinman iteration, with the Lyapunov
equation as the inner step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

INF = 1e19  # sentinel for +/- infinity in bounds


class QpInfeasibleError(RuntimeError):
    """Raised internally when the QP constraints are inconsistent."""


@dataclass
class QpProblem:
    """min 1/2 x'Hx + c'x  s.t.  A_in x <= b_in,  A_eq x = b_eq,  lb <= x <= ub."""

    hessian: np.ndarray
    linear_cost: np.ndarray
    ineq_matrix: np.ndarray | None = None
    ineq_rhs: np.ndarray | None = None
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.hessian, dtype=float)
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError("hessian must be square")
        scale = max(1.0, float(np.abs(H).max()))
        if np.abs(H - H.T).max() > 1e-10 * scale:
            raise ValueError("hessian is not symmetric")
        w = np.linalg.eigvalsh(0.5 * (H + H.T))
        if w.min() < -1e-8 * scale:
            raise ValueError(f"hessian is not positive semidefinite (min eig {w.min():.3e})")
        self.hessian = 0.5 * (H + H.T)
        self.linear_cost = np.asarray(self.linear_cost, dtype=float).reshape(n)
        if self.ineq_matrix is None:
            self.ineq_matrix = np.zeros((0, n))
            self.ineq_rhs = np.zeros(0)
        else:
            self.ineq_matrix = np.atleast_2d(np.asarray(self.ineq_matrix, dtype=float))
            self.ineq_rhs = np.asarray(self.ineq_rhs, dtype=float).reshape(-1)
        if self.eq_matrix is None:
            self.eq_matrix = np.zeros((0, n))
            self.eq_rhs = np.zeros(0)
        else:
            self.eq_matrix = np.atleast_2d(np.asarray(self.eq_matrix, dtype=float))
            self.eq_rhs = np.asarray(self.eq_rhs, dtype=float).reshape(-1)
        self.lower = np.full(n, -INF) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(n)
        self.upper = np.full(n, INF) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(n)

    @property
    def n(self) -> int:
        return self.hessian.shape[0]


@dataclass
class QpSolution:
    x_star: np.ndarray
    objective: float
    active_set: list[int]
    status: str  # optimal | infeasible | max_iter
    iterations: int = 0
    # Farkas certificate (y, nu): y >= 0, A_in' y + A_eq' nu ~= 0, b_in' y + b_eq' nu < 0
    certificate: tuple[np.ndarray, np.ndarray] | None = None


def _stacked_inequalities(p: QpProblem):
    """All inequality rows a.x <= b: general rows, then -x <= -lb, then x <= ub.

    Bound rows are emitted only for finite bounds; the returned index arrays
    map stacked rows back to the original bound indices.
    """
    n = p.n
    rows = [p.ineq_matrix]
    rhs = [p.ineq_rhs]
    lo_idx = np.where(p.lower > -INF)[0]
    up_idx = np.where(p.upper < INF)[0]
    if lo_idx.size:
        L = np.zeros((lo_idx.size, n))
        L[np.arange(lo_idx.size), lo_idx] = -1.0
        rows.append(L)
        rhs.append(-p.lower[lo_idx])
    if up_idx.size:
        U = np.zeros((up_idx.size, n))
        U[np.arange(up_idx.size), up_idx] = 1.0
        rows.append(U)
        rhs.append(p.upper[up_idx])
    return np.vstack(rows), np.concatenate(rhs)


def _regularized_hessian(H: np.ndarray) -> np.ndarray:
    """Return H with just enough +reg*I added for a Cholesky factorization."""
    scale = max(1.0, float(np.abs(H).max()))
    reg = 0.0
    for _ in range(10):
        try:
            sla.cholesky(H + reg * np.eye(H.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            reg = 1e-9 * scale if reg == 0.0 else reg * 10.0
            continue
        return H + reg * np.eye(H.shape[0])
    raise ValueError("hessian could not be regularized to positive definite")


def _independent_rows(C: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal linearly independent row subset (stable order)."""
    if C.shape[0] == 0:
        return np.zeros(0, dtype=int)
    keep = []
    basis = np.zeros((0, C.shape[1]))
    for i, row in enumerate(C):
        r = row.copy()
        if basis.shape[0]:
            r = r - basis.T @ (basis @ r)
        nrm = np.linalg.norm(r)
        if nrm > tol * max(1.0, np.linalg.norm(row)):
            keep.append(i)
            basis = np.vstack([basis, r / nrm])
    return np.array(keep, dtype=int)


def _eqp_step(H, g, C):
    """Solve min 1/2 d'Hd + g'd  s.t. C d = 0; return (d, multipliers)."""
    n = H.shape[0]
    m = C.shape[0]
    if m == 0:
        return np.linalg.solve(H, -g), np.zeros(0)
    K = np.block([[H, C.T], [C, np.zeros((m, m))]])
    rhs = np.concatenate([-g, np.zeros(m)])
    try:
        sol = sla.solve(K, rhs, assume_a="sym")
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _primal_active_set(H, c, A, b, E, f, x0, W0, max_iter):
    """Primal active-set loop from a feasible x0.

    Returns (x, working_set, iterations).  Bland-style lowest-index
    tie-breaking makes entering/leaving choices deterministic.
    """
    x = x0.copy()
    b = b.copy()
    n_eq = E.shape[0]
    stall = 0
    # working set: active + independent together with the equality rows
    act = np.where(A @ x - b > -1e-9 * (1.0 + np.abs(b)))[0]
    cand = [i for i in W0 if i in set(act.tolist())] + [i for i in act.tolist() if i not in set(W0)]
    W: list[int] = []
    for i in cand:
        C = np.vstack([E, A[W + [i]]])
        if _independent_rows(C).size == C.shape[0]:
            W.append(i)
    W.sort()
    for it in range(1, max_iter + 1):
        C = np.vstack([E, A[W]]) if (n_eq or W) else np.zeros((0, len(x)))
        g = H @ x + c
        d, mult = _eqp_step(H, g, C)
        # converged when the step is tiny or its predicted objective decrease
        # is negligible (ill-conditioned KKT systems leave a noise floor in d
        # well above any absolute step tolerance)
        pred = -(g @ d + 0.5 * d @ (H @ d))
        obj_scale = 1.0 + abs(0.5 * x @ (H @ x) + c @ x)
        if (np.linalg.norm(d) <= 1e-11 * (1.0 + np.linalg.norm(x))
                or pred <= 1e-13 * obj_scale):
            lam = mult[n_eq:]
            neg = np.where(lam < -1e-9)[0]
            if neg.size == 0:
                return x, W, it
            # drop the lowest-index constraint with a negative multiplier
            j = int(min(neg, key=lambda k: W[k]))
            W.pop(j)
        else:
            Ad = A @ d
            slack = b - A @ x
            alpha = 1.0
            blocking = -1
            mask = np.ones(len(b), dtype=bool)
            mask[W] = False
            for i in np.where(mask & (Ad > 1e-12))[0]:
                ai = max(0.0, slack[i]) / Ad[i]
                if ai < alpha - 1e-14 or (abs(ai - alpha) <= 1e-14 and (blocking < 0 or i < blocking)):
                    if ai < alpha - 1e-14:
                        alpha = ai
                        blocking = int(i)
                    elif blocking >= 0 and i < blocking:
                        blocking = int(i)
            x = x + alpha * d
            if blocking >= 0 and alpha < 1.0 - 1e-14:
                W.append(blocking)
                W.sort()
            # anti-cycling: degenerate vertices can loop on zero-length
            # steps; a tiny deterministic relaxation of the idle rows breaks
            # the tie without leaving the audit tolerance
            stall = stall + 1 if alpha <= 1e-12 else 0
            if stall > 50:
                rng = np.random.default_rng(len(b) + it)
                idle = np.ones(len(b), dtype=bool)
                idle[W] = False
                b[idle] += 1e-9 * (1.0 + np.abs(b[idle])) * rng.random(int(idle.sum()))
                stall = 0
    return x, W, max_iter


def _feasible_start(p: QpProblem, A, b, max_iter):
    """Find a feasible point via least-norm equalities plus an elastic phase.

    The elastic phase minimizes the worst violation s (with a tiny Tikhonov
    term to keep the Hessian definite) subject to A x - s <= b, E x = f.
    Raises QpInfeasibleError carrying a Farkas certificate when inconsistent.
    """
    n = p.n
    E, f = p.eq_matrix, p.eq_rhs
    if E.shape[0]:
        x_eq, *_ = np.linalg.lstsq(E, f, rcond=None)
        if np.linalg.norm(E @ x_eq - f) > 1e-7 * (1.0 + np.linalg.norm(f)):
            # inconsistent equalities: certificate from the residual direction
            r = E @ x_eq - f
            nu = -r / np.linalg.norm(r)
            raise QpInfeasibleError((np.zeros(A.shape[0]), nu))
    else:
        x_eq = np.zeros(n)
    tol_rows = 1e-8 * (1.0 + np.abs(b))
    viol = A @ x_eq - b
    if viol.size == 0 or (viol - tol_rows).max() <= 0.0:
        return x_eq
    eps = 1e-8 * max(1.0, np.abs(A).max())
    Ha = eps * np.eye(n + 1)
    ca = np.zeros(n + 1)
    ca[n] = 1.0
    Aa = np.hstack([A, -np.ones((A.shape[0], 1))])
    Aa = np.vstack([Aa, np.concatenate([np.zeros(n), [-1.0]])])  # s >= 0
    ba = np.concatenate([b, [0.0]])
    Ea = np.hstack([E, np.zeros((E.shape[0], 1))])
    y0 = np.concatenate([x_eq, [viol.max() * 1.01 + 1.0]])
    y, W, _ = _primal_active_set(Ha, ca, Aa, ba, Ea, f, y0, [],
                                 max(max_iter, 10 * (A.shape[0] + 1)))
    x_cand = y[:n]
    if (A @ x_cand - b - tol_rows).max() <= 0.0:
        return x_cand
    # infeasible: extract Farkas certificate from the elastic multipliers
    C = np.vstack([Ea, Aa[W]])
    g = Ha @ y + ca
    _, mult = _eqp_step(Ha, g, C)
    nu = mult[: E.shape[0]]
    lam = np.zeros(A.shape[0] + 1)
    lam[W] = np.maximum(mult[E.shape[0] :], 0.0)
    lam = lam[:-1]
    nrm = np.linalg.norm(lam) + np.linalg.norm(nu)
    if nrm > 0:
        lam, nu = lam / nrm, nu / nrm
    raise QpInfeasibleError((lam, nu))


def solve_qp(p: QpProblem, warm_start: list[int] | None = None, max_iter: int = 500) -> QpSolution:
    """Solve a convex QP by the primal active-set method.

    ``warm_start`` is a working set (indices into the stacked inequality list:
    general rows first, then finite lower-bound rows, then finite upper-bound
    rows, as produced by a previous solution's ``active_set``).
    """
    A, b = _stacked_inequalities(p)
    H = _regularized_hessian(p.hessian)
    c = p.linear_cost
    E, f = p.eq_matrix, p.eq_rhs
    if E.shape[0]:
        keep2 = _independent_rows(E)
        if keep2.size < E.shape[0]:
            # redundant or inconsistent rows: keep an independent subset and
            # verify the dropped rows are implied
            Er, fr = E[keep2], f[keep2]
            x_ls, *_ = np.linalg.lstsq(E, f, rcond=None)
            if np.linalg.norm(E @ x_ls - f) > 1e-7 * (1.0 + np.linalg.norm(f)):
                return QpSolution(x_ls, np.inf, [], "infeasible",
                                  certificate=(np.zeros(A.shape[0]), np.zeros(E.shape[0])))
            E, f = Er, fr
    x_ws = None
    if warm_start is not None:
        W0 = [i for i in warm_start if 0 <= i < A.shape[0]]
        C = np.vstack([E, A[W0]])
        keep = _independent_rows(C)
        C = C[keep]
        rhs = np.concatenate([f, b[W0]])[keep]
        # equality-constrained solve on the warm working set
        if C.shape[0] == 0:
            x_try = np.linalg.solve(H, -c)
        else:
            K = np.block([[H, C.T], [C, np.zeros((C.shape[0], C.shape[0]))]])
            r = np.concatenate([-c, rhs])
            try:
                x_try = sla.solve(K, r, assume_a="sym")[: p.n]
            except np.linalg.LinAlgError:
                x_try = None
        if x_try is not None:
            ok_in = A.shape[0] == 0 or (A @ x_try - b - 1e-9 * (1.0 + np.abs(b))).max() <= 0.0
            ok_eq = E.shape[0] == 0 or (np.abs(E @ x_try - f) - 1e-9 * (1.0 + np.abs(f))).max() <= 0.0
            if ok_in and ok_eq:
                x_ws = (x_try, W0)
    try:
        if x_ws is not None:
            x0, W0 = x_ws
        else:
            x0, W0 = _feasible_start(p, A, b, max_iter), []
    except QpInfeasibleError as exc:
        cert = exc.args[0]
        return QpSolution(np.full(p.n, np.nan), np.inf, [], "infeasible", certificate=cert)
    x, W, iters = _primal_active_set(H, c, A, b, E, f, x0, W0, max_iter)
    obj = 0.5 * x @ p.hessian @ x + c @ x
    # audit the returned point; numerical trouble degrades the status
    feas_in = A.shape[0] == 0 or (A @ x - b - 1e-7 * (1.0 + np.abs(b))).max() <= 0.0
    feas_eq = E.shape[0] == 0 or (np.abs(E @ x - f) - 1e-7 * (1.0 + np.abs(f))).max() <= 0.0
    status = "optimal" if iters < max_iter and feas_in and feas_eq else "max_iter"
    return QpSolution(x, float(obj), sorted(W), status, iterations=iters)


def kkt_residuals(p: QpProblem, sol: QpSolution) -> dict[str, float]:
    """Max-norm KKT residuals (stationarity, feasibility, complementarity)."""
    x = sol.x_star
    A, b = _stacked_inequalities(p)
    E, f = p.eq_matrix, p.eq_rhs
    g = p.hessian @ x + p.linear_cost
    C = np.vstack([E, A[sol.active_set]])
    if C.shape[0]:
        mult, *_ = np.linalg.lstsq(C.T, -g, rcond=None)
        nu, lam_act = mult[: E.shape[0]], mult[E.shape[0] :]
    else:
        nu, lam_act = np.zeros(0), np.zeros(0)
    lam = np.zeros(A.shape[0])
    lam[sol.active_set] = lam_act
    stat = np.abs(g + E.T @ nu + A.T @ lam).max(initial=0.0)
    p_in = (A @ x - b).max(initial=0.0) if A.shape[0] else 0.0
    p_eq = np.abs(E @ x - f).max(initial=0.0) if E.shape[0] else 0.0
    dual = max(0.0, -lam.min(initial=0.0))
    comp = np.abs(lam * (A @ x - b)).max(initial=0.0) if A.shape[0] else 0.0
    return {
        "stationarity": float(stat),
        "primal_ineq": float(max(0.0, p_in)),
        "primal_eq": float(p_eq),
        "dual": float(dual),
        "complementarity": float(comp),
    }


def solve_ctle(F: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve the continuous Lyapunov equation F'P + PF + Q = 0 for P > 0.

    F must be Hurwitz and Q symmetric positive definite.
    """
    F = np.asarray(F, dtype=float)
    Q = np.asarray(Q, dtype=float)
    eigs = np.linalg.eigvals(F)
    worst = eigs[np.argmax(eigs.real)]
    if worst.real >= 0:
        raise ValueError(f"F is not Hurwitz: eigenvalue {worst} has nonnegative real part")
    P = sla.solve_continuous_lyapunov(F.T, -Q)
    P = 0.5 * (P + P.T)
    qmax = np.abs(Q).max()
    for _ in range(3):
        R = F.T @ P + P @ F + Q
        if np.abs(R).max() <= 1e-9 * qmax:
            break
        dP = sla.solve_continuous_lyapunov(F.T, -R)
        P = 0.5 * ((P + dP) + (P + dP).T)
    R = F.T @ P + P @ F + Q
    if np.abs(R).max() > 1e-8 * qmax:
        raise RuntimeError(f"Lyapunov residual {np.abs(R).max():.3e} exceeds tolerance")
    return P


def _stabilizing_gain(F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gain K with F - GK Hurwitz, via eigenvalue-shifted Lyapunov (Bass)."""
    k = F.shape[0]
    eigs = np.linalg.eigvals(F)
    if eigs.real.max() < 0:
        return np.zeros((G.shape[1], k))
    beta = 2.0 * max(0.0, eigs.real.max()) + 0.5
    As = -(F + beta * np.eye(k))
    Z = sla.solve_continuous_lyapunov(As, -2.0 * G @ G.T)
    Z = 0.5 * (Z + Z.T)
    try:
        K = G.T @ np.linalg.solve(Z, np.eye(k))
    except np.linalg.LinAlgError:
        raise ValueError("(F, G) does not appear to be stabilizable (singular Gramian)")
    cl = np.linalg.eigvals(F - G @ K)
    if cl.real.max() >= 0:
        raise ValueError("(F, G) does not appear to be stabilizable")
    return K


def solve_care(F: np.ndarray, G: np.ndarray, Q: np.ndarray,
               max_iter: int = 60, tol: float = 1e-12) -> np.ndarray:
    """Solve F'P + PF - PGG'P + Q = 0 by Newton-Kleinman iteration."""
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    Q = np.asarray(Q, dtype=float)
    qmax = np.abs(Q).max()
    K = _stabilizing_gain(F, G)
    P = None
    for _ in range(max_iter):
        Fk = F - G @ K
        P = solve_ctle(Fk, Q + K.T @ K)
        K_next = G.T @ P
        if np.abs(K_next - K).max() <= tol * max(1.0, np.abs(K).max()):
            K = K_next
            break
        K = K_next
    R = F.T @ P + P @ F - P @ G @ G.T @ P + Q
    if np.abs(R).max() > 1e-8 * qmax:
        raise RuntimeError(f"CARE iteration did not converge: residual {np.abs(R).max():.3e}")
    return 0.5 * (P + P.T)
