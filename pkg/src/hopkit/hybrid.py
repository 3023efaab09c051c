"""Multi-domain hopping executive: plan, track, switch, land.

A hop traverses three domains: stance push-off (Jumping), ballistic Flight,
and touchdown absorption (Landing). Each domain runs the Lyapunov-constrained
whole-body controller at a fixed tick against domain-specific outputs.
Domain exits are located by bisecting the guard function inside the
integration step; the Jumping to Flight reset is the identity and the Flight
to Landing reset is the plastic impact map. The landing leg-length reference
is re-planned at touchdown from the post-impact state mapped onto the
reduced spring-mass model.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import biped as bp
from .clf import (ClfParams, DomainController, flight_outputs,
                  jumping_outputs, landing_outputs)
from .collocation import (build_jumping_nlp, build_landing_nlp,
                          extract_trajectory, solve_nlp)
from .slip import SlipParams, SlipState

ETA_MAX = 12       # widest output-error vector over the three domains


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DomainSpec:
    name: str
    mode: str                 # contact mode while in the domain
    guard: str | None         # guard function key; None = no exit guard
    next_domain: str | None
    reset: str | None         # "identity" or "impact"


@dataclass(frozen=True)
class HybridSchedule:
    domains: tuple[DomainSpec, ...]

    def spec(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)


HOP_SCHEDULE = HybridSchedule(domains=(
    DomainSpec("jumping", "both_feet_flat", "grf", "flight", "identity"),
    DomainSpec("flight", "airborne", "foot_height", "landing", "impact"),
    DomainSpec("landing", "both_feet_flat", None, None, None),
))


def guard_eval(domain: str, model, state, u) -> float:
    """Signed guard value; positive strictly inside the domain.

    jumping: total vertical contact force (liftoff when it reaches zero);
    flight: lowest foot height (touchdown when it reaches zero while
    descending; the descent condition is checked by the caller).
    """
    if domain == "jumping":
        grf = bp.ground_reaction_force(model, state, u)
        return float(grf[0, 1] + grf[1, 1])
    if domain == "flight":
        zs = [bp.foot_point(model, state, leg)[0][1] for leg in ("L", "R")]
        return float(min(zs))
    raise ValueError(f"domain {domain!r} has no guard")


def apply_reset(edge: str, model, state) -> bp.RobotState:
    """State map across an edge: 'identity' or plastic 'impact'."""
    if edge == "identity":
        return state.copy()
    if edge == "impact":
        qd_post = bp.impact_map(model, state, "both_feet_flat")
        return bp.RobotState(state.q.copy(), qd_post)
    raise ValueError(f"unknown reset {edge!r}")


# ---------------------------------------------------------------------------
# trace


@dataclass
class HopEvent:
    name: str
    t: float
    state_pre: bp.RobotState
    state_post: bp.RobotState


@dataclass
class HopTrace:
    """Tick-level record of one hybrid execution plus the event log."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    domain: list = field(default_factory=list)
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, bp.N_Q)))
    qd: np.ndarray = field(default_factory=lambda: np.zeros((0, bp.N_Q)))
    u: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    F_h: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    eta: np.ndarray = field(default_factory=lambda: np.zeros((0, ETA_MAX)))
    V: np.ndarray = field(default_factory=lambda: np.zeros(0))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    H_pitch: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kinetic: np.ndarray = field(default_factory=lambda: np.zeros(0))
    potential: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    solve_us: np.ndarray = field(default_factory=lambda: np.zeros(0))
    events: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    # -- construction -------------------------------------------------------

    _rows: list = field(default_factory=list, repr=False)

    def append_tick(self, t, domain, state, u, F_h, eta, V, delta, H_pitch,
                    kinetic, potential, iterations, solve_us):
        fh = np.full(6, np.nan)
        fh[:F_h.size] = F_h
        et = np.full(ETA_MAX, np.nan)
        et[:eta.size] = eta
        self._rows.append((t, domain, state.q.copy(), state.qd.copy(),
                           np.asarray(u, float).copy(), fh, et, V, delta,
                           H_pitch, kinetic, potential, iterations, solve_us))

    def finalize(self):
        if not self._rows:
            return self
        cols = list(zip(*self._rows))
        self.t = np.array(cols[0])
        self.domain = list(cols[1])
        self.q = np.stack(cols[2])
        self.qd = np.stack(cols[3])
        self.u = np.stack(cols[4])
        self.F_h = np.stack(cols[5])
        self.eta = np.stack(cols[6])
        self.V = np.array(cols[7])
        self.delta = np.array(cols[8])
        self.H_pitch = np.array(cols[9])
        self.kinetic = np.array(cols[10])
        self.potential = np.array(cols[11])
        self.iterations = np.array(cols[12], dtype=int)
        self.solve_us = np.array(cols[13])
        self._rows = []
        return self

    # -- persistence --------------------------------------------------------

    def to_bundle(self, outdir):
        """Write ticks.csv, events.csv and metadata.txt into ``outdir``."""
        import os
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "ticks.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "domain"]
                       + [f"q{i}" for i in range(bp.N_Q)]
                       + [f"qd{i}" for i in range(bp.N_Q)]
                       + [f"u{i}" for i in range(6)]
                       + [f"fh{i}" for i in range(6)]
                       + [f"eta{i}" for i in range(ETA_MAX)]
                       + ["V", "delta", "H_pitch", "kinetic", "potential",
                          "iterations", "solve_us"])
            for k in range(self.t.size):
                w.writerow([f"{self.t[k]:.9f}", self.domain[k]]
                           + [f"{v:.12g}" for v in self.q[k]]
                           + [f"{v:.12g}" for v in self.qd[k]]
                           + [f"{v:.12g}" for v in self.u[k]]
                           + [f"{v:.12g}" for v in self.F_h[k]]
                           + [f"{v:.12g}" for v in self.eta[k]]
                           + [f"{self.V[k]:.12g}", f"{self.delta[k]:.12g}",
                              f"{self.H_pitch[k]:.12g}",
                              f"{self.kinetic[k]:.12g}",
                              f"{self.potential[k]:.12g}",
                              str(self.iterations[k]),
                              f"{self.solve_us[k]:.3f}"])
        with open(os.path.join(outdir, "events.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "t"]
                       + [f"pre_q{i}" for i in range(bp.N_Q)]
                       + [f"pre_qd{i}" for i in range(bp.N_Q)]
                       + [f"post_q{i}" for i in range(bp.N_Q)]
                       + [f"post_qd{i}" for i in range(bp.N_Q)])
            for e in self.events:
                w.writerow([e.name, f"{e.t:.9f}"]
                           + [f"{v:.12g}" for v in e.state_pre.q]
                           + [f"{v:.12g}" for v in e.state_pre.qd]
                           + [f"{v:.12g}" for v in e.state_post.q]
                           + [f"{v:.12g}" for v in e.state_post.qd])
        with open(os.path.join(outdir, "metadata.txt"), "w") as fh:
            for k in sorted(self.metadata):
                fh.write(f"{k} = {self.metadata[k]}\n")

    @classmethod
    def from_bundle(cls, outdir):
        import os
        tr = cls()
        rows = []
        with open(os.path.join(outdir, "ticks.csv"), newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            for line in r:
                rows.append(line)
        idx = {name: i for i, name in enumerate(header)}
        n = len(rows)
        tr.t = np.array([float(x[idx["t"]]) for x in rows])
        tr.domain = [x[idx["domain"]] for x in rows]

        def block(prefix, count):
            out = np.zeros((n, count))
            for i in range(count):
                j = idx[f"{prefix}{i}"]
                out[:, i] = [float(x[j]) for x in rows]
            return out

        tr.q = block("q", bp.N_Q)
        tr.qd = block("qd", bp.N_Q)
        tr.u = block("u", 6)
        tr.F_h = block("fh", 6)
        tr.eta = block("eta", ETA_MAX)
        for name in ("V", "delta", "H_pitch", "kinetic", "potential",
                     "solve_us"):
            setattr(tr, name,
                    np.array([float(x[idx[name]]) for x in rows]))
        tr.iterations = np.array([int(x[idx["iterations"]]) for x in rows])
        with open(os.path.join(outdir, "events.csv"), newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for line in r:
                vals = [float(v) for v in line[2:]]
                tr.events.append(HopEvent(
                    line[0], float(line[1]),
                    bp.RobotState(np.array(vals[:11]), np.array(vals[11:22])),
                    bp.RobotState(np.array(vals[22:33]),
                                  np.array(vals[33:44]))))
        meta_path = os.path.join(outdir, "metadata.txt")
        with open(meta_path) as fh:
            for line in fh:
                if "=" not in line:
                    continue
                k, v = line.split("=", 1)
                k, v = k.strip(), v.strip()
                try:
                    tr.metadata[k] = float(v)
                except ValueError:
                    tr.metadata[k] = v
        return tr


class GuardTimeout(RuntimeError):
    """A guard failed to fire within the domain time budget."""

    def __init__(self, message, trace: HopTrace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# configuration and the reduced-model bridges


@dataclass
class HopConfig:
    L0: float = 0.8                 # standing virtual leg length
    clearance: float = 0.178        # apex rise over reduced-model standing
    n_jump_nodes: int = 21
    n_land_nodes: int = 21
    rest_speed: float = 1e-3        # ||qd|| threshold of the rest criterion
    rest_hold: float = 0.2          # seconds the threshold must hold
    domain_timeout: float = 5.0     # simulated seconds before a guard error
    event_tol: float = 1e-8         # bisection window for event times

    def __post_init__(self):
        if self.L0 <= 0 or self.rest_hold < 0 or self.rest_speed <= 0:
            raise ValueError("invalid hop configuration")
        if self.domain_timeout <= 0 or self.event_tol <= 0:
            raise ValueError("invalid hop configuration")


def slip_standing_state(slip_params: SlipParams, L0: float) -> SlipState:
    """Static reduced-model state at leg length L0."""
    s = slip_params.mass * slip_params.gravity \
        / float(slip_params.stiffness_model.stiffness(L0))
    return SlipState(x=L0 - s, x_dot=0.0, s=s, s_dot=0.0, L=L0, L_dot=0.0)


def touchdown_slip_state(model, slip_params: SlipParams,
                         state: bp.RobotState) -> SlipState:
    """Map the post-impact full-model state onto the reduced model.

    Leg length and rate come from the virtual legs, the spring compression
    from the measured spring-joint deflections converted to an axial force
    through the identified stiffness, and the vertical rate from the COM.
    The reduced height is then L - s by the model's stance constraint.
    """
    LL, LdL, _ = bp.virtual_leg(model, state, "L")
    LR, LdR, _ = bp.virtual_leg(model, state, "R")
    # the flight pose holds the (near fully extended) liftoff leg length,
    # which can graze the fitted validity range; plan from just inside it
    lo, hi = slip_params.stiffness_model.L_range
    L = float(np.clip(0.5 * (LL + LR), lo + 1e-9, hi - 1e-9))
    Ld = 0.5 * (LdL + LdR)
    k = model.params.k_shin
    F_axial = 0.0
    p = model.params
    for leg in ("L", "R"):
        ih, ik, isp, _ = bp.LEG_IDX[leg]
        q = state.q
        # moment arm of the spring joint about the true hip-ankle axis
        a1 = q[2] + q[ih]
        a2 = a1 + q[ik] + q[isp]
        w1 = bp._link(a1, p.thigh_length)
        w2 = bp._link(a2, p.shin_length)
        d = w1 + w2
        arm = float((d / np.linalg.norm(d)) @ bp._perp(w2))
        F_axial += abs(k * q[isp] / arm)
    K = float(slip_params.stiffness_model.stiffness(L))
    s = F_axial / K
    v_com = bp.com_velocity(model, state)
    x_dot = float(v_com[1])
    return SlipState(x=L - s, x_dot=x_dot, s=s, s_dot=Ld - x_dot,
                     L=L, L_dot=Ld)


# ---------------------------------------------------------------------------
# the executive


def _bisect_event(model, state0, u, dt, mode, guard_fn, tol):
    """Find tau in (0, dt] where the guard crosses zero; the guard is
    positive at tau=0 and non-positive at tau=dt."""
    lo, hi = 0.0, dt
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        st = bp.integrate_step(model, state0, u, mid, mode)
        if guard_fn(st) > 0.0:
            lo = mid
        else:
            hi = mid
    return hi, bp.integrate_step(model, state0, u, hi, mode)


def _record(trace, t, name, state, u, tick, model):
    M = bp.mass_matrix(model, state.q)
    ke = float(0.5 * state.qd @ M @ state.qd)
    pe = bp.total_energy(model, state) - ke
    Hp = bp.pitch_momentum_terms(model, state)[0]
    trace.append_tick(t, name, state, u, tick.F_h, tick.eta, tick.V,
                      tick.delta, Hp, ke, pe, tick.iterations, tick.solve_us)


def _run_domain(model, ctrl, state, t0, spec: DomainSpec, config: HopConfig,
                trace: HopTrace, require_descent=False):
    """Tick the controller until the guard fires or rest is reached.

    Returns (status, t, state) with status in {"guard", "rest", "timeout"}.
    """
    dt = ctrl.params.control_period
    t = t0
    armed = spec.guard != "foot_height"   # flight starts on the guard surface
    rest_since = None
    while t - t0 < config.domain_timeout - 0.5 * dt:
        u = ctrl.control_step(state, t - t0)
        tick = ctrl.log[-1]
        _record(trace, t, spec.name, state, u, tick, model)
        new_state = bp.integrate_step(model, state, u, dt, spec.mode)
        if spec.guard is not None:
            g_new = guard_eval(spec.name, model, new_state, u)
            if not armed and g_new > 1e-5:
                armed = True
            descending = True
            if require_descent:
                vz = [bp.foot_point(model, new_state, leg)[1][1]
                      for leg in ("L", "R")]
                descending = min(vz) < 0.0
            if armed and g_new <= 0.0 and descending:
                tau, ev_state = _bisect_event(
                    model, state, u, dt, spec.mode,
                    lambda st: guard_eval(spec.name, model, st, u),
                    config.event_tol)
                return "guard", t + tau, ev_state
        state = new_state
        t += dt
        if spec.guard is None:
            if np.linalg.norm(state.qd) <= config.rest_speed:
                if rest_since is None:
                    rest_since = t
                elif t - rest_since >= config.rest_hold:
                    return "rest", t, state
            else:
                rest_since = None
    return "timeout", t, state


def run_hop(model, slip_params: SlipParams, clf_params: ClfParams,
            x_des: float, config: HopConfig | None = None) -> HopTrace:
    """Execute one planned hop; returns the full trace.

    ``x_des`` is the target apex height of the reduced model's mass. A
    target at (or below) the standing height is a degenerate task: the
    stance phase is executed with a constant leg-length reference, no
    liftoff occurs, and the trace reports the no-liftoff outcome instead of
    raising the guard-timeout error.
    """
    config = config or HopConfig()
    trace = HopTrace()
    trace.metadata["x_des"] = x_des

    st_slip0 = slip_standing_state(slip_params, config.L0)
    standing = bp.standing_state(model, config.L0)
    state = standing.state.copy()
    x_com0 = float(bp.com_position(model, state)[0])

    null_jump = x_des <= st_slip0.x + 1e-9
    if null_jump:
        from .collocation import LegLengthTrajectory
        plan_j = LegLengthTrajectory(np.array([0.0, 1.0]),
                                     np.full(2, config.L0), np.zeros(2))
        trace.metadata["plan_T"] = 0.0
    else:
        nlp = build_jumping_nlp(slip_params, st_slip0, x_des,
                                N=config.n_jump_nodes)
        t_plan = time.perf_counter()
        grid, info = solve_nlp(nlp)
        if info.constraint_violation > 1e-6:
            raise RuntimeError("jumping plan infeasible: residual "
                               f"{info.constraint_violation:.2e}")
        plan_j = extract_trajectory(grid)
        trace.metadata["plan_T"] = float(grid.T)
        trace.metadata["plan_solve_s"] = time.perf_counter() - t_plan

    ctrl_j = DomainController(model, jumping_outputs(model, plan_j, x_com0),
                              clf_params)
    spec_j = HOP_SCHEDULE.spec("jumping")
    status, t, state = _run_domain(model, ctrl_j, state, 0.0, spec_j,
                                   config, trace)
    if status != "guard":
        trace.finalize()
        trace.metadata["outcome"] = "no_liftoff"
        trace.metadata["max_delta"] = float(np.abs(trace.delta).max())
        if null_jump or status == "rest":
            return trace
        raise GuardTimeout("liftoff guard did not fire within "
                           f"{config.domain_timeout} s", trace)

    liftoff_state = state
    trace.events.append(HopEvent("jumping->flight", t, liftoff_state,
                                 liftoff_state.copy()))
    trace.metadata["t_liftoff"] = t
    trace.metadata["z_com_liftoff"] = float(
        bp.com_position(model, liftoff_state)[1])
    trace.metadata["H_pitch_liftoff"] = float(
        bp.pitch_momentum_terms(model, liftoff_state)[0])
    trace.metadata["xd_com_liftoff"] = float(
        bp.com_velocity(model, liftoff_state)[0])

    sel = [3, 4, 7, 8]
    ctrl_f = DomainController(
        model, flight_outputs(model, liftoff_state.q[sel]), clf_params)
    spec_f = HOP_SCHEDULE.spec("flight")
    status, t_td, td_state = _run_domain(model, ctrl_f, state, t, spec_f,
                                         config, trace, require_descent=True)
    if status != "guard":
        trace.finalize()
        trace.metadata["outcome"] = "no_touchdown"
        raise GuardTimeout("touchdown guard did not fire within "
                           f"{config.domain_timeout} s", trace)

    post_state = apply_reset("impact", model, td_state)
    trace.events.append(HopEvent("flight->landing", t_td, td_state,
                                 post_state))
    trace.metadata["t_touchdown"] = t_td
    trace.metadata["air_time"] = t_td - trace.metadata["t_liftoff"]

    slip_post = touchdown_slip_state(model, slip_params, post_state)
    nlp_l = build_landing_nlp(slip_params, slip_post, st_slip0.x,
                              N=config.n_land_nodes)
    grid_l, info_l = solve_nlp(nlp_l)
    if info_l.constraint_violation > 1e-6:
        raise RuntimeError("landing plan infeasible: residual "
                           f"{info_l.constraint_violation:.2e}")
    plan_l = extract_trajectory(grid_l)
    trace.metadata["landing_plan_T"] = float(grid_l.T)

    p_com = bp.com_position(model, post_state)
    v_com = bp.com_velocity(model, post_state)
    outs_l = landing_outputs(model, plan_l, float(p_com[0]),
                             float(post_state.q[2]), float(post_state.qd[2]),
                             float(v_com[0]), float(p_com[0]),
                             float(grid_l.T))
    ctrl_l = DomainController(model, outs_l, clf_params)
    spec_l = HOP_SCHEDULE.spec("landing")
    status, t_end, state_end = _run_domain(model, ctrl_l, post_state, t_td,
                                           spec_l, config, trace)
    trace.finalize()
    if status != "rest":
        trace.metadata["outcome"] = "no_rest"
        raise GuardTimeout("landing did not reach rest within "
                           f"{config.domain_timeout} s", trace)

    trace.metadata["outcome"] = "hop"
    trace.metadata["t_rest"] = t_end
    in_flight = [k for k, d in enumerate(trace.domain) if d == "flight"]
    z_com = np.array([bp.com_position(model,
                                      bp.RobotState(trace.q[k], trace.qd[k]))[1]
                      for k in in_flight])
    trace.metadata["z_com_apex"] = float(z_com.max()) if z_com.size else np.nan
    trace.metadata["max_delta"] = float(np.abs(trace.delta).max())
    trace.metadata["median_solve_us"] = float(np.median(trace.solve_us))
    trace.metadata["max_solve_us"] = float(trace.solve_us.max())
    trace.metadata["mean_iterations"] = float(trace.iterations.mean())
    return trace
