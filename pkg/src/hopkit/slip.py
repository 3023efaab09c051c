"""Actuated spring-mass model: stance dynamics driven by the leg-length
acceleration, ballistic flight, and liftoff/touchdown event functions.

State layout used by the integrators: y = (x, x_dot, s, s_dot, L, L_dot).
In stance the kinematic constraint s + x = L couples the coordinates; the
stance derivative preserves it exactly, so fixed-step RK4 keeps the drift at
roundoff level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .legchain import LegStiffnessModel


@dataclass
class SlipParams:
    mass: float
    gravity: float
    stiffness_model: LegStiffnessModel

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.gravity <= 0:
            raise ValueError("gravity must be positive")


@dataclass
class SlipState:
    x: float
    x_dot: float
    s: float
    s_dot: float
    L: float
    L_dot: float
    phase: str = "stance"  # stance | flight

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.s, self.s_dot, self.L, self.L_dot])

    @classmethod
    def from_array(cls, y: np.ndarray, phase: str) -> "SlipState":
        return cls(*[float(v) for v in y], phase=phase)

    def validate(self, params: SlipParams, tol: float = 1e-9):
        if self.phase == "stance":
            if abs(self.s + self.x - self.L) > tol:
                raise ValueError(f"kinematic constraint s + x = L violated by {self.s + self.x - self.L:.2e}")
            if abs(self.s_dot + self.x_dot - self.L_dot) > tol:
                raise ValueError("kinematic rate constraint violated")
        lo, hi = params.stiffness_model.L_range
        if not (lo - 1e-9 <= self.L <= hi + 1e-9):
            raise ValueError(f"leg length {self.L} outside model range [{lo}, {hi}]")


def spring_force(params: SlipParams, state: SlipState) -> float:
    """F = K(L) s + D(L) s_dot.  Stance only; L must be inside the fit range."""
    if state.phase != "stance":
        raise ValueError("spring force is only defined in stance")
    K = float(params.stiffness_model.stiffness(state.L))
    D = float(params.stiffness_model.damping(state.L))
    return K * state.s + D * state.s_dot


def stance_dynamics(params: SlipParams, state: SlipState, L_ddot: float) -> np.ndarray:
    """Derivative of (x, x_dot, s, s_dot, L, L_dot) under virtual actuation."""
    F = spring_force(params, state)
    x_dd = F / params.mass - params.gravity
    return np.array([state.x_dot, x_dd, state.s_dot, L_ddot - x_dd, state.L_dot, L_ddot])


def flight_dynamics(params: SlipParams, state: SlipState) -> np.ndarray:
    """Ballistic mass; the spring is frozen and the massless leg tracks its
    command kinematically (the driver overwrites L directly)."""
    if state.phase != "flight":
        raise ValueError("flight dynamics requires flight phase")
    return np.array([state.x_dot, -params.gravity, 0.0, 0.0, state.L_dot, 0.0])


def liftoff_event(params: SlipParams, state: SlipState) -> float:
    """Sign-changing guard: spring force, crossing zero downward at liftoff."""
    return spring_force(params, state)


def touchdown_event(params: SlipParams, state: SlipState, ground_z: float = 0.0) -> float:
    """Sign-changing guard: foot height x - L above the ground."""
    return state.x - state.L - ground_z


@dataclass
class SlipTrace:
    t: np.ndarray
    y: np.ndarray        # (n, 6) state rows
    L_ddot: np.ndarray
    F_s: np.ndarray
    phase: list[str]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "x_dot", "s", "s_dot", "L", "L_dot", "L_ddot", "F_s", "phase"])
            for i in range(len(self.t)):
                w.writerow([f"{self.t[i]:.9f}", *[f"{v:.9f}" for v in self.y[i]],
                            f"{self.L_ddot[i]:.9f}", f"{self.F_s[i]:.9f}", self.phase[i]])


def _rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_stance(params: SlipParams, state0: SlipState, L_ddot_fn, t_final: float,
                    dt: float = 5e-4, event=None, event_tol: float = 1e-8,
                    t0: float = 0.0) -> SlipTrace:
    """Fixed-step RK4 in stance with bisection event localization.

    ``L_ddot_fn(t)`` is the virtual actuation; ``event(params, state)`` stops
    the integration at its first downward zero crossing, localized to
    ``event_tol`` seconds.
    """
    def f(t, y):
        return stance_dynamics(params, SlipState.from_array(y, "stance"), float(L_ddot_fn(t)))

    t, y = t0, state0.as_array()
    ts, ys, us, fs, ph = [t], [y.copy()], [float(L_ddot_fn(t))], [spring_force(params, state0)], ["stance"]
    g_prev = event(params, state0) if event else None
    while t < t0 + t_final - 1e-12:
        h = min(dt, t0 + t_final - t)
        y_new = _rk4_step(f, t, y, h)
        if event is not None:
            g_new = event(params, SlipState.from_array(y_new, "stance"))
            if g_prev > 0.0 >= g_new:
                # bisect the step size until the crossing is localized
                lo, hi = 0.0, h
                while hi - lo > event_tol:
                    mid = 0.5 * (lo + hi)
                    y_mid = _rk4_step(f, t, y, mid)
                    if event(params, SlipState.from_array(y_mid, "stance")) > 0.0:
                        lo = mid
                    else:
                        hi = mid
                y_new = _rk4_step(f, t, y, hi)
                t = t + hi
                ts.append(t)
                ys.append(y_new.copy())
                us.append(float(L_ddot_fn(t)))
                fs.append(spring_force(params, SlipState.from_array(y_new, "stance")))
                ph.append("stance")
                break
            g_prev = g_new
        t += h
        y = y_new
        ts.append(t)
        ys.append(y.copy())
        us.append(float(L_ddot_fn(t)))
        fs.append(spring_force(params, SlipState.from_array(y, "stance")))
        ph.append("stance")
    return SlipTrace(np.array(ts), np.array(ys), np.array(us), np.array(fs), ph)


def simulate_flight(params: SlipParams, state0: SlipState, t_final: float,
                    dt: float = 5e-4, L_fn=None, stop_on_touchdown: bool = True,
                    event_tol: float = 1e-8, t0: float = 0.0) -> SlipTrace:
    """Ballistic integration; L follows ``L_fn(t)`` exactly when given.

    Stops at touchdown (foot height crossing zero downward) when requested.
    """
    state = replace(state0, phase="flight", s=0.0, s_dot=0.0)
    t = t0
    ts, ys, us, fs, ph = [t], [state.as_array()], [0.0], [0.0], ["flight"]
    x, xd = state.x, state.x_dot

    def leg_at(tt):
        if L_fn is None:
            return state.L, state.L_dot
        return L_fn(tt)

    def sample(tt):
        # closed-form ballistic state; the leg is massless and commanded
        dtt = tt - t0
        L, Ld = leg_at(tt)
        return np.array([x + xd * dtt - 0.5 * params.gravity * dtt**2,
                         xd - params.gravity * dtt, 0.0, 0.0, L, Ld])

    def foot_height(tt):
        y = sample(tt)
        return y[0] - y[4]

    while t < t0 + t_final - 1e-12:
        h = min(dt, t0 + t_final - t)
        t_new = t + h
        if stop_on_touchdown and foot_height(t) > 0.0 >= foot_height(t_new):
            lo, hi = t, t_new
            while hi - lo > event_tol:
                mid = 0.5 * (lo + hi)
                if foot_height(mid) > 0.0:
                    lo = mid
                else:
                    hi = mid
            ts.append(hi)
            ys.append(sample(hi))
            us.append(0.0)
            fs.append(0.0)
            ph.append("flight")
            break
        t = t_new
        ts.append(t)
        ys.append(sample(t))
        us.append(0.0)
        fs.append(0.0)
        ph.append("flight")
    return SlipTrace(np.array(ts), np.array(ys), np.array(us), np.array(fs), ph)


def apex_height(params: SlipParams, liftoff_state: SlipState) -> float:
    """x_f + x_dot_f^2 / (2g) for an upward liftoff state."""
    vd = max(0.0, liftoff_state.x_dot)
    return liftoff_state.x + vd**2 / (2.0 * params.gravity)
