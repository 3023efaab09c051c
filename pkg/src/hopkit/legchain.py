"""Planar leg kinematics and joint-compliance -> leg-stiffness computation.

A leg is a chain of revolute joints in the sagittal plane.  Joints are
classified as motor (rigidly position-controlled, infinitely stiff), spring
(torsion spring with stiffness/damping) or passive (free, only meaningful
inside closed chains).  The end-effector (toe) stiffness follows from the
compliance sum over spring joints, and the vertical stiffness as a function of
virtual leg length is fitted with the quartic basis {1, L, L^2, L^4}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.optimize import brentq

JOINT_CLASSES = ("motor", "spring", "passive")


@dataclass(frozen=True)
class Joint:
    """One revolute joint plus the link segment that follows it.

    ``link`` is the (x, z) offset to the next joint, expressed in the frame
    after this joint's rotation.
    """

    name: str
    joint_class: str
    link: tuple[float, float]
    stiffness: float = 0.0
    damping: float = 0.0
    axis: str = "pitch"


@dataclass(frozen=True)
class KinematicChain:
    """Ordered planar chain from the hip (base) to the toe (end)."""

    joints: tuple[Joint, ...]
    base_frame: str = "hip"
    end_frame: str = "toe"

    def __post_init__(self):
        for j in self.joints:
            if j.joint_class not in JOINT_CLASSES:
                raise ValueError(f"unknown joint class {j.joint_class!r} on {j.name}")
            if j.joint_class == "spring":
                if j.stiffness <= 0:
                    raise ValueError(f"spring joint {j.name} needs stiffness > 0")
                if j.damping < 0:
                    raise ValueError(f"spring joint {j.name} needs damping >= 0")
        if not any(j.joint_class == "spring" for j in self.joints):
            raise ValueError("chain has no spring joint; leg stiffness is undefined")

    @property
    def n(self) -> int:
        return len(self.joints)

    def index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def spring_indices(self) -> np.ndarray:
        return np.array([i for i, j in enumerate(self.joints) if j.joint_class == "spring"], dtype=int)


def _rot(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def forward_kinematics(chain: KinematicChain, q: np.ndarray):
    """Joint origins, cumulative frame angles, and the end (toe) point."""
    q = np.asarray(q, dtype=float)
    p = np.zeros(2)
    angle = 0.0
    origins = []
    angles = []
    for joint, qi in zip(chain.joints, q):
        origins.append(p.copy())
        angle += qi
        angles.append(angle)
        p = p + _rot(angle) @ np.array(joint.link)
    return np.array(origins), np.array(angles), p


def foot_jacobian(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    """2 x n Jacobian of the toe position relative to the hip."""
    origins, _, end = forward_kinematics(chain, q)
    J = np.zeros((2, chain.n))
    for i in range(chain.n):
        v = end - origins[i]
        J[:, i] = (-v[1], v[0])
    return J


def real_leg_length(chain: KinematicChain, q: np.ndarray) -> float:
    """Hip-to-toe distance at the given configuration."""
    _, _, end = forward_kinematics(chain, q)
    return float(np.linalg.norm(end))


def virtual_leg_length(chain: KinematicChain, q: np.ndarray) -> float:
    """Hip-to-toe distance with every spring deflection zeroed."""
    q0 = np.asarray(q, dtype=float).copy()
    q0[chain.spring_indices()] = 0.0
    return real_leg_length(chain, q0)


def reduce_closed_chain(J1: np.ndarray, J2: np.ndarray,
                        active: np.ndarray, passive: np.ndarray) -> np.ndarray:
    """Eliminate passive joints of a two-chain loop.

    The loop closure is J1 qd1 = J2 qd2 over the concatenated coordinates
    [q1; q2]; ``active``/``passive`` index into that concatenation.  Returns
    J_A with v_toe = J_A qd_A for all loop-consistent motions.
    """
    J1 = np.atleast_2d(J1)
    J2 = np.atleast_2d(J2)
    active = np.asarray(active, dtype=int)
    passive = np.asarray(passive, dtype=int)
    E = np.hstack([J1, -J2])
    J1_full = np.hstack([J1, np.zeros_like(J2)])
    if passive.size == 0:
        return J1_full[:, active]
    E_P = E[:, passive]
    if E_P.shape[0] != E_P.shape[1]:
        raise ValueError("passive block must be square to eliminate the loop")
    if np.linalg.cond(E_P) > 1e12:
        raise ValueError("singular passive-joint configuration: loop closure degenerate")
    M = -np.linalg.solve(E_P, E[:, active])
    return J1_full[:, active] + J1_full[:, passive] @ M


def compliance_matrix(chain: KinematicChain, q: np.ndarray, use_damping: bool = False) -> np.ndarray:
    """Task-space compliance sum over spring joints: sum J_i k_i^-1 J_i'."""
    J = foot_jacobian(chain, q)
    C = np.zeros((2, 2))
    for i in chain.spring_indices():
        k = chain.joints[i].damping if use_damping else chain.joints[i].stiffness
        if k <= 0:
            continue
        col = J[:, i]
        C += np.outer(col, col) / k
    return C


def leg_stiffness(chain: KinematicChain, q: np.ndarray,
                  direction: np.ndarray | None = None) -> np.ndarray | float:
    """Leg stiffness from joint compliance.

    Without ``direction``, returns the full 2x2 stiffness matrix, which
    requires the compliant Jacobian columns to span the plane.  With a unit
    ``direction`` e, returns the scalar directional stiffness (e' C e)^-1;
    this stays defined for a single spring joint (the matrix is then singular
    only in the modeled rigid direction).
    """
    C = compliance_matrix(chain, q)
    if direction is not None:
        e = np.asarray(direction, dtype=float)
        e = e / np.linalg.norm(e)
        c = float(e @ C @ e)
        if c <= 0:
            raise ValueError("leg is rigid along the requested direction")
        return 1.0 / c
    if np.linalg.cond(C) > 1e12:
        raise ValueError("compliant Jacobian is rank deficient; full stiffness matrix undefined")
    K = np.linalg.inv(C)
    return 0.5 * (K + K.T)


def leg_damping(chain: KinematicChain, q: np.ndarray,
                direction: np.ndarray | None = None) -> np.ndarray | float:
    """Same construction as leg_stiffness, using the joint damping values."""
    C = compliance_matrix(chain, q, use_damping=True)
    if direction is not None:
        e = np.asarray(direction, dtype=float)
        e = e / np.linalg.norm(e)
        c = float(e @ C @ e)
        if c <= 0:
            raise ValueError("leg has no damping along the requested direction")
        return 1.0 / c
    if np.linalg.cond(C) > 1e12:
        raise ValueError("damping Jacobian is rank deficient")
    D = np.linalg.inv(C)
    return 0.5 * (D + D.T)


def vertical_leg_stiffness(chain: KinematicChain, q: np.ndarray) -> float:
    return float(leg_stiffness(chain, q, direction=np.array([0.0, 1.0])))


def vertical_leg_damping(chain: KinematicChain, q: np.ndarray) -> float:
    return float(leg_damping(chain, q, direction=np.array([0.0, 1.0])))


def stance_configuration(chain: KinematicChain, knee_joint: str, hip_joint: str,
                         knee_angle: float, toe_x: float = 0.0) -> np.ndarray:
    """Configuration with the given knee angle, zero spring deflection, and
    the toe at horizontal offset ``toe_x`` from the hip (default: directly
    below it)."""
    q = np.zeros(chain.n)
    q[chain.index(knee_joint)] = knee_angle
    i_hip = chain.index(hip_joint)

    def toe_x_err(q_hip):
        qq = q.copy()
        qq[i_hip] = q_hip
        _, _, end = forward_kinematics(chain, qq)
        return end[0] - toe_x

    q_hip = brentq(toe_x_err, -np.pi / 2, np.pi / 2, xtol=1e-12)
    q[i_hip] = q_hip
    return q


def sample_stiffness_curve(chain: KinematicChain, knee_joint: str, hip_joint: str,
                           L_range: tuple[float, float] = (0.5, 0.9),
                           n_samples: int = 25):
    """Sampled (L, K^z, D^z) triples over a uniform grid of knee angles.

    The knee grid is chosen so the virtual leg lengths span ``L_range``; the
    toe is kept directly below the hip with springs undeflected.
    """
    i_knee = chain.index(knee_joint)

    def length_of(knee):
        q = stance_configuration(chain, knee_joint, hip_joint, knee)
        return virtual_leg_length(chain, q)

    # invert L(knee) at the range endpoints (L decreases with flexion)
    def knee_for(L):
        return brentq(lambda a: length_of(a) - L, 1e-6, np.pi - 1e-3, xtol=1e-12)

    k_hi = knee_for(L_range[0])  # most flexed
    k_lo = knee_for(L_range[1])
    knees = np.linspace(k_lo, k_hi, n_samples)
    out = []
    for knee in knees:
        q = stance_configuration(chain, knee_joint, hip_joint, knee)
        L = virtual_leg_length(chain, q)
        Kz = vertical_leg_stiffness(chain, q)
        Dz = vertical_leg_damping(chain, q)
        out.append((L, Kz, Dz))
    return out


@dataclass
class LegStiffnessModel:
    """Quartic-basis fits K(L), D(L) with validity interval and fit quality."""

    beta: np.ndarray          # coefficients of {1, L, L^2, L^4} for stiffness
    beta_d: np.ndarray        # same basis for damping
    L_range: tuple[float, float]
    fit_residual: float

    def _eval(self, coef: np.ndarray, L, extrapolate: bool) -> np.ndarray:
        L = np.asarray(L, dtype=float)
        if not extrapolate:
            lo, hi = self.L_range
            if np.any(L < lo - 1e-9) or np.any(L > hi + 1e-9):
                raise ValueError(f"leg length outside fitted range [{lo}, {hi}]")
        return coef[0] + coef[1] * L + coef[2] * L**2 + coef[3] * L**4

    def stiffness(self, L, extrapolate: bool = False):
        """Fitted K(L); ``extrapolate=True`` skips the validity-range check
        (used by optimization residuals whose iterates may graze the edge)."""
        return self._eval(self.beta, L, extrapolate)

    def damping(self, L, extrapolate: bool = False):
        return self._eval(self.beta_d, L, extrapolate)

    def stiffness_slope(self, L):
        L = np.asarray(L, dtype=float)
        return self.beta[1] + 2.0 * self.beta[2] * L + 4.0 * self.beta[3] * L**3

    def damping_slope(self, L):
        L = np.asarray(L, dtype=float)
        return self.beta_d[1] + 2.0 * self.beta_d[2] * L + 4.0 * self.beta_d[3] * L**3


def _quartic_fit(L: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    X = np.stack([np.ones_like(L), L, L**2, L**4], axis=1)
    if np.linalg.cond(X.T @ X) > 1e12:
        raise ValueError("normal equations ill-conditioned; rescale the leg-length samples")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    rel = (X @ beta - y) / y
    return beta, float(np.sqrt(np.mean(rel**2)))


def fit_stiffness_polynomial(samples, max_residual: float = 0.05) -> LegStiffnessModel:
    """Least-squares fit of K^z(L) (and D^z(L) when provided) on {1,L,L^2,L^4}.

    ``samples`` is a sequence of (L, K) pairs or (L, K, D) triples.
    """
    arr = np.array([list(s) for s in samples], dtype=float)
    if arr.shape[0] < 8:
        raise ValueError("need at least 8 samples spanning the leg-length range")
    L, K = arr[:, 0], arr[:, 1]
    if np.any(K <= 0):
        raise ValueError("all stiffness samples must be positive")
    beta, res = _quartic_fit(L, K)
    if res > max_residual:
        raise ValueError(f"stiffness fit rejected: RMS relative error {res:.3f} > {max_residual}")
    if arr.shape[1] > 2:
        beta_d, _ = _quartic_fit(L, arr[:, 2])
    else:
        beta_d = np.zeros(4)
    L_range = (float(L.min()), float(L.max()))
    model = LegStiffnessModel(beta=beta, beta_d=beta_d, L_range=L_range, fit_residual=res)
    grid = np.linspace(*L_range, 200)
    if np.any(model.stiffness(grid) <= 0):
        raise ValueError("fitted stiffness is not positive over the sampled range")
    return model


def default_leg_chain(thigh: float = 0.5, shin: float = 0.5,
                      k_spring: float = 2300.0, d_spring: float = 5.0) -> KinematicChain:
    """Serial compliant leg used by the planar biped: hip and knee motors, a
    lumped torsion spring in series at the knee, and a toe motor at the end."""
    return KinematicChain(joints=(
        Joint("hip", "motor", (0.0, -thigh)),
        Joint("knee", "motor", (0.0, 0.0)),
        Joint("shin_spring", "spring", (0.0, -shin), stiffness=k_spring, damping=d_spring),
        Joint("toe", "motor", (0.0, 0.0)),
    ))


def load_chain(source) -> KinematicChain:
    """Load a chain from a YAML file path, file object, or parsed dict.

    Schema::

        chain:
          base_frame: hip
          end_frame: toe
          joints:
            - {name: hip, class: motor, axis: pitch, link: [0.0, -0.5]}
            - {name: shin_spring, class: spring, stiffness: 2300.0,
               damping: 5.0, link: [0.0, -0.5]}
    """
    if isinstance(source, dict):
        data = source
    elif hasattr(source, "read"):
        data = yaml.safe_load(source)
    else:
        with open(source) as fh:
            data = yaml.safe_load(fh)
    try:
        spec = data["chain"]
        joints = tuple(
            Joint(
                name=j["name"],
                joint_class=j["class"],
                link=tuple(float(v) for v in j["link"]),
                stiffness=float(j.get("stiffness", 0.0)),
                damping=float(j.get("damping", 0.0)),
                axis=j.get("axis", "pitch"),
            )
            for j in spec["joints"]
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed chain configuration: missing field {exc}") from exc
    return KinematicChain(joints=joints,
                          base_frame=spec.get("base_frame", "hip"),
                          end_frame=spec.get("end_frame", "toe"))
