"""TSLIP model: parameters, state types, and the instantaneous force laws.

Conventions
-----------
World frame: x forward, y up.  Trunk pitch is measured from the vertical and
is positive for a forward (anterior) lean, i.e. clockwise in the x-y plane.
The CoM sits on the trunk axis ``hip_com_distance`` above the hip.  The leg
angle is measured at the foot from the ground, so the unit vector from foot
to hip is ``(-cos(leg_angle), sin(leg_angle))`` and touchdown angles around
71-78 deg are near-vertical legs placed ahead of the hip.

Hip torque is the torque the leg applies to the trunk, positive in the
pitch-forward sense.  A massless leg transmits it to the ground as a force
``tau / l`` perpendicular to the leg, so the ground reaction force (GRF) is::

    GRF = F_axial * e_leg + (tau / l) * n_leg,   n_leg = rot90(e_leg)

2-D cross products are scalar z-components (counter-clockwise positive).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

__all__ = [
    "DamperKind",
    "VpFrame",
    "ModelParams",
    "BodyState",
    "StanceContext",
    "VpTarget",
    "DegenerateGeometryError",
    "IntegrationBlowUp",
    "spring_force",
    "damper_force",
    "hip_position",
    "stance_context",
    "vp_point",
    "vp_torque",
    "vp_torque_literal",
    "stance_derivative",
    "flight_derivative",
    "mechanical_energy",
]

GRAVITY = 9.81


class DegenerateGeometryError(ValueError):
    """The VP direction is orthogonal to the foot-hip vector."""


class IntegrationBlowUp(FloatingPointError):
    """A derivative evaluation produced non-finite values."""


class DamperKind(enum.IntEnum):
    BILINEAR = 0
    LINEAR = 1


class VpFrame(enum.IntEnum):
    BODY = 0
    WORLD = 1


@dataclass(frozen=True)
class ModelParams:
    mass: float = 80.0
    inertia: float = 5.0
    leg_stiffness: float = 18000.0
    leg_rest_length: float = 1.0
    hip_com_distance: float = 0.1
    gravity: float = GRAVITY
    damping_coefficient: float = 0.0
    damper_kind: DamperKind = DamperKind.BILINEAR

    def __post_init__(self):
        for name in ("mass", "inertia", "leg_stiffness", "leg_rest_length", "gravity"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")
        if not (math.isfinite(self.hip_com_distance) and self.hip_com_distance >= 0):
            raise ValueError(f"hip_com_distance must be >= 0, got {self.hip_com_distance!r}")
        if not (math.isfinite(self.damping_coefficient) and self.damping_coefficient >= 0):
            raise ValueError(f"damping_coefficient must be >= 0, got {self.damping_coefficient!r}")
        object.__setattr__(self, "damper_kind", DamperKind(self.damper_kind))

    def with_damping(self, c: float) -> "ModelParams":
        return replace(self, damping_coefficient=float(c))


@dataclass(frozen=True)
class BodyState:
    x_com: float
    y_com: float
    pitch: float
    vx: float
    vy: float
    pitch_rate: float
    time: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()) or not math.isfinite(self.time):
            raise ValueError(f"non-finite body state: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_com, self.y_com, self.pitch, self.vx, self.vy, self.pitch_rate])

    @classmethod
    def from_array(cls, y, time: float = 0.0) -> "BodyState":
        return cls(*(float(v) for v in y[:6]), time=float(time))


@dataclass(frozen=True)
class StanceContext:
    foot_x: float
    foot_y: float
    leg_length: float
    leg_length_rate: float
    leg_angle: float
    axial_force: float
    tangential_force: float
    hip_torque: float

    def leg_unit(self) -> np.ndarray:
        return np.array([-math.cos(self.leg_angle), math.sin(self.leg_angle)])

    def grf(self) -> np.ndarray:
        """World-frame GRF rebuilt from the axial/tangential split."""
        e = self.leg_unit()
        n = np.array([-e[1], e[0]])
        return self.axial_force * e + self.tangential_force * n


@dataclass(frozen=True)
class VpTarget:
    """Virtual point at signed ``radius`` from the CoM (positive above).

    ``angle`` is measured from the trunk axis (body frame) or from the
    world vertical (world frame), positive forward.
    """

    radius: float
    angle: float = 0.0
    angle_frame: VpFrame | None = None

    def __post_init__(self):
        if not math.isfinite(self.radius) or abs(self.radius) > 1.0:
            raise ValueError(f"|VP radius| must be <= 1 m, got {self.radius!r}")
        if not math.isfinite(self.angle):
            raise ValueError(f"VP angle must be finite, got {self.angle!r}")
        frame = self.angle_frame
        if frame is None:
            frame = VpFrame.WORLD if self.radius < 0 else VpFrame.BODY
        object.__setattr__(self, "angle_frame", VpFrame(frame))

    @property
    def above(self) -> bool:
        return self.radius > 0

    def with_angle(self, angle: float) -> "VpTarget":
        return replace(self, angle=float(angle))


def spring_force(params: ModelParams, leg_length: float) -> float:
    """Linear leg spring, positive in compression."""
    if leg_length <= 0:
        raise ValueError("leg_length must be positive")
    return params.leg_stiffness * (params.leg_rest_length - leg_length)


def damper_force(params: ModelParams, leg_length: float, leg_length_rate: float) -> float:
    """Leg damper force; the axial leg force is ``spring - damper``.

    The bilinear damper scales with compression and vanishes at the rest
    length, so the leg force is continuous at touchdown and take-off.
    """
    if leg_length <= 0:
        raise ValueError("leg_length must be positive")
    c = params.damping_coefficient
    if params.damper_kind == DamperKind.BILINEAR:
        return c * leg_length_rate * (params.leg_rest_length - leg_length)
    return c * leg_length_rate


def hip_position(params: ModelParams, state: BodyState) -> np.ndarray:
    r = params.hip_com_distance
    return np.array([state.x_com - r * math.sin(state.pitch), state.y_com - r * math.cos(state.pitch)])


def vp_point(state: BodyState, vp: VpTarget) -> np.ndarray:
    phi = vp.angle + (state.pitch if vp.angle_frame == VpFrame.BODY else 0.0)
    return np.array([state.x_com + vp.radius * math.sin(phi), state.y_com + vp.radius * math.cos(phi)])


# ---------------------------------------------------------------------------
# compiled kernels
#
# Parameter vector layout shared by every kernel.
P_M, P_J, P_K, P_L0, P_RHC, P_G, P_C, P_DAMPER = range(8)
P_FOOT_X, P_RVP, P_THVP, P_FRAME = 8, 9, 10, 11
P_PID, P_KP, P_KD, P_KI, P_THDES, P_WDES = 12, 13, 14, 15, 16, 17
P_FALL_Y, P_THTD, P_TORQUE_MODE = 18, 19, 20
N_PARAMS = 21

# State vector layout: body state, PID integral, then cumulative works
S_X, S_Y, S_TH, S_VX, S_VY, S_W, S_INT = range(7)
S_WSP_POS, S_WSP_NEG, S_WDP, S_WH_POS, S_WH_NEG = 7, 8, 9, 10, 11
S_PITCH_INT = 12
S_WLEG_POS, S_WLEG_NEG = 13, 14
N_STATE = 15

# torque modes: geometric VP law, or zero hip torque (passive)
TORQUE_VP = 0.0
TORQUE_NONE = 1.0


@numba.njit(cache=True)
def _stance_eval(y, p):
    """All stance quantities at state ``y``.

    Returns (l, ldot, theta_l, theta_l_dot, f_sp, f_dp, f_a, tau_vp,
    tau_pid, grf_x, grf_y, alpha, dot_vp_hip, p_hip).
    """
    x, yc, th, vx, vy, w = y[0], y[1], y[2], y[3], y[4], y[5]
    rhc = p[P_RHC]
    s, c = math.sin(th), math.cos(th)
    hx = x - rhc * s
    hy = yc - rhc * c
    hvx = vx - rhc * c * w
    hvy = vy + rhc * s * w
    rx = hx - p[P_FOOT_X]
    ry = hy
    l = math.sqrt(rx * rx + ry * ry)
    ex = rx / l
    ey = ry / l
    ldot = ex * hvx + ey * hvy
    theta_l = math.atan2(ey, -ex)
    theta_l_dot = -(rx * hvy - ry * hvx) / (l * l)
    dl = p[P_L0] - l
    f_sp = p[P_K] * dl
    if p[P_DAMPER] == 0.0:
        f_dp = p[P_C] * ldot * dl
    else:
        f_dp = p[P_C] * ldot
    f_a = f_sp - f_dp

    tau_vp = 0.0
    dot_vh = 1.0
    if p[P_TORQUE_MODE] == TORQUE_VP:
        phi = p[P_THVP]
        if p[P_FRAME] == 0.0:
            phi += th
        vxp = x + p[P_RVP] * math.sin(phi) - p[P_FOOT_X]
        vyp = yc + p[P_RVP] * math.cos(phi)
        cr = vxp * ry - vyp * rx
        dot_vh = vxp * rx + vyp * ry
        tau_vp = -f_a * l * cr / dot_vh

    tau_pid = 0.0
    if p[P_PID] != 0.0:
        tau_pid = p[P_KP] * (p[P_THDES] - th) + p[P_KD] * (p[P_WDES] - w) + p[P_KI] * y[S_INT]
    tau = tau_vp + tau_pid
    ft = tau / l
    gx = f_a * ex - ft * ey
    gy = f_a * ey + ft * ex
    # pitch acceleration: J * alpha = cross(C - F, GRF)
    cfx = x - p[P_FOOT_X]
    cfy = yc
    alpha = (cfx * gy - cfy * gx) / p[P_J]
    p_hip = tau * (w - theta_l_dot)
    return l, ldot, theta_l, theta_l_dot, f_sp, f_dp, f_a, tau_vp, tau_pid, gx, gy, alpha, dot_vh, p_hip


@numba.njit(cache=True)
def stance_rhs(t, y, p):
    out = np.zeros(N_STATE)
    (l, ldot, theta_l, theta_l_dot, f_sp, f_dp, f_a, tau_vp, tau_pid,
     gx, gy, alpha, dot_vh, p_hip) = _stance_eval(y, p)
    out[S_X] = y[S_VX]
    out[S_Y] = y[S_VY]
    out[S_TH] = y[S_W]
    out[S_VX] = gx / p[P_M]
    out[S_VY] = gy / p[P_M] - p[P_G]
    out[S_W] = alpha
    if p[P_PID] != 0.0:
        out[S_INT] = p[P_THDES] - y[S_TH]
    p_sp = f_sp * ldot
    p_dp = -f_dp * ldot
    out[S_WSP_POS] = max(p_sp, 0.0)
    out[S_WSP_NEG] = min(p_sp, 0.0)
    out[S_WDP] = p_dp
    out[S_WH_POS] = max(p_hip, 0.0)
    out[S_WH_NEG] = min(p_hip, 0.0)
    out[S_PITCH_INT] = y[S_TH]
    p_leg = p_sp + p_dp
    out[S_WLEG_POS] = max(p_leg, 0.0)
    out[S_WLEG_NEG] = min(p_leg, 0.0)
    return out


@numba.njit(cache=True)
def stance_guards(t, y, p):
    """[takeoff_length (rising), takeoff_force (falling), fall_height (falling), fall_pitch (rising)]"""
    g = np.empty(4)
    res = _stance_eval(y, p)
    g[0] = res[0] - p[P_L0]
    g[1] = res[6]
    g[2] = y[S_Y] - p[P_FALL_Y]
    g[3] = abs(y[S_TH]) - 0.5 * math.pi
    return g


@numba.njit(cache=True)
def flight_rhs(t, y, p):
    out = np.zeros(N_STATE)
    out[S_X] = y[S_VX]
    out[S_Y] = y[S_VY]
    out[S_TH] = y[S_W]
    out[S_VY] = -p[P_G]
    out[S_PITCH_INT] = y[S_TH]
    return out


@numba.njit(cache=True)
def flight_ascent_guards(t, y, p):
    """[apex (falling vy), fall_pitch (rising)]"""
    g = np.empty(2)
    g[0] = y[S_VY]
    g[1] = abs(y[S_TH]) - 0.5 * math.pi
    return g


@numba.njit(cache=True)
def flight_descent_guards(t, y, p):
    """[touchdown (falling foot height), fall_pitch (rising), fall_height (falling)]"""
    g = np.empty(3)
    g[0] = y[S_Y] - p[P_RHC] * math.cos(y[S_TH]) - p[P_L0] * math.sin(p[P_THTD])
    g[1] = abs(y[S_TH]) - 0.5 * math.pi
    g[2] = y[S_Y] - p[P_FALL_Y]
    return g


@numba.njit(cache=True)
def stance_sample_table(ys, p):
    """Row-wise :func:`_stance_eval` over sampled stance states (N x 14)."""
    n = ys.shape[0]
    out = np.empty((n, 14))
    for i in range(n):
        res = _stance_eval(ys[i], p)
        for j in range(14):
            out[i, j] = res[j]
    return out


def pack_params(
    params: ModelParams,
    *,
    foot_x: float = 0.0,
    vp: VpTarget | None = None,
    pid: tuple[float, float, float, float, float] | None = None,
    td_angle: float = 0.0,
    torque_mode: float = TORQUE_VP,
) -> np.ndarray:
    """Flatten model, VP and PID settings into the kernel parameter vector.

    ``pid`` is ``(k_p, k_d, k_i, desired_pitch, desired_pitch_rate)``; ``None``
    disables the PID term.
    """
    p = np.zeros(N_PARAMS)
    p[P_M] = params.mass
    p[P_J] = params.inertia
    p[P_K] = params.leg_stiffness
    p[P_L0] = params.leg_rest_length
    p[P_RHC] = params.hip_com_distance
    p[P_G] = params.gravity
    p[P_C] = params.damping_coefficient
    p[P_DAMPER] = float(int(params.damper_kind))
    p[P_FOOT_X] = foot_x
    if vp is None:
        p[P_TORQUE_MODE] = TORQUE_NONE
    else:
        p[P_RVP] = vp.radius
        p[P_THVP] = vp.angle
        p[P_FRAME] = float(int(vp.angle_frame))
        p[P_TORQUE_MODE] = torque_mode
    if pid is not None:
        p[P_PID] = 1.0
        p[P_KP], p[P_KD], p[P_KI], p[P_THDES], p[P_WDES] = pid
    p[P_FALL_Y] = 0.2 * params.leg_rest_length
    p[P_THTD] = td_angle
    return p


def _state_vector(state: BodyState) -> np.ndarray:
    y = np.zeros(N_STATE)
    y[:6] = state.as_array()
    return y


def stance_context(
    params: ModelParams,
    state: BodyState,
    foot_x: float,
    vp: VpTarget | None = None,
    pid_torque: float = 0.0,
) -> StanceContext:
    """Leg geometry, forces and hip torque at a stance instant.

    With ``vp`` the hip torque is the VP torque (plus ``pid_torque``);
    without it only ``pid_torque`` acts.
    """
    if vp is not None:
        foot = np.array([foot_x, 0.0])
        r_fh = hip_position(params, state) - foot
        r_fv = vp_point(state, vp) - foot
        if abs(float(r_fv @ r_fh)) < 1e-12 * max(1.0, float(np.hypot(*r_fh) * np.hypot(*r_fv))):
            raise DegenerateGeometryError("VP direction orthogonal to the foot-hip vector")
    p = pack_params(params, foot_x=foot_x, vp=vp)
    res = _stance_eval(_state_vector(state), p)
    l, ldot, theta_l = res[0], res[1], res[2]
    f_a = res[6]
    tau = res[7] + pid_torque
    return StanceContext(
        foot_x=float(foot_x), foot_y=0.0, leg_length=l, leg_length_rate=ldot, leg_angle=theta_l,
        axial_force=f_a, tangential_force=tau / l, hip_torque=tau,
    )


def vp_torque(
    params: ModelParams, state: BodyState, stance: StanceContext, vp: VpTarget, tol: float = 1e-9
) -> float:
    """Hip torque that puts the GRF line of action through the VP.

    Derived from the condition ``cross(r_FV, GRF) = 0`` with the GRF split
    into the axial leg force and the torque-generated tangential force::

        tau = -F_a * l * cross(r_FV, r_FH) / dot(r_FV, r_FH)
    """
    foot = np.array([stance.foot_x, stance.foot_y])
    r_fh = hip_position(params, state) - foot
    r_fv = vp_point(state, vp) - foot
    dot = float(r_fv @ r_fh)
    if abs(dot) < tol * max(1.0, float(np.hypot(*r_fh)) * float(np.hypot(*r_fv))):
        raise DegenerateGeometryError(
            f"r_FV . r_FH = {dot:.3e}: VP direction orthogonal to the leg"
        )
    cross = float(r_fv[0] * r_fh[1] - r_fv[1] * r_fh[0])
    return -stance.axial_force * float(np.hypot(*r_fh)) * cross / dot


def vp_torque_literal(
    params: ModelParams, state: BodyState, stance: StanceContext, vp: VpTarget
) -> float:
    """The published closed form read with scalar 2-D cross products.

    ``tau = F_a x [(r_FV x r_FH) / (r_FV . r_FH)] x l`` with ``F_a`` taken as
    a vector along the leg cannot be evaluated literally in 2-D; the scalar
    reading ``|F_a| * cross(r_FV, r_FH) / dot(r_FV, r_FH) * l`` is kept here
    for comparison.  It equals :func:`vp_torque` up to the sign fixed by
    the torque convention.
    """
    foot = np.array([stance.foot_x, stance.foot_y])
    r_fh = hip_position(params, state) - foot
    r_fv = vp_point(state, vp) - foot
    cross = float(r_fv[0] * r_fh[1] - r_fv[1] * r_fh[0])
    return stance.axial_force * cross / float(r_fv @ r_fh) * float(np.hypot(*r_fh))


def stance_derivative(
    params: ModelParams,
    state: BodyState,
    foot_x: float,
    control: VpTarget | float | None = None,
) -> np.ndarray:
    """``d/dt (x, y, pitch, vx, vy, pitch_rate)`` in stance.

    ``control`` is either a :class:`VpTarget` (torque from the VP law) or a
    hip torque in N*m; ``None`` means zero torque.
    """
    y = _state_vector(state)
    if isinstance(control, VpTarget):
        p = pack_params(params, foot_x=foot_x, vp=control)
    else:
        tau = 0.0 if control is None else float(control)
        # a constant torque is injected through the PID channel with k_i = 1
        p = pack_params(params, foot_x=foot_x, pid=(0.0, 0.0, 1.0, 0.0, 0.0))
        y[S_INT] = tau
    out = stance_rhs(0.0, y, p)[:6]
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowUp(f"non-finite stance derivative at {state}")
    return out


def flight_derivative(params: ModelParams, state: BodyState) -> np.ndarray:
    return np.array([state.vx, state.vy, state.pitch_rate, 0.0, -params.gravity, 0.0])


def mechanical_energy(params: ModelParams, y, leg_length: float | None = None) -> float:
    """Kinetic + gravitational energy, plus spring energy when ``leg_length`` is given."""
    e = 0.5 * params.mass * (y[3] ** 2 + y[4] ** 2) + 0.5 * params.inertia * y[5] ** 2
    e += params.mass * params.gravity * y[1]
    if leg_length is not None:
        e += 0.5 * params.leg_stiffness * (params.leg_rest_length - leg_length) ** 2
    return float(e)
