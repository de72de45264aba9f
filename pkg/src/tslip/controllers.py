"""Control laws: apex-based leg placement, additive pitch PID, VP-angle adaptation.

All three laws are stride-level (leg placement, VP adaptation) or
instantaneous (PID) maps without hidden state; the mutable bookkeeping of
the convergence protocol lives in :mod:`tslip.protocol`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

__all__ = [
    "LegPlacementGains",
    "PitchPidGains",
    "VpAdaptationState",
    "ProtocolPhase",
    "ControllerConfig",
    "TdAngle",
    "VpDivergenceError",
    "next_td_angle",
    "pid_torque",
    "adapt_vp_angle",
    "run_convergence_protocol",
]

DEG = math.pi / 180.0


class VpDivergenceError(RuntimeError):
    """VP-angle updates kept saturating the rate limit."""


@dataclass(frozen=True)
class LegPlacementGains:
    """Gains of the apex-based touchdown-angle law.

    The velocity gains are in rad per m/s, ``k_y`` in rad/m.  Slower-than-
    target apex speeds call for a steeper leg, so stabilising velocity gains
    are negative with the differences taken as ``later - earlier``.
    """

    k_xdot0: float = 0.0
    k_xdot: float = 0.0
    k_y: float = 0.0
    initial_td_angle: float = 68.0 * DEG

    def __post_init__(self):
        for name in ("k_xdot0", "k_xdot", "k_y", "initial_td_angle"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 < self.initial_td_angle < 0.5 * math.pi:
            raise ValueError("initial_td_angle must lie in (0, 90) deg")


@dataclass(frozen=True)
class PitchPidGains:
    k_p: float = 0.0
    k_d: float = 0.0
    k_i: float = 0.0
    desired_pitch: float = 10.0 * DEG
    desired_pitch_rate: float = 0.0

    def __post_init__(self):
        for name in ("k_p", "k_d", "k_i", "desired_pitch", "desired_pitch_rate"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.k_p, self.k_d, self.k_i, self.desired_pitch, self.desired_pitch_rate)


class ProtocolPhase(enum.Enum):
    VP_PLUS_PID = "vp_plus_pid"
    FIXED_VP_ADAPTATION = "fixed_vp_adaptation"
    CONVERGED = "converged"

    @property
    def rank(self) -> int:
        return list(ProtocolPhase).index(self)


@dataclass(frozen=True)
class VpAdaptationState:
    """Bookkeeping of the stride-wise VP-angle adaptation."""

    k_vp: float = 0.5
    current_vp_angle: float = 0.0
    converged: bool = False
    history: tuple[float, ...] = ()
    updates: tuple[float, ...] = ()
    rate_limit: float = 5.0 * DEG
    window: int = 5
    tolerance: float = 1e-4
    saturated_run: int = 0
    max_saturated_run: int = 20


@dataclass(frozen=True)
class ControllerConfig:
    """Everything the protocol needs besides the model and the VP target."""

    leg: LegPlacementGains = field(default_factory=LegPlacementGains)
    pid: PitchPidGains = field(default_factory=PitchPidGains)
    k_vp: float = 0.5
    vp_rate_limit: float = 5.0 * DEG
    initial_vp_angle: float | None = None
    mean_pitch_window: str = "stride"
    steady_tolerance: float = 1e-4
    steady_count: int = 3
    final_tolerance: float = 1e-6
    phase1_plain_strides: int = 40
    phase2_plain_strides: int = 10
    accelerate: bool = True
    steady_strides: int = 5

    def __post_init__(self):
        if self.mean_pitch_window not in ("stride", "stance"):
            raise ValueError("mean_pitch_window must be 'stride' or 'stance'")
        if not self.vp_rate_limit > 0:
            raise ValueError("vp_rate_limit must be positive")
        if self.steady_strides < 3:
            raise ValueError("at least 3 steady strides are recorded")

    @property
    def desired_pitch(self) -> float:
        return self.pid.desired_pitch

    def start_vp_angle(self, vp) -> float:
        """Initial VP angle; by default the VP sits plumb above/below the
        CoM when the trunk holds the desired pitch."""
        if self.initial_vp_angle is not None:
            return self.initial_vp_angle
        from .model import VpFrame

        return -self.desired_pitch if vp.angle_frame == VpFrame.BODY else 0.0

    def with_leg(self, **kw) -> "ControllerConfig":
        return replace(self, leg=replace(self.leg, **kw))

    def with_pid(self, **kw) -> "ControllerConfig":
        return replace(self, pid=replace(self.pid, **kw))


class TdAngle(NamedTuple):
    angle: float
    clamped: bool


_TD_MIN = 1e-6
_TD_MAX = 0.5 * math.pi - 1e-6


def next_td_angle(
    gains: LegPlacementGains,
    apex_history: Sequence[tuple[float, float]],
    initial_apex: tuple[float, float],
    previous_angle: float | None = None,
) -> TdAngle:
    """Touchdown angle for the coming stride.

    ``apex_history`` holds ``(vx, y)`` of past apexes, the newest last;
    ``initial_apex`` is the reference ``(vx, y)`` of step 0, whose speed is
    the commanded one.  The stride-to-stride terms vanish while only one
    apex is known.
    """
    if not apex_history:
        raise ValueError("at least one apex is required")
    prev = gains.initial_td_angle if previous_angle is None else float(previous_angle)
    vx_i, y_i = apex_history[-1]
    delta = gains.k_xdot0 * (vx_i - initial_apex[0])
    if len(apex_history) >= 2:
        vx_p, y_p = apex_history[-2]
        delta += gains.k_xdot * (vx_i - vx_p) + gains.k_y * (y_i - y_p)
    angle = prev + delta
    if not math.isfinite(angle):
        raise ValueError("non-finite touchdown angle")
    if angle <= _TD_MIN or angle >= _TD_MAX:
        return TdAngle(min(max(angle, _TD_MIN), _TD_MAX), True)
    return TdAngle(angle, False)


def pid_torque(gains: PitchPidGains, pitch: float, pitch_rate: float, integral_error: float) -> float:
    """PID pitch torque; ``integral_error`` is the stance integral of the pitch error."""
    return (
        gains.k_p * (gains.desired_pitch - pitch)
        + gains.k_d * (gains.desired_pitch_rate - pitch_rate)
        + gains.k_i * integral_error
    )


def adapt_vp_angle(adaptation: VpAdaptationState, stride_mean_pitch: float, desired_pitch: float) -> VpAdaptationState:
    """One adaptation step: move the VP angle by ``k_vp * (desired - observed)``.

    The step is clipped to the rate limit; twenty saturated steps in a row
    raise :class:`VpDivergenceError`.
    """
    raw = adaptation.k_vp * (desired_pitch - stride_mean_pitch)
    if not math.isfinite(raw):
        raise VpDivergenceError("non-finite VP update")
    lim = adaptation.rate_limit
    step = min(max(raw, -lim), lim)
    saturated = abs(raw) >= lim
    run = adaptation.saturated_run + 1 if saturated else 0
    if run >= adaptation.max_saturated_run:
        raise VpDivergenceError(f"VP update saturated {run} strides in a row")
    updates = adaptation.updates + (step,)
    recent = updates[-adaptation.window:]
    converged = len(recent) == adaptation.window and all(abs(u) < adaptation.tolerance for u in recent)
    return replace(
        adaptation,
        current_vp_angle=adaptation.current_vp_angle + step,
        history=adaptation.history + (float(stride_mean_pitch),),
        updates=updates,
        converged=converged,
        saturated_run=run,
    )


def run_convergence_protocol(model, controllers, vp, target_speed, **kwargs):
    """Two-phase convergence protocol; see :func:`tslip.protocol.run_convergence_protocol`."""
    from .protocol import run_convergence_protocol as _run

    return _run(model, controllers, vp, target_speed, **kwargs)
