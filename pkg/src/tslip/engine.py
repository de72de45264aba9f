"""Hybrid flight/stance automaton: one apex-to-apex stride at a time."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .controllers import PitchPidGains, ProtocolPhase
from .integrator import (
    Direction,
    EventKind,
    EventSpec,
    IntegrationLimits,
    NoEventError,
    StiffnessError,
    integrate_until_event,
)
from .model import BodyState, ModelParams, VpTarget

__all__ = [
    "StrideControl",
    "WorkTotals",
    "StrideRecord",
    "StrideFailure",
    "GaitRun",
    "simulate_stride",
    "run_gait",
    "cold_start_apex",
    "SAMPLE_DT",
]

SAMPLE_DT = 1e-3
FLIGHT, STANCE = 0, 1

_DESCENT = (
    EventSpec(EventKind.TOUCHDOWN, Direction.FALLING),
    EventSpec(EventKind.FALL, Direction.RISING),
    EventSpec(EventKind.FALL, Direction.FALLING),
)
_ASCENT = (EventSpec(EventKind.APEX, Direction.FALLING), EventSpec(EventKind.FALL, Direction.RISING))
# length before force: equal-time crossings resolve to the lower index
_STANCE = (
    EventSpec(EventKind.TAKEOFF_LENGTH, Direction.RISING),
    EventSpec(EventKind.TAKEOFF_FORCE, Direction.FALLING),
    EventSpec(EventKind.FALL, Direction.FALLING),
    EventSpec(EventKind.FALL, Direction.RISING),
)

# columns of model.stance_sample_table
_L, _LDOT, _THL, _THLDOT, _FSP, _FDP, _FA, _TVP, _TPID, _GX, _GY, _ALPHA, _DOT, _PHIP = range(14)


class StrideFailure(RuntimeError):
    """A stride ended without reaching the next apex."""

    def __init__(self, kind: str, stage: str, time: float, state: np.ndarray, detail: str = ""):
        self.kind = kind
        self.stage = stage
        self.time = float(time)
        self.state = np.asarray(state, dtype=float)[:6].copy()
        msg = f"{kind} during {stage} at t={self.time:.6g} s"
        super().__init__(msg + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class StrideControl:
    """Controller outputs held fixed over one stride."""

    td_angle: float
    vp: VpTarget | None = None
    pid: PitchPidGains | None = None

    @property
    def hip_torque_mode(self) -> str:
        if self.vp is None:
            return "pid" if self.pid is not None else "none"
        return "vp+pid" if self.pid is not None else "vp"


@dataclass(frozen=True)
class WorkTotals:
    """Exact stride work integrals (J), integrated alongside the dynamics."""

    spring_positive: float
    spring_negative: float
    damper: float
    hip_positive: float
    hip_negative: float
    leg_positive: float
    leg_negative: float

    @property
    def throughput(self) -> float:
        return (self.spring_positive - self.spring_negative - self.damper
                + self.hip_positive - self.hip_negative)


@dataclass
class StrideRecord:
    """One apex-to-apex stride sampled at 1 kHz with event tags."""

    index: int
    params: ModelParams
    control: StrideControl
    foot_x: float
    t: np.ndarray
    states: np.ndarray
    phase: np.ndarray
    leg_length: np.ndarray
    leg_rate: np.ndarray
    spring_force: np.ndarray
    damper_force: np.ndarray
    axial_force: np.ndarray
    tangential_force: np.ndarray
    grf: np.ndarray
    tau_vp: np.ndarray
    tau_pid: np.ndarray
    p_hip: np.ndarray
    p_damper: np.ndarray
    events: dict[str, float]
    event_states: dict[str, np.ndarray]
    takeoff_kind: str
    works: WorkTotals
    pitch_integral: float
    stance_pitch_integral: float

    @property
    def tau_hip(self) -> np.ndarray:
        return self.tau_vp + self.tau_pid

    @property
    def period(self) -> float:
        return self.events["apex_end"] - self.events["apex_start"]

    @property
    def stance_duration(self) -> float:
        return self.events["takeoff"] - self.events["touchdown"]

    @property
    def mean_pitch(self) -> float:
        return self.pitch_integral / self.period

    @property
    def stance_mean_pitch(self) -> float:
        return self.stance_pitch_integral / self.stance_duration

    @property
    def stance_mask(self) -> np.ndarray:
        return self.phase == STANCE

    def energy(self, name: str) -> float:
        """Mechanical energy at an event (leg unloaded at apex, TD and TO)."""
        return M.mechanical_energy(self.params, self.event_states[name])

    def vp_points(self) -> np.ndarray:
        """World VP position per sample (NaN in flight or without a VP)."""
        out = np.full((len(self.t), 2), np.nan)
        vp = self.control.vp
        if vp is None:
            return out
        m = self.stance_mask
        th = self.states[m, 2]
        phi = vp.angle + (th if vp.angle_frame == M.VpFrame.BODY else 0.0)
        out[m, 0] = self.states[m, 0] + vp.radius * np.sin(phi)
        out[m, 1] = self.states[m, 1] + vp.radius * np.cos(phi)
        return out


@dataclass
class GaitRun:
    """Outcome of :func:`run_gait`: steady strides plus convergence metadata."""

    strides: list[StrideRecord]
    phase: ProtocolPhase
    converged: bool
    target_speed: float
    vp: VpTarget | None
    metadata: dict = field(default_factory=dict)
    failure: dict | None = None

    def raise_for_failure(self) -> None:
        if self.failure is not None:
            from .protocol import ProtocolFailure

            raise ProtocolFailure(**self.failure)


def cold_start_apex(params: ModelParams, target_speed: float, td_angle: float, pitch: float) -> BodyState:
    """Cold-start apex: hip at 1.05 * l0 * sin(td_angle), pitch as desired, no rotation."""
    hip_y = 1.05 * params.leg_rest_length * math.sin(td_angle)
    return BodyState(0.0, hip_y + params.hip_com_distance * math.cos(pitch), pitch, target_speed, 0.0, 0.0)


def _apex_vector(apex) -> np.ndarray:
    y = np.zeros(M.N_STATE)
    if isinstance(apex, BodyState):
        y[:6] = apex.as_array()
    else:
        a = np.asarray(apex, dtype=float)
        y[: min(6, a.size)] = a[:6]
    return y


def _integrate(kind_stage, rhs, y0, events, limits, t0, p, guards, origin):
    try:
        return integrate_until_event(rhs, y0, events, limits, t0=t0, params=p, guard_kernel=guards, sample_origin=origin)
    except NoEventError as exc:
        kind = {"descent": "no_touchdown", "stance": "no_takeoff", "ascent": "no_apex"}[kind_stage]
        raise StrideFailure(kind, kind_stage, t0 + limits.max_time, y0, str(exc)) from exc
    except StiffnessError as exc:
        raise StrideFailure("integration", kind_stage, t0, y0, str(exc)) from exc


def _stride_core(params, control, y_apex, t_apex, limits, record):
    """Apex -> touchdown -> take-off -> apex on the compiled kernels.

    Returns ``(y_next_apex, t_next_apex, parts)``; ``parts`` carries the
    three integration results and the parameter vector for recording.
    """
    y0 = y_apex.copy()
    y0[M.S_INT] = 0.0
    for k in (M.S_WSP_POS, M.S_WSP_NEG, M.S_WDP, M.S_WH_POS, M.S_WH_NEG, M.S_PITCH_INT,
              M.S_WLEG_POS, M.S_WLEG_NEG):
        y0[k] = 0.0
    pid = control.pid.as_tuple() if control.pid is not None else None
    p = M.pack_params(params, vp=control.vp, pid=pid, td_angle=control.td_angle)
    origin = t_apex
    lim = limits if record else IntegrationLimits(
        max_time=limits.max_time, abs_tol=limits.abs_tol, rel_tol=limits.rel_tol,
        sample_dt=1e6, min_step=limits.min_step,
    )

    if y0[M.S_Y] <= p[M.P_FALL_Y]:
        raise StrideFailure("fall", "descent", t_apex, y0, "CoM height below limit at apex")
    r1 = _integrate("descent", M.flight_rhs, y0, _DESCENT, lim, t_apex, p, M.flight_descent_guards, origin)
    if r1.event.kind is EventKind.FALL:
        what = "CoM height below limit" if r1.event_index == 2 else "pitch beyond 90 deg"
        raise StrideFailure("fall", "descent", r1.t_event, r1.y_event, what)
    y_td = r1.y_event.copy()
    if y_td[M.S_VY] >= 0.0:
        raise StrideFailure("no_touchdown", "descent", r1.t_event, y_td, "foot reached ground while rising")
    hip_x = y_td[M.S_X] - params.hip_com_distance * math.sin(y_td[M.S_TH])
    foot_x = hip_x + params.leg_rest_length * math.cos(control.td_angle)
    p[M.P_FOOT_X] = foot_x

    r2 = _integrate("stance", M.stance_rhs, y_td, _STANCE, lim, r1.t_event, p, M.stance_guards, origin)
    if r2.event.kind is EventKind.FALL:
        what = "CoM height below limit" if r2.event_index == 2 else "pitch beyond 90 deg"
        raise StrideFailure("fall", "stance", r2.t_event, r2.y_event, what)
    y_to = r2.y_event.copy()
    if y_to[M.S_VY] <= 0.0:
        raise StrideFailure("no_apex", "stance", r2.t_event, y_to, "take-off with non-positive vertical speed")

    r3 = _integrate("ascent", M.flight_rhs, y_to, _ASCENT, lim, r2.t_event, p, M.flight_ascent_guards, origin)
    if r3.event.kind is EventKind.FALL:
        raise StrideFailure("fall", "ascent", r3.t_event, r3.y_event, "pitch beyond 90 deg")
    parts = dict(p=p, foot_x=foot_x, r1=r1, r2=r2, r3=r3, y0=y0, y_td=y_td, y_to=y_to)
    return r3.y_event.copy(), r3.t_event, parts


def _stride_summary(y_next, t_next, t_apex, parts):
    r1, r2 = parts["r1"], parts["r2"]
    y_td, y_to = parts["y_td"], parts["y_to"]
    return dict(
        t_touchdown=r1.t_event,
        t_takeoff=r2.t_event,
        t_apex=t_next,
        period=t_next - t_apex,
        mean_pitch=y_next[M.S_PITCH_INT] / (t_next - t_apex),
        stance_mean_pitch=(y_to[M.S_PITCH_INT] - y_td[M.S_PITCH_INT]) / (r2.t_event - r1.t_event),
        takeoff_kind=r2.event.kind.value,
        foot_x=parts["foot_x"],
    )


def _build_record(index, params, control, t_apex, y_next, t_next, parts) -> StrideRecord:
    r1, r2, r3 = parts["r1"], parts["r2"], parts["r3"]
    p = parts["p"]
    segs = [(r1.t, r1.y, FLIGHT), (r2.t, r2.y, STANCE), (r3.t, r3.y, FLIGHT)]
    ts, ys, ph = [], [], []
    last = -np.inf
    for t, y, tag in segs:
        keep = t > last
        ts.append(t[keep])
        ys.append(y[keep])
        ph.append(np.full(int(keep.sum()), tag, dtype=np.int8))
        if keep.any():
            last = t[keep][-1]
    t = np.concatenate(ts)
    y = np.concatenate(ys)
    phase = np.concatenate(ph)
    n = len(t)
    l0 = params.leg_rest_length
    leg_length = np.full(n, l0)
    zeros = lambda: np.zeros(n)  # noqa: E731
    leg_rate, f_sp, f_dp, f_a, f_t, tvp, tpid, php, pdp = (zeros() for _ in range(9))
    grf = np.zeros((n, 2))
    m = phase == STANCE
    if m.any():
        tab = M.stance_sample_table(y[m], p)
        leg_length[m] = tab[:, _L]
        leg_rate[m] = tab[:, _LDOT]
        f_sp[m] = tab[:, _FSP]
        f_dp[m] = tab[:, _FDP]
        f_a[m] = tab[:, _FA]
        tvp[m] = tab[:, _TVP]
        tpid[m] = tab[:, _TPID]
        f_t[m] = (tab[:, _TVP] + tab[:, _TPID]) / tab[:, _L]
        grf[m, 0] = tab[:, _GX]
        grf[m, 1] = tab[:, _GY]
        php[m] = tab[:, _PHIP]
        pdp[m] = -tab[:, _FDP] * tab[:, _LDOT]

    t_td, t_to = r1.t_event, r2.t_event
    idx = np.flatnonzero(m)
    if idx.size:
        ms_i = idx[int(np.argmin(leg_length[idx]))]
        t_ms, y_ms = float(t[ms_i]), y[ms_i, :6].copy()
    else:  # stance shorter than one sample
        t_ms, y_ms = 0.5 * (t_td + t_to), parts["y_td"][:6].copy()
    if not (t_apex < t_td < t_ms < t_to < t_next):
        raise StrideFailure("event_order", "record", t_apex, parts["y0"],
                            f"apex {t_apex}, TD {t_td}, MS {t_ms}, TO {t_to}, apex {t_next}")

    y_next_w = y_next
    y_to = parts["y_to"]
    y_td = parts["y_td"]
    works = WorkTotals(
        spring_positive=float(y_to[M.S_WSP_POS]),
        spring_negative=float(y_to[M.S_WSP_NEG]),
        damper=float(y_to[M.S_WDP]),
        hip_positive=float(y_to[M.S_WH_POS]),
        hip_negative=float(y_to[M.S_WH_NEG]),
        leg_positive=float(y_to[M.S_WLEG_POS]),
        leg_negative=float(y_to[M.S_WLEG_NEG]),
    )
    return StrideRecord(
        index=index, params=params, control=control, foot_x=parts["foot_x"],
        t=t, states=y[:, :6].copy(), phase=phase,
        leg_length=leg_length, leg_rate=leg_rate, spring_force=f_sp, damper_force=f_dp,
        axial_force=f_a, tangential_force=f_t, grf=grf, tau_vp=tvp, tau_pid=tpid,
        p_hip=php, p_damper=pdp,
        events=dict(apex_start=t_apex, touchdown=t_td, midstance=t_ms, takeoff=t_to, apex_end=t_next),
        event_states=dict(
            apex_start=parts["y0"][:6].copy(), touchdown=y_td[:6].copy(), midstance=y_ms,
            takeoff=y_to[:6].copy(), apex_end=y_next_w[:6].copy(),
        ),
        takeoff_kind=r2.event.kind.value,
        works=works,
        pitch_integral=float(y_next[M.S_PITCH_INT]),
        stance_pitch_integral=float(y_to[M.S_PITCH_INT] - y_td[M.S_PITCH_INT]),
    )


def simulate_stride(
    model: ModelParams,
    control: StrideControl,
    apex: BodyState | np.ndarray,
    *,
    index: int = 0,
    limits: IntegrationLimits = IntegrationLimits(max_time=5.0),
    record: bool = True,
):
    """Integrate one stride from a flight apex to the next apex.

    Returns ``(record, next_apex)`` with ``record`` a :class:`StrideRecord`
    (``None`` when ``record`` is false) and ``next_apex`` a
    :class:`BodyState`.  Raises :class:`StrideFailure` on falls, missing
    events, or integration breakdown.
    """
    t_apex = apex.time if isinstance(apex, BodyState) else 0.0
    y = _apex_vector(apex)
    if abs(y[M.S_VY]) > 1e-6:
        raise ValueError(f"stride must start at an apex (vy={y[M.S_VY]:.3g})")
    y_next, t_next, parts = _stride_core(model, control, y, t_apex, limits, record)
    nxt = BodyState.from_array(y_next, time=t_next)
    if not record:
        return None, nxt
    return _build_record(index, model, control, t_apex, y_next, t_next, parts), nxt


def stride_step(model: ModelParams, control: StrideControl, y: np.ndarray, limits: IntegrationLimits):
    """Unrecorded stride from the apex vector ``y`` (apex at t = 0).

    Returns ``(next_apex_vector, summary)``; used by the protocol's
    stride map where only the apex-to-apex map matters.
    """
    y_next, t_next, parts = _stride_core(model, control, _apex_vector(y), 0.0, limits, False)
    return y_next, _stride_summary(y_next, t_next, 0.0, parts)


def run_gait(
    model: ModelParams,
    controllers,
    vp: VpTarget,
    target_speed: float,
    stride_budget: int = 500,
    *,
    seed=None,
    limits: IntegrationLimits = IntegrationLimits(max_time=5.0),
) -> GaitRun:
    """Run the convergence protocol, then record the steady strides.

    Protocol failures are captured in ``GaitRun.failure`` rather than
    raised; call :meth:`GaitRun.raise_for_failure` to re-raise them.
    """
    from .protocol import ProtocolFailure, run_convergence_protocol

    try:
        gait = run_convergence_protocol(
            model, controllers, vp, target_speed, stride_budget=stride_budget, seed=seed, limits=limits,
        )
    except ProtocolFailure as exc:
        return GaitRun(
            strides=[], phase=exc.phase, converged=False, target_speed=target_speed, vp=vp,
            failure=exc.as_dict(),
        )
    return GaitRun(
        strides=list(gait.strides), phase=ProtocolPhase.CONVERGED, converged=True,
        target_speed=target_speed, vp=gait.vp, metadata=gait.metadata(),
    )
