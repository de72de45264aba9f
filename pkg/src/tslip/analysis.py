"""Per-stride metrics: trunk oscillation, duty factor, GRF split, work ledger."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import model as M
from .engine import STANCE, StrideRecord

__all__ = [
    "STEPS_PER_STRIDE",
    "PitchDirection",
    "TrunkMetrics",
    "WorkLedger",
    "GrfDecomposition",
    "EnergyTimecourse",
    "ForceScaling",
    "trunk_metrics",
    "duty_factor",
    "grf_decompose",
    "work_ledger",
    "energy_timecourse",
    "force_scaling_report",
    "grf_moment_about_vp",
    "stride_metrics",
]

# A simulated apex-to-apex record is one step of the one-legged model.
# Duty factors are quoted per gait cycle of two steps (left + right).
STEPS_PER_STRIDE = 2

RAD2DEG = 180.0 / math.pi
# pitch ranges below this (rad) count as a constant trunk angle
FLAT_PITCH_TOL = 1e-9


class PitchDirection(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class TrunkMetrics:
    """Trunk oscillation summary of one stride, in degrees and deg/s.

    ``mean_inclination`` follows the pitch convention (forward lean
    positive).  The two angular velocities are quoted counter-clockwise
    positive, so backward rotation is positive and forward rotation is
    negative.
    """

    mean_inclination: float
    angular_excursion: float
    mean_angular_velocity: float
    peak_angular_velocity: float
    max_flexion_phase: float
    pitch_direction: PitchDirection

    def as_dict(self) -> dict:
        d = asdict(self)
        d["pitch_direction"] = self.pitch_direction.value
        return d


@dataclass(frozen=True)
class WorkLedger:
    """Stride works in J.  ``residual`` is the energy-audit mismatch
    ``dE - (spring + damper + hip)``; ``imbalance`` is the net actuator
    work, zero on a periodic gait."""

    spring_positive: float
    spring_negative: float
    damper_net: float
    hip_positive: float
    hip_negative: float
    leg_positive: float
    leg_negative: float
    delta_energy: float

    @property
    def spring_net(self) -> float:
        return self.spring_positive + self.spring_negative

    @property
    def hip_net(self) -> float:
        return self.hip_positive + self.hip_negative

    @property
    def leg_net(self) -> float:
        return self.leg_positive + self.leg_negative

    @property
    def residual(self) -> float:
        return self.delta_energy - (self.spring_net + self.damper_net + self.hip_net)

    @property
    def imbalance(self) -> float:
        return self.hip_net + self.damper_net

    @property
    def throughput(self) -> float:
        return (self.spring_positive - self.spring_negative - self.damper_net
                + self.hip_positive - self.hip_negative)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(spring_net=self.spring_net, hip_net=self.hip_net, leg_net=self.leg_net,
                 residual=self.residual, imbalance=self.imbalance, throughput=self.throughput)
        return d


@dataclass(frozen=True)
class GrfDecomposition:
    """Stance-sample GRF split into spring, damper and hip (tangential) parts."""

    t: np.ndarray
    grf: np.ndarray
    axial: np.ndarray
    tangential: np.ndarray
    spring: np.ndarray
    damper: np.ndarray

    @property
    def without_damping(self) -> np.ndarray:
        return self.grf - self.damper

    @property
    def without_hip(self) -> np.ndarray:
        return self.grf - self.tangential


@dataclass(frozen=True)
class EnergyTimecourse:
    """Cumulative stance energies (J) versus percent of stance."""

    stance_percent: np.ndarray
    hip: np.ndarray
    damper: np.ndarray
    spring: np.ndarray
    midstance_percent: float
    reversal_percent: float
    reversal_kind: str


@dataclass(frozen=True)
class ForceScaling:
    """Peak-value ratios ``fast / slow`` between two gaits."""

    damping: float
    compression: float
    leg_rate: float
    spring_force: float
    damper_force: float
    axial_force: float

    def as_dict(self) -> dict:
        return asdict(self)


def duty_factor(stride: StrideRecord, steps_per_stride: int = STEPS_PER_STRIDE) -> float:
    """Contact time over the gait-cycle period (``steps_per_stride`` records)."""
    return stride.stance_duration / (steps_per_stride * stride.period)


def _pitch_series(stride: StrideRecord):
    """Samples merged with the exact event states, sorted in time."""
    ev_t = np.array([stride.events[k] for k in ("touchdown", "midstance", "takeoff")])
    ev_y = np.array([stride.event_states[k] for k in ("touchdown", "midstance", "takeoff")])
    t = np.concatenate([stride.t, ev_t])
    th = np.concatenate([stride.states[:, 2], ev_y[:, 2]])
    w = np.concatenate([stride.states[:, 5], ev_y[:, 5]])
    order = np.argsort(t, kind="stable")
    return t[order], th[order], w[order]


def trunk_metrics(stride: StrideRecord) -> TrunkMetrics:
    """Trunk metrics of a steady stride.

    The mean angular velocity is the excursion divided by the time spent
    pitching in the stance direction, i.e. between the stride's pitch
    extrema in the order set by the direction.
    """
    t, th, w = _pitch_series(stride)
    th_td = stride.event_states["touchdown"][2]
    th_ms = stride.event_states["midstance"][2]
    forward = th_ms > th_td
    direction = PitchDirection.FORWARD if forward else PitchDirection.BACKWARD
    i_max, i_min = int(np.argmax(th)), int(np.argmin(th))
    excursion = float(th[i_max] - th[i_min])
    if excursion < FLAT_PITCH_TOL:
        excursion, i_max, i_min = 0.0, 0, 0
    period = stride.period
    # segment from the extremum where stance pitching starts to the one where it ends
    t_start = t[i_min] if forward else t[i_max]
    t_end = t[i_max] if forward else t[i_min]
    seg = (t_end - t_start) % period
    if excursion == 0.0 or seg == 0.0:
        mean_w = 0.0
    else:
        mean_w = (-1.0 if forward else 1.0) * excursion / seg
    k = int(np.argmax(np.abs(w)))
    phase = 0.0 if excursion == 0.0 else ((t[i_max] - stride.events["touchdown"]) % period) / period * 100.0
    return TrunkMetrics(
        mean_inclination=stride.mean_pitch * RAD2DEG,
        angular_excursion=excursion * RAD2DEG,
        mean_angular_velocity=mean_w * RAD2DEG,
        peak_angular_velocity=-w[k] * RAD2DEG,
        max_flexion_phase=float(phase) % 100.0,
        pitch_direction=direction,
    )


def _leg_frames(stride: StrideRecord, mask):
    p = stride.params
    st = stride.states[mask]
    hx = st[:, 0] - p.hip_com_distance * np.sin(st[:, 2])
    hy = st[:, 1] - p.hip_com_distance * np.cos(st[:, 2])
    r = np.column_stack([hx - stride.foot_x, hy])
    e = r / np.linalg.norm(r, axis=1)[:, None]
    n = np.column_stack([-e[:, 1], e[:, 0]])
    return e, n


def grf_decompose(stride: StrideRecord, params: M.ModelParams | None = None) -> GrfDecomposition:
    """Split each stance sample's GRF by algebraic subtraction (no re-simulation)."""
    m = stride.phase == STANCE
    e, n = _leg_frames(stride, m)
    axial = stride.axial_force[m, None] * e
    tangential = stride.tangential_force[m, None] * n
    spring = stride.spring_force[m, None] * e
    damper = -stride.damper_force[m, None] * e
    return GrfDecomposition(
        t=stride.t[m], grf=stride.grf[m], axial=axial, tangential=tangential, spring=spring, damper=damper,
    )


def grf_moment_about_vp(stride: StrideRecord) -> np.ndarray:
    """Normalized moment of the GRF about the VP for every stance sample.

    ``|cross(V - F, GRF)| / (|GRF| * max(|r_VP|, l0))``; zero when the GRF
    line passes through the VP.
    """
    m = stride.phase == STANCE
    vp = stride.vp_points()[m]
    g = stride.grf[m]
    rx = vp[:, 0] - stride.foot_x
    ry = vp[:, 1]
    mom = rx * g[:, 1] - ry * g[:, 0]
    radius = abs(stride.control.vp.radius) if stride.control.vp is not None else 0.0
    scale = np.linalg.norm(g, axis=1) * max(radius, stride.params.leg_rest_length)
    return np.abs(mom) / scale


def work_ledger(stride: StrideRecord) -> WorkLedger:
    w = stride.works
    e0 = M.mechanical_energy(stride.params, stride.event_states["apex_start"])
    e1 = M.mechanical_energy(stride.params, stride.event_states["apex_end"])
    return WorkLedger(
        spring_positive=w.spring_positive,
        spring_negative=w.spring_negative,
        damper_net=w.damper,
        hip_positive=w.hip_positive,
        hip_negative=w.hip_negative,
        leg_positive=w.leg_positive,
        leg_negative=w.leg_negative,
        delta_energy=e1 - e0,
    )


def _cumtrapz(y, x):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


def _stance_powers(stride: StrideRecord):
    """Stance powers at the samples plus exact TD/TO end points."""
    p = stride.params
    m = stride.phase == STANCE
    t = stride.t[m]
    ph, pd = stride.p_hip[m], stride.p_damper[m]
    ps = stride.spring_force[m] * stride.leg_rate[m]
    pk = _packed(stride)
    ends = []
    for key in ("touchdown", "takeoff"):
        y = np.zeros(M.N_STATE)
        y[:6] = stride.event_states[key]
        res = M.stance_sample_table(y[None, :], pk)[0]
        ends.append((stride.events[key], res[13], -res[5] * res[1], res[4] * res[1]))
    t = np.concatenate([[ends[0][0]], t, [ends[1][0]]])
    ph = np.concatenate([[ends[0][1]], ph, [ends[1][1]]])
    pd = np.concatenate([[ends[0][2]], pd, [ends[1][2]]])
    ps = np.concatenate([[ends[0][3]], ps, [ends[1][3]]])
    return t, ph, pd, ps


def _packed(stride: StrideRecord) -> np.ndarray:
    c = stride.control
    pid = c.pid.as_tuple() if c.pid is not None else None
    pk = M.pack_params(stride.params, foot_x=stride.foot_x, vp=c.vp, pid=pid, td_angle=c.td_angle)
    return pk


def energy_timecourse(stride: StrideRecord) -> EnergyTimecourse:
    """Cumulative hip, damper and spring energy over stance.

    The reversal is the interior extremum of the cumulative hip energy
    with the largest magnitude, located at a sign change of hip power
    (linear interpolation between samples).
    """
    t, ph, pd, ps = _stance_powers(stride)
    t_td, t_to = stride.events["touchdown"], stride.events["takeoff"]
    pct = (t - t_td) / (t_to - t_td) * 100.0
    hip = _cumtrapz(ph, t)
    ms_pct = (stride.events["midstance"] - t_td) / (t_to - t_td) * 100.0
    best, best_val, kind = math.nan, -1.0, "none"
    for i in range(1, len(ph) - 2):
        a, b = ph[i], ph[i + 1]
        if (a > 0) != (b > 0) and a != b:
            f = a / (a - b)
            tz = t[i] + f * (t[i + 1] - t[i])
            val = hip[i] + 0.5 * a * (tz - t[i])
            if abs(val) > best_val:
                best_val = abs(val)
                best = (tz - t_td) / (t_to - t_td) * 100.0
                kind = "maximum" if a > 0 else "minimum"
    return EnergyTimecourse(
        stance_percent=pct, hip=hip, damper=_cumtrapz(pd, t), spring=_cumtrapz(ps, t),
        midstance_percent=float(ms_pct), reversal_percent=float(best), reversal_kind=kind,
    )


def _peaks(stride: StrideRecord) -> dict:
    m = stride.phase == STANCE
    l0 = stride.params.leg_rest_length
    return dict(
        compression=float(np.max(l0 - stride.leg_length[m])),
        leg_rate=float(np.max(np.abs(stride.leg_rate[m]))),
        spring_force=float(np.max(np.abs(stride.spring_force[m]))),
        damper_force=float(np.max(np.abs(stride.damper_force[m]))),
        axial_force=float(np.max(np.abs(stride.axial_force[m]))),
    )


def force_scaling_report(slow: StrideRecord, fast: StrideRecord) -> ForceScaling:
    """Peak ratios ``fast / slow`` of damping, compression, leg rate and forces."""
    a, b = _peaks(slow), _peaks(fast)
    c_slow = slow.params.damping_coefficient
    c_fast = fast.params.damping_coefficient
    return ForceScaling(
        damping=c_fast / c_slow if c_slow > 0 else math.nan,
        compression=b["compression"] / a["compression"],
        leg_rate=b["leg_rate"] / a["leg_rate"],
        spring_force=b["spring_force"] / a["spring_force"],
        damper_force=b["damper_force"] / a["damper_force"] if a["damper_force"] > 0 else math.nan,
        axial_force=b["axial_force"] / a["axial_force"],
    )


def stride_metrics(stride: StrideRecord) -> dict:
    """Flat metric row used by the CSV writers and the round-trip check."""
    row = dict(stride_index=stride.index, duty_factor=duty_factor(stride),
               period=stride.period, stance_duration=stride.stance_duration)
    row.update(trunk_metrics(stride).as_dict())
    row.update({f"work_{k}": v for k, v in work_ledger(stride).as_dict().items()})
    tc = energy_timecourse(stride)
    row.update(midstance_percent=tc.midstance_percent, hip_reversal_percent=tc.reversal_percent)
    return row
