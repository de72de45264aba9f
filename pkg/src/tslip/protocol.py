"""Two-phase gait convergence protocol.

Phase 1 runs the VP controller with the additive pitch PID until the apex
state settles.  Phase 2 disables the PID and adapts the VP angle stride by
stride until the mean pitch matches the desired one.  Both phases are
iterations of a closed-loop apex-to-apex map ``z -> Phi(z)`` with
``z = (y, pitch, pitch_rate, vx, td_angle[, vp_angle])``.  Where plain
iteration of that map is not contracting, its fixed point is located by
Newton steps on ``Phi(z) - z`` (every map evaluation is one simulated
stride and is charged to the stride budget), and the result is then
confirmed by plain iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import (
    ControllerConfig,
    ProtocolPhase,
    VpAdaptationState,
    VpDivergenceError,
    adapt_vp_angle,
    next_td_angle,
)
from .engine import StrideControl, StrideFailure, StrideRecord, cold_start_apex, simulate_stride, stride_step
from .integrator import IntegrationLimits
from .model import BodyState, ModelParams, VpTarget

__all__ = ["ProtocolSeed", "ProtocolFailure", "ConvergedGait", "run_convergence_protocol", "apex_difference"]


class ProtocolFailure(RuntimeError):
    def __init__(self, reason: str, phase: ProtocolPhase, stride_index: int, detail: str = "", state=None):
        self.reason = reason
        self.phase = ProtocolPhase(phase)
        self.stride_index = int(stride_index)
        self.detail = detail
        self.state = None if state is None else [float(v) for v in np.asarray(state).ravel()[:6]]
        super().__init__(f"{reason} in phase {self.phase.value} at stride {self.stride_index}"
                         + (f": {detail}" if detail else ""))

    def as_dict(self) -> dict:
        return dict(reason=self.reason, phase=self.phase, stride_index=self.stride_index,
                    detail=self.detail, state=self.state)


@dataclass(frozen=True)
class ProtocolSeed:
    """Warm-start point: an apex state with the touchdown and VP angles to use first."""

    apex: BodyState
    td_angle: float
    vp_angle: float


@dataclass
class ConvergedGait:
    apex: BodyState
    td_angle: float
    vp: VpTarget
    controllers: ControllerConfig
    target_speed: float
    strides: list[StrideRecord]
    adaptation: VpAdaptationState
    info: dict = field(default_factory=dict)
    phase: ProtocolPhase = ProtocolPhase.CONVERGED

    def seed(self) -> ProtocolSeed:
        return ProtocolSeed(self.apex, self.td_angle, self.vp.angle)

    def metadata(self) -> dict:
        out = dict(self.info)
        out.update(td_angle=self.td_angle, vp_angle=self.vp.angle, apex=self.apex.as_array().tolist())
        return out


def apex_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm difference over (vx, y, pitch, pitch_rate) of two apex vectors."""
    idx = [3, 1, 2, 5]
    return float(np.max(np.abs(np.asarray(a)[idx] - np.asarray(b)[idx])))


class _Budget:
    def __init__(self, limit: int):
        self.limit = int(limit)
        self.used = 0
        self.phase = ProtocolPhase.VP_PLUS_PID

    def take(self):
        if self.used >= self.limit:
            raise ProtocolFailure("stride_budget_exhausted", self.phase, self.used,
                                  f"no convergence within {self.limit} strides")
        self.used += 1


class _StrideMap:
    """Closed-loop apex map of one protocol phase."""

    def __init__(self, model, ctrl: ControllerConfig, vp: VpTarget, speed, budget, limits, adapt: bool):
        self.model, self.ctrl, self.vp, self.speed = model, ctrl, vp, speed
        self.budget, self.limits, self.adapt = budget, limits, adapt
        self.clamp_hits = 0

    def control(self, z) -> StrideControl:
        return StrideControl(
            td_angle=float(z[4]),
            vp=self.vp.with_angle(float(z[5])),
            pid=None if self.adapt else self.ctrl.pid,
        )

    def mean_pitch(self, summary) -> float:
        return summary["mean_pitch" if self.ctrl.mean_pitch_window == "stride" else "stance_mean_pitch"]

    def __call__(self, z):
        """Return ``(z_next, apex_next, summary)``; raises StrideFailure."""
        self.budget.take()
        y = np.zeros(6)
        y[1], y[2], y[5], y[3] = z[0], z[1], z[2], z[3]
        nxt, summary = stride_step(self.model, self.control(z), y, self.limits)
        td = next_td_angle(self.ctrl.leg, [(z[3], z[0]), (nxt[3], nxt[1])], (self.speed, z[0]), z[4])
        self.clamp_hits += int(td.clamped)
        z_next = np.array([nxt[1], nxt[2], nxt[5], nxt[3], td.angle, z[5]])
        if self.adapt:
            raw = self.ctrl.k_vp * (self.ctrl.desired_pitch - self.mean_pitch(summary))
            z_next[5] = z[5] + min(max(raw, -self.ctrl.vp_rate_limit), self.ctrl.vp_rate_limit)
        return z_next, nxt, summary


def _newton(phi, z0, dims, tol=1e-10, accept=1e-8, max_iter=30):
    """Newton on ``phi(z) - z`` over the leading ``dims`` coordinates.

    Least squares keeps neutral directions (e.g. the VP angle when the VP
    sits at the CoM) untouched.  Returns ``(z, residual, iterations)``;
    failed stride evaluations count as infinite residual.
    """

    def resid(z):
        try:
            return phi(z)[0][:dims] - z[:dims]
        except StrideFailure:
            return None

    z = np.array(z0, dtype=float)
    f = resid(z)
    if f is None:
        return z, math.inf, 0
    norm = float(np.max(np.abs(f)))
    for it in range(max_iter):
        if norm < tol:
            return z, norm, it
        jac = np.empty((dims, dims))
        for j in range(dims):
            h = 1e-7 * max(1.0, abs(z[j]))
            zp = z.copy()
            zp[j] += h
            fp = resid(zp)
            if fp is None:
                zp[j] -= 2 * h
                fp = resid(zp)
                if fp is None:
                    return z, norm, it
                h = -h
            jac[:, j] = (fp - f) / h
        step = np.linalg.lstsq(jac, -f, rcond=1e-10)[0]
        lam, improved = 1.0, False
        for _ in range(6):
            zt = z.copy()
            zt[:dims] += lam * step
            ft = resid(zt)
            if ft is not None and float(np.max(np.abs(ft))) < norm:
                z, f, norm, improved = zt, ft, float(np.max(np.abs(ft))), True
                break
            lam *= 0.5
        if not improved:
            break
    return z, norm, max_iter


def _plain(phi, z, n, tol, count, budget, phase, accelerate):
    """Iterate ``phi`` up to ``n`` strides; stop once ``count`` successive
    apex differences are below ``tol`` or the iteration is diverging."""
    best, best_d = z, math.inf
    hits = rising = 0
    prev_d = math.inf
    for _ in range(n):
        try:
            z_next, _, _ = phi(z)
        except StrideFailure as exc:
            # with acceleration on, a stride lost while iterating hands over
            # to the Newton search from the best state seen so far
            if accelerate and best_d < math.inf:
                break
            raise ProtocolFailure(exc.kind, phase, budget.used, str(exc), exc.state) from exc
        d = float(max(abs(z_next[0] - z[0]), abs(z_next[1] - z[1]), abs(z_next[2] - z[2]), abs(z_next[3] - z[3])))
        if d < best_d:
            best, best_d = z, d
        hits = hits + 1 if d < tol else 0
        rising = rising + 1 if d > prev_d else 0
        prev_d = d
        z = z_next
        if hits >= count:
            return z, True, best
        if accelerate and rising >= 3:
            break
    return z, False, best


def run_convergence_protocol(
    model: ModelParams,
    controllers: ControllerConfig,
    vp: VpTarget,
    target_speed: float,
    *,
    stride_budget: int = 500,
    seed: ProtocolSeed | None = None,
    limits: IntegrationLimits = IntegrationLimits(max_time=5.0),
) -> ConvergedGait:
    """Drive a cold (or seeded) start to a periodic fixed-VP gait.

    Raises :class:`ProtocolFailure` on falls, VP-adaptation divergence, or
    when ``stride_budget`` strides do not suffice.
    """
    ctrl = controllers
    if not (math.isfinite(target_speed) and target_speed > 0):
        raise ValueError("target speed must be positive")
    budget = _Budget(stride_budget)
    if seed is None:
        td0 = ctrl.leg.initial_td_angle
        apex = cold_start_apex(model, target_speed, td0, ctrl.desired_pitch)
        vp_angle = ctrl.start_vp_angle(vp)
    else:
        apex, td0, vp_angle = seed.apex, seed.td_angle, seed.vp_angle
    z = np.array([apex.y_com, apex.pitch, apex.pitch_rate, apex.vx, td0, vp_angle])
    info = dict(newton_iterations={}, residual={})
    z_start = z

    # phase 1: VP + PID
    phi1 = _StrideMap(model, ctrl, vp, target_speed, budget, limits, adapt=False)
    z, steady, best = _plain(phi1, z, ctrl.phase1_plain_strides, ctrl.steady_tolerance, ctrl.steady_count,
                             budget, ProtocolPhase.VP_PLUS_PID, ctrl.accelerate)
    info["phase1_plain_strides"] = budget.used
    if not steady:
        if not ctrl.accelerate:
            raise ProtocolFailure("not_steady", ProtocolPhase.VP_PLUS_PID, budget.used,
                                  "phase-1 iteration did not settle")
        z, res, its = _newton(phi1, best, 5)
        if not res < ctrl.steady_tolerance and best is not z_start:
            z, res, more = _newton(phi1, z_start, 5)
            its += more
        info["newton_iterations"]["vp_plus_pid"] = its
        info["residual"]["vp_plus_pid"] = res
        if not res < ctrl.steady_tolerance:
            raise ProtocolFailure("not_steady", ProtocolPhase.VP_PLUS_PID, budget.used,
                                  f"phase-1 fixed point not found (residual {res:.3g})")
    info["phase1_strides"] = budget.used
    info["phase1_td_angle"] = float(z[4])
    info["phase1_state"] = [float(v) for v in z]

    # phase 2: PID off, VP angle adapted
    budget.phase = ProtocolPhase.FIXED_VP_ADAPTATION
    phi2 = _StrideMap(model, ctrl, vp, target_speed, budget, limits, adapt=True)
    z, settled, best = _plain(phi2, z, ctrl.phase2_plain_strides, ctrl.final_tolerance, ctrl.steady_strides,
                              budget, ProtocolPhase.FIXED_VP_ADAPTATION, ctrl.accelerate)
    info["phase2_plain_strides"] = budget.used - info["phase1_strides"]
    if not settled and ctrl.accelerate:
        z, res, its = _newton(phi2, best, 6)
        info["newton_iterations"]["fixed_vp_adaptation"] = its
        info["residual"]["fixed_vp_adaptation"] = res
        if not res < ctrl.final_tolerance:
            raise ProtocolFailure("not_converged", ProtocolPhase.FIXED_VP_ADAPTATION, budget.used,
                                  f"fixed point not found (residual {res:.3g})")

    # confirmation: plain closed-loop strides, recorded
    adaptation = VpAdaptationState(k_vp=ctrl.k_vp, current_vp_angle=float(z[5]), rate_limit=ctrl.vp_rate_limit,
                                   window=ctrl.steady_strides)
    td = float(z[4])
    apex = BodyState(0.0, float(z[0]), float(z[1]), float(z[3]), 0.0, float(z[2]))
    first_apex, first_td = apex, td
    strides: list[StrideRecord] = []
    worst = 0.0
    for _ in range(ctrl.steady_strides):
        budget.take()
        control = StrideControl(td_angle=td, vp=vp.with_angle(adaptation.current_vp_angle), pid=None)
        try:
            rec, nxt = simulate_stride(model, control, apex, index=budget.used - 1, limits=limits)
        except StrideFailure as exc:
            raise ProtocolFailure(exc.kind, ProtocolPhase.FIXED_VP_ADAPTATION, budget.used, str(exc), exc.state) from exc
        strides.append(rec)
        mean = rec.mean_pitch if ctrl.mean_pitch_window == "stride" else rec.stance_mean_pitch
        try:
            adaptation = adapt_vp_angle(adaptation, mean, ctrl.desired_pitch)
        except VpDivergenceError as exc:
            raise ProtocolFailure("vp_divergence", ProtocolPhase.FIXED_VP_ADAPTATION, budget.used, str(exc)) from exc
        td = next_td_angle(ctrl.leg, [(apex.vx, apex.y_com), (nxt.vx, nxt.y_com)], (target_speed, apex.y_com), td).angle
        worst = max(worst, apex_difference(apex.as_array(), nxt.as_array()))
        apex = nxt
    if worst >= ctrl.final_tolerance or not adaptation.converged:
        raise ProtocolFailure("not_converged", ProtocolPhase.FIXED_VP_ADAPTATION, budget.used,
                              f"steady strides drift by {worst:.3g}")
    info.update(strides_used=budget.used, apex_repeat=worst, clamp_hits=phi1.clamp_hits + phi2.clamp_hits)
    return ConvergedGait(
        apex=first_apex, td_angle=first_td, vp=vp.with_angle(adaptation.current_vp_angle),
        controllers=ctrl, target_speed=target_speed, strides=strides, adaptation=adaptation, info=info,
    )
