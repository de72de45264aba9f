"""VP-radius x speed sweeps with per-speed damping tuning."""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import TrunkMetrics, WorkLedger, duty_factor, trunk_metrics, work_ledger
from .controllers import ControllerConfig, LegPlacementGains, PitchPidGains
from .engine import GaitRun, run_gait
from .integrator import IntegrationLimits
from .model import ModelParams, VpTarget
from .protocol import ProtocolFailure, ProtocolSeed, run_convergence_protocol

__all__ = [
    "DutyFactorBand",
    "TdAngleSchedule",
    "SweepPlan",
    "SweepCell",
    "SweepResult",
    "TuningResult",
    "TuningFailure",
    "tune_damping_for_duty_factor",
    "run_sweep",
    "search_controller_gains",
    "config_digest",
]

DEG = math.pi / 180.0


def config_digest(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()


def _jsonable(o):
    if hasattr(o, "value"):
        return o.value
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return {k: getattr(o, k) for k in o.__dataclass_fields__}
    raise TypeError(f"not serializable: {type(o)}")


@dataclass(frozen=True)
class DutyFactorBand:
    """Duty-factor band, linear in speed between two anchor speeds.

    ``target_fraction_*`` place the tuning target inside the band (0 = lower
    edge, 1 = upper edge), again interpolated linearly in speed.
    """

    speed_low: float = 4.0
    lower_low: float = 0.25
    upper_low: float = 0.40
    speed_high: float = 10.0
    lower_high: float = 0.18
    upper_high: float = 0.30
    target_fraction_low: float = 0.9
    target_fraction_high: float = 0.1

    def __post_init__(self):
        if not self.speed_high > self.speed_low:
            raise ValueError("speed_high must exceed speed_low")
        for lo, hi in ((self.lower_low, self.upper_low), (self.lower_high, self.upper_high)):
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError("band edges must satisfy 0 <= lower < upper <= 1")
        for f in (self.target_fraction_low, self.target_fraction_high):
            if not 0.0 <= f <= 1.0:
                raise ValueError("target fractions lie in [0, 1]")

    def _s(self, speed):
        return (speed - self.speed_low) / (self.speed_high - self.speed_low)

    def band(self, speed: float) -> tuple[float, float]:
        s = self._s(speed)
        return (self.lower_low + s * (self.lower_high - self.lower_low),
                self.upper_low + s * (self.upper_high - self.upper_low))

    def target(self, speed: float) -> float:
        lo, hi = self.band(speed)
        s = self._s(speed)
        f = self.target_fraction_low + s * (self.target_fraction_high - self.target_fraction_low)
        return lo + f * (hi - lo)


@dataclass(frozen=True)
class TdAngleSchedule:
    """Cold-start touchdown angle, linear in speed (deg at two anchor speeds)."""

    speed_low: float = 4.0
    angle_low_deg: float = 69.4
    speed_high: float = 10.0
    angle_high_deg: float = 57.5

    def angle(self, speed: float) -> float:
        s = (speed - self.speed_low) / (self.speed_high - self.speed_low)
        deg = self.angle_low_deg + s * (self.angle_high_deg - self.angle_low_deg)
        return min(max(deg, 1.0), 89.0) * DEG


@dataclass(frozen=True)
class SweepPlan:
    vp_radii: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, -0.2, -0.4, -0.6)
    speeds: tuple[float, ...] = (4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
    desired_pitch: float = 10.0 * DEG
    band: DutyFactorBand = field(default_factory=DutyFactorBand)
    damping: dict | None = None
    tune: bool = True
    stride_budget: int = 500
    parallelism: int = 1
    max_radius: float = 0.6
    limits: IntegrationLimits = IntegrationLimits(max_time=5.0)

    def __post_init__(self):
        if not self.vp_radii or not self.speeds:
            raise ValueError("sweep grid must be non-empty")
        if any(abs(r) > self.max_radius + 1e-12 for r in self.vp_radii):
            raise ValueError(f"VP radii must lie within +-{self.max_radius} m")
        if len(set(self.vp_radii)) != len(self.vp_radii) or len(set(self.speeds)) != len(self.speeds):
            raise ValueError("duplicate grid values")
        if any(not (s > 0) for s in self.speeds):
            raise ValueError("speeds must be positive")
        if not self.tune and (self.damping is None or any(s not in self.damping for s in self.speeds)):
            raise ValueError("without tuning, a damping coefficient is needed for every speed")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    def cells(self) -> list[tuple[float, float]]:
        return [(s, r) for s in self.speeds for r in self.vp_radii]


@dataclass
class SweepCell:
    speed: float
    radius: float
    damping: float
    converged: bool
    duty_factor: float = math.nan
    metrics: TrunkMetrics | None = None
    ledger: WorkLedger | None = None
    td_angle: float = math.nan
    vp_angle: float = math.nan
    failure: dict | None = None
    run: GaitRun | None = field(default=None, repr=False, compare=False)

    @property
    def stride(self):
        return self.run.strides[0] if self.run is not None and self.run.strides else None

    def row(self) -> dict:
        row = dict(speed=self.speed, vp_radius=self.radius, damping=self.damping, converged=self.converged,
                   duty_factor=self.duty_factor, td_angle_deg=self.td_angle / DEG, vp_angle_deg=self.vp_angle / DEG)
        if self.metrics is not None:
            row.update(self.metrics.as_dict())
        if self.ledger is not None:
            row.update({f"work_{k}": v for k, v in self.ledger.as_dict().items()})
        row["failure"] = "" if self.failure is None else f"{self.failure['reason']}@{self.failure['phase']}"
        return row


@dataclass
class TuningResult:
    speed: float
    damping: float
    duty_factor: float
    band: tuple[float, float]
    target: float | None
    evaluations: list[tuple[float, float]]
    seed: ProtocolSeed | None = None


class TuningFailure(RuntimeError):
    def __init__(self, speed, band, evaluations, detail):
        self.speed, self.band, self.evaluations = speed, band, evaluations
        super().__init__(f"duty-factor band {band} at {speed} m/s unreachable: {detail}; "
                         f"bracket {[(round(c, 3), round(d, 4)) for c, d in evaluations]}")


@dataclass
class SweepResult:
    plan: SweepPlan
    cells: list[SweepCell]
    tuning: dict[float, TuningResult]
    config_hash: str

    def cell(self, speed: float, radius: float) -> SweepCell:
        for c in self.cells:
            if c.speed == speed and c.radius == radius:
                return c
        raise KeyError((speed, radius))

    def rows(self) -> list[dict]:
        return [c.row() for c in self.cells]

    def digest(self) -> str:
        """Digest of every numeric result (bit-level comparison of runs)."""
        h = hashlib.sha256()
        for c in self.cells:
            h.update(json.dumps(c.row(), sort_keys=True, default=_jsonable).encode())
            if c.stride is not None:
                h.update(c.stride.states.tobytes())
        return h.hexdigest()


def controller_for_speed(ctrl: ControllerConfig, schedule: TdAngleSchedule, speed: float) -> ControllerConfig:
    return ctrl.with_leg(initial_td_angle=schedule.angle(speed))


def _gait_df(model, ctrl, speed, c, seed, budget, limits):
    g = run_convergence_protocol(
        model.with_damping(c), ctrl, VpTarget(0.0), speed, stride_budget=budget, seed=seed, limits=limits,
    )
    return duty_factor(g.strides[0]), g


def tune_damping_for_duty_factor(
    model: ModelParams,
    speed: float,
    band: tuple[float, float],
    controllers: ControllerConfig,
    *,
    target: float | None = None,
    initial: float = 800.0,
    bounds: tuple[float, float] = (1.0, 10000.0),
    growth: float = 1.5,
    tolerance: float = 1e-4,
    max_evaluations: int = 60,
    stride_budget: int = 500,
    limits: IntegrationLimits = IntegrationLimits(max_time=5.0),
) -> TuningResult:
    """Bisect the damping coefficient of the VP-at-CoM gait onto the band.

    Without ``target`` the first coefficient whose duty factor falls in
    ``band`` is accepted; with ``target`` the search continues until
    ``|DF - target| < tolerance``.  The search starts at ``initial``,
    grows or shrinks the coefficient geometrically until the goal is
    bracketed, then bisects; every gait is warm-started from the previous
    one.  The duty factor grows with damping.
    """
    lo_b, hi_b = band
    if not 0.0 <= lo_b < hi_b <= 1.0:
        raise ValueError(f"band must lie in [0, 1], got {band}")
    if target is not None and not lo_b <= target <= hi_b:
        raise ValueError("target must lie inside the band")
    if not bounds[0] <= initial <= bounds[1]:
        raise ValueError("initial damping outside bounds")
    evals: list[tuple[float, float]] = []
    seed = None
    goal = target if target is not None else 0.5 * (lo_b + hi_b)

    def f(c):
        nonlocal seed
        if len(evals) >= max_evaluations:
            raise TuningFailure(speed, band, evals, f"no convergence after {max_evaluations} evaluations")
        try:
            df, g = _gait_df(model, controllers, speed, c, seed, stride_budget, limits)
        except ProtocolFailure as exc:
            try:
                df, g = _gait_df(model, controllers, speed, c, None, stride_budget, limits)
            except ProtocolFailure:
                raise TuningFailure(speed, band, evals, f"gait at c={c:g} failed ({exc.reason})") from exc
        seed = g.seed()
        evals.append((c, df))
        return df, g

    def done(df):
        return lo_b <= df <= hi_b and (target is None or abs(df - goal) < tolerance)

    c = float(initial)
    df, g = f(c)
    if done(df):
        return TuningResult(speed, c, df, band, target, evals, g.seed())
    up = df < goal
    a = b = c
    while True:
        c_next = min(c * growth, bounds[1]) if up else max(c / growth, bounds[0])
        if c_next == c:
            raise TuningFailure(speed, band, evals, "goal not bracketed within damping bounds")
        c = c_next
        df, g = f(c)
        if done(df):
            return TuningResult(speed, c, df, band, target, evals, g.seed())
        if (df >= goal) == up:
            a, b = (b, c) if up else (c, b)
            break
        b = c if up else b
        a = c if not up else a
    # invariant: DF(a) < goal <= DF(b)
    while True:
        mid = 0.5 * (a + b)
        df, g = f(mid)
        if done(df):
            return TuningResult(speed, mid, df, band, target, evals, g.seed())
        if df < goal:
            a = mid
        else:
            b = mid


def _cell_from_run(speed, radius, c, run: GaitRun) -> SweepCell:
    if not run.converged:
        return SweepCell(speed, radius, c, False, failure=_plain_failure(run.failure), run=run)
    s = run.strides[0]
    return SweepCell(
        speed=speed, radius=radius, damping=c, converged=True, duty_factor=duty_factor(s),
        metrics=trunk_metrics(s), ledger=work_ledger(s), td_angle=s.control.td_angle,
        vp_angle=s.control.vp.angle, run=run,
    )


def _plain_failure(f):
    if f is None:
        return None
    out = dict(f)
    out["phase"] = getattr(out["phase"], "value", out["phase"])
    return out


def _speed_column(model, ctrl, schedule, plan: SweepPlan, speed: float, keep_runs: bool):
    """Tune one speed, then run its cells, walking outward in |r| per sign."""
    ctrl_s = controller_for_speed(ctrl, schedule, speed)
    tuning = None
    if plan.tune:
        lo, hi = plan.band.band(speed)
        try:
            tuning = tune_damping_for_duty_factor(
                model, speed, (lo, hi), ctrl_s, target=plan.band.target(speed), stride_budget=plan.stride_budget,
                limits=plan.limits,
            )
            c = tuning.damping
        except TuningFailure as exc:
            fail = dict(reason="tuning_failure", phase="vp_plus_pid", stride_index=0, detail=str(exc), state=None)
            return [SweepCell(speed, r, math.nan, False, failure=fail) for r in plan.vp_radii], None
    else:
        c = float(plan.damping[speed])
    m = model.with_damping(c)
    cells = {}
    for sign in (0, 1, -1):
        radii = sorted((r for r in plan.vp_radii if np.sign(r) == sign), key=abs)
        seed = tuning.seed if tuning is not None else None
        for r in radii:
            run = run_gait(m, ctrl_s, VpTarget(r), speed, plan.stride_budget, seed=seed, limits=plan.limits)
            if not run.converged and seed is not None:
                run = run_gait(m, ctrl_s, VpTarget(r), speed, plan.stride_budget, limits=plan.limits)
            if run.converged:
                s0 = run.strides[0]
                seed = ProtocolSeed(_apex_state(s0), s0.control.td_angle, s0.control.vp.angle)
            cell = _cell_from_run(speed, r, c, run)
            if not keep_runs:
                cell.run = None
            cells[r] = cell
    return [cells[r] for r in plan.vp_radii], tuning


def _apex_state(stride):
    from .model import BodyState

    y = stride.event_states["apex_start"]
    return BodyState(0.0, y[1], y[2], y[3], 0.0, y[5])


def _column_task(args):
    return _speed_column(*args)


def run_sweep(
    plan: SweepPlan,
    model: ModelParams | None = None,
    controllers: ControllerConfig | None = None,
    schedule: TdAngleSchedule | None = None,
    *,
    keep_runs: bool = True,
    config_hash: str | None = None,
) -> SweepResult:
    """Run every planned cell; failures are recorded per cell.

    Each speed column is tuned first, then its cells run in order of
    increasing |r_VP| within each sign, each warm-started from its
    neighbour.  Columns are independent and run in parallel up to
    ``plan.parallelism`` worker processes.
    """
    model = model or ModelParams()
    ctrl = controllers or ControllerConfig()
    if abs(ctrl.desired_pitch - plan.desired_pitch) > 0:
        ctrl = ctrl.with_pid(desired_pitch=plan.desired_pitch)
    schedule = schedule or TdAngleSchedule()
    tasks = [(model, ctrl, schedule, plan, s, keep_runs) for s in plan.speeds]
    if plan.parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(plan.parallelism, len(tasks))) as ex:
            columns = list(ex.map(_column_task, tasks))
    else:
        columns = [_column_task(t) for t in tasks]
    cells, tuning = [], {}
    for s, (col, tun) in zip(plan.speeds, columns):
        cells.extend(col)
        if tun is not None:
            tuning[s] = tun
    if config_hash is None:
        config_hash = config_digest(dict(plan=plan, model=model, controllers=ctrl, schedule=schedule))
    return SweepResult(plan=plan, cells=cells, tuning=tuning, config_hash=config_hash)


def search_controller_gains(
    model: ModelParams,
    speed: float,
    grid: dict,
    *,
    base: ControllerConfig | None = None,
    schedule: TdAngleSchedule | None = None,
    radii: tuple[float, ...] = (0.0,),
    stride_budget: int = 500,
) -> list[tuple[int, dict]]:
    """Coarse grid search over leg-placement and PID gains.

    ``grid`` maps any of ``k_p, k_d, k_xdot0, k_xdot, k_y`` to candidate
    values; ``k_i`` follows as ``k_p / 10``.  Each candidate is scored by
    the total strides to convergence over ``radii`` (a failed cell costs
    ``stride_budget + 1``).  Returns ``(score, gains)`` pairs, best first.
    """
    base = base or ControllerConfig()
    schedule = schedule or TdAngleSchedule()
    names = [k for k in ("k_p", "k_d", "k_xdot0", "k_xdot", "k_y") if k in grid]
    out = []
    for values in itertools.product(*(grid[k] for k in names)):
        g = dict(zip(names, values))
        leg = replace(base.leg, **{k: g[k] for k in ("k_xdot0", "k_xdot", "k_y") if k in g},
                      initial_td_angle=schedule.angle(speed))
        pid = base.pid
        if "k_p" in g:
            pid = replace(pid, k_p=g["k_p"], k_i=g["k_p"] / 10.0)
        if "k_d" in g:
            pid = replace(pid, k_d=g["k_d"])
        ctrl = replace(base, leg=leg, pid=pid)
        score = 0
        for r in radii:
            try:
                gait = run_convergence_protocol(model, ctrl, VpTarget(r), speed, stride_budget=stride_budget)
                score += gait.info["strides_used"]
            except ProtocolFailure:
                score += stride_budget + 1
        out.append((score, g))
    out.sort(key=lambda x: x[0])
    return out
