"""Adaptive Dormand-Prince 5(4) integration with event location.

The stepping loop in :func:`_dopri5_events` is written in the subset of
Python that numba can compile.  When the vector field and guard functions
passed to :func:`integrate_until_event` are numba dispatchers, the compiled
loop is used; plain Python callables go through the identical interpreted
loop.  Either way the algorithm and the results are the same.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import numba

__all__ = [
    "Direction",
    "EventKind",
    "EventSpec",
    "IntegrationLimits",
    "IntegrationResult",
    "NoEventError",
    "StiffnessError",
    "integrate_until_event",
    "foot_height_guard",
]


class NoEventError(RuntimeError):
    """No armed event fired before ``max_time``."""


class StiffnessError(RuntimeError):
    """Step size collapsed below the resolvable limit."""


class Direction(enum.IntEnum):
    RISING = 1
    FALLING = -1
    ANY = 0


class EventKind(enum.Enum):
    TOUCHDOWN = "touchdown"
    TAKEOFF_FORCE = "takeoff_force"
    TAKEOFF_LENGTH = "takeoff_length"
    APEX = "apex"
    FALL = "fall"


@dataclass(frozen=True)
class EventSpec:
    """A zero crossing of ``guard(t, y)`` that terminates integration.

    ``guard`` is only used by the interpreted path.  For the compiled path the
    guard values come from the vectorised guard kernel handed to
    :func:`integrate_until_event`, and ``EventSpec`` carries only the kind and
    direction of each component.
    """

    kind: EventKind
    direction: Direction = Direction.ANY
    guard: Callable[[float, np.ndarray], float] | None = None


@dataclass(frozen=True)
class IntegrationLimits:
    max_time: float = 10.0
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    sample_dt: float = 1e-3
    min_step: float = 1e-14


@dataclass
class IntegrationResult:
    t: np.ndarray
    y: np.ndarray
    event: EventSpec
    event_index: int
    t_event: float
    y_event: np.ndarray
    n_steps: int = 0
    guard_value: float = 0.0
    extras: dict = field(default_factory=dict)


# Dormand-Prince 5(4) tableau
C2, C3, C4, C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
A21 = 1.0 / 5.0
A31, A32 = 3.0 / 40.0, 9.0 / 40.0
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = (
    9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0,
)
A71, A73, A74, A75, A76 = (
    35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0,
)
E1, E3, E4, E5, E6, E7 = (
    71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0,
)
D1, D3, D4, D5, D6, D7 = (
    -12715105075.0 / 11282082432.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
)

STATUS_EVENT = 0
STATUS_MAX_TIME = 1
STATUS_STIFF = 2
STATUS_NONFINITE = 3


def _interp(r1, r2, r3, r4, r5, theta):
    th1 = 1.0 - theta
    return r1 + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)))


def _dopri5_events(rhs, guards, t0, y0, p, directions, max_time, atol, rtol, sample_dt, sample_origin, min_step):
    n = y0.shape[0]
    n_ev = directions.shape[0]
    cap = int(max_time / sample_dt) + 2
    ts = np.empty(cap)
    ys = np.empty((cap, n))
    n_samp = 0
    k_next = int(np.ceil((t0 - sample_origin) / sample_dt - 1e-9))
    next_sample = sample_origin + k_next * sample_dt

    t = t0
    y = y0.copy()
    k1 = rhs(t, y, p)
    g_old = guards(t, y, p)

    # initial step guess (Hairer & Wanner, II.4)
    sc = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / sc) ** 2))
    d1 = np.sqrt(np.mean((k1 / sc) ** 2))
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6
    else:
        h = 0.01 * d0 / d1
    h = min(h, max_time)
    y1 = y + h * k1
    k2 = rhs(t + h, y1, p)
    d2 = np.sqrt(np.mean(((k2 - k1) / sc) ** 2)) / h
    dm = max(d1, d2)
    if dm <= 1e-15:
        h1 = max(1e-6, h * 1e-3)
    else:
        h1 = (0.01 / dm) ** 0.2
    h = min(100.0 * h, h1, max_time)

    t_end = t0 + max_time
    n_steps = 0
    status = STATUS_MAX_TIME
    ev_idx = -1
    t_ev = t_end
    y_ev = y.copy()

    while True:
        if t >= t_end:
            status = STATUS_MAX_TIME
            break
        if h < min_step * max(1.0, abs(t)):
            status = STATUS_STIFF
            break
        if t + h > t_end:
            h = t_end - t

        k2 = rhs(t + C2 * h, y + h * (A21 * k1), p)
        k3 = rhs(t + C3 * h, y + h * (A31 * k1 + A32 * k2), p)
        k4 = rhs(t + C4 * h, y + h * (A41 * k1 + A42 * k2 + A43 * k3), p)
        k5 = rhs(t + C5 * h, y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4), p)
        k6 = rhs(t + h, y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5), p)
        y_new = y + h * (A71 * k1 + A73 * k3 + A74 * k4 + A75 * k5 + A76 * k6)
        k7 = rhs(t + h, y_new, p)

        if not np.all(np.isfinite(y_new)):
            h *= 0.25
            if h < min_step * max(1.0, abs(t)):
                status = STATUS_NONFINITE
                break
            continue

        err_vec = h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = np.sqrt(np.mean((err_vec / sc) ** 2))

        if err > 1.0:
            fac = max(0.2, 0.9 * err ** -0.2)
            h *= fac
            continue

        n_steps += 1
        t_new = t + h
        r1 = y
        r2 = y_new - y
        r3 = h * k1 - r2
        r4 = r2 - h * k7 - r3
        r5 = h * (D1 * k1 + D3 * k3 + D4 * k4 + D5 * k5 + D6 * k6 + D7 * k7)

        g_new = guards(t_new, y_new, p)
        best = -1
        best_t = t_new
        for i in range(n_ev):
            a = g_old[i]
            b = g_new[i]
            d = directions[i]
            hit = False
            if d >= 0 and a < 0.0 and b >= 0.0:
                hit = True
            if d <= 0 and a > 0.0 and b <= 0.0:
                hit = True
            if not hit:
                continue
            # Illinois-modified regula falsi on the dense interpolant
            lo, hi = 0.0, 1.0
            glo, ghi = a, b
            side = 0
            th = 1.0
            for _ in range(200):
                th = (lo * ghi - hi * glo) / (ghi - glo)
                if th <= lo or th >= hi:
                    th = 0.5 * (lo + hi)
                yy = _interp(r1, r2, r3, r4, r5, th)
                gm = guards(t + th * h, yy, p)[i]
                if gm == 0.0:
                    lo = th
                    hi = th
                    break
                if (gm > 0.0) == (ghi > 0.0):
                    hi = th
                    ghi = gm
                    if side == 1:
                        glo *= 0.5
                    side = 1
                else:
                    lo = th
                    glo = gm
                    if side == -1:
                        ghi *= 0.5
                    side = -1
                if (hi - lo) * h < 1e-14:
                    break
            # report the bracket end on the post-crossing side
            t_i = t + hi * h
            if t_i < best_t - 1e-12 or best < 0:
                best = i
                best_t = t_i
            elif abs(t_i - best_t) <= 1e-12:
                # simultaneous crossings resolve to the lower index
                if i < best:
                    best = i
                    best_t = min(best_t, t_i)

        t_stop = best_t if best >= 0 else t_new
        while next_sample <= t_stop + 1e-15 * max(1.0, abs(t_stop)) and n_samp < cap:
            if next_sample >= t - 1e-15 * max(1.0, abs(t)):
                th = (next_sample - t) / h
                if th > 1.0:
                    th = 1.0
                if th < 0.0:
                    th = 0.0
                ys[n_samp, :] = _interp(r1, r2, r3, r4, r5, th)
                ts[n_samp] = next_sample
                n_samp += 1
            k_next += 1
            next_sample = sample_origin + k_next * sample_dt

        if best >= 0:
            status = STATUS_EVENT
            ev_idx = best
            t_ev = best_t
            y_ev = _interp(r1, r2, r3, r4, r5, (best_t - t) / h)
            break

        t = t_new
        y = y_new
        k1 = k7
        g_old = g_new
        err = max(err, 1e-10)
        fac = min(10.0, max(0.2, 0.9 * err ** -0.2))
        h *= fac

    if status != STATUS_EVENT:
        y_ev = y.copy()
        t_ev = t
    return status, ev_idx, t_ev, y_ev, ts[:n_samp].copy(), ys[:n_samp].copy(), n_steps


_dopri5_events_jit = numba.njit(cache=False)(_dopri5_events)
_interp_py = _interp
_interp = numba.njit(cache=True)(_interp)


def _is_compiled(fn) -> bool:
    return isinstance(fn, numba.core.registry.CPUDispatcher)


def integrate_until_event(
    derivative,
    initial,
    events: Sequence[EventSpec],
    limits: IntegrationLimits = IntegrationLimits(),
    *,
    t0: float = 0.0,
    params: np.ndarray | None = None,
    guard_kernel=None,
    sample_origin: float | None = None,
) -> IntegrationResult:
    """Integrate ``derivative`` from ``initial`` until the first armed event.

    Two calling conventions are accepted.  With plain callables,
    ``derivative(t, y)`` returns ``dy/dt`` and each event carries its own
    ``guard(t, y)``.  With numba-compiled kernels, ``derivative(t, y, params)``
    and ``guard_kernel(t, y, params)`` (returning one value per event) are run
    inside the compiled stepping loop.

    Samples are taken on the grid ``sample_origin + k * sample_dt`` and
    stop at the event time; the terminal state itself is returned separately
    in ``y_event``.

    Raises :class:`NoEventError` if ``max_time`` elapses and
    :class:`StiffnessError` if the step size underflows or the state becomes
    non-finite.
    """
    if not events:
        raise ValueError("at least one event must be armed")
    y0 = np.asarray(initial, dtype=float).copy()
    if not np.all(np.isfinite(y0)):
        raise ValueError(f"non-finite initial state: {y0}")
    directions = np.array([int(ev.direction) for ev in events], dtype=np.int64)
    p = np.zeros(1) if params is None else np.asarray(params, dtype=float)
    origin = t0 if sample_origin is None else float(sample_origin)

    if guard_kernel is not None and _is_compiled(derivative) and _is_compiled(guard_kernel):
        solver = _dopri5_events_jit
        rhs, guards = derivative, guard_kernel
    else:
        solver = _dopri5_events
        if guard_kernel is not None:
            rhs, guards = derivative, guard_kernel
        else:
            if any(ev.guard is None for ev in events):
                raise ValueError("every event needs a guard when no guard kernel is given")
            fns = [ev.guard for ev in events]

            def rhs(t, y, _p):
                return np.asarray(derivative(t, y), dtype=float)

            def guards(t, y, _p):
                return np.array([g(t, y) for g in fns], dtype=float)

    status, idx, t_ev, y_ev, ts, ys, n_steps = solver(
        rhs, guards, float(t0), y0, p, directions,
        float(limits.max_time), float(limits.abs_tol), float(limits.rel_tol),
        float(limits.sample_dt), origin, float(limits.min_step),
    )
    if status == STATUS_MAX_TIME:
        raise NoEventError(
            f"no event among {[ev.kind.value for ev in events]} within {limits.max_time} s "
            f"(t={t_ev:.6g}, y={np.array2string(y_ev, precision=4)})"
        )
    if status in (STATUS_STIFF, STATUS_NONFINITE):
        what = "non-finite state" if status == STATUS_NONFINITE else "step size underflow"
        raise StiffnessError(f"{what} at t={t_ev:.9g}, y={np.array2string(y_ev, precision=4)}")

    g_end = float(guards(t_ev, y_ev, p)[idx])
    return IntegrationResult(
        t=ts, y=ys, event=events[idx], event_index=int(idx),
        t_event=float(t_ev), y_event=y_ev, n_steps=int(n_steps), guard_value=g_end,
    )


def foot_height_guard(state, leg_angle_td: float, l0: float, hip_com_distance: float = 0.1) -> float:
    """Height of the would-be foot if the leg were placed now at ``leg_angle_td``.

    ``state`` is either a :class:`~tslip.model.BodyState` or a state vector
    ``(x, y, pitch, ...)``.  The hip sits ``hip_com_distance`` below the CoM
    along the trunk axis.
    """
    if hasattr(state, "y_com"):
        y, pitch = state.y_com, state.pitch
    else:
        y, pitch = state[1], state[2]
    hip_y = y - hip_com_distance * np.cos(pitch)
    return float(hip_y - l0 * np.sin(leg_angle_td))
