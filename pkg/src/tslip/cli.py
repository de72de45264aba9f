"""``tslip`` command line: run, sweep, analyze, tune, fixtures.

Exit status 0 on success, 2 for configuration or input errors, 3 for
simulation failures, 1 for output errors.  Failures print a JSON report
on stderr; successes print a JSON summary on stdout.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .analysis import duty_factor, grf_moment_about_vp, stride_metrics, trunk_metrics
from .config import ConfigError, RunConfig, load_config
from .controllers import DEG
from .engine import run_gait
from .io import OutputError, OutputWriter, output_root, read_table, read_timeseries

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_SIMULATION", "EXIT_OUTPUT"]

EXIT_OK, EXIT_OUTPUT, EXIT_CONFIG, EXIT_SIMULATION = 0, 1, 2, 3
FIXTURE_SPEED = 5.0
FIXTURE_RADII = (0.0, 0.4, -0.4)


class SimulationError(RuntimeError):
    def __init__(self, message: str, details=None):
        super().__init__(message)
        self.details = details


class InputError(ValueError):
    """Unreadable or malformed input data (treated like a config error)."""


@dataclass
class _Outcome:
    payload: object
    digest: str


def _records_digest(records) -> str:
    h = hashlib.sha256()
    for r in records:
        for a in (r.t, r.states, r.grf, r.tau_hip, r.p_hip, r.p_damper):
            h.update(a.tobytes())
        h.update(json.dumps(r.events, sort_keys=True).encode())
    return h.hexdigest()


def _metric_row(cfg: RunConfig, speed: float, damping: float, stride) -> dict:
    row = dict(speed=speed, vp_radius=stride.control.vp.radius if stride.control.vp else math.nan,
               damping=damping, td_angle_deg=stride.control.td_angle / DEG,
               vp_angle_deg=stride.control.vp.angle / DEG if stride.control.vp else math.nan)
    row.update(stride_metrics(stride))
    return row


# -- commands -------------------------------------------------------------

def _compute_run(cfg: RunConfig) -> _Outcome:
    model = cfg.model_params()
    run = run_gait(model, cfg.controller_config(), cfg.vp_target(), cfg.speed, cfg.stride_budget,
                   limits=cfg.limits())
    if not run.converged:
        f = dict(run.failure)
        f["phase"] = getattr(f["phase"], "value", f["phase"])
        raise SimulationError(f"gait did not converge: {f['reason']} in phase {f['phase']}", f)
    return _Outcome(run, _records_digest(run.strides))


def _emit_run(cfg: RunConfig, run, writer: OutputWriter, fmt: str) -> dict:
    model = run.strides[0].params
    rows = [_metric_row(cfg, cfg.speed, model.damping_coefficient, s) for s in run.strides]
    if fmt in ("csv", "both"):
        writer.timeseries("timeseries.csv", run.strides, extra=dict(config_hash=writer.config_hash))
        writer.table("metrics.csv", rows, kind="metrics")
        writer.json("gait.json", dict(converged=True, speed=cfg.speed, damping=model.damping_coefficient,
                                      vp=dict(radius=run.vp.radius, angle=run.vp.angle),
                                      protocol=run.metadata))
    if fmt in ("plots", "both"):
        from .plots import run_plots

        run_plots(run.strides, writer)
    s0 = run.strides[0]
    m = trunk_metrics(s0)
    return dict(duty_factor=duty_factor(s0), angular_excursion=m.angular_excursion,
                pitch_direction=m.pitch_direction.value, td_angle_deg=s0.control.td_angle / DEG,
                vp_angle_deg=run.vp.angle / DEG, strides_used=run.metadata.get("strides_used"))


def _compute_sweep(cfg: RunConfig) -> _Outcome:
    from .sweep import run_sweep

    plan = cfg.sweep_plan()
    model = cfg.model_params(damping=0.0)
    result = run_sweep(plan, model, cfg.controller_config(plan.speeds[0]), cfg.schedule(),
                       keep_runs=True, config_hash=cfg.digest())
    if not any(c.converged for c in result.cells):
        raise SimulationError("no sweep cell converged",
                              [dict(speed=c.speed, vp_radius=c.radius, failure=c.failure) for c in result.cells])
    return _Outcome(result, result.digest())


def _cell_dir(speed: float, radius: float) -> str:
    return f"cells/v{speed:g}_r{radius:+.2f}"


def _emit_sweep(cfg: RunConfig, result, writer: OutputWriter, fmt: str) -> dict:
    rows = result.rows()
    if fmt in ("csv", "both"):
        writer.table("summary.csv", rows, kind="summary")
        if result.tuning:
            writer.table("tuning.csv", [_tuning_row(t) for t in result.tuning.values()], kind="tuning")
        for c in result.cells:
            if c.converged and c.run is not None:
                d = _cell_dir(c.speed, c.radius)
                writer.timeseries(f"{d}/timeseries.csv", c.run.strides)
                writer.table(f"{d}/metrics.csv", [_metric_row(cfg, c.speed, c.damping, s) for s in c.run.strides],
                             kind="metrics")
    if fmt in ("plots", "both"):
        from .plots import sweep_plots

        sweep_plots(result, writer)
    return dict(cells=len(result.cells), converged=sum(c.converged for c in result.cells),
                failed=[f"{c.speed:g}/{c.radius:+g}" for c in result.cells if not c.converged])


def _tuning_row(t) -> dict:
    return dict(speed=t.speed, damping=t.damping, duty_factor=t.duty_factor, band_lower=t.band[0],
                band_upper=t.band[1], target_duty_factor=t.target, evaluations=len(t.evaluations))


def _compute_tune(cfg: RunConfig) -> _Outcome:
    from .sweep import TuningFailure, controller_for_speed, tune_damping_for_duty_factor

    band = cfg.band()
    out = []
    for v in cfg.sweep.speeds:
        ctrl = controller_for_speed(cfg.controller_config(v), cfg.schedule(), v)
        try:
            out.append(tune_damping_for_duty_factor(
                cfg.model_params(damping=0.0), v, band.band(v), ctrl, target=band.target(v),
                stride_budget=cfg.stride_budget, limits=cfg.limits(),
            ))
        except TuningFailure as exc:
            raise SimulationError(str(exc), dict(speed=v, evaluations=exc.evaluations)) from exc
    digest = hashlib.sha256(json.dumps([(t.speed, t.damping, t.evaluations) for t in out]).encode()).hexdigest()
    return _Outcome(out, digest)


def _emit_tune(cfg: RunConfig, results, writer: OutputWriter, fmt: str) -> dict:
    writer.table("tuning.csv", [_tuning_row(t) for t in results], kind="tuning")
    writer.table("tuning_evaluations.csv",
                 [dict(speed=t.speed, step=i, damping=c, duty_factor=df)
                  for t in results for i, (c, df) in enumerate(t.evaluations)], kind="tuning")
    return dict(damping_table={f"{t.speed:g}": t.damping for t in results})


def _resolve_source(src: str) -> Path:
    p = Path(src)
    if p.is_dir():
        p = p / "timeseries.csv"
    if not p.is_file():
        raise InputError(f"no time-series CSV at {p}")
    return p


def _compute_analyze(cfg: RunConfig, source: Path) -> _Outcome:
    try:
        records = read_timeseries(source)
    except (ValueError, KeyError, OSError) as exc:
        raise InputError(f"cannot load {source}: {exc}") from exc
    rows = []
    for r in records:
        v = r.event_states["apex_start"][3]
        rows.append(_metric_row(cfg, v, r.params.damping_coefficient, r))
    digest = hashlib.sha256(json.dumps(rows, sort_keys=True, default=str).encode()).hexdigest()
    return _Outcome(rows, digest)


def _drift(a: list[dict], b: list[dict]) -> float:
    """Largest relative difference between matching numeric cells."""
    worst = 0.0
    for ra, rb in zip(a, b):
        for k, va in ra.items():
            vb = rb.get(k)
            if isinstance(va, float) and isinstance(vb, float) and math.isfinite(va) and math.isfinite(vb):
                scale = max(abs(va), abs(vb))
                if scale > 0:
                    worst = max(worst, abs(va - vb) / scale)
    return worst


def _emit_analyze(cfg, rows, writer: OutputWriter, fmt: str, source: Path) -> dict:
    writer.table("metrics.csv", rows, kind="metrics")
    out = dict(source=str(source), strides=len(rows))
    stored = source.with_name("metrics.csv")
    if stored.is_file():
        # the writer rounds to 12 digits, so compare against the re-read table
        ref, _ = read_table(stored)
        mine, _ = read_table(writer.path("metrics.csv"))
        out["drift_vs_stored"] = _drift(ref, mine)
    return out


def _compute_fixtures(cfg: RunConfig) -> _Outcome:
    runs = {}
    for r in FIXTURE_RADII:
        c = cfg.with_overrides(vp_radius=r, speed=FIXTURE_SPEED)
        runs[r] = _compute_run(c).payload
    return _Outcome(runs, hashlib.sha256("".join(_records_digest(v.strides) for v in runs.values()).encode())
                    .hexdigest())


def _emit_fixtures(cfg: RunConfig, runs, writer: OutputWriter, fmt: str) -> dict:
    index = dict(config_hash=writer.config_hash, speed=FIXTURE_SPEED, gaits=[])
    for r, run in runs.items():
        name = f"gait_v{FIXTURE_SPEED:g}_r{r:+.1f}"
        writer.timeseries(f"{name}.csv", run.strides)
        s0 = run.strides[0]
        index["gaits"].append(dict(
            file=f"{name}.csv", vp_radius=r, damping=s0.params.damping_coefficient,
            td_angle=s0.control.td_angle, vp_angle=run.vp.angle,
            apex=[float(v) for v in s0.event_states["apex_start"]],
            metrics=stride_metrics(s0), grf_vp_moment_max=float(grf_moment_about_vp(s0).max()),
            strides_used=run.metadata.get("strides_used"),
        ))
    writer.json("fixtures.json", index, kind="fixtures")
    return dict(gaits=len(runs))


_COMMANDS = {
    "run": (_compute_run, _emit_run, "simulate one gait and record its steady strides"),
    "sweep": (_compute_sweep, _emit_sweep, "run the VP-radius x speed grid"),
    "analyze": (_compute_analyze, _emit_analyze, "recompute metrics from a stored time-series CSV"),
    "tune": (_compute_tune, _emit_tune, "tune the damping coefficient per speed onto the duty-factor band"),
    "fixtures": (_compute_fixtures, _emit_fixtures, "regenerate the regression fixtures"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML or JSON config merged over the defaults")
    common.add_argument("--out", metavar="DIR",
                        help="output directory (default: $TSLIP_OUTPUT_ROOT/<command>)")
    common.add_argument("--vp-radius", metavar="M", type=float, help="VP radius, positive above the CoM")
    common.add_argument("--speed", metavar="MPS", type=float, help="forward speed")
    common.add_argument("--seedless", action="store_true",
                        help="compute twice and fail unless both results are bit-identical")
    common.add_argument("--format", choices=("csv", "plots", "both"), help="what to emit (default: config)")
    p = argparse.ArgumentParser(prog="tslip", description="TSLIP running simulator with virtual-point control")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, _, help_) in _COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        if name == "analyze":
            sp.add_argument("source", help="time-series CSV or a run output directory")
    return p


def _report(code: int, kind: str, message: str, details=None) -> int:
    doc = dict(status="error", exit_code=code, error=kind, message=message)
    if details is not None:
        doc["details"] = details
    print(json.dumps(doc, default=str), file=sys.stderr)
    return code


def _execute(args) -> dict:
    cfg = load_config(args.config).with_overrides(
        vp_radius=args.vp_radius, speed=args.speed, output_format=args.format,
    )
    compute, emit, _ = _COMMANDS[args.command]
    extra = ()
    if args.command == "analyze":
        extra = (_resolve_source(args.source),)
    outcome = compute(cfg, *extra)
    if args.seedless:
        again = compute(cfg, *extra)
        if again.digest != outcome.digest:
            raise SimulationError("repeated computation differs", dict(first=outcome.digest, second=again.digest))
    root = output_root(args.out, cfg.output.directory, args.command)
    writer = OutputWriter(root, config_hash=cfg.digest(), command=args.command)
    summary = emit(cfg, outcome.payload, writer, cfg.output.format, *extra)
    writer.write_manifest(dict(result_digest=outcome.digest, seedless_checked=bool(args.seedless)))
    return dict(status="ok", command=args.command, output=str(root), config_hash=writer.config_hash,
                result_digest=outcome.digest, **summary)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        summary = _execute(args)
    except (ConfigError, InputError) as exc:
        return _report(EXIT_CONFIG, type(exc).__name__, str(exc), getattr(exc, "errors", None) or None)
    except SimulationError as exc:
        return _report(EXIT_SIMULATION, "SimulationError", str(exc), exc.details)
    except OutputError as exc:
        return _report(EXIT_OUTPUT, "OutputError", str(exc))
    except Exception as exc:  # integration blow-ups and other engine faults
        return _report(EXIT_SIMULATION, type(exc).__name__, str(exc), traceback.format_exc(limit=3))
    print(json.dumps(summary, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
