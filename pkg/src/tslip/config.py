"""Run configuration: strict schema, loading, hashing and domain conversion.

A config is a YAML (or JSON) mapping validated by pydantic models with
unknown keys rejected.  The shipped default lives in
``tslip/data/default_config.yaml``; a user file is merged over it key by
key, so it only needs the entries it changes.
"""
from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .controllers import DEG, ControllerConfig, LegPlacementGains, PitchPidGains
from .integrator import IntegrationLimits
from .model import DamperKind, ModelParams, VpFrame, VpTarget
from .sweep import DutyFactorBand, SweepPlan, TdAngleSchedule, config_digest

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "RunConfig",
    "load_config",
    "default_config",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unreadable configuration; ``errors`` lists the offending entries."""

    def __init__(self, message: str, errors: list | None = None):
        super().__init__(message)
        self.errors = errors or []


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)


class ModelSection(_Section):
    mass: float = Field(80.0, gt=0)
    inertia: float = Field(5.0, gt=0)
    leg_stiffness: float = Field(18000.0, gt=0)
    leg_rest_length: float = Field(1.0, gt=0)
    hip_com_distance: float = Field(0.1, ge=0)
    gravity: float = Field(9.81, gt=0)
    # None: look the coefficient up in the tuned damping table
    damping_coefficient: Optional[float] = Field(None, ge=0)
    damper_kind: Literal["bilinear", "linear"] = "bilinear"


class LegSection(_Section):
    k_xdot0: float = -0.1
    k_xdot: float = -0.5
    k_y: float = 4.0
    # None: take the cold-start angle from the touchdown-angle schedule
    initial_td_angle_deg: Optional[float] = Field(None, gt=0, lt=90)


class PidSection(_Section):
    k_p: float = 300.0
    k_d: float = 30.0
    k_i: Optional[float] = None  # None: k_p / 10
    desired_pitch_deg: float = Field(10.0, gt=-90, lt=90)
    desired_pitch_rate: float = 0.0


class ControllerSection(_Section):
    leg: LegSection = LegSection()
    pid: PidSection = PidSection()
    k_vp: float = Field(0.5, gt=0)
    vp_rate_limit_deg: float = Field(5.0, gt=0)
    initial_vp_angle_deg: Optional[float] = None
    mean_pitch_window: Literal["stride", "stance"] = "stride"
    steady_tolerance: float = Field(1e-4, gt=0)
    steady_count: int = Field(3, ge=1)
    final_tolerance: float = Field(1e-6, gt=0)
    accelerate: bool = True


class VpSection(_Section):
    radius: float = Field(0.0, ge=-1.0, le=1.0)
    angle_deg: Optional[float] = None
    frame: Optional[Literal["body", "world"]] = None


class ScheduleSection(_Section):
    speed_low: float = 4.0
    angle_low_deg: float = Field(69.4, gt=0, lt=90)
    speed_high: float = 10.0
    angle_high_deg: float = Field(57.5, gt=0, lt=90)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.speed_high > self.speed_low:
            raise ValueError("speed_high must exceed speed_low")
        return self


class BandSection(_Section):
    speed_low: float = 4.0
    lower_low: float = 0.25
    upper_low: float = 0.40
    speed_high: float = 10.0
    lower_high: float = 0.18
    upper_high: float = 0.30
    target_fraction_low: float = 0.9
    target_fraction_high: float = 0.1


class SweepSection(_Section):
    vp_radii: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, -0.2, -0.4, -0.6)
    speeds: tuple[float, ...] = (4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
    tune: bool = True
    parallelism: int = Field(1, ge=1)
    max_radius: float = Field(0.6, gt=0, le=1.0)


class IntegratorSection(_Section):
    abs_tol: float = Field(1e-9, gt=0)
    rel_tol: float = Field(1e-9, gt=0)
    max_time: float = Field(5.0, gt=0)
    sample_dt: float = Field(1e-3, gt=0)


class OutputSection(_Section):
    directory: Optional[str] = None
    format: Literal["csv", "plots", "both"] = "csv"


class RunConfig(_Section):
    schema_version: Literal[1] = SCHEMA_VERSION
    model: ModelSection = ModelSection()
    controllers: ControllerSection = ControllerSection()
    vp: VpSection = VpSection()
    speed: float = Field(5.0, gt=0)
    stride_budget: int = Field(500, ge=1)
    damping_table: dict[float, float] = Field(default_factory=dict)
    td_schedule: ScheduleSection = ScheduleSection()
    duty_factor_band: BandSection = BandSection()
    sweep: SweepSection = SweepSection()
    integrator: IntegratorSection = IntegratorSection()
    output: OutputSection = OutputSection()
    deterministic: Literal[True] = True

    @field_validator("damping_table")
    @classmethod
    def _positive_table(cls, v):
        if any(not (math.isfinite(c) and c >= 0) for c in v.values()):
            raise ValueError("damping coefficients must be finite and >= 0")
        return dict(sorted(v.items()))

    # -- domain objects -------------------------------------------------

    def damping_for(self, speed: float) -> float:
        """Explicit coefficient, else the tuned table (linear in speed between entries)."""
        if self.model.damping_coefficient is not None:
            return self.model.damping_coefficient
        if not self.damping_table:
            raise ConfigError("no damping coefficient: set model.damping_coefficient or damping_table")
        speeds = np.array(list(self.damping_table))
        if not speeds[0] <= speed <= speeds[-1]:
            raise ConfigError(f"speed {speed} m/s outside the damping table {speeds[0]}..{speeds[-1]} m/s")
        return float(np.interp(speed, speeds, list(self.damping_table.values())))

    def model_params(self, speed: float | None = None, damping: float | None = None) -> ModelParams:
        m = self.model
        c = damping if damping is not None else self.damping_for(self.speed if speed is None else speed)
        return ModelParams(
            mass=m.mass, inertia=m.inertia, leg_stiffness=m.leg_stiffness, leg_rest_length=m.leg_rest_length,
            hip_com_distance=m.hip_com_distance, gravity=m.gravity, damping_coefficient=c,
            damper_kind=DamperKind.BILINEAR if m.damper_kind == "bilinear" else DamperKind.LINEAR,
        )

    def schedule(self) -> TdAngleSchedule:
        s = self.td_schedule
        return TdAngleSchedule(s.speed_low, s.angle_low_deg, s.speed_high, s.angle_high_deg)

    def controller_config(self, speed: float | None = None) -> ControllerConfig:
        c = self.controllers
        speed = self.speed if speed is None else speed
        td0 = c.leg.initial_td_angle_deg
        td0 = self.schedule().angle(speed) if td0 is None else td0 * DEG
        pid = c.pid
        return ControllerConfig(
            leg=LegPlacementGains(c.leg.k_xdot0, c.leg.k_xdot, c.leg.k_y, td0),
            pid=PitchPidGains(pid.k_p, pid.k_d, pid.k_p / 10.0 if pid.k_i is None else pid.k_i,
                              pid.desired_pitch_deg * DEG, pid.desired_pitch_rate),
            k_vp=c.k_vp,
            vp_rate_limit=c.vp_rate_limit_deg * DEG,
            initial_vp_angle=None if c.initial_vp_angle_deg is None else c.initial_vp_angle_deg * DEG,
            mean_pitch_window=c.mean_pitch_window,
            steady_tolerance=c.steady_tolerance,
            steady_count=c.steady_count,
            final_tolerance=c.final_tolerance,
            accelerate=c.accelerate,
        )

    def vp_target(self) -> VpTarget:
        v = self.vp
        frame = None if v.frame is None else (VpFrame.BODY if v.frame == "body" else VpFrame.WORLD)
        return VpTarget(v.radius, 0.0 if v.angle_deg is None else v.angle_deg * DEG, frame)

    def limits(self) -> IntegrationLimits:
        i = self.integrator
        return IntegrationLimits(max_time=i.max_time, abs_tol=i.abs_tol, rel_tol=i.rel_tol, sample_dt=i.sample_dt)

    def band(self) -> DutyFactorBand:
        return DutyFactorBand(**self.duty_factor_band.model_dump())

    def sweep_plan(self) -> SweepPlan:
        s = self.sweep
        damping = None
        if not s.tune:
            damping = {v: self.damping_for(v) for v in s.speeds}
        return SweepPlan(
            vp_radii=tuple(s.vp_radii), speeds=tuple(s.speeds),
            desired_pitch=self.controllers.pid.desired_pitch_deg * DEG, band=self.band(), damping=damping,
            tune=s.tune, stride_budget=self.stride_budget, parallelism=s.parallelism, max_radius=s.max_radius,
            limits=self.limits(),
        )

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply CLI-style overrides (``vp_radius``, ``speed``, ``output_format``, ``output_dir``)."""
        data = self.model_dump()
        if kw.get("vp_radius") is not None:
            data["vp"]["radius"] = kw["vp_radius"]
            data["sweep"]["vp_radii"] = [kw["vp_radius"]]
        if kw.get("speed") is not None:
            data["speed"] = kw["speed"]
            data["sweep"]["speeds"] = [kw["speed"]]
        if kw.get("output_format") is not None:
            data["output"]["format"] = kw["output_format"]
        if kw.get("output_dir") is not None:
            data["output"]["directory"] = str(kw["output_dir"])
        return _validate(data, "<overrides>")

    def digest(self) -> str:
        """Hash of the canonical content; output settings do not enter it."""
        data = self.model_dump(mode="json")
        data.pop("output")
        return config_digest(data)


def _read_mapping(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "damping_table":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _validate(data: dict, source: str) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
        # domain invariants not expressible in the schema (band edges, radii bound)
        cfg.band()
        cfg.sweep_plan()
        cfg.vp_target()
    except ValidationError as exc:
        errs = [{"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"]} for e in exc.errors()]
        raise ConfigError(f"invalid config {source}: " + "; ".join(f"{e['loc']}: {e['msg']}" for e in errs),
                          errs) from None
    except ValueError as exc:
        raise ConfigError(f"invalid config {source}: {exc}") from None
    return cfg


def _default_mapping() -> dict:
    text = resources.files("tslip").joinpath("data/default_config.yaml").read_text()
    return yaml.safe_load(text)


def default_config() -> RunConfig:
    return _validate(_default_mapping(), "<default>")


def load_config(path: str | Path | None = None) -> RunConfig:
    """Default config, with the file at ``path`` merged over it when given."""
    data = _default_mapping()
    source = "<default>"
    if path is not None:
        path = Path(path)
        data = _merge(data, _read_mapping(path))
        source = str(path)
    return _validate(data, source)
