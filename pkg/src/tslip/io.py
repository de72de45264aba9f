"""CSV persistence, the events sidecar and the output manifest.

The time-series CSV has a fixed column set with a units row under the
header and values written with 12 significant digits.  Event times, event
states and the exact work integrals do not fit a 1 kHz table, so they go
to a JSON sidecar next to the CSV (``<name>.events.json``) written with
full float precision; :func:`read_timeseries` needs both files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from .controllers import PitchPidGains
from .engine import FLIGHT, STANCE, StrideControl, StrideRecord, WorkTotals

__all__ = [
    "TIMESERIES_COLUMNS",
    "METRIC_UNITS",
    "OutputError",
    "ManifestEntry",
    "OutputWriter",
    "write_timeseries",
    "read_timeseries",
    "write_table",
    "read_table",
    "sidecar_path",
]

TIMESERIES_COLUMNS: tuple[tuple[str, str], ...] = (
    ("time", "s"),
    ("x", "m"),
    ("y", "m"),
    ("pitch", "rad"),
    ("vx", "m/s"),
    ("vy", "m/s"),
    ("pitch_rate", "rad/s"),
    ("phase", "-"),
    ("leg_length", "m"),
    ("leg_rate", "m/s"),
    ("GRF_x", "N"),
    ("GRF_y", "N"),
    ("F_axial", "N"),
    ("F_tangential", "N"),
    ("tau_hip", "N·m"),
    ("P_hip", "W"),
    ("P_damper", "W"),
)

METRIC_UNITS = {
    "speed": "m/s",
    "vp_radius": "m",
    "damping": "N·s/m²",
    "duty_factor": "-",
    "period": "s",
    "stance_duration": "s",
    "td_angle_deg": "deg",
    "vp_angle_deg": "deg",
    "mean_inclination": "deg",
    "angular_excursion": "deg",
    "mean_angular_velocity": "deg/s",
    "peak_angular_velocity": "deg/s",
    "max_flexion_phase": "%",
    "midstance_percent": "%",
    "hip_reversal_percent": "%",
    "target_duty_factor": "-",
    "band_lower": "-",
    "band_upper": "-",
}

_PHASE_NAMES = {FLIGHT: "flight", STANCE: "stance"}
_PHASE_CODES = {v: k for k, v in _PHASE_NAMES.items()}
SIDECAR_VERSION = 1


class OutputError(OSError):
    """A file could not be written or read; the message names the path."""


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v) + 0.0  # no negative zeros
    return f"{v:.12g}"


def _unit(name: str) -> str:
    if name in METRIC_UNITS:
        return METRIC_UNITS[name]
    if name.startswith("work_"):
        return "J"
    return "-"


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    sha256: str
    bytes: int
    kind: str = "data"


def _entry(path: Path, root: Path | None, kind: str) -> ManifestEntry:
    rel = path.relative_to(root).as_posix() if root is not None else path.name
    return ManifestEntry(rel, sha256_of(path), path.stat().st_size, kind)


def _write_text(path: Path, write) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            write(fh)
    except OSError as exc:
        raise OutputError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


# -- time series ---------------------------------------------------------

def sidecar_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".events.json")


def _rows(records: Sequence[StrideRecord]) -> Iterable[list]:
    for r in records:
        tau = r.tau_hip
        for i in range(len(r.t)):
            s = r.states[i]
            yield [
                r.t[i], s[0], s[1], s[2], s[3], s[4], s[5], _PHASE_NAMES[int(r.phase[i])],
                r.leg_length[i], r.leg_rate[i], r.grf[i, 0], r.grf[i, 1], r.axial_force[i],
                r.tangential_force[i], tau[i], r.p_hip[i], r.p_damper[i],
            ]


def _vp_dict(vp):
    if vp is None:
        return None
    return dict(radius=vp.radius, angle=vp.angle, frame="body" if vp.angle_frame == M.VpFrame.BODY else "world")


def _stride_meta(r: StrideRecord) -> dict:
    p = asdict(r.params)
    p["damper_kind"] = "bilinear" if r.params.damper_kind == M.DamperKind.BILINEAR else "linear"
    return dict(
        index=r.index,
        rows=len(r.t),
        foot_x=r.foot_x,
        params=p,
        control=dict(
            td_angle=r.control.td_angle,
            vp=_vp_dict(r.control.vp),
            pid=None if r.control.pid is None else asdict(r.control.pid),
        ),
        events=dict(r.events),
        event_states={k: [float(v) for v in s] for k, s in r.event_states.items()},
        takeoff_kind=r.takeoff_kind,
        works=asdict(r.works),
        pitch_integral=r.pitch_integral,
        stance_pitch_integral=r.stance_pitch_integral,
    )


def write_timeseries(records: Sequence[StrideRecord], path: str | Path, *, root: Path | None = None,
                     extra: dict | None = None) -> list[ManifestEntry]:
    """Write strides as one time-series CSV plus its events sidecar.

    Returns the manifest entries of both files.
    """
    records = list(records)
    if not records:
        raise ValueError("no stride records to write")
    path = Path(path)

    def body(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c for c, _ in TIMESERIES_COLUMNS])
        w.writerow([u for _, u in TIMESERIES_COLUMNS])
        for row in _rows(records):
            w.writerow([_fmt(v) for v in row])

    _write_text(path, body)
    meta = dict(version=SIDECAR_VERSION, csv=path.name, strides=[_stride_meta(r) for r in records])
    if extra:
        meta["extra"] = extra
    side = sidecar_path(path)
    _write_text(side, lambda fh: json.dump(meta, fh, indent=1, sort_keys=True))
    return [_entry(path, root, "timeseries"), _entry(side, root, "events")]


def _params_from(d: dict) -> M.ModelParams:
    d = dict(d)
    d["damper_kind"] = M.DamperKind.BILINEAR if d["damper_kind"] == "bilinear" else M.DamperKind.LINEAR
    return M.ModelParams(**d)


def _control_from(d: dict) -> StrideControl:
    vp = d["vp"]
    if vp is not None:
        vp = M.VpTarget(vp["radius"], vp["angle"], M.VpFrame.BODY if vp["frame"] == "body" else M.VpFrame.WORLD)
    pid = None if d["pid"] is None else PitchPidGains(**d["pid"])
    return StrideControl(td_angle=d["td_angle"], vp=vp, pid=pid)


def read_timeseries(path: str | Path) -> list[StrideRecord]:
    """Rebuild stride records from a time-series CSV and its sidecar.

    Spring and damper forces are recomputed from the leg columns.  The
    CSV carries only the total hip torque, so a reloaded record books all
    of it as VP torque.
    """
    path = Path(path)
    side = sidecar_path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        meta = json.loads(side.read_text())
    except OSError as exc:
        raise OutputError(exc.errno, f"cannot read {exc.filename}: {exc.strerror}") from exc
    header = [c for c, _ in TIMESERIES_COLUMNS]
    if len(rows) < 2 or rows[0] != header or rows[1] != [u for _, u in TIMESERIES_COLUMNS]:
        raise ValueError(f"{path} is not a time-series CSV (header mismatch)")
    data = rows[2:]
    i_phase = header.index("phase")
    phase = np.array([_PHASE_CODES[r[i_phase]] for r in data], dtype=np.int8)
    num = np.array([[float(v) for j, v in enumerate(r) if j != i_phase] for r in data], dtype=float)
    if num.ndim != 2 or num.shape[1] != len(header) - 1:
        num = num.reshape(len(data), len(header) - 1)
    cols = {name: num[:, k] for k, name in enumerate(c for c in header if c != "phase")}
    records = []
    start = 0
    for s in meta["strides"]:
        sl = slice(start, start + s["rows"])
        start += s["rows"]
        params = _params_from(s["params"])
        ph = phase[sl]
        st = ph == STANCE
        l, ldot = cols["leg_length"][sl].copy(), cols["leg_rate"][sl].copy()
        dl = params.leg_rest_length - l
        f_sp = np.where(st, params.leg_stiffness * dl, 0.0)
        if params.damper_kind == M.DamperKind.BILINEAR:
            f_dp = np.where(st, params.damping_coefficient * ldot * dl, 0.0)
        else:
            f_dp = np.where(st, params.damping_coefficient * ldot, 0.0)
        tau = cols["tau_hip"][sl].copy()
        records.append(StrideRecord(
            index=s["index"], params=params, control=_control_from(s["control"]), foot_x=s["foot_x"],
            t=cols["time"][sl].copy(),
            states=np.column_stack([cols[k][sl] for k in ("x", "y", "pitch", "vx", "vy", "pitch_rate")]),
            phase=ph.copy(), leg_length=l, leg_rate=ldot, spring_force=f_sp, damper_force=f_dp,
            axial_force=cols["F_axial"][sl].copy(), tangential_force=cols["F_tangential"][sl].copy(),
            grf=np.column_stack([cols["GRF_x"][sl], cols["GRF_y"][sl]]),
            tau_vp=tau, tau_pid=np.zeros_like(tau),
            p_hip=cols["P_hip"][sl].copy(), p_damper=cols["P_damper"][sl].copy(),
            events={k: float(v) for k, v in s["events"].items()},
            event_states={k: np.array(v, dtype=float) for k, v in s["event_states"].items()},
            takeoff_kind=s["takeoff_kind"], works=WorkTotals(**s["works"]),
            pitch_integral=s["pitch_integral"], stance_pitch_integral=s["stance_pitch_integral"],
        ))
    if start != len(data):
        raise ValueError(f"{path}: sidecar describes {start} rows, CSV has {len(data)}")
    return records


# -- tables ----------------------------------------------------------------

def write_table(rows: Sequence[dict], path: str | Path, *, root: Path | None = None,
                units: dict | None = None, kind: str = "table") -> ManifestEntry:
    """Row dicts to CSV with a units row; columns in first-seen order."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    units = units or {}
    path = Path(path)

    def body(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        w.writerow([units.get(c, _unit(c)) for c in cols])
        for r in rows:
            w.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in cols])

    _write_text(path, body)
    return _entry(path, root, kind)


def read_table(path: str | Path) -> tuple[list[dict], dict]:
    """Inverse of :func:`write_table`: ``(rows, units)``; numeric cells become floats."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, units = rows[0], dict(zip(rows[0], rows[1]))
    out = []
    for r in rows[2:]:
        d = {}
        for k, v in zip(header, r):
            try:
                d[k] = float(v)
            except ValueError:
                d[k] = v
        out.append(d)
    return out, units


# -- manifest ---------------------------------------------------------------

@dataclass
class OutputWriter:
    """Collects the files emitted into ``root`` and writes their manifest.

    Every file goes through :meth:`add` (or one of the helpers), so the
    manifest lists each emitted file with its digest.
    """

    root: Path
    config_hash: str = ""
    command: str = ""
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OutputError(exc.errno, f"cannot create {self.root}: {exc.strerror}") from exc

    def path(self, name: str) -> Path:
        return self.root / name

    def add(self, path: Path, kind: str = "data") -> ManifestEntry:
        e = _entry(Path(path), self.root, kind)
        self.entries.append(e)
        return e

    def timeseries(self, name: str, records, extra: dict | None = None) -> list[ManifestEntry]:
        es = write_timeseries(records, self.path(name), root=self.root, extra=extra)
        self.entries.extend(es)
        return es

    def table(self, name: str, rows, kind: str = "table", units: dict | None = None) -> ManifestEntry:
        e = write_table(rows, self.path(name), root=self.root, units=units, kind=kind)
        self.entries.append(e)
        return e

    def json(self, name: str, obj, kind: str = "data") -> ManifestEntry:
        p = self.path(name)
        _write_text(p, lambda fh: json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default))
        return self.add(p, kind)

    def write_manifest(self, extra: dict | None = None) -> Path:
        from . import __version__

        doc = dict(
            tslip_version=__version__, command=self.command, config_hash=self.config_hash,
            files=[asdict(e) for e in sorted(self.entries, key=lambda e: e.path)],
        )
        if extra:
            doc.update(extra)
        p = self.path("manifest.json")
        _write_text(p, lambda fh: json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default))
        return p

    def digest(self) -> str:
        """Digest over every emitted file's content (paths and hashes)."""
        h = hashlib.sha256()
        for e in sorted(self.entries, key=lambda e: e.path):
            h.update(f"{e.path}\0{e.sha256}\n".encode())
        return h.hexdigest()


def _json_default(o):
    if hasattr(o, "value"):
        return o.value
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def output_root(explicit: str | Path | None, configured: str | None, command: str) -> Path:
    """``--out``, then the config's directory, then ``$TSLIP_OUTPUT_ROOT/<command>``."""
    if explicit is not None:
        return Path(explicit)
    if configured:
        return Path(configured)
    base = os.environ.get("TSLIP_OUTPUT_ROOT")
    return Path(base if base else "tslip-output") / command
