"""SVG figures, each written next to the CSV holding the plotted numbers."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import RAD2DEG, energy_timecourse, grf_decompose  # noqa: E402
from .engine import STANCE, StrideRecord  # noqa: E402
from .io import OutputWriter  # noqa: E402

__all__ = [
    "plot_pitch",
    "plot_grf",
    "plot_energy",
    "plot_damper",
    "plot_excursion_grid",
    "plot_work_distribution",
    "run_plots",
    "sweep_plots",
]

# fixed ids and no timestamp: identical inputs give identical files
plt.rcParams["svg.hashsalt"] = "tslip"
plt.rcParams["svg.fonttype"] = "path"


def _save(fig, writer: OutputWriter, stem: str, rows: list[dict]):
    svg = writer.path(stem + ".svg")
    fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    writer.add(svg, "plot")
    writer.table(stem + ".csv", rows, kind="plot-data")


def _stride_percent(r: StrideRecord):
    return (r.t - r.events["touchdown"]) / r.period * 100.0


def plot_pitch(records, writer: OutputWriter, stem: str = "pitch"):
    """Trunk pitch over the stride, TD at 0 %."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    rows = []
    for r in records:
        pct = _stride_percent(r)
        ax.plot(pct, r.states[:, 2] * RAD2DEG, lw=1, label=f"stride {r.index}")
        rows.extend(dict(stride=r.index, stride_percent=p, pitch_deg=th * RAD2DEG)
                    for p, th in zip(pct, r.states[:, 2]))
    for key, ls in (("takeoff", "--"), ("midstance", ":")):
        r = records[0]
        ax.axvline((r.events[key] - r.events["touchdown"]) / r.period * 100.0, color="k", ls=ls, lw=0.8)
    ax.set_xlabel("stride from touchdown [%]")
    ax.set_ylabel("pitch [deg]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, writer, stem, rows)


def plot_grf(stride: StrideRecord, writer: OutputWriter, stem: str = "grf"):
    """GRF components with the damping and hip-torque parts subtracted."""
    d = grf_decompose(stride)
    pct = (d.t - stride.events["touchdown"]) / stride.stance_duration * 100.0
    nd, nh = d.without_damping, d.without_hip
    fig, axes = plt.subplots(2, 2, figsize=(8, 5), sharex=True)
    for col, name in enumerate(("x", "y")):
        axes[0, col].plot(pct, d.grf[:, col], "k", label="total")
        axes[0, col].plot(pct, nd[:, col], color="0.6", label="without damping")
        axes[1, col].plot(pct, d.grf[:, col], "k", label="total")
        axes[1, col].plot(pct, nh[:, col], color="0.6", label="without hip torque")
        axes[1, col].set_xlabel("stance [%]")
        axes[0, col].set_ylabel(f"GRF_{name} [N]")
        axes[1, col].set_ylabel(f"GRF_{name} [N]")
    axes[0, 0].legend(fontsize=7)
    axes[1, 0].legend(fontsize=7)
    fig.tight_layout()
    rows = [dict(stance_percent=p, GRF_x=g[0], GRF_y=g[1], no_damping_x=a[0], no_damping_y=a[1],
                 no_hip_x=b[0], no_hip_y=b[1]) for p, g, a, b in zip(pct, d.grf, nd, nh)]
    _save(fig, writer, stem, rows)


def plot_energy(stride: StrideRecord, writer: OutputWriter, stem: str = "energy"):
    """Cumulative hip, damper and spring energy over stance."""
    tc = energy_timecourse(stride)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(tc.stance_percent, tc.hip, label="hip")
    ax.plot(tc.stance_percent, tc.damper, label="damper")
    ax.plot(tc.stance_percent, tc.spring, label="spring", alpha=0.5)
    ax.axvline(tc.midstance_percent, color="k", ls=":", lw=0.8)
    if math.isfinite(tc.reversal_percent):
        ax.axvline(tc.reversal_percent, color="C0", ls="--", lw=0.8)
    ax.set_xlabel("stance [%]")
    ax.set_ylabel("energy [J]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    rows = [dict(stance_percent=p, hip=h, damper=dp, spring=s)
            for p, h, dp, s in zip(tc.stance_percent, tc.hip, tc.damper, tc.spring)]
    _save(fig, writer, stem, rows)


def plot_damper(stride: StrideRecord, writer: OutputWriter, stem: str = "damper"):
    """Damper force and leg rate through stance."""
    m = stride.phase == STANCE
    pct = (stride.t[m] - stride.events["touchdown"]) / stride.stance_duration * 100.0
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(pct, stride.damper_force[m], "k")
    ax.set_xlabel("stance [%]")
    ax.set_ylabel("damper force [N]")
    ax2 = ax.twinx()
    ax2.plot(pct, stride.leg_rate[m], color="0.6")
    ax2.set_ylabel("leg rate [m/s]")
    fig.tight_layout()
    rows = [dict(stance_percent=p, damper_force=f, leg_rate=v)
            for p, f, v in zip(pct, stride.damper_force[m], stride.leg_rate[m])]
    _save(fig, writer, stem, rows)


def plot_excursion_grid(result, writer: OutputWriter, stem: str = "excursion"):
    """Excursion and mean angular velocity against speed, one line per VP radius."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    rows = []
    for r in sorted(result.plan.vp_radii):
        cells = [c for c in result.cells if c.radius == r and c.converged]
        if not cells:
            continue
        v = [c.speed for c in cells]
        axes[0].plot(v, [c.metrics.angular_excursion for c in cells], "o-", label=f"{r:+.1f} m")
        axes[1].plot(v, [c.metrics.mean_angular_velocity for c in cells], "o-")
        rows.extend(dict(vp_radius=r, speed=c.speed, angular_excursion=c.metrics.angular_excursion,
                         mean_angular_velocity=c.metrics.mean_angular_velocity) for c in cells)
    axes[0].set_ylabel("excursion [deg]")
    axes[1].set_ylabel("mean angular velocity [deg/s]")
    for ax in axes:
        ax.set_xlabel("speed [m/s]")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    if rows:
        _save(fig, writer, stem, rows)
    else:
        plt.close(fig)


def plot_work_distribution(result, writer: OutputWriter, stem: str = "work"):
    """Positive, negative and net leg and hip work per VP radius at each speed."""
    rows = []
    for c in result.cells:
        if c.converged:
            L = c.ledger
            rows.append(dict(speed=c.speed, vp_radius=c.radius, work_leg_positive=L.leg_positive,
                             work_leg_negative=L.leg_negative, work_leg_net=L.leg_net,
                             work_hip_positive=L.hip_positive, work_hip_negative=L.hip_negative,
                             work_hip_net=L.hip_net))
    if not rows:
        return
    speeds = sorted({r["speed"] for r in rows})
    fig, axes = plt.subplots(len(speeds), 2, figsize=(9, 2.2 * len(speeds)), squeeze=False)
    for i, s in enumerate(speeds):
        sub = sorted((r for r in rows if r["speed"] == s), key=lambda r: r["vp_radius"])
        x = np.arange(len(sub))
        for j, part in enumerate(("leg", "hip")):
            ax = axes[i, j]
            for k, kind in enumerate(("positive", "negative", "net")):
                ax.bar(x + (k - 1) * 0.27, [r[f"work_{part}_{kind}"] for r in sub], 0.27, label=kind)
            ax.set_xticks(x, [f"{r['vp_radius']:+.1f}" for r in sub], fontsize=7)
            ax.set_ylabel(f"{part} work [J]\n{s:g} m/s", fontsize=8)
    axes[0, 0].legend(fontsize=7)
    axes[-1, 0].set_xlabel("VP radius [m]")
    axes[-1, 1].set_xlabel("VP radius [m]")
    fig.tight_layout()
    _save(fig, writer, stem, rows)


def run_plots(records, writer: OutputWriter, prefix: str = ""):
    plot_pitch(records, writer, prefix + "pitch")
    plot_grf(records[0], writer, prefix + "grf")
    plot_energy(records[0], writer, prefix + "energy")
    plot_damper(records[0], writer, prefix + "damper")


def sweep_plots(result, writer: OutputWriter):
    plot_excursion_grid(result, writer)
    plot_work_distribution(result, writer)
