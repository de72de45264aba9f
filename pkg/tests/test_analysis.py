import dataclasses
import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from conftest import oracle_energy
from tslip.analysis import (
    PitchDirection,
    duty_factor,
    energy_timecourse,
    force_scaling_report,
    grf_decompose,
    grf_moment_about_vp,
    stride_metrics,
    trunk_metrics,
    work_ledger,
)
from tslip.engine import StrideControl, simulate_stride
from tslip.integrator import IntegrationLimits
from tslip.model import BodyState

DEG = math.pi / 180


# -- trunk metrics and duty factor --------------------------------------------

def test_constant_pitch_stride_has_no_excursion(gait_runs):
    s = gait_runs[0.0].strides[0]
    assert np.ptp(s.states[:, 2]) < 1e-9
    m = trunk_metrics(s)
    assert m.angular_excursion == 0.0
    assert m.mean_angular_velocity == 0.0
    assert m.mean_inclination == pytest.approx(10.0, abs=1e-6)


def test_duty_factor_half_stance():
    class Stub:
        stance_duration = 0.2
        period = 0.4

    assert duty_factor(Stub(), steps_per_stride=1) == 0.5
    # quoted per two-step gait cycle by default
    assert duty_factor(Stub()) == 0.25


def test_duty_factor_in_unit_interval(gait_runs):
    for run in gait_runs.values():
        assert 0.0 < duty_factor(run.strides[0]) < 1.0


def test_excursion_and_phase_ranges(gait_runs):
    for run in gait_runs.values():
        m = trunk_metrics(run.strides[0])
        assert m.angular_excursion >= 0.0
        assert 0.0 <= m.max_flexion_phase < 100.0


def test_pitch_direction_by_vp_side(gait_runs):
    assert trunk_metrics(gait_runs[0.4].strides[0]).pitch_direction == PitchDirection.BACKWARD
    assert trunk_metrics(gait_runs[-0.4].strides[0]).pitch_direction == PitchDirection.FORWARD


def test_excursion_matches_sampled_range(gait_runs):
    s = gait_runs[-0.4].strides[0]
    sampled = np.ptp(s.states[:, 2]) / DEG
    m = trunk_metrics(s)
    # event states refine the sampled extrema by at most one sample step
    assert sampled <= m.angular_excursion < sampled + 0.01


def test_mean_velocity_sign_follows_direction(gait_runs):
    # counter-clockwise positive: backward pitching reads positive
    assert trunk_metrics(gait_runs[0.4].strides[0]).mean_angular_velocity > 0
    assert trunk_metrics(gait_runs[-0.4].strides[0]).mean_angular_velocity < 0


# -- GRF decomposition ----------------------------------------------------------

def test_grf_components_close(gait_runs):
    for run in gait_runs.values():
        d = grf_decompose(run.strides[0])
        total = d.spring + d.damper + d.tangential
        scale = np.linalg.norm(d.grf, axis=1).max()
        assert np.abs(total - d.grf).max() <= 1e-12 * scale
        assert np.abs(d.axial + d.tangential - d.grf).max() <= 1e-12 * scale


def test_overlays_subtract_their_part(gait_runs):
    d = grf_decompose(gait_runs[0.4].strides[0])
    assert np.allclose(d.without_damping + d.damper, d.grf, rtol=0, atol=1e-9)
    assert np.allclose(d.without_hip, d.axial, rtol=0, atol=1e-9)


def test_zero_damping_overlay_is_total(gait_runs):
    s = gait_runs[0.0].strides[0]
    apex = BodyState(*s.event_states["apex_start"])
    rec, _ = simulate_stride(dataclasses.replace(s.params, damping_coefficient=0.0), s.control, apex)
    d = grf_decompose(rec)
    assert np.array_equal(d.without_damping, d.grf)


def _pre_ms_horizontal_impulses(stride):
    d = grf_decompose(stride)
    pre = d.t < stride.events["midstance"]
    return trapezoid(d.axial[pre, 0], d.t[pre]), trapezoid(d.tangential[pre, 0], d.t[pre])


def test_vp_below_leg_and_hip_push_together_before_midstance(gait_runs):
    leg, hip = _pre_ms_horizontal_impulses(gait_runs[-0.4].strides[0])
    assert np.sign(leg) == np.sign(hip) != 0
    # the VP-above gait is the contrast case
    leg, hip = _pre_ms_horizontal_impulses(gait_runs[0.4].strides[0])
    assert np.sign(leg) != np.sign(hip)


def test_vertical_grf_is_mostly_leg_force(gait_runs):
    for run in gait_runs.values():
        d = grf_decompose(run.strides[0])
        assert np.all(np.abs(d.axial[:, 1]) >= np.abs(d.tangential[:, 1]))
        assert np.abs(d.tangential[:, 1]).max() < 0.2 * np.abs(d.axial[:, 1]).max()


def test_vp_moment_helper_agrees_with_zero(gait_runs):
    for r in (0.4, -0.4):
        assert grf_moment_about_vp(gait_runs[r].strides[0]).max() < 1e-6


# -- work ledger and energy ----------------------------------------------------

def _passive_ledger(stride, tol):
    p = dataclasses.replace(stride.params, damping_coefficient=0.0)
    apex = BodyState(*stride.event_states["apex_start"])
    limits = IntegrationLimits(max_time=5.0, abs_tol=tol, rel_tol=tol)
    rec, _ = simulate_stride(p, StrideControl(stride.control.td_angle), apex, limits=limits)
    return work_ledger(rec)


def test_passive_stride_is_conservative(gait_runs):
    """No hip torque and no damping: every net work and the residual vanish."""
    s = gait_runs[0.0].strides[0]
    w = _passive_ledger(s, 1e-12)
    assert w.hip_positive == w.hip_negative == w.damper_net == 0.0
    assert w.spring_positive > 10.0
    assert abs(w.spring_net) < 1e-9
    assert abs(w.residual) < 1e-9
    assert abs(w.delta_energy) < 1e-9


def test_passive_drift_scales_with_tolerance(gait_runs):
    s = gait_runs[0.0].strides[0]
    coarse, fine = _passive_ledger(s, 1e-10), _passive_ledger(s, 1e-12)
    assert abs(fine.delta_energy) < 0.05 * abs(coarse.delta_energy)


def test_ledger_signs_and_closure(gait_runs):
    for run in gait_runs.values():
        for s in run.strides:
            w = work_ledger(s)
            for pos, neg in ((w.spring_positive, w.spring_negative), (w.hip_positive, w.hip_negative),
                             (w.leg_positive, w.leg_negative)):
                assert pos >= 0.0 >= neg
            assert w.damper_net <= 0.0
            assert abs(w.residual) < 1e-6 * w.throughput


def test_ledger_delta_energy_matches_oracle(gait_runs):
    s = gait_runs[-0.4].strides[0]
    p = s.params
    de = (oracle_energy(s.event_states["apex_end"], p.mass, p.inertia, p.gravity)
          - oracle_energy(s.event_states["apex_start"], p.mass, p.inertia, p.gravity))
    assert work_ledger(s).delta_energy == pytest.approx(de, abs=1e-9)


def test_vp_gaits_inject_hip_work_that_the_damper_removes(gait_runs):
    for r in (0.4, -0.4):
        w = work_ledger(gait_runs[r].strides[0])
        assert w.hip_net > 0
        assert abs(w.hip_net + w.damper_net) < 1e-6 * w.throughput


def test_energy_timecourse_endpoints_match_ledger(gait_runs):
    s = gait_runs[0.4].strides[0]
    tc = energy_timecourse(s)
    w = work_ledger(s)
    assert tc.stance_percent[0] == 0.0 and tc.stance_percent[-1] == pytest.approx(100.0)
    assert tc.hip[-1] == pytest.approx(w.hip_net, rel=1e-3, abs=1e-3)
    assert tc.damper[-1] == pytest.approx(w.damper_net, rel=1e-3, abs=1e-3)
    assert 0.0 < tc.midstance_percent < 100.0


def test_energy_reversal_sides(gait_runs):
    above = energy_timecourse(gait_runs[0.4].strides[0])
    below = energy_timecourse(gait_runs[-0.4].strides[0])
    assert above.reversal_percent > above.midstance_percent
    assert below.reversal_percent < below.midstance_percent


def test_force_scaling_of_identical_strides(gait_runs):
    s = gait_runs[0.4].strides[0]
    r = force_scaling_report(s, s)
    assert all(v == 1.0 for v in r.as_dict().values())


def test_stride_metrics_row(gait_runs):
    row = stride_metrics(gait_runs[0.4].strides[0])
    for key in ("duty_factor", "angular_excursion", "work_hip_net", "work_residual", "hip_reversal_percent"):
        assert math.isfinite(row[key])
