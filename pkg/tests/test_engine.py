import math

import numpy as np
import pytest

from conftest import oracle_energy, oracle_vp_moment
from tslip.analysis import duty_factor, trunk_metrics, work_ledger
from tslip.controllers import ControllerConfig, LegPlacementGains, ProtocolPhase
from tslip.engine import (
    FLIGHT,
    STANCE,
    StrideControl,
    StrideFailure,
    cold_start_apex,
    run_gait,
    simulate_stride,
)
from tslip.model import BodyState, ModelParams, VpFrame, VpTarget
from tslip.protocol import ProtocolFailure, apex_difference, run_convergence_protocol

DEG = math.pi / 180


def test_cold_start_apex_height():
    p = ModelParams()
    a = cold_start_apex(p, 5.0, 70 * DEG, 10 * DEG)
    hip_y = a.y_com - 0.1 * math.cos(a.pitch)
    assert hip_y == pytest.approx(1.05 * math.sin(70 * DEG))
    assert (a.vx, a.vy, a.pitch, a.pitch_rate) == (5.0, 0.0, 10 * DEG, 0.0)


def test_stride_must_start_at_apex(cfg):
    with pytest.raises(ValueError):
        simulate_stride(cfg.model_params(), StrideControl(1.2, VpTarget(0.0)), BodyState(0, 1.1, 0, 5, 0.5, 0))


def test_apex_below_touchdown_height_is_a_fall(cfg):
    # the foot is under ground from the start, so the CoM height guard ends the flight
    low = BodyState(0.0, 0.25, 0.0, 5.0, 0.0, 0.0)
    with pytest.raises(StrideFailure) as exc:
        simulate_stride(cfg.model_params(), StrideControl(80 * DEG, VpTarget(0.0)), low)
    assert exc.value.kind == "fall" and exc.value.stage == "descent"
    assert exc.value.state[1] == pytest.approx(0.2, abs=1e-9)


def test_apex_under_fall_height_is_rejected(cfg):
    with pytest.raises(StrideFailure) as exc:
        simulate_stride(cfg.model_params(), StrideControl(80 * DEG, VpTarget(0.0)), BodyState(0, 0.1, 0, 5, 0, 0))
    assert exc.value.kind == "fall"


def test_stride_budget_of_one_fails(cfg):
    run = run_gait(cfg.model_params(), cfg.controller_config(), VpTarget(0.0), 5.0, stride_budget=1)
    assert not run.converged
    assert run.failure["reason"] == "stride_budget_exhausted"
    with pytest.raises(ProtocolFailure):
        run.raise_for_failure()


def test_converged_run_records_steady_strides(gait_runs):
    for run in gait_runs.values():
        assert run.converged and run.phase == ProtocolPhase.CONVERGED
        assert len(run.strides) >= 3
        idx = [s.index for s in run.strides]
        assert idx == list(range(idx[0], idx[0] + len(idx)))


def test_event_order_and_midstance(gait_runs):
    for run in gait_runs.values():
        for s in run.strides:
            e = s.events
            assert e["apex_start"] < e["touchdown"] < e["midstance"] < e["takeoff"] < e["apex_end"]
            st = s.phase == STANCE
            i = np.flatnonzero(st)[np.argmin(s.leg_length[st])]
            assert s.t[i] == e["midstance"]


def test_phases_alternate(gait_runs):
    for s in gait_runs[0.4].strides:
        changes = s.phase[np.flatnonzero(np.diff(s.phase)) + 1]
        assert list(changes) == [STANCE, FLIGHT]
        assert s.phase[0] == FLIGHT


def test_grf_is_zero_in_flight(gait_runs):
    for run in gait_runs.values():
        s = run.strides[0]
        fl = s.phase == FLIGHT
        assert np.all(s.grf[fl] == 0.0)
        assert np.all(s.tau_hip[fl] == 0.0)
        assert np.all(s.leg_length[fl] == s.params.leg_rest_length)


def test_state_continuous_across_contact(gait_runs):
    s = gait_runs[-0.4].strides[0]
    for key in ("touchdown", "takeoff"):
        i = np.searchsorted(s.t, s.events[key])
        gap = s.states[i] - s.states[i - 1]
        dt = s.t[i] - s.t[i - 1]
        # one sample step moves the state by at most dt * (max rate)
        assert np.all(np.abs(gap) < dt * np.array([12, 5, 5, 60, 60, 60]))


def test_stride_energy_audit(gait_runs):
    """Energy change equals hip plus damper work (energy oracle)."""
    for run in gait_runs.values():
        for s in run.strides:
            p = s.params
            de = (oracle_energy(s.event_states["apex_end"], p.mass, p.inertia, p.gravity)
                  - oracle_energy(s.event_states["apex_start"], p.mass, p.inertia, p.gravity))
            w = s.works
            assert abs(de - (w.hip_positive + w.hip_negative + w.damper)) < 1e-6 * w.throughput


def test_fixed_point_consistency(gait_runs, cfg):
    for run in gait_runs.values():
        s = run.strides[0]
        apex = BodyState(*s.event_states["apex_start"])
        _, nxt = simulate_stride(s.params, s.control, apex)
        assert apex_difference(apex.as_array(), nxt.as_array()) < 1e-6


def test_phase_two_is_pure_vp(gait_runs):
    for run in gait_runs.values():
        for s in run.strides:
            assert s.control.pid is None
            assert np.all(s.tau_pid == 0.0)
            assert np.array_equal(s.tau_hip, s.tau_vp)


def test_vp_frame_handling(gait_runs):
    above = gait_runs[0.4].strides[0]
    below = gait_runs[-0.4].strides[0]
    st = above.stance_mask
    v = above.vp_points()[st]
    d = v - above.states[st, :2]
    # body frame: VP direction turns with the trunk
    ang = np.arctan2(d[:, 0], d[:, 1])
    assert np.allclose(ang, above.states[st, 2] + above.control.vp.angle, atol=1e-12)
    st = below.stance_mask
    d = below.vp_points()[st] - below.states[st, :2]
    ang = np.arctan2(-d[:, 0], -d[:, 1])
    assert np.ptp(ang) < 1e-12


def test_steady_metrics_are_periodic(gait_runs):
    for run in gait_runs.values():
        rows = [(duty_factor(s), trunk_metrics(s).angular_excursion, work_ledger(s).hip_net,
                 work_ledger(s).damper_net) for s in run.strides]
        a = np.array(rows)
        spread = np.ptp(a, axis=0)
        scale = np.maximum(np.abs(a).max(axis=0), 1e-9)
        assert np.all(spread <= 1e-3 * scale)


def test_grf_through_vp_every_stride(gait_runs):
    for r in (0.4, -0.4):
        for s in gait_runs[r].strides:
            vp = s.control.vp
            assert oracle_vp_moment(s, vp.radius, vp.angle, vp.angle_frame == VpFrame.BODY).max() < 1e-6


def test_vp_below_adapts_to_fixed_angle(gait_runs):
    run = gait_runs[-0.4]
    angles = [s.control.vp.angle for s in run.strides]
    assert np.ptp(angles) < 1e-4


@pytest.mark.parametrize("radius", [0.0, 0.4])
def test_phase_one_settles_at_desired_pitch(gait_runs, radius, cfg):
    """The VP+PID stage reaches its fixed point within 30 strides at the desired mean pitch."""
    run = gait_runs[radius]
    assert run.metadata["phase1_strides"] <= 30
    z = run.metadata["phase1_state"]
    ctrl = cfg.controller_config()
    apex = BodyState(0.0, z[0], z[1], z[3], 0.0, z[2])
    s, _ = simulate_stride(run.strides[0].params, StrideControl(z[4], run.vp.with_angle(z[5]), ctrl.pid), apex)
    assert abs(s.mean_pitch - 10 * DEG) < 0.5 * DEG


def test_zero_gains_keep_td_angle():
    """With zero placement gains the commanded angle never changes."""
    from tslip.controllers import next_td_angle

    g = LegPlacementGains(initial_td_angle=68 * DEG)
    hist = [(5.0, 1.0), (5.3, 1.05), (4.9, 0.98)]
    angles = [next_td_angle(g, hist[: i + 1], (5.0, 1.0)).angle for i in range(len(hist))]
    assert angles == [68 * DEG] * 3


def test_protocol_rejects_bad_speed(cfg):
    with pytest.raises(ValueError):
        run_convergence_protocol(cfg.model_params(), ControllerConfig(), VpTarget(0.0), -1.0)


@pytest.mark.xfail(strict=True, reason="tuned gaits touch down with a flatter leg than the nominal 71-78 deg range")
def test_td_angle_in_nominal_band(fixture_index):
    g = next(g for g in fixture_index["gaits"] if g["vp_radius"] == 0.0)
    assert 71 * DEG <= g["td_angle"] <= 78 * DEG
