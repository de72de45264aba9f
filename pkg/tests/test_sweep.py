import math

import pytest

from tslip.analysis import PitchDirection
from tslip.sweep import (
    DutyFactorBand,
    SweepPlan,
    TdAngleSchedule,
    TuningFailure,
    controller_for_speed,
    run_sweep,
    tune_damping_for_duty_factor,
)

C5 = 1210.546875


def test_band_interpolates_linearly():
    b = DutyFactorBand()
    assert b.band(4.0) == pytest.approx((0.25, 0.40))
    assert b.band(10.0) == pytest.approx((0.18, 0.30))
    assert b.band(7.0) == pytest.approx((0.215, 0.35))
    assert b.target(4.0) == pytest.approx(0.25 + 0.9 * 0.15)
    assert b.target(10.0) == pytest.approx(0.18 + 0.1 * 0.12)


@pytest.mark.parametrize("kw", [dict(lower_low=0.5, upper_low=0.4), dict(speed_high=3.0),
                                dict(target_fraction_low=1.5), dict(upper_high=1.2)])
def test_band_validation(kw):
    with pytest.raises(ValueError):
        DutyFactorBand(**kw)


def test_schedule_anchors():
    s = TdAngleSchedule()
    assert s.angle(4.0) == pytest.approx(math.radians(69.4))
    assert s.angle(10.0) == pytest.approx(math.radians(57.5))


@pytest.mark.parametrize("kw", [dict(vp_radii=()), dict(speeds=()), dict(vp_radii=(0.8,)),
                                dict(vp_radii=(0.2, 0.2)), dict(speeds=(-1.0,)),
                                dict(tune=False), dict(parallelism=0)])
def test_plan_validation(kw):
    with pytest.raises(ValueError):
        SweepPlan(**kw)


def test_plan_cells_cover_grid():
    p = SweepPlan()
    assert len(p.cells()) == 49 and len(set(p.cells())) == 49


def _single(cfg):
    plan = SweepPlan(vp_radii=(0.0,), speeds=(5.0,), tune=False, damping={5.0: C5})
    return run_sweep(plan, cfg.model_params(damping=0.0), cfg.controller_config(), cfg.schedule(), keep_runs=True)


def test_single_cell_grid(cfg):
    res = _single(cfg)
    assert len(res.cells) == 1
    c = res.cells[0]
    assert c.converged and c.damping == C5
    assert c.metrics.angular_excursion == 0.0


def test_repeated_sweep_is_bit_identical(cfg):
    assert _single(cfg).digest() == _single(cfg).digest()


def test_vacuous_band_accepts_first_candidate(cfg):
    ctrl = controller_for_speed(cfg.controller_config(), cfg.schedule(), 5.0)
    res = tune_damping_for_duty_factor(cfg.model_params(damping=0.0), 5.0, (0.0, 1.0), ctrl, initial=C5)
    assert res.damping == C5 and len(res.evaluations) == 1


def test_unreachable_band_reports_bracket(cfg):
    ctrl = controller_for_speed(cfg.controller_config(), cfg.schedule(), 5.0)
    with pytest.raises(TuningFailure) as exc:
        tune_damping_for_duty_factor(cfg.model_params(damping=0.0), 5.0, (0.6, 0.7), ctrl,
                                     initial=C5, bounds=(1000.0, 2000.0))
    assert exc.value.evaluations and all(df < 0.6 for _, df in exc.value.evaluations)
    assert "bracket" in str(exc.value)


def test_tuning_rejects_bad_band(cfg):
    with pytest.raises(ValueError):
        tune_damping_for_duty_factor(cfg.model_params(damping=0.0), 5.0, (0.4, 0.3), cfg.controller_config())


# -- the default grid (session fixture) -----------------------------------------

@pytest.mark.slow
def test_every_cell_present_once(sweep):
    assert sorted((c.speed, c.radius) for c in sweep.cells) == sorted(sweep.plan.cells())


@pytest.mark.slow
def test_every_cell_converges(sweep):
    assert [(c.speed, c.radius) for c in sweep.cells if not c.converged] == []


@pytest.mark.slow
def test_same_damping_across_speed_column(sweep):
    for s in sweep.plan.speeds:
        cs = {c.damping for c in sweep.cells if c.speed == s}
        assert cs == {sweep.tuning[s].damping}


@pytest.mark.slow
def test_damping_decreases_with_speed(sweep):
    cs = [sweep.tuning[s].damping for s in sweep.plan.speeds]
    assert cs[0] > cs[-1]
    assert all(a > b for a, b in zip(cs, cs[1:]))


@pytest.mark.slow
def test_zero_radius_has_smallest_excursion(sweep):
    for s in sweep.plan.speeds:
        col = {c.radius: c.metrics.angular_excursion for c in sweep.cells if c.speed == s}
        assert col[0.0] == min(col.values())


@pytest.mark.slow
def test_direction_column(sweep):
    for row in sweep.rows():
        if row["vp_radius"] > 0:
            assert row["pitch_direction"] == PitchDirection.BACKWARD.value
        elif row["vp_radius"] < 0:
            assert row["pitch_direction"] == PitchDirection.FORWARD.value


@pytest.mark.slow
def test_extreme_radius_directions(sweep):
    for s in sweep.plan.speeds:
        assert sweep.cell(s, 0.6).metrics.pitch_direction == PitchDirection.BACKWARD
        assert sweep.cell(s, -0.6).metrics.pitch_direction == PitchDirection.FORWARD


@pytest.mark.slow
def test_vp_below_hip_reversal_at_largest_radius(sweep):
    """At the largest VP-below radius the hip first removes energy, then injects it."""
    from tslip.analysis import energy_timecourse

    for s in sweep.plan.speeds:
        tc = energy_timecourse(sweep.cell(s, -0.6).stride)
        assert tc.reversal_kind == "minimum"
        assert tc.reversal_percent < tc.midstance_percent
        assert tc.hip[-1] > 0
