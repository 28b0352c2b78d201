import numpy as np
import pytest

from apbench.controllers import (PIDGains, PIDState, bb_action, gains_for,
                                 load_gain_table, pid_action, pid_ma_action)
from apbench.patients import PatientProfile, load_registry


def make_profile(cr=10.0, cf=50.0, bas=0.5, target=140.0):
    return PatientProfile(id="adult#001", patient_class="adult", age=40.0,
                          tdi=50.0, cr=cr, cf=cf, bas=bas, weight=75.0,
                          height=175.0, glucose_target=target)


# -- basal-bolus fixtures ------------------------------------------------------

BB_CASES = [
    # (bg, carbs, cooldown, cr, cf, bas, target, expected)
    (190.0, 60.0, 1, 10.0, 50.0, 0.5, 140.0, 0.5 + 6.0 + 1.0),       # 7.5
    (190.0, 60.0, 0, 10.0, 50.0, 0.5, 140.0, 0.5 + 6.0),             # no corr
    (140.0, 60.0, 1, 10.0, 50.0, 0.5, 140.0, 0.5 + 6.0),             # corr = 0
    (90.0, 60.0, 1, 10.0, 50.0, 0.5, 140.0, 0.5 + 6.0 - 1.0),        # neg corr
    (190.0, 0.0, 1, 10.0, 50.0, 0.5, 140.0, 0.5),                    # no meal
    (40.0, 10.0, 1, 10.0, 50.0, 0.1, 140.0, 0.1 + 1.0 - 2.0),        # clip to 0
    (250.0, 45.0, 1, 15.0, 30.0, 0.2, 140.0, 0.2 + 3.0 + 110.0 / 30.0),
    (100.0, 0.0, 0, 10.0, 50.0, 0.0, 140.0, 0.0),
    (300.0, 120.0, 1, 8.0, 25.0, 1.0, 120.0, 1.0 + 15.0 + 7.2),
    (150.0, 30.0, 1, 10.0, 100.0, 0.3, 140.0, 0.3 + 3.0 + 0.1),
]


@pytest.mark.parametrize("bg,carbs,cooldown,cr,cf,bas,target,expected",
                         BB_CASES)
def test_bb_hand_fixtures(bg, carbs, cooldown, cr, cf, bas, target, expected):
    profile = make_profile(cr=cr, cf=cf, bas=bas, target=target)
    assert bb_action(bg, carbs, cooldown, profile) == pytest.approx(
        max(0.0, expected), abs=1e-12)


# -- PID reference evaluator ---------------------------------------------------

def reference_pid(kp, ki, kd, setpoint, trace, mode):
    """Naive re-implementation used as the oracle: running error sum and
    previous sample kept as plain Python floats."""
    outputs = []
    err_sum = 0.0
    prev = None
    for bg in trace:
        e = bg - setpoint
        err_sum += e
        delta = 0.0 if prev is None else bg - prev
        if mode == "reconciled":
            raw = -(kp * e + ki * err_sum + kd * delta)
        else:
            raw = kp * max(0.0, e) + ki * err_sum + kd * abs(delta)
        outputs.append(max(0.0, raw))
        prev = bg
    return outputs


def scripted_traces():
    rng = np.random.default_rng(99)
    t = np.arange(288)
    sine = 140.0 + 60.0 * np.sin(2 * np.pi * t / 288.0)
    steps = np.where((t // 48) % 2 == 0, 110.0, 220.0).astype(float)
    walk = np.clip(140.0 + np.cumsum(rng.normal(0, 4, 288)), 40.0, 400.0)
    return [sine, steps, walk]


@pytest.mark.parametrize("mode", ["reconciled", "rectified"])
@pytest.mark.parametrize("trace_idx", [0, 1, 2])
def test_pid_matches_reference(mode, trace_idx):
    trace = scripted_traces()[trace_idx]
    gains = PIDGains(kp=-1.58e-4, ki=-1.0e-7, kd=-1.0e-2, setpoint=140.0)
    state = PIDState()
    expected = reference_pid(gains.kp, gains.ki, gains.kd, gains.setpoint,
                             trace, mode)
    for bg, ref in zip(trace, expected):
        action, state = pid_action(gains, state, float(bg), mode)
        assert action == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("mode", ["reconciled", "rectified"])
def test_pid_ma_matches_reference_plus_bolus(mode):
    trace = scripted_traces()[0]
    profile = make_profile()
    gains = PIDGains(kp=-5e-5, ki=-1e-7, kd=-3e-3)
    state = PIDState()
    base = reference_pid(gains.kp, gains.ki, gains.kd, gains.setpoint,
                         trace, mode)
    meal_steps = {50: 60.0, 150: 30.0}
    cooldowns = {50: 1, 150: 0}
    for i, bg in enumerate(trace):
        carbs = meal_steps.get(i, 0.0)
        cd = cooldowns.get(i, 1)
        action, state = pid_ma_action(gains, state, float(bg), carbs, cd,
                                      profile, mode)
        ref = base[i]
        if carbs > 0:
            ref = max(0.0, ref + carbs / profile.cr
                      + cd * (bg - profile.glucose_target) / profile.cf)
        assert action == pytest.approx(ref, abs=1e-9)


def test_reconciled_mode_delivers_on_high_glucose():
    # Negative published gains must produce insulin above the setpoint.
    gains = PIDGains(kp=-1.58e-4, ki=-1.0e-7, kd=-1.0e-2)
    action, _ = pid_action(gains, PIDState(), 250.0)
    assert action > 0.0
    action, _ = pid_action(gains, PIDState(), 80.0)
    assert action == 0.0  # below setpoint, clipped


def test_pid_state_advances():
    gains = PIDGains(kp=-1e-4, ki=-1e-6, kd=-1e-3)
    state = PIDState()
    _, state = pid_action(gains, state, 200.0)
    assert state.integral == pytest.approx(60.0)
    assert state.prev_bg == 200.0
    _, state = pid_action(gains, state, 210.0)
    assert state.integral == pytest.approx(130.0)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        pid_action(PIDGains(-1e-4, -1e-6, -1e-3), PIDState(), 150.0,
                   mode="banana")


def test_gain_validation():
    with pytest.raises(ValueError):
        PIDGains(kp=float("nan"), ki=0.0, kd=0.0)
    with pytest.raises(ValueError):
        PIDGains(kp=-1e-4, ki=-1e-6, kd=-1e-3, setpoint=300.0)


# -- gain tables ---------------------------------------------------------------

def test_bundled_pid_table_values():
    table = load_gain_table(variant="pid")
    assert len(table) == 30
    g = table["adult#001"]
    assert (g.kp, g.ki, g.kd) == (-1.58e-4, -1.00e-7, -1.00e-2)
    g = table["child#001"]
    assert g.kp < 0 and g.ki < 0 and g.kd < 0


def test_bundled_pid_ma_table_values():
    table = load_gain_table(variant="pid-ma")
    assert len(table) == 30
    g = table["child#001"]
    assert (g.kp, g.ki, g.kd) == (-5.53e-9, -1.00e-7, -3.49e-4)


def test_gain_table_covers_registry():
    registry = load_registry()
    for variant in ("pid", "pid-ma"):
        table = load_gain_table(variant=variant)
        for p in registry:
            assert p.id in table


def test_gain_table_errors(tmp_path):
    with pytest.raises(ValueError):
        load_gain_table(variant="nope")
    empty = tmp_path / "gains.csv"
    empty.write_text("id,kp,ki,kd\n")
    with pytest.raises(ValueError):
        load_gain_table(empty)
    with pytest.raises(KeyError):
        gains_for(load_gain_table(variant="pid"), "adult#099")
