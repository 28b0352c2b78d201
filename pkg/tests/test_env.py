import math

import numpy as np
import pytest

from apbench.env import (CGM_MAX, CGM_MIN, EnvConfig, EnvError, GlucoseEnv,
                         MealAnnounceEnv, derivatives, equilibrium_state,
                         integrate_step, ma_wrap, params_for_patient)
from apbench.meals import default_slots, single_meal_slots, slots_for_patient
from apbench.patients import load_registry
from apbench.risk import RewardConfig, magni_risk

QUIET = EnvConfig(sensor_noise=False)


@pytest.fixture(scope="module")
def adult():
    return load_registry().get("adult#001")


@pytest.fixture(scope="module")
def child():
    return load_registry().get("child#001")


def no_meals():
    return single_meal_slots(0.0)


# -- model parameterization ----------------------------------------------------

def test_equilibrium_is_exact_fixed_point(adult):
    params = params_for_patient(adult)
    state = equilibrium_state(params)
    deriv = derivatives(state, params.basal_rate, 0.0, params)
    assert np.max(np.abs(deriv)) < 1e-9
    assert state[0] == pytest.approx(140.0)


def test_basal_holds_glucose_at_equilibrium(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    env.reset(0)
    bgs = []
    for _ in range(288):
        r = env.step(adult.bas)
        bgs.append(r.info["true_bg"])
    assert min(bgs) == pytest.approx(140.0, abs=2.0)
    assert max(bgs) == pytest.approx(140.0, abs=2.0)


def test_insulin_sensitivity_scales_with_cf():
    reg = load_registry()
    drops = {}
    for pid in ("adult#001", "adolescent#004", "child#001"):
        p = reg.get(pid)
        params = params_for_patient(p)
        state = equilibrium_state(params)
        lowest = state[0]
        for t in range(288):
            u = params.basal_rate + (0.2 if t == 0 else 0.0)  # 1U over 5 min
            state = integrate_step(state, u, 0.0, params)
            lowest = min(lowest, state[0])
        drops[pid] = 140.0 - lowest
        # a unit should produce a CF-commensurate dip
        assert 0.4 * p.cf < drops[pid] < 0.8 * p.cf
    assert drops["child#001"] > drops["adolescent#004"] > drops["adult#001"]


def test_meal_raises_glucose_then_returns(adult):
    env = GlucoseEnv(adult, single_meal_slots(60.0, hour=1.0), QUIET)
    env.reset(0)
    bgs = [env.step(adult.bas).info["true_bg"] for _ in range(288)]
    assert max(bgs) > 180.0
    assert bgs[-1] < max(bgs) - 20.0  # on the way back down


def test_gut_drains_completely(adult):
    params = params_for_patient(adult)
    state = equilibrium_state(params)
    state = integrate_step(state, params.basal_rate, 60.0 / 5.0, params)
    for _ in range(144 - 1):  # 12 h total
        state = integrate_step(state, params.basal_rate, 0.0, params)
    assert state[5] + state[6] < 1e-6


def test_rk4_substep_halving_agreement(adult):
    # With a meal and a bolus in flight, halving the step should barely
    # move the solution.
    params = params_for_patient(adult)
    state = equilibrium_state(params)
    coarse = integrate_step(state, 1.0, 12.0, params, substep_min=1.0)
    fine = integrate_step(state, 1.0, 12.0, params, substep_min=0.5)
    assert np.max(np.abs(coarse - fine)) < 0.1


def test_state_nonnegative_under_overdose(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    env.reset(0)
    for _ in range(200):
        r = env.step(adult.omega_b)
        assert np.all(env.oracle_state() >= 0.0)
        if r.done:
            break


# -- observation ---------------------------------------------------------------

def test_observation_window_shape(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    obs = env.reset(0)
    arr = obs.as_array()
    assert arr.shape == (48, 2)
    assert obs.n_channels == 2
    obs = env.step(adult.bas).observation
    assert obs.as_array().shape == (48, 2)
    assert obs.insulin[-1] == pytest.approx(adult.bas)


def test_cgm_integer_and_clamped(adult):
    env = GlucoseEnv(adult, single_meal_slots(200.0, hour=1.0),
                     EnvConfig(sensor_noise=True))
    obs = env.reset(3)
    readings = list(obs.cgm)
    for _ in range(600):
        r = env.step(0.0)
        readings.append(r.info["cgm"])
        if r.done:
            break
    readings = np.array(readings)
    assert np.array_equal(readings, np.round(readings))
    assert readings.min() >= CGM_MIN and readings.max() <= CGM_MAX
    assert readings.max() == CGM_MAX  # unchecked hyperglycemia pegs the sensor


def test_sensor_noise_statistics(adult):
    # At steady state the CGM residual is AR(1): stationary sd ~5,
    # lag-1 autocorrelation ~0.7.
    env = GlucoseEnv(adult, no_meals(), EnvConfig(sensor_noise=True))
    env.reset(11)
    resid = []
    for _ in range(8000):
        r = env.step(adult.bas)
        resid.append(r.info["cgm"] - r.info["true_bg"])
        if r.done:
            env.reset(12)
    resid = np.array(resid)
    assert np.std(resid) == pytest.approx(5.0, abs=0.7)
    rho = np.corrcoef(resid[:-1], resid[1:])[0, 1]
    assert rho == pytest.approx(0.7, abs=0.05)


def test_noise_free_cgm_tracks_bg(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    env.reset(0)
    r = env.step(adult.bas)
    assert r.info["cgm"] == round(r.info["true_bg"])


# -- episode mechanics ---------------------------------------------------------

def test_determinism_bitwise(adult):
    def run():
        env = GlucoseEnv(adult, slots_for_patient(adult),
                         EnvConfig(sensor_noise=True))
        obs = env.reset(123)
        out = [obs.as_array().copy()]
        for t in range(500):
            r = env.step(0.01 * (t % 7))
            out.append(r.observation.as_array().copy())
            out.append(np.array([r.reward, r.info["true_bg"]]))
        return out

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_different_seeds_differ(adult):
    env = GlucoseEnv(adult, slots_for_patient(adult), QUIET)
    env.reset(0)
    trace_a = [env.step(adult.bas).info["true_bg"] for _ in range(288)]
    env.reset(1)
    trace_b = [env.step(adult.bas).info["true_bg"] for _ in range(288)]
    assert trace_a != trace_b


def test_termination_low_and_high(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    env.reset(0)
    while True:
        r = env.step(adult.omega_b)  # max insulin every step
        if r.done:
            break
    assert r.info["terminated_dangerously"]
    assert r.info["true_bg"] < 10.0
    assert r.reward < -9e4

    env2 = GlucoseEnv(adult, single_meal_slots(300.0, hour=0.5),
                      EnvConfig(sensor_noise=False, horizon_days=30))
    env2.reset(0)
    while True:
        r = env2.step(0.0)
        if r.done:
            break
    assert r.info["terminated_dangerously"]
    assert r.info["true_bg"] > 1000.0


def test_horizon_done_is_not_dangerous(adult):
    env = GlucoseEnv(adult, no_meals(),
                     EnvConfig(sensor_noise=False, horizon_days=1))
    env.reset(0)
    for i in range(288):
        r = env.step(adult.bas)
    assert r.done and not r.info["terminated_dangerously"]
    assert r.reward > -100.0  # no termination penalty at the horizon


def test_step_contract_errors(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    env.reset(0)
    with pytest.raises(EnvError):
        env.step(-0.1)
    env2 = GlucoseEnv(adult, no_meals(),
                      EnvConfig(sensor_noise=False, horizon_days=1))
    env2.reset(0)
    for _ in range(288):
        env2.step(adult.bas)
    with pytest.raises(EnvError):
        env2.step(adult.bas)


def test_reward_is_negative_risk_of_true_bg(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    env.reset(0)
    r = env.step(adult.bas)
    assert r.reward == pytest.approx(-magni_risk(r.info["true_bg"]))


def test_fine_tune_reward_mode(adult):
    cfg = EnvConfig(sensor_noise=False,
                    reward_config=RewardConfig(fine_tune=True))
    env = GlucoseEnv(adult, no_meals(), cfg)
    env.reset(0)
    r = env.step(adult.bas)
    assert r.reward == pytest.approx(100.0 - magni_risk(r.info["true_bg"]))


# -- meal announcement ---------------------------------------------------------

def test_cooldown_flag_progression(adult):
    env = GlucoseEnv(adult, single_meal_slots(60.0, hour=1.0), QUIET)
    env.reset(0)
    meal_step = 12
    for t in range(meal_step + 40):
        carbs, cooldown = env.meal_announcement()
        if t < meal_step:
            assert carbs == 0.0 and cooldown == 1
        elif t == meal_step:
            assert carbs == 60.0 and cooldown == 1
        else:
            assert carbs == 0.0
            assert cooldown == (0 if t - meal_step <= 36 else 1)
        env.step(adult.bas)


def test_ma_wrapper_bolus_arithmetic(child):
    # CR and CF come from the registry; the wrapper adds carbs/CR plus a
    # cooldown-gated correction (cgm - target)/CF on meal steps.
    env = ma_wrap(GlucoseEnv(child, single_meal_slots(60.0, hour=1.0), QUIET))
    env.reset(0)
    for t in range(13):
        carbs, cooldown = env.meal_announcement()
        cgm = env.last_cgm
        r = env.step(0.0)
        if carbs > 0:
            expected = 60.0 / child.cr + cooldown * (cgm - 140.0) / child.cf
            assert r.info["insulin"] == pytest.approx(max(0.0, expected))
        else:
            assert r.info["insulin"] == 0.0


def test_ma_wrapper_channels(adult):
    env = ma_wrap(GlucoseEnv(adult, single_meal_slots(60.0, hour=1.0), QUIET))
    obs = env.reset(0)
    assert obs.n_channels == 4
    assert obs.as_array().shape == (48, 4)
    for _ in range(13):
        r = env.step(0.0)
    assert r.observation.carbs.max() == 60.0
    # the cooldown flag is the pre-step value, so it drops one step later
    assert r.observation.cooldown[-1] == 1.0
    r = env.step(0.0)
    assert r.observation.cooldown[-1] == 0.0


def test_double_wrap_rejected(adult):
    env = ma_wrap(GlucoseEnv(adult, no_meals(), QUIET))
    with pytest.raises(EnvError):
        ma_wrap(env)


def test_oracle_state_requires_reset(adult):
    env = GlucoseEnv(adult, no_meals(), QUIET)
    with pytest.raises(EnvError):
        env.oracle_state()
    env.reset(0)
    assert env.oracle_state().shape == (7,)
