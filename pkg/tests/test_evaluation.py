import json
import math

import numpy as np
import pytest
from scipy import stats

from apbench.env import EnvConfig, GlucoseEnv, ma_wrap
from apbench.evaluation import (BBPolicy, ConstantBasalPolicy, PIDPolicy,
                                RolloutLog, ZeroInsulinPolicy,
                                aggregate_table, binomial_failure_test,
                                chi2_from_table, chi2_sf_1dof,
                                moods_median_test, postmeal_insulin_profile,
                                run_rollout, select_model, select_restart,
                                summarize_trace, winrate_vs_reference,
                                write_summaries_jsonl, write_table_csv)
from apbench.meals import single_meal_slots, slots_for_patient
from apbench.patients import load_registry
from apbench.risk import magni_risk
from apbench.sac.training import EpochSummary

ADULT = load_registry().get("adult#001")
QUIET = EnvConfig(sensor_noise=False)


# -- metrics -------------------------------------------------------------------

def test_summarize_trace_partition():
    bgs = np.array([60.0, 70.0, 100.0, 180.0, 181.0, 250.0])
    s = summarize_trace("adult#001", 0, bgs, np.ones(6), terminated=False)
    # boundaries 70 and 180 count as euglycemic
    assert s.pct_hypo == pytest.approx(100 / 6)
    assert s.pct_eu == pytest.approx(300 / 6)
    assert s.pct_hyper == pytest.approx(200 / 6)
    assert s.pct_eu + s.pct_hypo + s.pct_hyper == pytest.approx(100.0)
    assert s.min_bg == 60.0 and s.max_bg == 250.0
    assert not s.catastrophic
    assert s.total_insulin == pytest.approx(6.0)


def test_summarize_trace_mean_risk_oracle():
    bgs = np.array([100.0, 150.0, 200.0])
    s = summarize_trace("adult#001", 0, bgs, np.zeros(3), False)
    assert s.mean_risk == pytest.approx(
        np.mean([magni_risk(b) for b in bgs]))


def test_catastrophic_flag():
    s = summarize_trace("adult#001", 0, np.array([140.0, 4.9]),
                        np.zeros(2), True)
    assert s.catastrophic and s.terminated


def test_run_rollout_log_csv(tmp_path):
    env = GlucoseEnv(ADULT, single_meal_slots(40.0, hour=1.0), QUIET)
    log, summary = run_rollout(BBPolicy(), env, days=1, seed=20_000,
                               log_path=tmp_path / "log.csv")
    assert len(log.true_bg) == 288
    assert summary.length == 288
    text = (tmp_path / "log.csv").read_text().splitlines()
    assert text[0] == "step,true_bg,cgm,insulin,carbs,reward,done"
    assert len(text) == 289


def test_zero_insulin_and_basal_policies():
    env = GlucoseEnv(ADULT, single_meal_slots(40.0, hour=1.0), QUIET)
    log, _ = run_rollout(ZeroInsulinPolicy(), env, days=1, seed=20_000)
    assert np.all(log.insulin == 0.0)
    env = GlucoseEnv(ADULT, single_meal_slots(40.0, hour=1.0), QUIET)
    log, _ = run_rollout(ConstantBasalPolicy(), env, days=1, seed=20_000)
    assert np.all(log.insulin == pytest.approx(ADULT.bas))


# -- model selection -----------------------------------------------------------

def hist(entries):
    return [EpochSummary(epoch=i, mean_risk=r, min_bg=lo, max_bg=hi,
                         catastrophic=False, terminated=False, steps=2880,
                         mean_reward=-r)
            for i, (r, lo, hi) in enumerate(entries)]


def test_select_model_filters_unsafe_epochs():
    # epoch 1 has the lowest risk but dipped below 30 mg/dL
    history = hist([(8.0, 90, 300), (2.0, 25, 300), (5.0, 80, 280)])
    sel = select_model(history)
    assert sel.epoch == 2 and not sel.fallback
    assert sel.risk == 5.0


def test_select_model_fallback_when_all_fail():
    history = hist([(8.0, 20, 300), (2.0, 25, 1100)])
    sel = select_model(history)
    assert sel.fallback and sel.epoch == 1


def test_select_model_empty():
    with pytest.raises(ValueError):
        select_model([])


def test_select_restart_prefers_passing():
    r0 = hist([(3.0, 20, 300)])       # lower risk but filtered out
    r1 = hist([(6.0, 90, 300)])
    idx, sel = select_restart([r0, r1])
    assert idx == 1 and not sel.fallback


# -- statistics ----------------------------------------------------------------

def test_chi2_sf_matches_scipy():
    for x in (0.0, 0.5, 1.0, 3.84, 10.0, 25.0):
        assert chi2_sf_1dof(x) == pytest.approx(stats.chi2.sf(x, df=1),
                                                abs=1e-12)


def test_moods_median_test_contingency_oracle():
    # Construct samples whose above/below-median table is (20,5;5,20).
    a = np.concatenate([np.full(20, 10.0), np.full(5, -10.0)])
    b = np.concatenate([np.full(5, 10.0), np.full(20, -10.0)])
    # grand median is 0 with no ties; expected Yates chi-square p-value
    stat = chi2_from_table([[20, 5], [5, 20]])
    expected = stats.chi2.sf(stat, df=1)
    assert moods_median_test(a, b) == pytest.approx(expected, abs=1e-6)
    # and the statistic agrees with scipy's median_test machinery
    chi2_scipy, p_scipy, *_ = stats.median_test(a, b, ties="ignore",
                                                correction=True)
    assert stat == pytest.approx(chi2_scipy, abs=1e-9)
    assert moods_median_test(a, b) == pytest.approx(p_scipy, abs=1e-6)


def test_moods_median_identical_samples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=40)
    assert moods_median_test(x, x) > 0.99


def test_moods_median_needs_5_per_sample():
    with pytest.raises(ValueError):
        moods_median_test([1, 2, 3], [4, 5, 6, 7, 8])


def test_binomial_failure_test_extremes():
    assert binomial_failure_test(0, 1000, 50, 1000) < 1e-6
    assert binomial_failure_test(10, 100, 10, 100) == pytest.approx(1.0, abs=0.05)


def test_binomial_failure_test_matches_scipy():
    for k1, n1, k2, n2 in [(5, 100, 12, 80), (1, 50, 0, 50), (30, 200, 50, 200)]:
        p = k1 / n1
        expected = stats.binomtest(k2, n2, p).pvalue
        assert binomial_failure_test(k1, n1, k2, n2) == pytest.approx(
            expected, abs=1e-9)


def test_binomial_failure_test_validation():
    with pytest.raises(ValueError):
        binomial_failure_test(0, 0, 1, 10)
    with pytest.raises(ValueError):
        binomial_failure_test(11, 10, 1, 10)


# -- analyses ------------------------------------------------------------------

def uniform_log(days=1, insulin=0.1, meal_steps=(100,)):
    n = days * 288
    carbs = np.zeros(n)
    for m in meal_steps:
        carbs[m] = 50.0
    return RolloutLog(steps=np.arange(n), true_bg=np.full(n, 140.0),
                      cgm=np.full(n, 140), insulin=np.full(n, insulin),
                      carbs=carbs, rewards=np.zeros(n), done=np.zeros(n))


def test_postmeal_profile_uniform_controller():
    # Uniform delivery: every 5-minute bin holds 1/288 of the daily dose,
    # so the first hour accumulates 12/288.
    prof = postmeal_insulin_profile([uniform_log()])
    assert prof.fraction == pytest.approx(np.full(36, 1.0 / 288.0))
    assert prof.cumulative_60min == pytest.approx(12.0 / 288.0)
    assert prof.cumulative_90min == pytest.approx(18.0 / 288.0)
    assert prof.minutes[0] == 0.0 and prof.minutes[-1] == 175.0


def test_postmeal_profile_requires_meals():
    with pytest.raises(ValueError):
        postmeal_insulin_profile([uniform_log(meal_steps=())])


def test_postmeal_profile_bolus_dominates():
    log = uniform_log(insulin=0.0, meal_steps=(100,))
    log.insulin[100] = 5.0  # single bolus right at the meal
    prof = postmeal_insulin_profile([log])
    assert prof.fraction[0] == pytest.approx(1.0)
    assert prof.cumulative_60min == pytest.approx(1.0)


def test_winrate_vs_reference():
    ref = [summarize_trace("a", i, np.full(10, bg), np.zeros(10), False)
           for i, bg in enumerate([150, 160, 170, 180, 190])]
    cand = [summarize_trace("a", i, np.full(10, bg), np.zeros(10), False)
            for i, bg in enumerate([140, 145, 200, 205])]
    # reference median risk is risk(170); candidates at 140/145 beat it
    assert winrate_vs_reference(cand, ref) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        winrate_vs_reference([], ref)


def test_aggregate_table_and_collapse_flag(tmp_path):
    good = [summarize_trace("adult#001", i, np.full(10, 150.0), np.ones(10),
                            False) for i in range(4)]
    collapsed = [summarize_trace("adult#002", i, np.full(10, 400.0),
                                 np.zeros(10), False) for i in range(4)]
    rows = aggregate_table(good + collapsed)
    by_group = {r["group"]: r for r in rows}
    assert not by_group["adult#001"]["collapse_warning"]
    assert by_group["adult#002"]["collapse_warning"]
    assert by_group["adult#001"]["failure_pct"] == 0.0
    write_table_csv(rows, tmp_path / "table.csv")
    header = (tmp_path / "table.csv").read_text().splitlines()[0]
    assert header.startswith("group,n,risk")


def test_summaries_jsonl_roundtrip(tmp_path):
    s = [summarize_trace("adult#001", 7, np.full(10, 150.0), np.ones(10),
                         False)]
    write_summaries_jsonl(s, tmp_path / "s.jsonl")
    row = json.loads((tmp_path / "s.jsonl").read_text())
    assert row["patient_id"] == "adult#001"
    assert row["seed"] == 7
    assert row["mean_risk"] == pytest.approx(s[0].mean_risk)


def test_pid_policy_resets_state():
    from apbench.controllers import PIDGains
    gains = PIDGains(kp=-1.58e-4, ki=-1.0e-7, kd=-1.0e-2)
    policy = PIDPolicy(gains)
    env = GlucoseEnv(ADULT, slots_for_patient(ADULT), QUIET)
    a, _ = run_rollout(policy, env, days=1, seed=20_000)
    env = GlucoseEnv(ADULT, slots_for_patient(ADULT), QUIET)
    b, _ = run_rollout(policy, env, days=1, seed=20_000)
    # integral state must not leak between rollouts
    assert np.array_equal(a.insulin, b.insulin)
