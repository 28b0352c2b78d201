"""Rollout protocol, glycemic metrics, model selection, statistical
tests, and the experiment harnesses built on them."""

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .controllers import PIDState, bb_action, pid_action, pid_ma_action
from .meals import predictability_variant
from .risk import magni_risk

STEPS_PER_DAY = 288

EU_LOW, EU_HIGH = 70.0, 180.0       # boundary values count as euglycemic
CATASTROPHIC_BG = 5.0
FILTER_MIN_BG = 30.0
FILTER_MAX_BG = 1000.0
COLLAPSE_HYPER_PCT = 90.0


# -- policies -----------------------------------------------------------------

class ZeroInsulinPolicy:
    """Diagnostic no-insulin baseline."""

    def act(self, obs, env):
        return 0.0

    def reset(self):
        pass


class ConstantBasalPolicy:
    def act(self, obs, env):
        return env.profile.bas

    def reset(self):
        pass


class BBPolicy:
    def act(self, obs, env):
        carbs, cooldown = env.meal_announcement()
        return bb_action(obs.cgm[-1], carbs, cooldown, env.profile)

    def reset(self):
        pass


class PIDPolicy:
    def __init__(self, gains, mode="reconciled"):
        self.gains = gains
        self.mode = mode
        self.state = PIDState()

    def reset(self):
        self.state = PIDState()

    def act(self, obs, env):
        action, self.state = pid_action(self.gains, self.state,
                                        obs.cgm[-1], self.mode)
        return action


class PIDMAPolicy(PIDPolicy):
    def act(self, obs, env):
        carbs, cooldown = env.meal_announcement()
        action, self.state = pid_ma_action(
            self.gains, self.state, obs.cgm[-1], carbs, cooldown,
            env.profile, self.mode)
        return action


class SACPolicy:
    """Deterministic (tanh-mean) wrapper around a trained agent."""

    def __init__(self, agent, action_mode="signed-clip", global_omega=5.0):
        self.agent = agent
        self.action_mode = action_mode
        self.global_omega = global_omega

    def reset(self):
        pass

    def act(self, obs, env):
        from .sac.agent import action_to_insulin
        if self.agent.config.obs_mode == "oracle":
            window = env.oracle_state()[None, :].astype(np.float32)
        else:
            window = obs.as_array().astype(np.float32)
        u = self.agent.act(window, deterministic=True)
        return action_to_insulin(u, env.profile.omega_b, self.action_mode,
                                 self.global_omega)


# -- rollouts and metrics ------------------------------------------------------

@dataclass
class RolloutSummary:
    patient_id: str
    seed: int
    mean_risk: float
    pct_eu: float
    pct_hypo: float
    pct_hyper: float
    min_bg: float
    max_bg: float
    catastrophic: bool
    terminated: bool
    total_insulin: float
    length: int

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RolloutLog:
    steps: np.ndarray
    true_bg: np.ndarray
    cgm: np.ndarray
    insulin: np.ndarray
    carbs: np.ndarray
    rewards: np.ndarray
    done: np.ndarray

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "true_bg", "cgm", "insulin", "carbs",
                        "reward", "done"])
            for i in range(len(self.steps)):
                w.writerow([int(self.steps[i]), f"{self.true_bg[i]:.6f}",
                            int(self.cgm[i]), f"{self.insulin[i]:.6f}",
                            f"{self.carbs[i]:.6f}", f"{self.rewards[i]:.6f}",
                            int(self.done[i])])


def summarize_trace(patient_id: str, seed: int, bgs: np.ndarray,
                    insulin: np.ndarray, terminated: bool) -> RolloutSummary:
    bgs = np.asarray(bgs, dtype=float)
    n = len(bgs)
    hypo = np.count_nonzero(bgs < EU_LOW)
    hyper = np.count_nonzero(bgs > EU_HIGH)
    eu = n - hypo - hyper
    return RolloutSummary(
        patient_id=patient_id, seed=seed,
        mean_risk=float(np.mean([magni_risk(max(1.0, b)) for b in bgs])),
        pct_eu=100.0 * eu / n, pct_hypo=100.0 * hypo / n,
        pct_hyper=100.0 * hyper / n,
        min_bg=float(bgs.min()), max_bg=float(bgs.max()),
        catastrophic=bool(bgs.min() < CATASTROPHIC_BG),
        terminated=bool(terminated),
        total_insulin=float(np.sum(insulin)), length=n,
    )


def run_rollout(policy, env, days: int, seed: int,
                log_path: str | Path | None = None
                ) -> tuple[RolloutLog, RolloutSummary]:
    """One seeded evaluation episode; stochastic policies must act
    deterministically here (the policy object owns that contract)."""
    policy.reset()
    obs = env.reset(seed)
    rows = {k: [] for k in ("step", "bg", "cgm", "ins", "carb", "rew", "done")}
    terminated = False
    for _ in range(days * STEPS_PER_DAY):
        action = policy.act(obs, env)
        result = env.step(action)
        obs = result.observation
        rows["step"].append(result.info["t"])
        rows["bg"].append(result.info["true_bg"])
        rows["cgm"].append(result.info["cgm"])
        rows["ins"].append(result.info["insulin"])
        rows["carb"].append(result.info["meal_carbs"])
        rows["rew"].append(result.reward)
        rows["done"].append(result.done)
        if result.done:
            terminated = result.info["terminated_dangerously"]
            break
    log = RolloutLog(steps=np.array(rows["step"]),
                     true_bg=np.array(rows["bg"]), cgm=np.array(rows["cgm"]),
                     insulin=np.array(rows["ins"]), carbs=np.array(rows["carb"]),
                     rewards=np.array(rows["rew"]), done=np.array(rows["done"]))
    summary = summarize_trace(env.profile.id, seed, log.true_bg, log.insulin,
                              terminated)
    if log_path is not None:
        log.to_csv(log_path)
    return log, summary


# -- model selection -----------------------------------------------------------

@dataclass
class SelectionResult:
    epoch: int
    fallback: bool  # True when no epoch passed the safety filter
    risk: float


def select_model(validation_summaries) -> SelectionResult:
    """Filtered selection: lowest-risk epoch whose validation rollout kept
    glucose within [30, 1000] mg/dL; falls back (with a flag) to the
    lowest-risk epoch overall when none qualify."""
    if not validation_summaries:
        raise ValueError("no validation summaries to select from")
    passing = [s for s in validation_summaries
               if s.min_bg >= FILTER_MIN_BG and s.max_bg <= FILTER_MAX_BG]
    pool, fallback = (passing, False) if passing else (list(validation_summaries), True)
    best = min(pool, key=lambda s: s.mean_risk)
    return SelectionResult(epoch=best.epoch, fallback=fallback,
                           risk=best.mean_risk)


def select_restart(per_restart_validation) -> tuple[int, SelectionResult]:
    """Pick the restart whose selected epoch has the lowest validation
    risk, preferring restarts where the safety filter passed."""
    if not per_restart_validation:
        raise ValueError("no restarts to select from")
    selections = [select_model(v) for v in per_restart_validation]
    order = sorted(range(len(selections)),
                   key=lambda i: (selections[i].fallback, selections[i].risk))
    return order[0], selections[order[0]]


# -- statistics ----------------------------------------------------------------

def chi2_sf_1dof(x: float) -> float:
    """Survival function of chi-square with one degree of freedom."""
    if x < 0:
        raise ValueError("chi-square statistic must be nonnegative")
    return math.erfc(math.sqrt(x / 2.0))


def moods_median_test(a, b) -> float:
    """Two-sample median test: chi-square (Yates-corrected) on the 2x2
    above/below-grand-median table; ties at the median are excluded."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 5 or len(b) < 5:
        raise ValueError("each sample needs at least 5 observations")
    grand = float(np.median(np.concatenate([a, b])))
    table = np.array([[np.count_nonzero(a > grand), np.count_nonzero(b > grand)],
                      [np.count_nonzero(a < grand), np.count_nonzero(b < grand)]],
                     dtype=float)
    n = table.sum()
    if n == 0 or (table.sum(axis=1) == 0).any() or (table.sum(axis=0) == 0).any():
        return 1.0  # degenerate: everything tied at the median
    row = table.sum(axis=1, keepdims=True)
    col = table.sum(axis=0, keepdims=True)
    expected = row @ col / n
    stat = float((np.maximum(np.abs(table - expected) - 0.5, 0.0) ** 2
                  / expected).sum())
    return chi2_sf_1dof(stat)


def chi2_from_table(table) -> float:
    """Yates-corrected chi-square statistic for a 2x2 table."""
    table = np.asarray(table, dtype=float)
    n = table.sum()
    row = table.sum(axis=1, keepdims=True)
    col = table.sum(axis=0, keepdims=True)
    expected = row @ col / n
    return float((np.maximum(np.abs(table - expected) - 0.5, 0.0) ** 2
                  / expected).sum())


def _log_binom_pmf(k: int, n: int, p: float) -> float:
    if p == 0.0:
        return 0.0 if k == 0 else -math.inf
    if p == 1.0:
        return 0.0 if k == n else -math.inf
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + k * math.log(p) + (n - k) * math.log1p(-p))


def binomial_failure_test(k1: int, n1: int, k2: int, n2: int) -> float:
    """Exact two-sided binomial test of group 2's failure count against
    group 1's failure rate (sum of outcomes no more likely than k2)."""
    if n1 <= 0 or n2 <= 0:
        raise ValueError("group sizes must be positive")
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("failure counts must lie within group sizes")
    p = k1 / n1
    log_obs = _log_binom_pmf(k2, n2, p)
    if log_obs == -math.inf:
        return 0.0
    total = 0.0
    for i in range(n2 + 1):
        li = _log_binom_pmf(i, n2, p)
        if li <= log_obs + 1e-9:
            total += math.exp(li)
    return min(1.0, total)


# -- analyses -------------------------------------------------------------------

POSTMEAL_WINDOW_STEPS = 36  # 3 hours of 5-minute bins


@dataclass
class PostMealProfile:
    minutes: np.ndarray          # bin start, minutes since meal
    fraction: np.ndarray         # mean fraction of daily insulin per bin
    cumulative_60min: float
    cumulative_90min: float


def postmeal_insulin_profile(logs) -> PostMealProfile:
    """Average insulin in 5-minute bins after each meal, normalized by
    total daily insulin."""
    bins = np.zeros(POSTMEAL_WINDOW_STEPS)
    n_meals = 0
    for log in logs:
        days = len(log.true_bg) / STEPS_PER_DAY
        daily_insulin = log.insulin.sum() / max(days, 1e-9)
        if daily_insulin <= 0:
            continue
        meal_steps = np.nonzero(log.carbs > 0)[0]
        for m in meal_steps:
            window = log.insulin[m:m + POSTMEAL_WINDOW_STEPS]
            bins[:len(window)] += window / daily_insulin
            n_meals += 1
    if n_meals == 0:
        raise ValueError("no meals found in the rollout logs")
    bins /= n_meals
    cum = np.cumsum(bins)
    return PostMealProfile(
        minutes=np.arange(POSTMEAL_WINDOW_STEPS) * 5.0,
        fraction=bins,
        cumulative_60min=float(cum[11]),   # bins 0..11 cover the first hour
        cumulative_90min=float(cum[17]),
    )


def experiment_predictability(policy_factory, profile, base_slots,
                              env_factory, stds_hours=(0.1, 1.0, 10.0),
                              n_rollouts: int = 30, days: int = 10,
                              seed_start: int = 20_000) -> dict:
    """Risk distributions as meal-time spread varies; identical seed
    lists across arms so comparisons are paired."""
    out = {}
    seeds = list(range(seed_start, seed_start + n_rollouts))
    for std in stds_hours:
        slots = predictability_variant(base_slots, std)
        risks = []
        for seed in seeds:
            env = env_factory(profile, slots)
            _, summary = run_rollout(policy_factory(), env, days, seed)
            risks.append(summary.mean_risk)
        risks = np.array(risks)
        out[std] = {"risks": risks, "mean": float(risks.mean()),
                    "median": float(np.median(risks))}
    return out


def winrate_vs_reference(candidate_summaries, reference_summaries) -> float:
    """Fraction of candidate rollouts with risk below the reference median."""
    if not candidate_summaries or not reference_summaries:
        raise ValueError("win rate needs nonempty candidate and reference sets")
    ref_median = float(np.median([s.mean_risk for s in reference_summaries]))
    wins = sum(1 for s in candidate_summaries if s.mean_risk < ref_median)
    return wins / len(candidate_summaries)


def _median_iqr(values) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=float)
    return (float(np.median(v)), float(np.percentile(v, 25)),
            float(np.percentile(v, 75)))


def aggregate_table(summaries, group_by=lambda s: s.patient_id) -> list[dict]:
    """Median (IQR) risk and time-in-range percentages plus failure rate,
    one row per group. Rows dominated by hyperglycemia are flagged as a
    possible no-insulin collapse."""
    groups: dict = {}
    for s in summaries:
        groups.setdefault(group_by(s), []).append(s)
    rows = []
    for key in sorted(groups, key=str):
        g = groups[key]
        row = {"group": key, "n": len(g)}
        for metric, attr in [("risk", "mean_risk"), ("eu", "pct_eu"),
                             ("hypo", "pct_hypo"), ("hyper", "pct_hyper")]:
            med, q1, q3 = _median_iqr([getattr(s, attr) for s in g])
            row[metric] = med
            row[f"{metric}_q1"] = q1
            row[f"{metric}_q3"] = q3
        row["failure_pct"] = 100.0 * sum(s.catastrophic for s in g) / len(g)
        row["collapse_warning"] = row["hyper"] > COLLAPSE_HYPER_PCT
        rows.append(row)
    return rows


def write_summaries_jsonl(summaries, path: str | Path):
    with open(path, "w") as f:
        for s in summaries:
            f.write(json.dumps(s.to_json()) + "\n")


def write_table_csv(rows, path: str | Path):
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
