"""Baseline insulin controllers and the PID grid-search tuner.

Three baselines: basal-bolus (BB, mimics human control from meal
announcements), PID on CGM alone, and PID-MA (PID basal plus BB-style
meal boluses). The published gain tables are uniformly negative; the
default "reconciled" PID mode interprets them against a signed error so
they deliver insulin when glucose runs high. A "rectified" mode with
rectified P and absolute D is kept behind a flag for comparison.
"""

import csv
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .patients import DEFAULT_GLUCOSE_TARGET, PatientProfile
from .risk import magni_risk

PID_MODES = ("reconciled", "rectified")


@dataclass(frozen=True)
class PIDGains:
    kp: float
    ki: float
    kd: float
    setpoint: float = DEFAULT_GLUCOSE_TARGET

    def __post_init__(self):
        for v in (self.kp, self.ki, self.kd, self.setpoint):
            if not math.isfinite(v):
                raise ValueError("PID gains and setpoint must be finite")
        if not 70.0 <= self.setpoint <= 200.0:
            raise ValueError(f"setpoint {self.setpoint} outside [70, 200]")


@dataclass
class PIDState:
    integral: float = 0.0
    prev_bg: float | None = None

    def reset(self):
        self.integral = 0.0
        self.prev_bg = None


def bb_action(bg: float, carbs: float, cooldown: int,
              profile: PatientProfile) -> float:
    """Basal rate plus a carb bolus and (at most one per 3 h) correction."""
    action = profile.bas
    if carbs > 0:
        action += carbs / profile.cr
        action += cooldown * (bg - profile.glucose_target) / profile.cf
    return max(0.0, action)


def pid_action(gains: PIDGains, state: PIDState, bg: float,
               mode: str = "reconciled") -> tuple[float, PIDState]:
    """One PID update. Returns the insulin dose and the advanced state."""
    if mode not in PID_MODES:
        raise ValueError(f"unknown PID mode {mode!r}")
    error = bg - gains.setpoint
    integral = state.integral + error
    prev = state.prev_bg if state.prev_bg is not None else bg
    if mode == "reconciled":
        deriv = bg - prev
        raw = -(gains.kp * error + gains.ki * integral + gains.kd * deriv)
    else:
        p_term = max(0.0, error)
        d_term = abs(bg - prev)
        raw = gains.kp * p_term + gains.ki * integral + gains.kd * d_term
    return max(0.0, raw), PIDState(integral=integral, prev_bg=bg)


def pid_ma_action(gains: PIDGains, state: PIDState, bg: float, carbs: float,
                  cooldown: int, profile: PatientProfile,
                  mode: str = "reconciled") -> tuple[float, PIDState]:
    """PID-controlled basal plus the BB meal bolus (carb + correction)."""
    action, new_state = pid_action(gains, state, bg, mode)
    if carbs > 0:
        action += carbs / profile.cr
        action += cooldown * (bg - profile.glucose_target) / profile.cf
    return max(0.0, action), new_state


def load_gain_table(path: str | Path | None = None, variant: str = "pid",
                    setpoint: float = DEFAULT_GLUCOSE_TARGET) -> dict[str, PIDGains]:
    """Per-patient gains; bundled tables are used when path is None."""
    if variant not in ("pid", "pid-ma"):
        raise ValueError(f"unknown gain-table variant {variant!r}")
    if path is None:
        name = "pid.csv" if variant == "pid" else "pid_ma.csv"
        ref = resources.files("apbench.data") / name
        with resources.as_file(ref) as p:
            return load_gain_table(p, variant, setpoint)
    table = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            table[row["id"].strip()] = PIDGains(
                kp=float(row["kp"]), ki=float(row["ki"]), kd=float(row["kd"]),
                setpoint=setpoint)
    if not table:
        raise ValueError(f"no gain rows in {path}")
    return table


def gains_for(table: dict[str, PIDGains], patient_id: str) -> PIDGains:
    if patient_id not in table:
        raise KeyError(f"no gains for patient {patient_id!r}")
    return table[patient_id]


# -- grid-search tuner --------------------------------------------------------

DEFAULT_GRID_POINTS = 5
DEFAULT_GRID_RANGE = (1e-9, 1e-2)
REFINE_SHRINK = math.sqrt(10.0)  # grid span shrinks 10^(1/2) per pass


def default_grid(points: int = DEFAULT_GRID_POINTS,
                 lo: float = DEFAULT_GRID_RANGE[0],
                 hi: float = DEFAULT_GRID_RANGE[1]) -> dict[str, np.ndarray]:
    axis = np.logspace(math.log10(lo), math.log10(hi), points)
    return {"kp": axis.copy(), "ki": axis.copy(), "kd": axis.copy()}


def _refine_axis(center: float, old_axis: np.ndarray, shrink: float) -> np.ndarray:
    n = len(old_axis)
    if n < 2 or old_axis[0] <= 0:
        return old_axis
    old_span = math.log10(old_axis[-1]) - math.log10(old_axis[0])
    span = old_span / shrink
    c = math.log10(center)
    return np.logspace(c - span / 2, c + span / 2, n)


def evaluate_gains(gains: PIDGains, env_factory, seeds, eval_days: int,
                   mode: str = "reconciled", variant: str = "pid") -> float:
    """Mean risk of the PID policy over fixed seeds; the tuner objective."""
    total, count = 0.0, 0
    for seed in seeds:
        env = env_factory()
        obs = env.reset(seed)
        state = PIDState()
        steps = eval_days * 288
        last_risk = 0.0
        for i in range(steps):
            bg = obs.cgm[-1]
            if variant == "pid-ma":
                carbs, cooldown = env.meal_announcement()
                action, state = pid_ma_action(gains, state, bg, carbs,
                                              cooldown, env.profile, mode)
            else:
                action, state = pid_action(gains, state, bg, mode)
            result = env.step(action)
            obs = result.observation
            last_risk = magni_risk(max(1.0, result.info["true_bg"]))
            total += last_risk
            count += 1
            if result.done:
                # Charge unfinished steps at the terminal risk so early
                # termination cannot look attractive to the tuner.
                remaining = steps - (i + 1)
                total += remaining * last_risk
                count += remaining
                break
    return total / count


def tune_pid(env_factory, initial_grid: dict[str, np.ndarray] | None = None,
             n_refinements: int = 3, eval_days: int = 10,
             seed_pool=(0, 1, 2, 3, 4), mode: str = "reconciled",
             variant: str = "pid", setpoint: float = DEFAULT_GLUCOSE_TARGET,
             objective=None, audit_path: str | Path | None = None,
             ) -> PIDGains:
    """Iterated grid search over negative gain magnitudes.

    Each pass exhaustively evaluates the grid; the next pass re-centers a
    geometrically shrunk grid on the incumbent. `objective` defaults to
    mean risk on the environment but can be any gains -> score callable
    (lower is better), which the synthetic-plant tests use.
    """
    grid = initial_grid if initial_grid is not None else default_grid()
    for axis in grid.values():
        if len(axis) < 1:
            raise ValueError("each grid axis needs at least one candidate")
    if n_refinements < 1:
        raise ValueError("need at least one refinement pass")

    if objective is None:
        def objective(g):
            return evaluate_gains(g, env_factory, seed_pool, eval_days,
                                  mode, variant)

    best_gains, best_score = None, math.inf
    audit = []
    for pass_idx in range(n_refinements):
        for kp in grid["kp"]:
            for ki in grid["ki"]:
                for kd in grid["kd"]:
                    cand = PIDGains(kp=-float(kp), ki=-float(ki), kd=-float(kd),
                                    setpoint=setpoint)
                    score = objective(cand)
                    if score < best_score:
                        best_score, best_gains = score, cand
        audit.append({"pass": pass_idx, "incumbent": {
            "kp": best_gains.kp, "ki": best_gains.ki, "kd": best_gains.kd},
            "score": best_score})
        grid = {
            "kp": _refine_axis(-best_gains.kp, grid["kp"], REFINE_SHRINK),
            "ki": _refine_axis(-best_gains.ki, grid["ki"], REFINE_SHRINK),
            "kd": _refine_axis(-best_gains.kd, grid["kd"], REFINE_SHRINK),
        }
    if not math.isfinite(best_score):
        raise RuntimeError("all PID candidates diverged during tuning")
    if audit_path is not None:
        Path(audit_path).write_text(json.dumps(audit, indent=2))
    return best_gains
