"""Asymmetric glycemic risk function and the reward built on it.

risk(b) = 10 * (c0 * (ln(b)^c1 - c2))^2, anchored so risk(70) = risk(280)
= 25 and minimized near 139 mg/dL. Hypoglycemia is penalized much more
steeply than hyperglycemia.
"""

import math
from dataclasses import dataclass

RISK_C0 = 3.5506
RISK_C1 = 0.8353
RISK_C2 = 3.7932

TERMINATION_PENALTY = -1e5
FINE_TUNE_REWARD_SHIFT = 100.0

BG_TERMINATE_LOW = 10.0
BG_TERMINATE_HIGH = 1000.0


def magni_risk(bg: float, c0: float = RISK_C0, c1: float = RISK_C1,
               c2: float = RISK_C2) -> float:
    if bg <= 0:
        raise ValueError(f"blood glucose must be positive, got {bg}")
    return 10.0 * (c0 * (math.log(bg) ** c1 - c2)) ** 2


def risk_minimum_bg(c1: float = RISK_C1, c2: float = RISK_C2) -> float:
    """Blood glucose value at which the risk function vanishes."""
    return math.exp(c2 ** (1.0 / c1))


@dataclass(frozen=True)
class RewardConfig:
    c0: float = RISK_C0
    c1: float = RISK_C1
    c2: float = RISK_C2
    termination_penalty: float = TERMINATION_PENALTY
    # Fine-tune mode drops the termination penalty and shifts all rewards
    # up by a constant so returns stay positive.
    fine_tune: bool = False
    shift: float = FINE_TUNE_REWARD_SHIFT


def reward(bg: float, terminated: bool, config: RewardConfig = RewardConfig()) -> float:
    r = -magni_risk(bg, config.c0, config.c1, config.c2)
    if config.fine_tune:
        return r + config.shift
    if terminated:
        r += config.termination_penalty
    return r
