"""Stochastic daily meal schedule generation.

Six potential meal slots per day (breakfast, lunch, dinner plus three
snacks). Expected daily carbohydrate intake is derived from the
Harris-Benedict basal metabolic rate assuming 45% of calories from
carbohydrates at 4 kcal/g. Slot times are truncated normals, amounts are
clipped normals, both rounded; everything is deterministic given the rng.
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

STEPS_PER_DAY = 288
STEPS_PER_HOUR = 12

MEAL_OCCURRENCE = [0.95, 0.3, 0.95, 0.3, 0.95, 0.3]
TIME_LOWER_HOURS = [5, 9, 10, 14, 16, 20]
TIME_UPPER_HOURS = [9, 10, 14, 16, 20, 23]
TIME_MEAN_HOURS = [7, 9.5, 12, 15, 18, 21.5]
TIME_STD_HOURS = [1, 0.5, 1, 0.5, 1, 0.5]
AMOUNT_FRACTION = [0.250, 0.035, 0.295, 0.035, 0.352, 0.035]
AMOUNT_INFLATION = 1.2
AMOUNT_STD_FRACTION = 0.15


def bmr(weight: float, height: float, age: float) -> float:
    """Harris-Benedict basal metabolic rate in kcal/day."""
    if weight < 0 or height < 0 or age < 0:
        raise ValueError("weight, height, and age must be nonnegative")
    return 66.5 + 13.75 * weight + 5.003 * height - 6.755 * age


def expected_carbs(bmr_kcal: float) -> float:
    """Expected grams of carbohydrate per day for a given BMR."""
    if bmr_kcal < 0:
        raise ValueError("BMR must be nonnegative")
    return bmr_kcal * 0.45 / 4.0


@dataclass(frozen=True)
class MealSlotSpec:
    occurrence_prob: float
    time_lb: int        # 5-minute steps
    time_ub: int
    time_mean: float
    time_std: float
    amount_mean: float  # grams
    amount_std: float

    def __post_init__(self):
        if not (self.time_lb <= self.time_mean <= self.time_ub):
            raise ValueError("slot time mean must lie within its bounds")
        if not 0.0 <= self.occurrence_prob <= 1.0:
            raise ValueError("occurrence probability must be in [0, 1]")
        if self.amount_std < 0:
            raise ValueError("amount std must be nonnegative")


@dataclass(frozen=True)
class MealSchedule:
    """days[d] is a length-288 array of carbohydrate grams."""
    days: np.ndarray  # shape (n_days, 288)

    @property
    def n_days(self) -> int:
        return self.days.shape[0]

    def day(self, d: int) -> np.ndarray:
        return self.days[d]

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["day", "step", "grams"])
            for d in range(self.n_days):
                for step in np.nonzero(self.days[d])[0]:
                    writer.writerow([d, int(step), float(self.days[d][step])])


def default_slots(expected_carbs_g: float) -> list[MealSlotSpec]:
    if expected_carbs_g < 0:
        raise ValueError("expected carbs must be nonnegative")
    slots = []
    for j in range(6):
        mean = AMOUNT_FRACTION[j] * expected_carbs_g * AMOUNT_INFLATION
        slots.append(MealSlotSpec(
            occurrence_prob=MEAL_OCCURRENCE[j],
            time_lb=TIME_LOWER_HOURS[j] * STEPS_PER_HOUR,
            time_ub=TIME_UPPER_HOURS[j] * STEPS_PER_HOUR,
            time_mean=TIME_MEAN_HOURS[j] * STEPS_PER_HOUR,
            time_std=TIME_STD_HOURS[j] * STEPS_PER_HOUR,
            amount_mean=mean,
            amount_std=AMOUNT_STD_FRACTION * mean,
        ))
    return slots


def slots_for_patient(profile) -> list[MealSlotSpec]:
    return default_slots(expected_carbs(bmr(profile.weight, profile.height, profile.age)))


def predictability_variant(slots: list[MealSlotSpec],
                           time_std_hours: float) -> list[MealSlotSpec]:
    """Three main meals only, constant amounts, fixed occurrence, given
    time spread. Used by the meal-predictability experiment."""
    if time_std_hours <= 0:
        raise ValueError("time std must be positive")
    main = [slots[0], slots[2], slots[4]]
    return [replace(s, occurrence_prob=1.0, amount_std=0.0,
                    time_std=time_std_hours * STEPS_PER_HOUR) for s in main]


def _truncnorm(rng: np.random.Generator, mean, std, lb, ub) -> float:
    # Rejection sampling; bounds are wide relative to std at the defaults.
    if lb > ub:
        raise ValueError("inverted slot time bounds")
    if std == 0:
        return float(np.clip(mean, lb, ub))
    while True:
        x = rng.normal(mean, std)
        if lb <= x <= ub:
            return float(x)


def generate_schedule(slots: list[MealSlotSpec], n_days: int,
                      rng: np.random.Generator) -> MealSchedule:
    if n_days < 1:
        raise ValueError("need at least one day")
    days = np.zeros((n_days, STEPS_PER_DAY))
    for d in range(n_days):
        for slot in slots:
            if rng.random() >= slot.occurrence_prob:
                continue
            t = int(np.round(_truncnorm(
                rng, slot.time_mean, slot.time_std, slot.time_lb, slot.time_ub)))
            t = min(t, STEPS_PER_DAY - 1)
            amount = np.round(max(0.0, rng.normal(slot.amount_mean, slot.amount_std)))
            # Two slots landing on the same step sum rather than overwrite,
            # so no carbohydrates are silently dropped.
            days[d, t] += amount
    return MealSchedule(days=days)


def single_meal_slots(grams: float, hour: float = 12.0) -> list[MealSlotSpec]:
    """One deterministic meal per day; convenient for toy training runs."""
    t = int(hour * STEPS_PER_HOUR)
    return [MealSlotSpec(occurrence_prob=1.0, time_lb=t, time_ub=t,
                         time_mean=t, time_std=0.0,
                         amount_mean=grams, amount_std=0.0)]
