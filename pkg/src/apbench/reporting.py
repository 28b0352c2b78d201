"""Figure rendering for the report path.

Every figure is rendered from the same delimited data that is written
alongside it, so plots can always be regenerated from the CSVs.
"""

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EU_HIGH, EU_LOW

FIGURE_FORMATS = ("png", "svg")


def _save(fig, path_base: Path) -> list[Path]:
    paths = []
    for ext in FIGURE_FORMATS:
        p = path_base.with_suffix(f".{ext}")
        fig.savefig(p, bbox_inches="tight", dpi=120)
        paths.append(p)
    plt.close(fig)
    return paths


def plot_rollout(log, path_base: str | Path) -> list[Path]:
    """Glucose trace with insulin and meals on twin axes."""
    path_base = Path(path_base)
    hours = log.steps * 5.0 / 60.0
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(10, 6), sharex=True,
                                   height_ratios=[2, 1])
    ax1.plot(hours, log.true_bg, lw=1.0, color="tab:blue", label="true BG")
    ax1.plot(hours, log.cgm, lw=0.6, color="tab:gray", alpha=0.6, label="CGM")
    ax1.axhspan(EU_LOW, EU_HIGH, color="tab:green", alpha=0.1)
    ax1.set_ylabel("glucose (mg/dL)")
    ax1.legend(loc="upper right", fontsize=8)
    ax2.step(hours, log.insulin, where="post", color="tab:orange",
             label="insulin (U/step)")
    meal_idx = np.nonzero(log.carbs > 0)[0]
    if len(meal_idx):
        ax2.vlines(hours[meal_idx], 0, log.insulin.max() or 1.0,
                   color="tab:purple", alpha=0.4, lw=0.8, label="meals")
    ax2.set_xlabel("hours")
    ax2.set_ylabel("insulin (U)")
    ax2.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path_base)


def plot_postmeal_profile(profiles: dict, path_base: str | Path) -> list[Path]:
    """profiles: label -> PostMealProfile."""
    path_base = Path(path_base)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, prof in profiles.items():
        ax.plot(prof.minutes, 100.0 * prof.fraction, marker="o", ms=3,
                label=label)
    ax.set_xlabel("minutes since meal")
    ax.set_ylabel("insulin (% of daily total)")
    ax.axvline(60, color="gray", lw=0.8, ls="--")
    ax.legend()
    return _save(fig, path_base)


def write_postmeal_csv(profiles: dict, path: str | Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "minutes_since_meal", "fraction_of_daily_insulin"])
        for label, prof in profiles.items():
            for m, fr in zip(prof.minutes, prof.fraction):
                w.writerow([label, m, f"{fr:.8f}"])


def plot_winrate_curve(epochs, winrates, path_base: str | Path,
                       label: str = "fine-tuned") -> list[Path]:
    path_base = Path(path_base)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, winrates, marker="o", label=label)
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("fine-tune epochs")
    ax.set_ylabel("fraction of rollouts beating reference median risk")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    return _save(fig, path_base)


def write_winrate_csv(epochs, winrates, path: str | Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "winrate"])
        for e, wr in zip(epochs, winrates):
            w.writerow([e, f"{wr:.6f}"])


def plot_predictability(results: dict, path_base: str | Path,
                        label: str = "") -> list[Path]:
    """results: std_hours -> {"risks": array, ...} from the experiment."""
    path_base = Path(path_base)
    stds = sorted(results)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([results[s]["risks"] for s in stds],
               labels=[str(s) for s in stds])
    ax.set_xlabel("meal-time std (hours)")
    ax.set_ylabel("mean risk per rollout")
    if label:
        ax.set_title(label)
    return _save(fig, path_base)


def write_predictability_csv(results: dict, path: str | Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["std_hours", "seed_index", "risk"])
        for std in sorted(results):
            for i, r in enumerate(results[std]["risks"]):
                w.writerow([std, i, f"{r:.6f}"])


def plot_risk_by_group(table_rows, path_base: str | Path) -> list[Path]:
    path_base = Path(path_base)
    groups = [str(r["group"]) for r in table_rows]
    med = [r["risk"] for r in table_rows]
    lo = [r["risk"] - r["risk_q1"] for r in table_rows]
    hi = [r["risk_q3"] - r["risk"] for r in table_rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(groups)), 4))
    ax.errorbar(range(len(groups)), med, yerr=[lo, hi], fmt="o", capsize=3)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("median risk (IQR)")
    fig.tight_layout()
    return _save(fig, path_base)
