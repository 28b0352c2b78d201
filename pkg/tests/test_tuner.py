import json
import math

import numpy as np
import pytest

from apbench.controllers import (REFINE_SHRINK, _refine_axis, default_grid,
                                 tune_pid)
from apbench.env import EnvConfig, GlucoseEnv
from apbench.meals import single_meal_slots
from apbench.patients import load_registry


def test_default_grid_shape():
    grid = default_grid(5, 1e-9, 1e-2)
    for axis in grid.values():
        assert len(axis) == 5
        assert axis[0] == pytest.approx(1e-9)
        assert axis[-1] == pytest.approx(1e-2)
        assert np.all(np.diff(np.log10(axis)) > 0)


def test_refine_axis_shrinks_and_recenters():
    axis = np.logspace(-9, -2, 5)
    new = _refine_axis(1e-5, axis, REFINE_SHRINK)
    assert len(new) == 5
    old_span = math.log10(axis[-1]) - math.log10(axis[0])
    new_span = math.log10(new[-1]) - math.log10(new[0])
    assert new_span == pytest.approx(old_span / REFINE_SHRINK)
    assert math.sqrt(new[0] * new[-1]) == pytest.approx(1e-5, rel=1e-9)


def test_tuner_finds_synthetic_optimum():
    # Separable quadratic in log-magnitude space with a known minimizer;
    # the incumbent must land within one final-grid spacing per axis.
    target = {"kp": -4.3, "ki": -6.1, "kd": -3.7}  # log10 magnitudes

    def objective(g):
        return ((math.log10(-g.kp) - target["kp"]) ** 2
                + (math.log10(-g.ki) - target["ki"]) ** 2
                + (math.log10(-g.kd) - target["kd"]) ** 2)

    points, passes = 5, 3
    grid = default_grid(points, 1e-9, 1e-2)
    best = tune_pid(None, initial_grid=grid, n_refinements=passes,
                    objective=objective)
    span0 = math.log10(1e-2) - math.log10(1e-9)
    final_spacing = span0 / REFINE_SHRINK ** (passes - 1) / (points - 1)
    for key, t in target.items():
        assert abs(math.log10(-getattr(best, key)) - t) <= final_spacing


def test_tuner_monotone_improvement_on_simulator(tmp_path):
    profile = load_registry().get("adult#001")

    def env_factory():
        return GlucoseEnv(profile, single_meal_slots(40.0, hour=2.0),
                          EnvConfig(sensor_noise=False, horizon_days=1))

    audit_path = tmp_path / "audit.json"
    tune_pid(env_factory, initial_grid=default_grid(3, 1e-7, 1e-3),
             n_refinements=2, eval_days=1, seed_pool=(0,),
             audit_path=audit_path)
    audit = json.loads(audit_path.read_text())
    assert len(audit) == 2
    scores = [entry["score"] for entry in audit]
    # refinement never makes the incumbent worse
    assert scores[1] <= scores[0]
    assert all(math.isfinite(s) for s in scores)


def test_tuner_deterministic():
    target = {"kp": -5.0, "ki": -7.0, "kd": -3.0}

    def objective(g):
        return ((math.log10(-g.kp) - target["kp"]) ** 2
                + (math.log10(-g.ki) - target["ki"]) ** 2
                + (math.log10(-g.kd) - target["kd"]) ** 2)

    a = tune_pid(None, initial_grid=default_grid(4), n_refinements=2,
                 objective=objective)
    b = tune_pid(None, initial_grid=default_grid(4), n_refinements=2,
                 objective=objective)
    assert (a.kp, a.ki, a.kd) == (b.kp, b.ki, b.kd)


def test_tuner_validation():
    with pytest.raises(ValueError):
        tune_pid(None, initial_grid={"kp": np.array([]),
                                     "ki": np.array([1e-5]),
                                     "kd": np.array([1e-5])},
                 objective=lambda g: 0.0)
    with pytest.raises(ValueError):
        tune_pid(None, initial_grid=default_grid(2), n_refinements=0,
                 objective=lambda g: 0.0)


def test_single_candidate_grid():
    grid = {k: np.array([1e-5]) for k in ("kp", "ki", "kd")}
    best = tune_pid(None, initial_grid=grid, n_refinements=1,
                    objective=lambda g: 1.0)
    assert best.kp == pytest.approx(-1e-5)
