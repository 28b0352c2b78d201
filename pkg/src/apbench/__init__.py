"""Closed-loop glucose control workbench: simulator, baseline
controllers, reinforcement-learning agents, and evaluation tooling."""

__version__ = "0.1.0"

from .patients import PatientProfile, Registry, load_registry
from .risk import RewardConfig, magni_risk
from .env import EnvConfig, GlucoseEnv, MealAnnounceEnv, ma_wrap
from .meals import default_slots, generate_schedule, slots_for_patient

__all__ = [
    "__version__",
    "PatientProfile", "Registry", "load_registry",
    "RewardConfig", "magni_risk",
    "EnvConfig", "GlucoseEnv", "MealAnnounceEnv", "ma_wrap",
    "default_slots", "generate_schedule", "slots_for_patient",
]
