"""Virtual patient registry: per-patient constants and named study subsets.

Every other module pulls its patient-specific numbers (TDI, carb ratio,
correction factor, basal rate, action scale, body size) from here. The
registry is immutable after load and safe to share across workers.
"""

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

PATIENT_CLASSES = ("child", "adolescent", "adult")

# Maximum per-step insulin is 43.2x the basal rate, sized so one step can
# deliver roughly a full meal bolus.
ACTION_SCALE_FACTOR = 43.2

# Default glucose setpoint (mg/dL) for BB/PID controllers; near the risk
# minimum. Configurable everywhere it is consumed.
DEFAULT_GLUCOSE_TARGET = 140.0

# Fallback body size per class, used only by the meal generator.
CLASS_BODY_DEFAULTS = {
    "child": (35.0, 140.0),
    "adolescent": (55.0, 165.0),
    "adult": (75.0, 175.0),
}

# Basal rate defaults to half the total daily insulin spread over 288
# five-minute steps.
BASAL_TDI_FRACTION = 0.5
STEPS_PER_DAY = 288

SUBSETS = {
    "tuning": ["child#001", "adolescent#004", "adult#001"],
    "action-ablation": ["child#006", "child#008", "adolescent#002", "adult#009"],
    "termination-penalty": [
        "child#001", "child#003", "adolescent#002",
        "adolescent#008", "adult#008", "adult#009",
    ],
    "seed-progression": [
        "child#001", "child#006", "child#008", "adolescent#002",
        "adolescent#003", "adult#001", "adult#009",
    ],
}


class RegistryError(ValueError):
    pass


def derive_bb_params(tdi: float) -> tuple[float, float]:
    """Carb ratio and correction factor from total daily insulin."""
    if tdi <= 0:
        raise RegistryError(f"TDI must be positive, got {tdi}")
    return 500.0 / tdi, 1800.0 / tdi


def action_scale(bas: float) -> float:
    """Maximum insulin (units) deliverable in one 5-minute step."""
    if bas < 0:
        raise RegistryError(f"basal rate must be nonnegative, got {bas}")
    return ACTION_SCALE_FACTOR * bas


@dataclass(frozen=True)
class PatientProfile:
    id: str
    patient_class: str
    age: float
    tdi: float
    cr: float
    cf: float
    bas: float              # units per 5-minute step
    weight: float           # kg
    height: float           # cm
    glucose_target: float = DEFAULT_GLUCOSE_TARGET

    @property
    def omega_b(self) -> float:
        return action_scale(self.bas)

    def __post_init__(self):
        if self.tdi <= 0:
            raise RegistryError(f"{self.id}: TDI must be positive")
        if self.patient_class not in PATIENT_CLASSES:
            raise RegistryError(f"{self.id}: unknown class {self.patient_class!r}")
        if not self.id.startswith(self.patient_class):
            raise RegistryError(f"{self.id}: id prefix does not match class")


@dataclass(frozen=True)
class PatientSubset:
    name: str
    members: tuple[str, ...]


def _parse_float(value: str, default: float | None = None) -> float | None:
    value = value.strip()
    if not value:
        return default
    return float(value)


def _build_profile(row: dict, glucose_target: float) -> PatientProfile:
    pid = row["id"].strip()
    cls = row["class"].strip()
    tdi = _parse_float(row["tdi"])
    if tdi is None or tdi <= 0:
        raise RegistryError(f"{pid}: missing or non-positive TDI")
    cr_default, cf_default = derive_bb_params(tdi)
    cr = _parse_float(row.get("cr", ""), cr_default)
    cf = _parse_float(row.get("cf", ""), cf_default)
    bas = _parse_float(row.get("bas", ""), BASAL_TDI_FRACTION * tdi / STEPS_PER_DAY)
    w_default, h_default = CLASS_BODY_DEFAULTS.get(cls, CLASS_BODY_DEFAULTS["adult"])
    weight = _parse_float(row.get("weight", ""), w_default)
    height = _parse_float(row.get("height", ""), h_default)
    return PatientProfile(
        id=pid, patient_class=cls, age=_parse_float(row["age"]),
        tdi=tdi, cr=cr, cf=cf, bas=bas, weight=weight, height=height,
        glucose_target=glucose_target,
    )


class Registry:
    """Immutable collection of patient profiles plus the named subsets."""

    def __init__(self, profiles: list[PatientProfile]):
        if not profiles:
            raise RegistryError("no patients")
        self._profiles: dict[str, PatientProfile] = {}
        for p in profiles:
            if p.id in self._profiles:
                raise RegistryError(f"duplicate patient id {p.id!r}")
            self._profiles[p.id] = p

    def __len__(self):
        return len(self._profiles)

    def __contains__(self, pid):
        return pid in self._profiles

    def __iter__(self):
        return iter(self._profiles.values())

    def ids(self) -> list[str]:
        return list(self._profiles)

    def get(self, pid: str) -> PatientProfile:
        try:
            return self._profiles[pid]
        except KeyError:
            raise RegistryError(f"unknown patient {pid!r}") from None

    def subset(self, name: str) -> PatientSubset:
        if name not in SUBSETS:
            raise RegistryError(
                f"unknown subset {name!r}; expected one of {sorted(SUBSETS)}")
        members = SUBSETS[name]
        missing = [m for m in members if m not in self._profiles]
        if missing:
            raise RegistryError(f"subset {name!r} references unknown ids {missing}")
        return PatientSubset(name=name, members=tuple(members))


_REQUIRED_COLUMNS = {"id", "class", "age", "tdi"}


def load_registry(path: str | Path | None = None,
                  glucose_target: float = DEFAULT_GLUCOSE_TARGET) -> Registry:
    """Load the patient table (bundled default when path is None)."""
    if path is None:
        ref = resources.files("apbench.data") / "patients.csv"
        with resources.as_file(ref) as p:
            return load_registry(p, glucose_target)
    path = Path(path)
    if not path.exists():
        raise RegistryError(f"patient table not found: {path}")
    profiles = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not _REQUIRED_COLUMNS <= set(reader.fieldnames):
            raise RegistryError(
                f"patient table must have columns {sorted(_REQUIRED_COLUMNS)}")
        for row in reader:
            if not any((v or "").strip() for v in row.values()):
                continue
            try:
                profiles.append(_build_profile(row, glucose_target))
            except (ValueError, KeyError) as exc:
                raise RegistryError(
                    f"malformed row {reader.line_num} in {path}: {exc}") from exc
    return Registry(profiles)
