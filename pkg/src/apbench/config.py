"""Declarative run configuration (YAML) and the run manifest.

One config file fully describes a run: patient selection, method, seed
pools, environment options, and the method-specific block. The manifest
written next to the artifacts records the config hash, code version, and
every emitted file, so a run directory is self-describing.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .env import EnvConfig
from .patients import DEFAULT_GLUCOSE_TARGET
from .risk import RewardConfig
from .sac.agent import SACConfig
from .sac.training import TrainConfig

METHODS = ("bb", "pid", "pid-ma", "rl-scratch", "rl-trans", "rl-ma",
           "rl-oracle", "zero-insulin", "constant-basal")
RL_METHODS = ("rl-scratch", "rl-trans", "rl-ma", "rl-oracle")

DEFAULT_SEED_POOLS = {
    "train": (0, 9999),
    "validation": (10000, 10099),
    "test": (20000, 20099),
}

EXPERIMENTS = ("predictability", "action-ablation", "termination-penalty",
               "seed-variation")


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass(frozen=True)
class SeedPool:
    name: str
    lo: int
    hi: int  # inclusive

    def __post_init__(self):
        if self.lo < 0 or self.hi < self.lo:
            raise ConfigError(f"seed pool {self.name!r}: bad range "
                              f"{self.lo}:{self.hi}")

    def seeds(self, n: int | None = None) -> list[int]:
        full = range(self.lo, self.hi + 1)
        if n is None:
            return list(full)
        if n > len(full):
            raise ConfigError(f"seed pool {self.name!r} has {len(full)} "
                              f"seeds, {n} requested")
        return list(full)[:n]

    def overlaps(self, other: "SeedPool") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi


@dataclass(frozen=True)
class PIDBlock:
    gains_path: str | None = None   # None -> bundled table
    mode: str = "reconciled"
    setpoint: float = DEFAULT_GLUCOSE_TARGET
    # tuner settings (tune-pid command)
    grid_points: int = 5
    grid_lo: float = 1e-9
    grid_hi: float = 1e-2
    n_refinements: int = 3
    tune_days: int = 3
    tune_seeds: int = 2


@dataclass(frozen=True)
class TransferBlock:
    source_checkpoint: str = ""
    source_class: str | None = None


@dataclass
class RunConfig:
    method: str
    patients: list[str]
    out_dir: str = "runs/out"
    days: int = 10                  # evaluation rollout length
    n_seeds: int = 20               # test seeds per patient
    n_restarts: int = 1
    patient_table: str | None = None
    glucose_target: float = DEFAULT_GLUCOSE_TARGET
    env: EnvConfig = field(default_factory=EnvConfig)
    pid: PIDBlock = field(default_factory=PIDBlock)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferBlock = field(default_factory=TransferBlock)
    checkpoint: str | None = None   # trained policy for simulate/evaluate
    action_mode: str = "signed-clip"
    global_omega: float = 5.0
    seed_pools: dict = field(default_factory=lambda: dict(DEFAULT_SEED_POOLS))
    experiment: str | None = None
    experiment_options: dict = field(default_factory=dict)

    def pool(self, name: str) -> SeedPool:
        if name not in self.seed_pools:
            raise ConfigError(f"unknown seed pool {name!r}")
        lo, hi = self.seed_pools[name]
        return SeedPool(name, lo, hi)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} not one of {METHODS}")
        if not self.patients:
            raise ConfigError("patients: at least one patient id required")
        if self.days < 1 or self.n_seeds < 1 or self.n_restarts < 1:
            raise ConfigError("days, n_seeds, and n_restarts must be >= 1")
        if self.pid.mode not in ("reconciled", "rectified"):
            raise ConfigError(f"pid.mode: unknown mode {self.pid.mode!r}")
        if self.action_mode not in ("signed-clip", "shifted-positive",
                                    "global-scale"):
            raise ConfigError(f"action_mode: unknown {self.action_mode!r}")
        if self.method == "rl-trans" and not self.transfer.source_checkpoint:
            raise ConfigError("transfer.source_checkpoint: required for rl-trans")
        pools = [self.pool(n) for n in self.seed_pools]
        for i, a in enumerate(pools):
            for b in pools[i + 1:]:
                if a.overlaps(b):
                    raise ConfigError(f"seed_pools: {a.name!r} and {b.name!r} "
                                      "overlap")
        if self.experiment is not None and self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: {self.experiment!r} not one of "
                              f"{EXPERIMENTS}")


def _build_dataclass(cls, data: dict, where: str):
    allowed = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown field")
        if cls is TrainConfig and key == "sac":
            value = _build_dataclass(SACConfig, value or {}, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_seed_pools(data: dict) -> dict:
    pools = dict(DEFAULT_SEED_POOLS)
    for name, spec in data.items():
        if isinstance(spec, str):
            lo, _, hi = spec.partition(":")
            try:
                spec = (int(lo), int(hi))
            except ValueError:
                raise ConfigError(f"seed_pools.{name}: expected LO:HI, "
                                  f"got {spec!r}") from None
        elif isinstance(spec, (list, tuple)) and len(spec) == 2:
            spec = (int(spec[0]), int(spec[1]))
        else:
            raise ConfigError(f"seed_pools.{name}: expected LO:HI or [lo, hi]")
        pools[name] = spec
    return pools


def _build_env_config(data: dict) -> EnvConfig:
    data = dict(data)
    reward = data.pop("reward", None)
    cfg = _build_dataclass(EnvConfig, data, "env")
    if reward is not None:
        cfg = replace(cfg, reward_config=_build_dataclass(
            RewardConfig, reward, "env.reward"))
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    if "method" not in data:
        raise ConfigError("method: required field missing")
    if "patients" not in data:
        raise ConfigError("patients: required field missing")
    patients = data.pop("patients")
    if isinstance(patients, str):
        patients = [patients]
    kwargs = {"method": data.pop("method"), "patients": list(patients)}
    builders = {
        "env": _build_env_config,
        "pid": lambda d: _build_dataclass(PIDBlock, d, "pid"),
        "train": lambda d: _build_dataclass(TrainConfig, d, "train"),
        "transfer": lambda d: _build_dataclass(TransferBlock, d, "transfer"),
        "seed_pools": _parse_seed_pools,
    }
    simple = {f.name for f in fields(RunConfig)} - set(builders) - set(kwargs)
    for key, value in data.items():
        if key in builders:
            kwargs[key] = builders[key](value or {})
        elif key in simple:
            kwargs[key] = value
        else:
            raise ConfigError(f"{key}: unknown field")
    config = RunConfig(**kwargs)
    config.validate()
    return config


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        raise ConfigError(f"{path}: empty config")
    return config_from_dict(data)


def run_config_hash(config: RunConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(config: RunConfig, path: str | Path):
    Path(path).write_text(yaml.safe_dump(asdict(config), sort_keys=True))


# -- manifest -----------------------------------------------------------------

class ManifestWriter:
    """Single writer per run; every artifact and warning goes through it."""

    def __init__(self, out_dir: str | Path, config: RunConfig):
        from . import __version__
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._data = {
            "config_hash": run_config_hash(config),
            "code_version": __version__,
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "artifacts": [],
            "warnings": [],
            "extra": {},
        }
        dump_config(config, self.out_dir / "config.yaml")
        self.add_artifact(self.out_dir / "config.yaml")

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def add_artifact(self, path: str | Path) -> Path:
        p = Path(path)
        rel = p.relative_to(self.out_dir) if p.is_absolute() else p
        self._data["artifacts"].append(str(rel))
        return p

    def add_warning(self, message: str):
        self._data["warnings"].append(message)

    def record(self, key: str, value):
        self._data["extra"][key] = value

    @property
    def warnings(self) -> list[str]:
        return list(self._data["warnings"])

    def finish(self) -> Path:
        self._data["finished"] = datetime.now(timezone.utc).isoformat()
        out = self.out_dir / "manifest.json"
        self._data["artifacts"].append("manifest.json")
        out.write_text(json.dumps(self._data, indent=2))
        return out
