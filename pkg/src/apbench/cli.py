"""Command-line entry point.

Subcommands cover every pipeline stage: simulate (controller or trained
policy rollouts), tune-pid, train, transfer, evaluate, experiment, and
report. Every command reads a single YAML config, writes artifacts plus
a manifest into the output directory, and exits 0 on success, 1 on a
runtime failure, 2 on a config error.
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (ConfigError, ManifestWriter, RunConfig, RL_METHODS,
                     load_run_config)
from .controllers import load_gain_table, tune_pid
from .env import GlucoseEnv, ma_wrap
from .evaluation import (BBPolicy, ConstantBasalPolicy, PIDMAPolicy,
                         PIDPolicy, RolloutSummary, SACPolicy,
                         ZeroInsulinPolicy, aggregate_table,
                         binomial_failure_test, experiment_predictability,
                         moods_median_test, postmeal_insulin_profile,
                         run_rollout, select_model, select_restart,
                         winrate_vs_reference, write_summaries_jsonl,
                         write_table_csv)
from .meals import slots_for_patient
from .patients import RegistryError, load_registry

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# -- environment and policy construction --------------------------------------

def _registry(cfg: RunConfig):
    return load_registry(cfg.patient_table, cfg.glucose_target)


def _make_env(cfg: RunConfig, profile, slots=None, env_config=None,
              wrap_ma=None):
    slots = slots if slots is not None else slots_for_patient(profile)
    env = GlucoseEnv(profile, slots, env_config or cfg.env)
    if wrap_ma is None:
        wrap_ma = cfg.method == "rl-ma"
    return ma_wrap(env) if wrap_ma else env


def _controller_policy(cfg: RunConfig, profile):
    method = cfg.method
    if method == "zero-insulin":
        return ZeroInsulinPolicy()
    if method == "constant-basal":
        return ConstantBasalPolicy()
    if method == "bb":
        return BBPolicy()
    if method in ("pid", "pid-ma"):
        table = load_gain_table(cfg.pid.gains_path, variant=method,
                                setpoint=cfg.pid.setpoint)
        gains = table[profile.id] if profile.id in table else None
        if gains is None:
            raise ConfigError(f"pid.gains_path: no gains for {profile.id!r}")
        cls = PIDPolicy if method == "pid" else PIDMAPolicy
        return cls(gains, mode=cfg.pid.mode)
    raise ConfigError(f"method {method!r} has no controller policy")


def _load_policy_checkpoint(cfg: RunConfig, path: str | Path):
    """Load an agent from a checkpoint file, or from a training run
    directory by applying filtered model selection to its log."""
    from .sac.training import load_checkpoint
    path = Path(path)
    if path.is_dir():
        log = path / "train_log.jsonl"
        if not log.exists():
            raise ConfigError(f"checkpoint: no train_log.jsonl in {path}")
        summaries = _read_epoch_summaries(log)
        sel = select_model(summaries)
        agent, _ = load_checkpoint(path / f"epoch_{sel.epoch:04d}.pt")
        return agent, sel
    agent, _ = load_checkpoint(path)
    return agent, None


def _read_epoch_summaries(log_path: Path):
    from .sac.training import EpochSummary
    out = []
    for line in Path(log_path).read_text().splitlines():
        if line.strip():
            out.append(EpochSummary(**json.loads(line)))
    return out


def _policy_for(cfg: RunConfig, profile):
    if cfg.method in RL_METHODS:
        if not cfg.checkpoint:
            raise ConfigError(f"checkpoint: required for method {cfg.method!r}")
        agent, sel = _load_policy_checkpoint(cfg, cfg.checkpoint)
        return SACPolicy(agent, cfg.action_mode, cfg.global_omega), sel
    return _controller_policy(cfg, profile), None


# -- simulate -----------------------------------------------------------------

def _rollout_task(args):
    """Worker-pool task: one seeded rollout, rebuilt from the config."""
    cfg, patient_id, seed = args
    profile = _registry(cfg).get(patient_id)
    policy = _controller_policy(cfg, profile)
    env = _make_env(cfg, profile)
    return seed, run_rollout(policy, env, cfg.days, seed)


def _run_rollouts(cfg: RunConfig, manifest: ManifestWriter, workers: int):
    registry = _registry(cfg)
    seeds = cfg.pool("test").seeds(cfg.n_seeds)
    logs, summaries = [], []
    tasks = [(cfg, pid, seed) for pid in cfg.patients for seed in seeds]
    for pid in cfg.patients:
        registry.get(pid)  # fail fast on unknown ids
    if cfg.method in RL_METHODS:
        for pid in cfg.patients:
            profile = registry.get(pid)
            policy, sel = _policy_for(cfg, profile)
            if sel is not None:
                manifest.record("selected_epoch", sel.epoch)
                if sel.fallback:
                    manifest.add_warning(
                        f"{pid}: no epoch passed the safety filter")
            for seed in seeds:
                env = _make_env(cfg, profile)
                log, summary = run_rollout(policy, env, cfg.days, seed)
                logs.append((pid, seed, log))
                summaries.append(summary)
    else:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_rollout_task, tasks))
        else:
            results = [_rollout_task(t) for t in tasks]
        for (_, pid, seed), (_, (log, summary)) in zip(tasks, results):
            logs.append((pid, seed, log))
            summaries.append(summary)
    return logs, summaries


def _write_rollout_artifacts(cfg, manifest, logs, summaries,
                             figures: bool = True):
    for pid, seed, log in logs:
        path = manifest.path(f"rollout_{pid.replace('#', '-')}_{seed}.csv")
        log.to_csv(path)
        manifest.add_artifact(path)
    write_summaries_jsonl(summaries, manifest.path("summaries.jsonl"))
    manifest.add_artifact(manifest.path("summaries.jsonl"))
    rows = aggregate_table(summaries)
    write_table_csv(rows, manifest.path("table.csv"))
    manifest.add_artifact(manifest.path("table.csv"))
    for row in rows:
        if row["collapse_warning"]:
            manifest.add_warning(
                f"{row['group']}: hyperglycemia dominates "
                f"({row['hyper']:.1f}% of steps); possible no-insulin collapse")
    if figures:
        from . import reporting
        for p in reporting.plot_risk_by_group(rows, manifest.path("risk_by_group")):
            manifest.add_artifact(p)
        if logs:
            for p in reporting.plot_rollout(logs[0][2], manifest.path("rollout_example")):
                manifest.add_artifact(p)
    return rows


def cmd_simulate(cfg: RunConfig, args) -> int:
    manifest = ManifestWriter(cfg.out_dir, cfg)
    logs, summaries = _run_rollouts(cfg, manifest, args.workers)
    _write_rollout_artifacts(cfg, manifest, logs, summaries, figures=False)
    manifest.finish()
    return EXIT_OK


# -- tune-pid -----------------------------------------------------------------

def cmd_tune_pid(cfg: RunConfig, args) -> int:
    if cfg.method not in ("pid", "pid-ma"):
        raise ConfigError(f"method: tune-pid needs pid or pid-ma, "
                          f"got {cfg.method!r}")
    from .controllers import default_grid
    registry = _registry(cfg)
    manifest = ManifestWriter(cfg.out_dir, cfg)
    pb = cfg.pid
    tune_seeds = cfg.pool("train").seeds(pb.tune_seeds)
    results = {}
    for pid in cfg.patients:
        profile = registry.get(pid)
        audit = manifest.path(f"audit_{pid.replace('#', '-')}.json")
        gains = tune_pid(
            lambda: _make_env(cfg, profile, wrap_ma=False),
            initial_grid=default_grid(pb.grid_points, pb.grid_lo, pb.grid_hi),
            n_refinements=pb.n_refinements, eval_days=pb.tune_days,
            seed_pool=tune_seeds, mode=pb.mode, variant=cfg.method,
            setpoint=pb.setpoint, audit_path=audit)
        manifest.add_artifact(audit)
        results[pid] = gains
    gains_csv = manifest.path("gains.csv")
    with open(gains_csv, "w", newline="") as f:
        f.write("id,kp,ki,kd\n")
        for pid, g in results.items():
            f.write(f"{pid},{g.kp!r},{g.ki!r},{g.kd!r}\n")
    manifest.add_artifact(gains_csv)
    gains_json = manifest.path("gains.json")
    gains_json.write_text(json.dumps(
        {pid: {"kp": g.kp, "ki": g.ki, "kd": g.kd, "setpoint": g.setpoint}
         for pid, g in results.items()}, indent=2))
    manifest.add_artifact(gains_json)
    manifest.finish()
    return EXIT_OK


# -- train / transfer ---------------------------------------------------------

def _train_env_factory(cfg: RunConfig, profile, env_config=None,
                       fine_tune=False):
    env_config = env_config or cfg.env
    if fine_tune:
        env_config = replace(
            env_config,
            reward_config=replace(env_config.reward_config, fine_tune=True))

    def factory():
        return _make_env(cfg, profile, env_config=env_config)
    return factory


def _train_one(cfg: RunConfig, profile, train_cfg, out_dir: Path,
               agent=None, fine_tune_env=False):
    """One training run in out_dir; resumes from existing checkpoints."""
    from .sac import training
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    done_epochs = 0
    if agent is None and log_path.exists():
        prior = _read_epoch_summaries(log_path)
        done_epochs = len(prior)
        if done_epochs:
            agent, _ = training.load_checkpoint(
                out_dir / f"epoch_{done_epochs - 1:04d}.pt")
    remaining = train_cfg.epochs - done_epochs
    if remaining <= 0:
        return _read_epoch_summaries(log_path)
    run_cfg = replace(train_cfg, epochs=remaining)
    factory = _train_env_factory(cfg, profile, fine_tune=fine_tune_env)
    result = training.train(factory, run_cfg, agent=agent,
                            checkpoint_dir=None, log_path=None)
    # Renumber checkpoints and log entries after any resumed prefix.
    import torch
    from dataclasses import asdict
    with open(log_path, "a") as log_file:
        for i, (state, summary) in enumerate(zip(result.checkpoints,
                                                 result.summaries)):
            epoch = done_epochs + i
            summary.epoch = epoch
            torch.save({"agent": state, "n_channels": _n_channels(cfg, profile),
                        "config_hash": training.config_hash(train_cfg),
                        "sac": asdict(run_cfg.sac)},
                       out_dir / f"epoch_{epoch:04d}.pt")
            log_file.write(json.dumps(summary.to_json()) + "\n")
    return _read_epoch_summaries(log_path)


def _n_channels(cfg: RunConfig, profile) -> int:
    if cfg.train.sac.obs_mode == "oracle":
        return 7
    return 4 if cfg.method == "rl-ma" else 2


def cmd_train(cfg: RunConfig, args) -> int:
    if cfg.method not in ("rl-scratch", "rl-ma", "rl-oracle"):
        raise ConfigError(f"method: train needs rl-scratch, rl-ma, or "
                          f"rl-oracle, got {cfg.method!r}")
    train_cfg = replace(cfg.train, action_mode=cfg.action_mode,
                        global_omega=cfg.global_omega)
    if cfg.method == "rl-oracle":
        train_cfg = replace(train_cfg,
                            sac=replace(train_cfg.sac, obs_mode="oracle"))
    registry = _registry(cfg)
    manifest = ManifestWriter(cfg.out_dir, cfg)
    for pid in cfg.patients:
        profile = registry.get(pid)
        per_restart = []
        for restart in range(cfg.n_restarts):
            run_dir = (manifest.path(pid.replace("#", "-"))
                       / f"restart_{restart}")
            r_cfg = replace(train_cfg,
                            torch_seed=train_cfg.torch_seed + restart)
            summaries = _train_one(cfg, profile, r_cfg, run_dir)
            per_restart.append(summaries)
            manifest.add_artifact(run_dir / "train_log.jsonl")
        best_restart, sel = select_restart(per_restart)
        manifest.record(f"{pid}:selected_restart", best_restart)
        manifest.record(f"{pid}:selected_epoch", sel.epoch)
        if sel.fallback:
            manifest.add_warning(f"{pid}: no epoch passed the safety filter")
    manifest.finish()
    return EXIT_OK


def cmd_transfer(cfg: RunConfig, args) -> int:
    if cfg.method != "rl-trans":
        raise ConfigError(f"method: transfer needs rl-trans, got {cfg.method!r}")
    from .sac import training
    source = Path(cfg.transfer.source_checkpoint)
    if not source.exists():
        raise ConfigError(f"transfer.source_checkpoint: {source} not found")
    registry = _registry(cfg)
    manifest = ManifestWriter(cfg.out_dir, cfg)
    train_cfg = replace(cfg.train, action_mode=cfg.action_mode,
                        global_omega=cfg.global_omega)
    for pid in cfg.patients:
        profile = registry.get(pid)
        if source.is_dir():
            agent, _ = _load_policy_checkpoint(cfg, source)
        else:
            agent, _ = training.load_checkpoint(source)
        if (cfg.transfer.source_class
                and cfg.transfer.source_class != profile.patient_class):
            manifest.add_warning(
                f"{pid}: fine-tuning across classes "
                f"({cfg.transfer.source_class} -> {profile.patient_class})")
        run_dir = manifest.path(pid.replace("#", "-"))
        summaries = _train_one(cfg, profile, train_cfg, run_dir,
                               agent=agent, fine_tune_env=True)
        if summaries:
            manifest.add_artifact(run_dir / "train_log.jsonl")
            sel = select_model(summaries)
            manifest.record(f"{pid}:selected_epoch", sel.epoch)
    manifest.finish()
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(cfg: RunConfig, args) -> int:
    manifest = ManifestWriter(cfg.out_dir, cfg)
    logs, summaries = _run_rollouts(cfg, manifest, args.workers)
    _write_rollout_artifacts(cfg, manifest, logs, summaries, figures=True)
    from . import reporting
    try:
        profile = postmeal_insulin_profile([log for _, _, log in logs])
        reporting.write_postmeal_csv({cfg.method: profile},
                                     manifest.path("postmeal.csv"))
        manifest.add_artifact(manifest.path("postmeal.csv"))
        for p in reporting.plot_postmeal_profile({cfg.method: profile},
                                                 manifest.path("postmeal")):
            manifest.add_artifact(p)
    except ValueError:
        manifest.add_warning("no meals or no insulin in the evaluation "
                             "rollouts; post-meal profile skipped")
    ref = cfg.experiment_options.get("reference_summaries")
    if ref:
        reference = _read_summaries_jsonl(Path(ref))
        wr = winrate_vs_reference(summaries, reference)
        manifest.record("winrate_vs_reference", wr)
    manifest.finish()
    return EXIT_OK


def _read_summaries_jsonl(path: Path) -> list[RolloutSummary]:
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            out.append(RolloutSummary(**json.loads(line)))
    return out


# -- experiments --------------------------------------------------------------

def _experiment_predictability(cfg: RunConfig, manifest, args) -> int:
    from . import reporting
    registry = _registry(cfg)
    opts = cfg.experiment_options
    stds = tuple(opts.get("stds_hours", (0.1, 1.0, 10.0)))
    for pid in cfg.patients:
        profile = registry.get(pid)
        base_slots = slots_for_patient(profile)
        policy = _controller_policy(cfg, profile)

        def policy_factory():
            policy.reset()
            return policy

        def env_factory(prof, slots):
            return _make_env(cfg, prof, slots=slots, wrap_ma=False)

        results = experiment_predictability(
            policy_factory, profile, base_slots, env_factory,
            stds_hours=stds, n_rollouts=cfg.n_seeds, days=cfg.days,
            seed_start=cfg.pool("test").lo)
        tag = pid.replace("#", "-")
        reporting.write_predictability_csv(
            results, manifest.path(f"predictability_{tag}.csv"))
        manifest.add_artifact(manifest.path(f"predictability_{tag}.csv"))
        for p in reporting.plot_predictability(
                results, manifest.path(f"predictability_{tag}"), label=pid):
            manifest.add_artifact(p)
        lo, hi = min(stds), max(stds)
        if cfg.n_seeds >= 5:
            p_val = moods_median_test(results[lo]["risks"], results[hi]["risks"])
            manifest.record(f"{pid}:p_low_vs_high_std", p_val)
        else:
            manifest.add_warning("fewer than 5 rollouts per arm; median "
                                 "test skipped")
        manifest.record(f"{pid}:mean_risk_by_std",
                        {str(s): results[s]["mean"] for s in stds})
    return EXIT_OK


def _experiment_train_compare(cfg: RunConfig, manifest, variants) -> int:
    """Shared harness: train each (tag, train_cfg, env_cfg) variant per
    patient, evaluate the selected model on the test pool, tabulate."""
    registry = _registry(cfg)
    seeds = cfg.pool("test").seeds(cfg.n_seeds)
    all_summaries = []
    failure_counts = {}
    for pid in cfg.patients:
        profile = registry.get(pid)
        for tag, train_cfg, env_cfg in variants:
            run_dir = manifest.path(f"{pid.replace('#', '-')}_{tag}")
            eval_cfg = replace(cfg, env=env_cfg)
            summaries = _train_one(eval_cfg, profile, train_cfg, run_dir)
            manifest.add_artifact(run_dir / "train_log.jsonl")
            sel = select_model(summaries)
            from .sac.training import load_checkpoint
            agent, _ = load_checkpoint(run_dir / f"epoch_{sel.epoch:04d}.pt")
            policy = SACPolicy(agent, train_cfg.action_mode,
                               train_cfg.global_omega)
            tagged = []
            for seed in seeds:
                env = _make_env(cfg, profile)  # evaluate under nominal reward
                _, summary = run_rollout(policy, env, cfg.days, seed)
                summary.patient_id = f"{pid}|{tag}"
                tagged.append(summary)
            all_summaries.extend(tagged)
            failure_counts[(pid, tag)] = (
                sum(s.catastrophic for s in tagged), len(tagged))
    rows = aggregate_table(all_summaries)
    write_table_csv(rows, manifest.path("comparison.csv"))
    manifest.add_artifact(manifest.path("comparison.csv"))
    write_summaries_jsonl(all_summaries, manifest.path("summaries.jsonl"))
    manifest.add_artifact(manifest.path("summaries.jsonl"))
    from . import reporting
    for p in reporting.plot_risk_by_group(rows, manifest.path("comparison")):
        manifest.add_artifact(p)
    return failure_counts


def _experiment_action_ablation(cfg: RunConfig, manifest, args) -> int:
    base = replace(cfg.train, global_omega=cfg.global_omega)
    variants = [(mode, replace(base, action_mode=mode), cfg.env)
                for mode in ("signed-clip", "shifted-positive", "global-scale")]
    _experiment_train_compare(cfg, manifest, variants)
    return EXIT_OK


def _experiment_termination_penalty(cfg: RunConfig, manifest, args) -> int:
    on = cfg.env
    off = replace(cfg.env, reward_config=replace(cfg.env.reward_config,
                                                 termination_penalty=0.0))
    base = replace(cfg.train, action_mode=cfg.action_mode,
                   global_omega=cfg.global_omega)
    counts = _experiment_train_compare(
        cfg, manifest, [("penalty-on", base, on), ("penalty-off", base, off)])
    for pid in cfg.patients:
        k_on, n_on = counts[(pid, "penalty-on")]
        k_off, n_off = counts[(pid, "penalty-off")]
        p = binomial_failure_test(k_on, n_on, k_off, n_off)
        manifest.record(f"{pid}:failure_p_value", p)
    return EXIT_OK


def _experiment_seed_variation(cfg: RunConfig, manifest, args) -> int:
    base = replace(cfg.train, action_mode=cfg.action_mode,
                   global_omega=cfg.global_omega)
    variants = [
        ("varied-seeds", replace(base, vary_training_seeds=True), cfg.env),
        ("fixed-seed", replace(base, vary_training_seeds=False), cfg.env),
    ]
    _experiment_train_compare(cfg, manifest, variants)
    return EXIT_OK


_EXPERIMENTS = {
    "predictability": _experiment_predictability,
    "action-ablation": _experiment_action_ablation,
    "termination-penalty": _experiment_termination_penalty,
    "seed-variation": _experiment_seed_variation,
}


def cmd_experiment(cfg: RunConfig, args) -> int:
    name = args.name or cfg.experiment
    if name not in _EXPERIMENTS:
        raise ConfigError(f"experiment: unknown name {name!r}; expected one "
                          f"of {sorted(_EXPERIMENTS)}")
    manifest = ManifestWriter(cfg.out_dir, cfg)
    rc = _EXPERIMENTS[name](cfg, manifest, args)
    manifest.finish()
    return rc if isinstance(rc, int) else EXIT_OK


# -- report -------------------------------------------------------------------

def cmd_report(cfg: RunConfig, args) -> int:
    """Regenerate the table and figures from an existing run directory's
    summaries; no simulation is performed."""
    from . import reporting
    run_dir = Path(cfg.out_dir)
    summaries_path = run_dir / "summaries.jsonl"
    if not summaries_path.exists():
        raise ConfigError(f"out_dir: no summaries.jsonl in {run_dir}")
    summaries = _read_summaries_jsonl(summaries_path)
    manifest = ManifestWriter(run_dir, cfg)
    manifest.add_artifact(summaries_path)
    rows = aggregate_table(summaries)
    write_table_csv(rows, manifest.path("table.csv"))
    manifest.add_artifact(manifest.path("table.csv"))
    for p in reporting.plot_risk_by_group(rows, manifest.path("risk_by_group")):
        manifest.add_artifact(p)
    manifest.finish()
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _parse_seed_pool_flag(value: str) -> tuple[str, tuple[int, int]]:
    name, sep, rng = value.partition("=")
    lo, sep2, hi = rng.partition(":")
    if not sep or not sep2:
        raise argparse.ArgumentTypeError(
            f"expected NAME=LO:HI, got {value!r}")
    try:
        return name, (int(lo), int(hi))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected integer bounds in {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apbench",
        description="Closed-loop glucose control workbench.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": cmd_simulate,
        "tune-pid": cmd_tune_pid,
        "train": cmd_train,
        "transfer": cmd_transfer,
        "evaluate": cmd_evaluate,
        "experiment": cmd_experiment,
        "report": cmd_report,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config YAML")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed-pool", action="append", default=[],
                       type=_parse_seed_pool_flag, metavar="NAME=LO:HI",
                       help="override a seed pool range")
        if name == "experiment":
            p.add_argument("--name", default=None,
                           help="experiment preset (defaults to config)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.out:
            cfg.out_dir = args.out
        for name, bounds in args.seed_pool:
            cfg.seed_pools[name] = bounds
        cfg.validate()
        return args.func(cfg, args)
    except (ConfigError, RegistryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
