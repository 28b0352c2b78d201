from .agent import SACAgent, SACConfig, action_to_insulin
from .networks import (PolicyNetwork, QNetwork, VNetwork, soft_update,
                       tanh_normal_log_prob)
from .replay import Episode, EpisodeRecorder, ReplayBuffer
from .training import (TrainConfig, TrainResult, config_hash, fine_tune,
                       load_checkpoint, run_policy_rollout, train)

__all__ = [
    "SACAgent", "SACConfig", "action_to_insulin",
    "PolicyNetwork", "QNetwork", "VNetwork", "soft_update",
    "tanh_normal_log_prob",
    "Episode", "EpisodeRecorder", "ReplayBuffer",
    "TrainConfig", "TrainResult", "config_hash", "fine_tune",
    "load_checkpoint", "run_policy_rollout", "train",
]
