"""Maximum-entropy actor-critic: losses and the update rule.

Single Q critic, separate soft value network with an EMA target copy,
Huber temporal-difference loss, and automatic temperature tuning against
a fixed entropy target (default -1 for the scalar action).
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .networks import PolicyNetwork, QNetwork, VNetwork, soft_update

DEFAULT_TARGET_ENTROPY = -1.0


@dataclass
class SACConfig:
    gamma: float = 0.99
    lr: float = 3e-4
    tau: float = 5e-3
    hidden: int = 128
    layers: int = 2
    target_entropy: float = DEFAULT_TARGET_ENTROPY
    obs_mode: str = "window"   # "window" or "oracle"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.lr <= 0 or self.tau <= 0:
            raise ValueError("learning rate and tau must be positive")


def action_to_insulin(u: float, omega_b: float,
                      action_mode: str = "signed-clip",
                      global_omega: float = 5.0) -> float:
    """Map the squashed action u in (-1, 1) to units of insulin.

    signed-clip: the negative half of the space delivers nothing.
    shifted-positive: ablation that removes the no-insulin half.
    global-scale: ablation that drops the patient-specific scale.
    """
    if action_mode == "signed-clip":
        return omega_b * max(0.0, u)
    if action_mode == "shifted-positive":
        return omega_b * (u + 1.0) / 2.0
    if action_mode == "global-scale":
        return global_omega * max(0.0, u)
    raise ValueError(f"unknown action mode {action_mode!r}")


class SACAgent:
    def __init__(self, n_channels: int, config: SACConfig = SACConfig()):
        self.config = config
        kw = dict(hidden=config.hidden, layers=config.layers,
                  obs_mode=config.obs_mode)
        self.policy = PolicyNetwork(n_channels, **kw)
        self.q = QNetwork(n_channels, **kw)
        self.v = VNetwork(n_channels, **kw)
        self.v_target = copy.deepcopy(self.v)
        for p in self.v_target.parameters():
            p.requires_grad_(False)
        self.log_alpha = torch.zeros(1, requires_grad=True)
        self.opt_policy = torch.optim.Adam(self.policy.parameters(), lr=config.lr)
        self.opt_q = torch.optim.Adam(self.q.parameters(), lr=config.lr)
        self.opt_v = torch.optim.Adam(self.v.parameters(), lr=config.lr)
        self.opt_alpha = torch.optim.Adam([self.log_alpha], lr=config.lr)

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def _obs(self, states: np.ndarray) -> torch.Tensor:
        t = torch.as_tensor(states, dtype=torch.float32)
        if self.config.obs_mode == "oracle":
            t = t.squeeze(1)  # (B, 1, D) -> (B, D)
        return t

    # -- losses (each usable standalone for gradient checking) ---------------

    def q_loss(self, states, actions, rewards, next_states, dones) -> torch.Tensor:
        q = self.q(states, actions)
        with torch.no_grad():
            target = rewards + self.config.gamma * (1.0 - dones) * self.v_target(next_states)
        return F.huber_loss(q, target)

    def v_loss(self, states) -> torch.Tensor:
        with torch.no_grad():
            a, log_pi = self.policy.sample(states)
            target = self.q(states, a) - self.log_alpha.exp() * log_pi
        return 0.5 * ((self.v(states) - target) ** 2).mean()

    def pi_loss(self, states) -> torch.Tensor:
        a, log_pi = self.policy.sample(states)
        q = self.q(states, a)
        return (self.log_alpha.exp().detach() * log_pi - q).mean()

    def temperature_loss(self, states) -> torch.Tensor:
        with torch.no_grad():
            _, log_pi = self.policy.sample(states)
        return (-self.log_alpha * (log_pi + self.config.target_entropy)).mean()

    # -- one gradient update --------------------------------------------------

    def update(self, batch) -> dict:
        states_np, actions, rewards, next_states_np, dones = batch
        states = self._obs(states_np)
        next_states = self._obs(next_states_np)
        actions = torch.as_tensor(actions, dtype=torch.float32)
        rewards = torch.as_tensor(rewards, dtype=torch.float32)
        dones = torch.as_tensor(dones, dtype=torch.float32)

        lq = self.q_loss(states, actions, rewards, next_states, dones)
        self.opt_q.zero_grad(); lq.backward(); self.opt_q.step()

        lv = self.v_loss(states)
        self.opt_v.zero_grad(); lv.backward(); self.opt_v.step()

        lp = self.pi_loss(states)
        self.opt_policy.zero_grad(); lp.backward(); self.opt_policy.step()

        la = self.temperature_loss(states)
        self.opt_alpha.zero_grad(); la.backward(); self.opt_alpha.step()

        soft_update(self.v_target, self.v, self.config.tau)

        losses = {"q": float(lq.detach()), "v": float(lv.detach()),
                  "pi": float(lp.detach()), "alpha": float(la.detach()),
                  "alpha_value": self.alpha}
        if not all(math.isfinite(v) for v in losses.values()):
            raise FloatingPointError(f"non-finite SAC loss: {losses}")
        return losses

    # -- (de)serialization -----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "policy": self.policy.state_dict(),
            "q": self.q.state_dict(),
            "v": self.v.state_dict(),
            "v_target": self.v_target.state_dict(),
            "log_alpha": self.log_alpha.detach().clone(),
        }

    def load_state_dict(self, state: dict):
        self.policy.load_state_dict(state["policy"])
        self.q.load_state_dict(state["q"])
        self.v.load_state_dict(state["v"])
        self.v_target.load_state_dict(state["v_target"])
        with torch.no_grad():
            self.log_alpha.copy_(state["log_alpha"])

    # -- acting ---------------------------------------------------------------

    def act(self, window: np.ndarray, deterministic: bool = False) -> float:
        obs = self._obs(np.asarray(window, dtype=np.float32)[None, ...])
        was_training = self.policy.training
        self.policy.eval()  # batchnorm in oracle mode needs eval stats
        with torch.no_grad():
            if deterministic:
                u = self.policy.mean_action(obs)
            else:
                u, _ = self.policy.sample(obs)
        if was_training:
            self.policy.train()
        return float(u[0])
