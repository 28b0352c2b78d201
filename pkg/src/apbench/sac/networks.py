"""Policy and critic networks.

The recurrent variants consume the 48-step observation window through a
stacked GRU (applied statelessly to the full window, zero initial hidden
state). The oracle variants are plain MLPs over the ground-truth
simulator state. The policy emits (mu, log_sigma) for a tanh-squashed
Gaussian over a single scalar action in (-1, 1).
"""

import math

import torch
import torch.nn as nn

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0

# Rough channel normalization so CGM (40-400 mg/dL), insulin (units/step),
# carbs (grams) and the cooldown flag land on comparable scales.
CHANNEL_OFFSET = (140.0, 0.0, 0.0, 0.0)
CHANNEL_SCALE = (50.0, 1.0, 25.0, 1.0)


def normalize_window(window: torch.Tensor) -> torch.Tensor:
    """window: (..., steps, channels) raw observation values."""
    c = window.shape[-1]
    offset = torch.tensor(CHANNEL_OFFSET[:c], dtype=window.dtype,
                          device=window.device)
    scale = torch.tensor(CHANNEL_SCALE[:c], dtype=window.dtype,
                         device=window.device)
    return (window - offset) / scale


class WindowEncoder(nn.Module):
    """Stacked GRU over the observation window; returns the final hidden."""

    def __init__(self, n_channels: int, hidden: int = 128, layers: int = 2):
        super().__init__()
        self.gru = nn.GRU(n_channels, hidden, num_layers=layers,
                          batch_first=True)
        self.hidden = hidden

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        x = normalize_window(window)
        out, _ = self.gru(x)
        return out[:, -1, :]


class MLPEncoder(nn.Module):
    """Oracle-state encoder: two 256-unit hidden layers, ReLU + BatchNorm."""

    def __init__(self, state_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(state_dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(),
        )
        self.hidden = hidden

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        return self.net(state)


def _make_encoder(obs_mode: str, n_channels: int, hidden: int, layers: int):
    if obs_mode == "window":
        return WindowEncoder(n_channels, hidden, layers)
    if obs_mode == "oracle":
        return MLPEncoder(n_channels, hidden)
    raise ValueError(f"unknown observation mode {obs_mode!r}")


class PolicyNetwork(nn.Module):
    def __init__(self, n_channels: int, hidden: int = 128, layers: int = 2,
                 obs_mode: str = "window"):
        super().__init__()
        self.encoder = _make_encoder(obs_mode, n_channels, hidden, layers)
        self.head = nn.Linear(self.encoder.hidden, 2)

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(obs)
        out = self.head(h)
        mu = out[:, 0]
        log_sigma = torch.clamp(out[:, 1], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    def sample(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Reparameterized TanhNormal sample and its log-probability."""
        mu, log_sigma = self(obs)
        sigma = log_sigma.exp()
        z = mu + sigma * torch.randn_like(mu)
        u = torch.tanh(z)
        log_prob = gaussian_log_prob(z, mu, log_sigma) - tanh_correction(u)
        return u, log_prob

    def mean_action(self, obs: torch.Tensor) -> torch.Tensor:
        mu, _ = self(obs)
        return torch.tanh(mu)


class QNetwork(nn.Module):
    """State-action critic: encoded window concatenated with the action."""

    def __init__(self, n_channels: int, hidden: int = 128, layers: int = 2,
                 obs_mode: str = "window"):
        super().__init__()
        self.encoder = _make_encoder(obs_mode, n_channels, hidden, layers)
        self.head = nn.Sequential(
            nn.Linear(self.encoder.hidden + 1, self.encoder.hidden),
            nn.ReLU(),
            nn.Linear(self.encoder.hidden, 1),
        )

    def forward(self, obs: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        h = self.encoder(obs)
        return self.head(torch.cat([h, action.unsqueeze(-1)], dim=-1)).squeeze(-1)


class VNetwork(nn.Module):
    def __init__(self, n_channels: int, hidden: int = 128, layers: int = 2,
                 obs_mode: str = "window"):
        super().__init__()
        self.encoder = _make_encoder(obs_mode, n_channels, hidden, layers)
        self.head = nn.Linear(self.encoder.hidden, 1)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(obs)).squeeze(-1)


def gaussian_log_prob(z: torch.Tensor, mu: torch.Tensor,
                      log_sigma: torch.Tensor) -> torch.Tensor:
    return (-0.5 * ((z - mu) / log_sigma.exp()) ** 2
            - log_sigma - 0.5 * math.log(2 * math.pi))


def tanh_correction(u: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """log|du/dz| for u = tanh(z); subtracted from the Gaussian log-density."""
    return torch.log(1.0 - u ** 2 + eps)


def tanh_normal_log_prob(u: torch.Tensor, mu: torch.Tensor,
                         log_sigma: torch.Tensor) -> torch.Tensor:
    """Density of the squashed distribution at u in (-1, 1)."""
    z = torch.atanh(torch.clamp(u, -1 + 1e-7, 1 - 1e-7))
    return gaussian_log_prob(z, mu, log_sigma) - tanh_correction(u)


def soft_update(target: nn.Module, source: nn.Module, tau: float):
    """target <- (1 - tau) * target + tau * source, elementwise."""
    with torch.no_grad():
        for t, s in zip(target.parameters(), source.parameters()):
            if t.shape != s.shape:
                raise ValueError("parameter shape mismatch in soft update")
            t.mul_(1.0 - tau).add_(s, alpha=tau)
        for t, s in zip(target.buffers(), source.buffers()):
            t.copy_(s)
