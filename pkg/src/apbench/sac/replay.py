"""Episode-structured replay buffer.

Episodes are stored whole: each keeps the 48-step reset prefix plus one
channel row per step, so sampled windows are materialized on demand and
can never straddle an episode boundary. Eviction is FIFO by episode once
the step capacity is exceeded.
"""

from dataclasses import dataclass

import numpy as np

WINDOW_STEPS = 48


@dataclass
class Episode:
    channels: np.ndarray  # (prefix + T, C); first `window` rows predate step 0
    actions: np.ndarray   # (T,) squashed actions u in (-1, 1)
    rewards: np.ndarray   # (T,)
    terminated: bool      # dangerous termination (not horizon timeout)
    window: int = WINDOW_STEPS

    @property
    def length(self) -> int:
        return len(self.actions)

    def transition(self, i: int):
        w = self.window
        s = self.channels[i:i + w]
        s_next = self.channels[i + 1:i + 1 + w]
        done = 1.0 if (self.terminated and i == self.length - 1) else 0.0
        return s, self.actions[i], self.rewards[i], s_next, done


class EpisodeRecorder:
    """Accumulates one episode; hand the result to ReplayBuffer.add()."""

    def __init__(self, initial_obs_window: np.ndarray, window: int = WINDOW_STEPS):
        # initial_obs_window: (window, C) from env.reset()
        self._rows = [np.asarray(initial_obs_window, dtype=np.float32).copy()]
        self._actions, self._rewards = [], []
        self._window = window

    def record(self, obs_row: np.ndarray, action_u: float, reward: float):
        """obs_row: the newest (C,) channel row after the step."""
        self._rows.append(np.asarray(obs_row, dtype=np.float32)[None, :])
        self._actions.append(action_u)
        self._rewards.append(reward)

    def finish(self, terminated: bool) -> Episode:
        return Episode(channels=np.concatenate(self._rows, axis=0),
                       actions=np.array(self._actions, dtype=np.float32),
                       rewards=np.array(self._rewards, dtype=np.float32),
                       terminated=terminated, window=self._window)


class ReplayBuffer:
    def __init__(self, capacity_steps: int = 1_000_000,
                 rng: np.random.Generator | None = None):
        self.capacity = capacity_steps
        self.episodes: list[Episode] = []
        self.total_steps = 0
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, episode: Episode):
        if episode.length == 0:
            return
        self.episodes.append(episode)
        self.total_steps += episode.length
        while self.total_steps > self.capacity and len(self.episodes) > 1:
            evicted = self.episodes.pop(0)
            self.total_steps -= evicted.length

    def __len__(self):
        return self.total_steps

    def sample(self, batch_size: int):
        """Uniform over stored transitions. Returns stacked arrays
        (states, actions, rewards, next_states, dones)."""
        if self.total_steps == 0:
            raise ValueError("cannot sample from an empty buffer")
        lengths = np.array([ep.length for ep in self.episodes])
        cum = np.cumsum(lengths)
        flat = self.rng.integers(0, self.total_steps, size=batch_size)
        ep_idx = np.searchsorted(cum, flat, side="right")
        states, actions, rewards, next_states, dones = [], [], [], [], []
        for f, e in zip(flat, ep_idx):
            i = f - (cum[e - 1] if e > 0 else 0)
            s, a, r, sn, d = self.episodes[e].transition(int(i))
            states.append(s); actions.append(a); rewards.append(r)
            next_states.append(sn); dones.append(d)
        return (np.stack(states), np.array(actions, dtype=np.float32),
                np.array(rewards, dtype=np.float32), np.stack(next_states),
                np.array(dones, dtype=np.float32))
