"""Episode replay buffer with fixed-length padded storage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import DTYPE


@dataclass
class EpisodeRecord:
    """One episode of length L: per-step arrays, with L+1 observations/states."""

    obs: np.ndarray          # (L+1, n, obs_dim)
    state: np.ndarray        # (L+1, state_dim)
    avail: np.ndarray        # (L+1, n, n_actions)
    actions: np.ndarray      # (L, n)
    reward: np.ndarray       # (L,)
    terminated: np.ndarray   # (L,) true only for a real terminal, not a time limit
    masks: list = field(default_factory=list)   # per-step (n, obs_dim) masks for logging
    env_states: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.reward)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.reward))


@dataclass
class EpisodeBatch:
    obs: torch.Tensor         # (B, T+1, n, obs_dim)
    state: torch.Tensor       # (B, T+1, state_dim)
    avail: torch.Tensor       # (B, T+1, n, n_actions)
    actions: torch.Tensor     # (B, T, n) long
    reward: torch.Tensor      # (B, T)
    terminated: torch.Tensor  # (B, T)
    filled: torch.Tensor      # (B, T)

    @property
    def batch_size(self) -> int:
        return self.reward.shape[0]

    @property
    def max_t(self) -> int:
        return self.reward.shape[1]

    @classmethod
    def from_episodes(cls, episodes: list[EpisodeRecord], max_t: int | None = None) -> "EpisodeBatch":
        t = max_t if max_t is not None else max(len(e) for e in episodes)
        b = len(episodes)
        n, d = episodes[0].obs.shape[1:]
        s_dim = episodes[0].state.shape[1]
        a_dim = episodes[0].avail.shape[2]
        obs = np.zeros((b, t + 1, n, d))
        state = np.zeros((b, t + 1, s_dim))
        avail = np.ones((b, t + 1, n, a_dim))
        actions = np.zeros((b, t, n), dtype=np.int64)
        reward = np.zeros((b, t))
        term = np.zeros((b, t))
        filled = np.zeros((b, t))
        for i, e in enumerate(episodes):
            L = len(e)
            obs[i, :L + 1], state[i, :L + 1], avail[i, :L + 1] = e.obs, e.state, e.avail
            actions[i, :L], reward[i, :L], term[i, :L] = e.actions, e.reward, e.terminated
            filled[i, :L] = 1.0
        return cls.from_arrays(obs, state, avail, actions, reward, term, filled)

    @classmethod
    def from_arrays(cls, obs, state, avail, actions, reward, terminated, filled) -> "EpisodeBatch":
        f = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)  # noqa: E731
        return cls(f(obs), f(state), f(avail), torch.as_tensor(np.asarray(actions), dtype=torch.long),
                   f(reward), f(terminated), f(filled))

    def padded(self, extra: int) -> "EpisodeBatch":
        """Same batch with ``extra`` empty steps appended."""
        def pad(x, fill=0.0):
            shape = list(x.shape)
            shape[1] = extra
            return torch.cat([x, torch.full(shape, fill, dtype=x.dtype)], dim=1)
        return EpisodeBatch(pad(self.obs), pad(self.state), pad(self.avail, 1.0), pad(self.actions, 0),
                            pad(self.reward), pad(self.terminated), pad(self.filled))


class ReplayBuffer:
    """Ring buffer of whole episodes; the oldest episode is overwritten first."""

    def __init__(self, capacity: int, episode_limit: int, n_agents: int, obs_dim: int, state_dim: int,
                 n_actions: int, store_dtype=np.float32):
        self.capacity, self.episode_limit = capacity, episode_limit
        t = episode_limit
        self.obs = np.zeros((capacity, t + 1, n_agents, obs_dim), dtype=store_dtype)
        self.state = np.zeros((capacity, t + 1, state_dim), dtype=store_dtype)
        self.avail = np.zeros((capacity, t + 1, n_agents, n_actions), dtype=np.uint8)
        self.actions = np.zeros((capacity, t, n_agents), dtype=np.int16)
        self.reward = np.zeros((capacity, t))
        self.terminated = np.zeros((capacity, t), dtype=bool)
        self.lengths = np.zeros(capacity, dtype=np.int64)
        self.insert_index = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def insert(self, ep: EpisodeRecord) -> None:
        i, L = self.insert_index, len(ep)
        if L > self.episode_limit:
            raise ValueError(f"episode length {L} exceeds limit {self.episode_limit}")
        for arr in (self.obs, self.state, self.avail, self.actions, self.reward, self.terminated):
            arr[i] = 0
        self.obs[i, :L + 1] = ep.obs
        self.state[i, :L + 1] = ep.state
        self.avail[i, :L + 1] = ep.avail
        self.actions[i, :L] = ep.actions
        self.reward[i, :L] = ep.reward
        self.terminated[i, :L] = ep.terminated
        self.lengths[i] = L
        self.insert_index = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def can_sample(self, batch_size: int) -> bool:
        return self.size >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> EpisodeBatch:
        """Uniform without replacement, truncated to the longest sampled episode."""
        if not self.can_sample(batch_size):
            raise ValueError(f"buffer holds {self.size} episodes, need {batch_size}")
        idx = np.sort(rng.choice(self.size, size=batch_size, replace=False))
        t = int(self.lengths[idx].max())
        filled = (np.arange(t)[None, :] < self.lengths[idx][:, None]).astype(np.float64)
        return EpisodeBatch.from_arrays(
            self.obs[idx, :t + 1], self.state[idx, :t + 1], self.avail[idx, :t + 1],
            self.actions[idx, :t].astype(np.int64), self.reward[idx, :t],
            self.terminated[idx, :t], filled)
