"""Recurrent per-agent utility network shared by all agents, plus exploration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, Affine, GRUCell, relu


class AvailabilityError(ValueError):
    pass


class AgentNet(nn.Module):
    """obs ⊕ one-hot(last action) ⊕ one-hot(agent id) -> affine -> ReLU -> GRU -> affine.

    One instance serves every agent; identity enters only through the id
    one-hot, so the parameters are shared by construction.
    """

    def __init__(self, obs_dim: int, n_actions: int, n_agents: int, hidden: int = 64,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.obs_dim, self.n_actions, self.n_agents, self.hidden = obs_dim, n_actions, n_agents, hidden
        self.fc_in = Affine(obs_dim + n_actions + n_agents, hidden, gen=gen)
        self.rnn = GRUCell(hidden, hidden, gen=gen)
        self.fc_out = Affine(hidden, n_actions, gen=gen)

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.n_agents

    def init_hidden(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.hidden, dtype=DTYPE)

    def build_inputs(self, obs: torch.Tensor, last_actions: torch.Tensor) -> torch.Tensor:
        """obs (B, n, obs_dim), last_actions (B, n) with -1 for "no action yet"."""
        b, n, _ = obs.shape
        last = torch.zeros(b, n, self.n_actions, dtype=DTYPE)
        valid = last_actions >= 0
        if bool(valid.any()):
            last[valid] = torch.nn.functional.one_hot(
                last_actions[valid].long(), self.n_actions).to(DTYPE)
        ids = torch.eye(n, dtype=DTYPE).expand(b, n, n)
        return torch.cat([obs, last, ids], dim=-1)

    def forward(self, inputs: torch.Tensor, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = relu(self.fc_in(inputs))
        h = self.rnn(x, h)
        return self.fc_out(h), h

    def q_forward(self, obs, last_action: int | None, agent_id: int, h: torch.Tensor | None = None
                  ) -> tuple[torch.Tensor, torch.Tensor]:
        """Single-agent step; returns (q_values[n_actions], new hidden[hidden])."""
        if not 0 <= agent_id < self.n_agents:
            raise IndexError(f"agent_id {agent_id} outside [0, {self.n_agents})")
        obs = torch.as_tensor(obs, dtype=DTYPE).reshape(-1)
        last = torch.zeros(self.n_actions, dtype=DTYPE)
        if last_action is not None and last_action >= 0:
            last[last_action] = 1.0
        ident = torch.zeros(self.n_agents, dtype=DTYPE)
        ident[agent_id] = 1.0
        h = torch.zeros(self.hidden, dtype=DTYPE) if h is None else h
        q, h_new = self.forward(torch.cat([obs, last, ident])[None], h[None])
        return q[0], h_new[0]


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    finish: float = 0.05
    anneal_steps: int = 50_000


def epsilon_at(schedule: EpsilonSchedule, t: int) -> float:
    if schedule.anneal_steps <= 0 or t >= schedule.anneal_steps:
        return schedule.finish
    frac = t / schedule.anneal_steps
    return schedule.start + frac * (schedule.finish - schedule.start)


def select_action(q_values, avail_mask, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over available actions; greedy ties go to the lowest index."""
    q = np.asarray(q_values, dtype=float)
    avail = np.flatnonzero(np.asarray(avail_mask) > 0)
    if avail.size == 0:
        raise AvailabilityError("no available action")
    if epsilon > 0 and rng.random() < epsilon:
        return int(avail[rng.integers(avail.size)])
    return int(avail[np.argmax(q[avail])])
