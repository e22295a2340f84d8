"""One-step cooperative matrix games and exhaustive joint-action enumeration."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .lbf import LifecycleError

MAX_TABLE = 10 ** 6


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class MatrixGame:
    payoff: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.payoff, dtype=float)
        if p.ndim < 1 or len(set(p.shape)) != 1:
            raise ValueError("payoff must be an n_actions^n_agents hypercube")
        if not np.isfinite(p).all():
            raise ValueError("payoff must be finite")
        object.__setattr__(self, "payoff", p)

    @property
    def n_agents(self) -> int:
        return self.payoff.ndim

    @property
    def n_actions(self) -> int:
        return self.payoff.shape[0]


# Unique optimum 8 at (0, 0); every other cell pays at most 5.
COOPERATIVE_3X3 = MatrixGame(np.array([
    [8.0, -2.0, -2.0],
    [-2.0, 5.0, 0.0],
    [-2.0, 0.0, 5.0],
]))


def matrix_enumerate(n_agents: int, n_actions: int, qtot_fn: Callable[[tuple[int, ...]], float]
                     ) -> tuple[tuple[int, ...], np.ndarray]:
    """Evaluate ``qtot_fn`` on every joint action.

    Returns the argmax joint action (lexicographically smallest among ties)
    and the full table indexed by joint action.
    """
    if n_actions ** n_agents > MAX_TABLE:
        raise SizeError(f"{n_actions}^{n_agents} joint actions exceeds {MAX_TABLE}")
    table = np.empty((n_actions,) * n_agents)
    for u in itertools.product(range(n_actions), repeat=n_agents):
        table[u] = float(qtot_fn(u))
    # np.argmax returns the first maximum in C order, i.e. lexicographic
    best = np.unravel_index(int(np.argmax(table)), table.shape)
    return tuple(int(b) for b in best), table


class MatrixGameEnv:
    """Single-step episode: constant observation and state, shared payoff."""

    episode_limit = 1
    obs_dim = 1
    state_dim = 1
    window_shape = None

    def __init__(self, game: MatrixGame = COOPERATIVE_3X3):
        self.game = game
        self.n_agents = game.n_agents
        self.n_actions = game.n_actions
        self._done = True

    def reset(self, seed: int):
        self._done = False
        return np.ones((self.n_agents, 1)), np.ones(1), self.avail_actions()

    def avail_actions(self) -> np.ndarray:
        return np.ones((self.n_agents, self.n_actions))

    def step(self, actions: Sequence[int]):
        if self._done:
            raise LifecycleError("step called on a finished episode")
        self._done = True
        reward = float(self.game.payoff[tuple(int(a) for a in actions)])
        return np.ones((self.n_agents, 1)), np.ones(1), self.avail_actions(), reward, True, False

    def snapshot(self) -> dict:
        return {"done": self._done}
