"""Level-Based Foraging on a square grid with a shared team reward."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

UP, DOWN, LEFT, RIGHT, EAT, NONE = range(6)
ACTION_NAMES = ("up", "down", "left", "right", "eat", "none")
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
N_CHANNELS = 3  # agent level, food level, out-of-bounds


class ConfigError(ValueError):
    pass


class LifecycleError(RuntimeError):
    pass


@dataclass(frozen=True)
class LbfConfig:
    n_agents: int = 3
    n_foods: int = 3
    grid_size: int = 10
    max_player_level: int = 3
    max_episode_length: int = 50
    sight: int = 2
    move_penalty: float = 0.002

    def validate(self) -> None:
        if self.n_agents < 1 or self.n_foods < 1:
            raise ConfigError("need at least one agent and one food")
        if self.n_agents + self.n_foods > self.grid_size ** 2:
            raise ConfigError(
                f"{self.n_agents + self.n_foods} entities do not fit on a "
                f"{self.grid_size}x{self.grid_size} grid")
        if self.max_player_level < 1 or self.max_episode_length < 1 or self.sight < 0:
            raise ConfigError("levels, episode length and sight must be positive")

    @property
    def window(self) -> int:
        return 2 * self.sight + 1

    @property
    def obs_dim(self) -> int:
        return self.window * self.window * N_CHANNELS + 1

    @property
    def state_dim(self) -> int:
        return 2 * self.grid_size ** 2 + 3 * self.n_agents


PRESETS = {
    "3p3f": LbfConfig(n_agents=3, n_foods=3),
    "4p2f": LbfConfig(n_agents=4, n_foods=2),
}


@dataclass(frozen=True)
class Food:
    pos: tuple[int, int]
    level: int
    eaten: bool = False


@dataclass(frozen=True)
class LbfState:
    config: LbfConfig
    agent_pos: tuple[tuple[int, int], ...]
    agent_levels: tuple[int, ...]
    foods: tuple[Food, ...]
    total_food_level: int
    step_count: int = 0
    done: bool = False

    @property
    def truncated(self) -> bool:
        """Episode ended by the time limit with food still on the grid."""
        return self.done and not all(f.eaten for f in self.foods)

    def to_dict(self) -> dict:
        return {
            "agents": [{"pos": list(p), "level": lvl}
                       for p, lvl in zip(self.agent_pos, self.agent_levels)],
            "foods": [{"pos": list(f.pos), "level": f.level, "eaten": f.eaten} for f in self.foods],
            "step_count": self.step_count,
            "done": self.done,
        }


def _observe(state: LbfState, agent: int) -> np.ndarray:
    cfg = state.config
    w, s, g = cfg.window, cfg.sight, cfg.grid_size
    obs = np.zeros((w, w, N_CHANNELS))
    r0, c0 = state.agent_pos[agent]
    for dr in range(-s, s + 1):
        for dc in range(-s, s + 1):
            r, c = r0 + dr, c0 + dc
            if not (0 <= r < g and 0 <= c < g):
                obs[dr + s, dc + s, 2] = 1.0
    for (r, c), lvl in zip(state.agent_pos, state.agent_levels):
        if abs(r - r0) <= s and abs(c - c0) <= s:
            obs[r - r0 + s, c - c0 + s, 0] = lvl
    for f in state.foods:
        r, c = f.pos
        if not f.eaten and abs(r - r0) <= s and abs(c - c0) <= s:
            obs[r - r0 + s, c - c0 + s, 1] = f.level
    return np.concatenate([obs.reshape(-1), [float(state.agent_levels[agent])]])


def observations(state: LbfState) -> list[np.ndarray]:
    return [_observe(state, i) for i in range(state.config.n_agents)]


def global_state(state: LbfState) -> np.ndarray:
    """Agent-level grid, food-level grid, then (row, col, level) per agent."""
    g = state.config.grid_size
    agents = np.zeros((g, g))
    foods = np.zeros((g, g))
    for (r, c), lvl in zip(state.agent_pos, state.agent_levels):
        agents[r, c] = lvl
    for f in state.foods:
        if not f.eaten:
            foods[f.pos] = f.level
    per_agent = [v for (r, c), lvl in zip(state.agent_pos, state.agent_levels) for v in (r, c, lvl)]
    return np.concatenate([agents.reshape(-1), foods.reshape(-1), np.asarray(per_agent, dtype=float)])


def lbf_reset(config: LbfConfig, seed: int) -> tuple[LbfState, list[np.ndarray], np.ndarray]:
    config.validate()
    rng = np.random.default_rng(seed)
    g = config.grid_size
    cells = rng.choice(g * g, size=config.n_agents + config.n_foods, replace=False)
    pos = [(int(c) // g, int(c) % g) for c in cells]
    levels = tuple(int(x) for x in rng.integers(1, config.max_player_level + 1, size=config.n_agents))
    # food is always eatable by the whole team
    food_cap = min(config.max_player_level, sum(levels))
    food_levels = [int(x) for x in rng.integers(1, food_cap + 1, size=config.n_foods)]
    foods = tuple(Food(p, lvl) for p, lvl in zip(pos[config.n_agents:], food_levels))
    state = LbfState(config, tuple(pos[:config.n_agents]), levels, foods, sum(food_levels))
    return state, observations(state), global_state(state)


def _adjacent(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


def lbf_step(state: LbfState, joint_action: Sequence[int]
             ) -> tuple[LbfState, list[np.ndarray], float, bool]:
    """Advance one step; returns (next_state, observations, reward, done).

    Eating is resolved against start-of-step positions. A move is cancelled if
    its target is off-grid, holds uneaten food or an agent, or is targeted by
    another agent in the same step.
    """
    cfg = state.config
    if state.done:
        raise LifecycleError("step called on a finished episode")
    if len(joint_action) != cfg.n_agents:
        raise ValueError(f"expected {cfg.n_agents} actions, got {len(joint_action)}")
    actions = [int(a) for a in joint_action]
    if any(a not in range(len(ACTION_NAMES)) for a in actions):
        raise ValueError(f"invalid action in {actions}")

    reward = 0.0
    foods = list(state.foods)
    for k, f in enumerate(foods):
        if f.eaten:
            continue
        eaters = [i for i, a in enumerate(actions) if a == EAT and _adjacent(state.agent_pos[i], f.pos)]
        if eaters and sum(state.agent_levels[i] for i in eaters) >= f.level:
            foods[k] = replace(f, eaten=True)
            reward += f.level / state.total_food_level

    occupied = set(state.agent_pos) | {f.pos for f in state.foods if not f.eaten}
    targets: dict[int, tuple[int, int]] = {}
    for i, a in enumerate(actions):
        if a in MOVES:
            reward -= cfg.move_penalty
            dr, dc = MOVES[a]
            r, c = state.agent_pos[i][0] + dr, state.agent_pos[i][1] + dc
            if 0 <= r < cfg.grid_size and 0 <= c < cfg.grid_size and (r, c) not in occupied:
                targets[i] = (r, c)
    claimed: dict[tuple[int, int], int] = {}
    for t in targets.values():
        claimed[t] = claimed.get(t, 0) + 1
    new_pos = tuple(targets[i] if i in targets and claimed[targets[i]] == 1 else p
                    for i, p in enumerate(state.agent_pos))

    step_count = state.step_count + 1
    done = all(f.eaten for f in foods) or step_count >= cfg.max_episode_length
    nxt = replace(state, agent_pos=new_pos, foods=tuple(foods), step_count=step_count, done=done)
    return nxt, observations(nxt), reward, done


@dataclass
class LbfEnv:
    """Stateful wrapper exposing the interface the learner expects."""

    config: LbfConfig = field(default_factory=LbfConfig)
    state: LbfState | None = None

    n_actions = len(ACTION_NAMES)

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    @property
    def episode_limit(self) -> int:
        return self.config.max_episode_length

    @property
    def window_shape(self) -> tuple[int, int, int] | None:
        return (self.config.window, self.config.window, N_CHANNELS)

    def reset(self, seed: int):
        self.state, obs, s = lbf_reset(self.config, seed)
        return np.stack(obs), s, self.avail_actions()

    def avail_actions(self) -> np.ndarray:
        return np.ones((self.n_agents, self.n_actions))

    def step(self, actions):
        if self.state is None:
            raise LifecycleError("reset() must be called before step()")
        self.state, obs, reward, done = lbf_step(self.state, actions)
        return (np.stack(obs), global_state(self.state), self.avail_actions(),
                reward, done, self.state.truncated)

    def snapshot(self) -> dict:
        return self.state.to_dict() if self.state is not None else {}


def dump_trajectory(records: list[dict], fh: IO[str]) -> None:
    """Write one JSON object per step (JSON-lines)."""
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
