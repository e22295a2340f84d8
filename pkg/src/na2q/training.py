"""Double-DQN training of agent networks, semantics VAE and mixer."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agents import AgentNet, EpsilonSchedule, epsilon_at, select_action
from .buffer import EpisodeBatch, EpisodeRecord, ReplayBuffer
from .checkpoint import FormatError, load_checkpoint, save_checkpoint
from .config import RunConfig, from_mapping, save_config
from .envs import PRESETS as LBF_PRESETS
from .envs import COOPERATIVE_3X3, LbfEnv, MatrixGameEnv
from .mixers import NA2QMixer, build_mixer
from .numerics import DTYPE, NumericError, ParamStore, clip_grad_norm, optimizer_step
from .semantics import SemanticBundle, SemanticsVAE, semantics_loss

log = logging.getLogger(__name__)

METRIC_FIELDS = ("env_step", "episodes", "mean_test_return", "std_test_return", "loss", "epsilon")


def make_env(cfg: RunConfig):
    if cfg.env_name == "matrix":
        return MatrixGameEnv(COOPERATIVE_3X3)
    import dataclasses
    lbf = dataclasses.replace(LBF_PRESETS[cfg.env_preset], max_episode_length=cfg.env_max_episode_length,
                              move_penalty=cfg.env_move_penalty)
    return LbfEnv(lbf)


@dataclass
class LossInfo:
    loss: torch.Tensor
    td_loss: torch.Tensor
    sem_loss: torch.Tensor
    q_tot: torch.Tensor       # (B, T)
    targets: torch.Tensor     # (B, T)
    sem_terms: torch.Tensor   # (B, T)
    filled: torch.Tensor      # (B, T)
    bundle: SemanticBundle | None = None


class Learner:
    """Live and target networks with their parameter stores.

    theta = agent network + mixer (RMSprop), omega = semantics VAE (Adam).
    """

    def __init__(self, cfg: RunConfig, n_agents: int, n_actions: int, obs_dim: int, state_dim: int,
                 seed: int | None = None):
        self.cfg = cfg
        self.n_agents, self.n_actions, self.obs_dim, self.state_dim = n_agents, n_actions, obs_dim, state_dim
        gen = torch.Generator().manual_seed(cfg.run_seed if seed is None else seed)
        self.agent = AgentNet(obs_dim, n_actions, n_agents, cfg.agent_hidden, gen=gen)
        self.uses_semantics = cfg.mixer_kind == "na2q"
        self.vae = (SemanticsVAE(cfg.agent_hidden, obs_dim, cfg.semantics_latent_dim, cfg.semantics_width, gen=gen)
                    if self.uses_semantics else None)
        self.mixer = build_mixer(cfg.mixer_kind, n_agents, state_dim, cfg.semantics_latent_dim,
                                 order_max=min(cfg.mixer_order_max, n_agents), semantics=cfg.mixer_semantics,
                                 attention=cfg.mixer_attention, embed=cfg.mixer_embed, gen=gen)
        self.target_agent = copy.deepcopy(self.agent)
        self.target_vae = copy.deepcopy(self.vae)
        self.target_mixer = copy.deepcopy(self.mixer)
        self.theta = ParamStore.from_modules(agent=self.agent, mixer=self.mixer)
        self.omega = ParamStore.from_modules(vae=self.vae) if self.vae is not None else ParamStore({})
        self.updates = 0

    @classmethod
    def for_env(cls, cfg: RunConfig, env) -> "Learner":
        return cls(cfg, env.n_agents, env.n_actions, env.obs_dim, env.state_dim)

    # -- persistence ------------------------------------------------------------
    def live_modules(self) -> dict:
        mods = {"agent": self.agent, "mixer": self.mixer}
        if self.vae is not None:
            mods["vae"] = self.vae
        return mods

    def target_modules(self) -> dict:
        mods = {"agent": self.target_agent, "mixer": self.target_mixer}
        if self.target_vae is not None:
            mods["vae"] = self.target_vae
        return mods

    def sync_targets(self) -> None:
        for name, mod in self.live_modules().items():
            self.target_modules()[name].load_state_dict(mod.state_dict())

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, mods in (("live", self.live_modules()), ("target", self.target_modules())):
            for name, mod in mods.items():
                for k, p in mod.named_parameters():
                    out[f"{prefix}.{name}.{k}"] = p
        for group, store in (("theta", self.theta), ("omega", self.omega)):
            for pname, slots in store.state.items():
                for slot, t in slots.items():
                    out[f"optim.{group}.{pname}.{slot}"] = t
        return out

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for prefix, mods in (("live", self.live_modules()), ("target", self.target_modules())):
                for name, mod in mods.items():
                    for k, p in mod.named_parameters():
                        key = f"{prefix}.{name}.{k}"
                        if key not in tensors or tensors[key].shape != p.shape:
                            raise FormatError(f"checkpoint is missing or mis-shapes {key}")
                        p.copy_(tensors[key])
        for group, store in (("theta", self.theta), ("omega", self.omega)):
            store.state = {}
            for key, t in tensors.items():
                head = f"optim.{group}."
                if key.startswith(head):
                    pname, _, slot = key[len(head):].rpartition(".")
                    store.state.setdefault(pname, {})[slot] = t.clone()

    # -- forward passes ---------------------------------------------------------
    def unroll(self, agent: AgentNet, batch: EpisodeBatch, steps: int | None = None
               ) -> tuple[torch.Tensor, torch.Tensor]:
        """Agent utilities and hidden states for the first ``steps`` stored steps (default all T+1)."""
        b, t1 = batch.obs.shape[:2]
        t1 = t1 if steps is None else steps
        n = self.n_agents
        last = torch.full((b, n), -1, dtype=torch.long)
        h = agent.init_hidden(b * n)
        qs, hs = [], []
        for t in range(t1):
            inputs = agent.build_inputs(batch.obs[:, t], last)
            q, h = agent(inputs.reshape(b * n, -1), h)
            qs.append(q.view(b, n, -1))
            hs.append(h.view(b, n, -1))
            if t < batch.max_t:
                last = batch.actions[:, t]
        return torch.stack(qs, 1), torch.stack(hs, 1)

    def semantics(self, vae: SemanticsVAE | None, h: torch.Tensor, noise: torch.Tensor | None):
        if vae is None:
            return None
        return vae(h, noise)

    def mix(self, mixer, q_chosen: torch.Tensor, state: torch.Tensor, bundle: SemanticBundle | None):
        b, t, n = q_chosen.shape
        z = None if bundle is None else bundle.z.reshape(b * t, -1)
        out = mixer(q_chosen.reshape(b * t, n), state.reshape(b * t, -1), z)
        return out, out.q_tot.view(b, t)

    def draw_noise(self, batch: EpisodeBatch, rng: np.random.Generator) -> torch.Tensor | None:
        if self.vae is None:
            return None
        shape = (batch.batch_size, batch.max_t, self.n_agents, self.cfg.semantics_latent_dim)
        return torch.as_tensor(rng.standard_normal(shape), dtype=DTYPE)

    def compute_targets(self, batch: EpisodeBatch, q_live: torch.Tensor) -> torch.Tensor:
        """Double-DQN targets: live argmax at t+1, evaluated by the target networks."""
        gamma = self.cfg.loss_gamma
        if gamma == 0.0:
            return batch.reward.clone()
        with torch.no_grad():
            q_tgt, h_tgt = self.unroll(self.target_agent, batch)
            q_next_live = q_live.detach()[:, 1:].masked_fill(batch.avail[:, 1:] == 0, -math.inf)
            greedy = q_next_live.argmax(-1, keepdim=True)
            q_tgt_next = q_tgt[:, 1:].gather(-1, greedy).squeeze(-1)
            bundle = self.semantics(self.target_vae, h_tgt[:, 1:], None)
            _, qtot_next = self.mix(self.target_mixer, q_tgt_next, batch.state[:, 1:], bundle)
            return batch.reward + gamma * (1.0 - batch.terminated) * qtot_next

    def compute_loss(self, batch: EpisodeBatch, noise: torch.Tensor | None) -> LossInfo:
        t = batch.max_t
        # the bootstrap step is only needed when targets look ahead
        q_live, h_live = self.unroll(self.agent, batch, None if self.cfg.loss_gamma else t)
        chosen = q_live[:, :t].gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1)
        y = self.compute_targets(batch, q_live)
        bundle = self.semantics(self.vae, h_live[:, :t], noise)
        _, q_tot = self.mix(self.mixer, chosen, batch.state[:, :-1], bundle)
        mask = batch.filled
        denom = mask.sum().clamp(min=1.0)
        td_loss = ((q_tot - y).pow(2) * mask).sum() / denom
        if bundle is not None:
            sem = semantics_loss(batch.obs[:, :-1], bundle)
            sem_loss = (sem * mask).sum() / denom
        else:
            sem = torch.zeros_like(mask)
            sem_loss = torch.zeros((), dtype=DTYPE)
        loss = td_loss + self.cfg.loss_beta * sem_loss
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"non-finite loss: td={float(td_loss.detach())}, semantics={float(sem_loss.detach())}, "
                               f"max|q_tot|={float(q_tot.detach().abs().max())}, update={self.updates}")
        return LossInfo(loss, td_loss, sem_loss, q_tot, y, sem, mask, bundle)

    def train_step(self, batch: EpisodeBatch, rng: np.random.Generator) -> float:
        cfg = self.cfg
        info = self.compute_loss(batch, self.draw_noise(batch, rng))
        self.theta.zero_grad()
        self.omega.zero_grad()
        info.loss.backward()
        for store, rule, lr in ((self.theta, "rmsprop", cfg.optim_lr_agent), (self.omega, "adam", cfg.optim_lr_vae)):
            if len(store) == 0:
                continue
            grads = store.grads()
            if cfg.optim_grad_clip > 0:
                clip_grad_norm(grads, cfg.optim_grad_clip)
            optimizer_step(store, grads, rule, lr, alpha=cfg.optim_rms_alpha, eps=cfg.optim_eps,
                           weight_decay=cfg.optim_weight_decay)
        self.updates += 1
        if self.updates % cfg.train_target_interval == 0:
            self.sync_targets()
        return float(info.loss.detach())

    # -- acting -------------------------------------------------------------------
    def act_step(self, obs: np.ndarray, last: torch.Tensor, h: torch.Tensor):
        with torch.no_grad():
            inputs = self.agent.build_inputs(torch.as_tensor(obs, dtype=DTYPE)[None], last[None])[0]
            q, h = self.agent(inputs, h)
        return q, h

    def masks_at_mean(self, h: torch.Tensor) -> np.ndarray | None:
        if self.vae is None:
            return None
        with torch.no_grad():
            return self.vae(h).mask.numpy()


def rollout(env, learner: Learner, epsilon: float, rng: np.random.Generator, seed: int,
            record_masks: bool = True, record_states: bool = False) -> EpisodeRecord:
    obs, state, avail = env.reset(seed)
    n = env.n_agents
    h = learner.agent.init_hidden(n)
    last = torch.full((n,), -1, dtype=torch.long)
    obs_l, state_l, avail_l, act_l, rew_l, term_l, masks, states = [obs], [state], [avail], [], [], [], [], []
    if record_states:
        states.append(env.snapshot())
    for _ in range(env.episode_limit):
        q, h = learner.act_step(obs, last, h)
        if record_masks:
            m = learner.masks_at_mean(h)
            if m is not None:
                masks.append(m)
        actions = [select_action(q[i].numpy(), avail[i], epsilon, rng) for i in range(n)]
        obs, state, avail, reward, done, truncated = env.step(actions)
        obs_l.append(obs)
        state_l.append(state)
        avail_l.append(avail)
        act_l.append(actions)
        rew_l.append(reward)
        term_l.append(done and not truncated)
        if record_states:
            states.append(env.snapshot())
        last = torch.as_tensor(actions, dtype=torch.long)
        if done:
            break
    return EpisodeRecord(np.stack(obs_l), np.stack(state_l), np.stack(avail_l), np.asarray(act_l, dtype=np.int64),
                         np.asarray(rew_l, dtype=float), np.asarray(term_l, dtype=bool), masks, states)


def greedy_episodes(learner: Learner, env, n_episodes: int, rng: np.random.Generator,
                    record_states: bool = False) -> list[tuple[int, EpisodeRecord]]:
    """(env seed, episode) pairs for ``n_episodes`` freshly seeded greedy episodes."""
    out = []
    for _ in range(n_episodes):
        seed = int(rng.integers(2 ** 31))
        out.append((seed, rollout(env, learner, 0.0, rng, seed, record_masks=False,
                                  record_states=record_states)))
    return out


def evaluate(learner: Learner, env, n_episodes: int, rng: np.random.Generator) -> tuple[float, float, list[float]]:
    """Greedy returns over freshly seeded episodes: (mean, population std, returns)."""
    returns = [ep.episode_return for _, ep in greedy_episodes(learner, env, n_episodes, rng)]
    arr = np.asarray(returns)
    return float(arr.mean()), float(arr.std()), returns


@dataclass
class RunResult:
    out_dir: Path
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    learner: Learner | None = None


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def save_learner(path: Path, learner: Learner, meta: dict) -> None:
    save_checkpoint(path, learner.tensors(), learner.cfg.to_flat(),
                    {**meta, "updates": learner.updates, "theta_steps": learner.theta.step_count,
                     "omega_steps": learner.omega.step_count})


def load_learner(path: str | Path) -> tuple[Learner, dict]:
    tensors, flat, meta = load_checkpoint(path)
    cfg = from_mapping(flat)
    learner = Learner.for_env(cfg, make_env(cfg))
    learner.load_tensors(tensors)
    learner.updates = int(meta.get("updates", 0))
    learner.theta.step_count = int(meta.get("theta_steps", 0))
    learner.omega.step_count = int(meta.get("omega_steps", 0))
    return learner, meta


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def train_run(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Run training to ``train.total_steps`` env steps, logging and checkpointing at eval points."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.run_out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    save_config(cfg, out / "config.yaml")

    env = make_env(cfg)
    eval_env = make_env(cfg)
    learner = Learner.for_env(cfg, env)
    rng = np.random.default_rng([cfg.run_seed, 0])
    eval_rng = np.random.default_rng([cfg.run_seed, 1])
    buffer = ReplayBuffer(cfg.buffer_capacity, env.episode_limit, env.n_agents, env.obs_dim, env.state_dim,
                          env.n_actions)
    schedule = EpsilonSchedule(cfg.explore_eps_start, cfg.explore_eps_finish, cfg.explore_eps_anneal_steps)
    result = RunResult(out, learner=learner)

    # episodes stored before the first update; never fewer than one batch
    warmup = max(cfg.train_batch_size, cfg.train_learning_starts)
    t_env, episodes, last_eval = 0, 0, 0
    losses: list[float] = []

    def checkpoint(tag: int) -> None:
        path = out / f"checkpoint_{tag}.ckpt"
        save_learner(path, learner, {"env_step": t_env, "episodes": episodes,
                                     "rng": _rng_state(rng), "eval_rng": _rng_state(eval_rng)})
        result.checkpoints.append(path)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        checkpoint(0)
        while t_env < cfg.train_total_steps:
            eps = epsilon_at(schedule, t_env)
            ep = rollout(env, learner, eps, rng, int(rng.integers(2 ** 31)), record_masks=False)
            buffer.insert(ep)
            t_env += len(ep)
            episodes += 1
            if len(buffer) >= warmup:
                losses.append(learner.train_step(buffer.sample(cfg.train_batch_size, rng), rng))
            final = t_env >= cfg.train_total_steps
            if t_env - last_eval >= cfg.eval_interval or final:
                mean, std, _ = evaluate(learner, eval_env, cfg.eval_episodes, eval_rng)
                row = {"env_step": t_env, "episodes": episodes, "mean_test_return": mean,
                       "std_test_return": std, "loss": float(np.mean(losses)) if losses else float("nan"),
                       "epsilon": eps}
                writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
                fh.flush()
                result.metrics.append(row)
                log.info("step %d  return %.4f +- %.4f  loss %.5f  eps %.3f", t_env, mean, std,
                         row["loss"], eps)
                losses = []
                last_eval = t_env
                checkpoint(t_env)
    return result
