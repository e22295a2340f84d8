"""Fixed-seed property suites behind ``na2q verify``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .buffer import EpisodeBatch
from .config import RunConfig
from .envs import LbfConfig, LbfState, lbf_step
from .envs.lbf import EAT, Food
from .envs.matrix_game import matrix_enumerate
from .mixers import MonotonicMixer, NA2QMixer, enumerate_terms, n_terms
from .numerics import DTYPE, Affine, GRUCell, affine, elu, grad_check, softmax
from .semantics import SemanticBundle, mask_penalty, vae_loss
from .training import Learner

TOY_CONFIG = RunConfig(agent_hidden=8, semantics_latent_dim=3, semantics_width=6, mixer_embed=5,
                       loss_gamma=0.9, train_target_interval=1)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def toy_problem(seed: int, n_agents: int = 2, n_actions: int = 3, obs_dim: int = 4, state_dim: int = 3,
                max_t: int = 2, batch: int = 3, cfg: RunConfig = TOY_CONFIG):
    """A small learner with perturbed target networks and a random padded episode batch."""
    rng = np.random.default_rng(seed)
    learner = Learner(cfg.replace(run_seed=seed), n_agents, n_actions, obs_dim, state_dim)
    with torch.no_grad():
        for mod in learner.target_modules().values():
            for p in mod.parameters():
                p.add_(torch.as_tensor(0.05 * rng.standard_normal(tuple(p.shape)), dtype=DTYPE))
    lengths = rng.integers(1, max_t + 1, size=batch)
    lengths[0] = max_t
    filled = (np.arange(max_t)[None] < lengths[:, None]).astype(float)
    terminated = np.zeros((batch, max_t))
    for b, L in enumerate(lengths):
        terminated[b, L - 1] = float(rng.random() < 0.5)
    data = EpisodeBatch.from_arrays(
        rng.integers(0, 4, size=(batch, max_t + 1, n_agents, obs_dim)).astype(float),
        rng.standard_normal((batch, max_t + 1, state_dim)),
        np.ones((batch, max_t + 1, n_agents, n_actions)),
        rng.integers(0, n_actions, size=(batch, max_t, n_agents)),
        rng.standard_normal((batch, max_t)) * filled,
        terminated, filled)
    noise = learner.draw_noise(data, rng)
    return learner, data, noise


def random_na2q(rng: np.random.Generator, n: int, order: int, state_dim: int = 4, latent: int = 3,
                embed: int = 6) -> NA2QMixer:
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
    mixer = NA2QMixer(n, state_dim, latent, order_max=order, embed=embed, gen=gen)
    with torch.no_grad():
        for p in mixer.parameters():
            p.mul_(float(rng.uniform(0.5, 3.0)))
    return mixer


def min_fd_slope(mixer, q: torch.Tensor, s: torch.Tensor, z: torch.Tensor | None, h: float = 1e-3) -> float:
    """Smallest forward-difference partial dQ_tot/dQ_i over agents and batch rows."""
    with torch.no_grad():
        base = mixer(q, s, z).q_tot
        worst = np.inf
        for i in range(q.shape[1]):
            qp = q.clone()
            qp[:, i] += h
            worst = min(worst, float(((mixer(qp, s, z).q_tot - base) / h).min()))
    return worst


def greedy_matches_enumeration(mixer, q_tables: np.ndarray, s: torch.Tensor, z: torch.Tensor | None) -> bool:
    """Per-agent argmax tuple equals the brute-force joint argmax of Q_tot."""
    n, a = q_tables.shape

    def qtot(u):
        q = torch.as_tensor([[q_tables[i, u[i]] for i in range(n)]], dtype=DTYPE)
        with torch.no_grad():
            return float(mixer(q, s, z).q_tot[0])

    best, _ = matrix_enumerate(n, a, qtot)
    return best == tuple(int(np.argmax(q_tables[i])) for i in range(n))


def suite_numerics(trials: int = 10) -> list[Check]:
    rng = np.random.default_rng(0)
    worst = {"affine": 0.0, "affine_abs": 0.0, "gru": 0.0, "softmax": 0.0, "shape_mlp": 0.0}
    for _ in range(trials):
        b, i, o = (int(x) for x in rng.integers(1, 5, size=3))
        x = torch.as_tensor(rng.standard_normal((b, i)), dtype=DTYPE).requires_grad_()
        lin = Affine(i, o, gen=torch.Generator().manual_seed(int(rng.integers(1 << 30))))
        proj = torch.as_tensor(rng.standard_normal((b, o)), dtype=DTYPE)
        params = [x, lin.weight, lin.bias]
        worst["affine"] = max(worst["affine"], grad_check(lambda: (elu(lin(x)) * proj).sum(), params))
        worst["affine_abs"] = max(worst["affine_abs"], grad_check(
            lambda: (elu(affine(x, lin.weight, lin.bias, "absolute")) * proj).sum(), params))
        cell = GRUCell(i, o, gen=torch.Generator().manual_seed(int(rng.integers(1 << 30))))
        h = torch.as_tensor(rng.uniform(-0.9, 0.9, (b, o)), dtype=DTYPE).requires_grad_()
        worst["gru"] = max(worst["gru"], grad_check(lambda: (cell(x, h) * proj).sum(),
                                                    [x, h, *cell.parameters()]))
        v = torch.as_tensor(rng.standard_normal(o + 1), dtype=DTYPE).requires_grad_()
        wv = torch.as_tensor(rng.standard_normal(o + 1), dtype=DTYPE)
        worst["softmax"] = max(worst["softmax"], grad_check(lambda: (softmax(v) * wv).sum(), [v]))
        mixer = random_na2q(rng, 3, 2)
        q = torch.as_tensor(rng.standard_normal((b, 3)), dtype=DTYPE).requires_grad_()
        worst["shape_mlp"] = max(worst["shape_mlp"], grad_check(
            lambda: mixer.shapes(q).sum(), [q, *mixer.shapes.parameters()]))
    checks = [Check(f"grad_check {k}", v < 1e-4, f"max rel err {v:.2e} over {trials} trials")
              for k, v in worst.items()]
    learner, batch, noise = toy_problem(1)
    params = list(learner.theta.params.values()) + list(learner.omega.params.values())
    err = grad_check(lambda: learner.compute_loss(batch, noise).loss, params, max_probes=8)
    checks.append(Check("grad_check combined loss", err < 1e-4, f"max rel err {err:.2e}"))
    return checks


def suite_igm(draws: int = 200, games: int = 50) -> list[Check]:
    rng = np.random.default_rng(1)
    worst = np.inf
    for _ in range(draws):
        n = int(rng.integers(2, 5))
        order = int(rng.integers(1, min(n, 3) + 1))
        mixer = random_na2q(rng, n, order)
        q = torch.as_tensor(rng.normal(0, 3, (8, n)), dtype=DTYPE)
        s = torch.as_tensor(rng.standard_normal((8, 4)), dtype=DTYPE)
        z = torch.as_tensor(rng.standard_normal((8, n * 3)), dtype=DTYPE)
        worst = min(worst, min_fd_slope(mixer, q, s, z))
    mono = MonotonicMixer(3, 4, gen=torch.Generator().manual_seed(3))
    q = torch.as_tensor(rng.normal(0, 3, (64, 3)), dtype=DTYPE)
    s = torch.as_tensor(rng.standard_normal((64, 4)), dtype=DTYPE)
    worst_mono = min_fd_slope(mono, q, s, None)
    agree = 0
    for _ in range(games):
        mixer = random_na2q(rng, 2, 2)
        tables = rng.normal(0, 1, (2, 3))
        s = torch.as_tensor(rng.standard_normal((1, 4)), dtype=DTYPE)
        z = torch.as_tensor(rng.standard_normal((1, 6)), dtype=DTYPE)
        agree += greedy_matches_enumeration(mixer, tables, s, z)
    return [
        Check("na2q monotonicity", worst >= -1e-9, f"min finite-difference slope {worst:.3e} over {draws} draws"),
        Check("monotonic-mixer monotonicity", worst_mono >= -1e-9, f"min slope {worst_mono:.3e}"),
        Check("matrix-game greedy = joint argmax", agree == games, f"{agree}/{games} games"),
    ]


def suite_credits(evals: int = 1000) -> list[Check]:
    rng = np.random.default_rng(2)
    mixer = random_na2q(rng, 3, 2)
    s = torch.as_tensor(rng.normal(0, 2, (evals, 4)), dtype=DTYPE)
    z = torch.as_tensor(rng.normal(0, 2, (evals, 9)), dtype=DTYPE)
    with torch.no_grad():
        alpha = mixer.credits(s, z)
        scores = mixer.scores(s, z)
        shifted = softmax(scores + torch.as_tensor(rng.normal(0, 50, (evals, 1)), dtype=DTYPE))
    sum_err = float((alpha.sum(-1) - 1).abs().max())
    shift_err = float((shifted - alpha).abs().max())
    return [
        Check("credits positive", bool((alpha > 0).all()), f"min credit {float(alpha.min()):.3e}"),
        Check("credits sum to one", sum_err <= 1e-12, f"max |sum-1| {sum_err:.2e}"),
        Check("softmax shift invariance", shift_err <= 1e-12, f"max deviation {shift_err:.2e}"),
    ]


def suite_oracle(instances: int = 100) -> list[Check]:
    rng = np.random.default_rng(3)
    worst_vae = worst_l1 = 0.0
    for _ in range(instances):
        n, d, k = (int(x) for x in rng.integers(1, 6, size=3))
        o = rng.normal(0, 2, (n, d))
        mu = rng.normal(0, 1, (n, k))
        lv = rng.normal(0, 1, (n, k))
        m = rng.uniform(0.01, 0.99, (n, d))
        t = lambda a: torch.as_tensor(a, dtype=DTYPE)  # noqa: E731
        bundle = SemanticBundle(t(mu), t(lv), t(mu), t(m))
        recon = sum(float(np.dot(o[i] - m[i] * o[i], o[i] - m[i] * o[i])) for i in range(n))
        sig2 = np.exp(lv)
        kl = 0.5 * float(np.sum(mu ** 2 + sig2 - 1.0 - np.log(sig2)))
        worst_vae = max(worst_vae, abs(float(vae_loss(t(o), bundle)) - (recon + kl)))
        worst_l1 = max(worst_l1, abs(float(mask_penalty(bundle)) - float(np.abs(m).sum())))
    cfg = LbfConfig(n_agents=2, n_foods=1)
    st = LbfState(cfg, ((4, 4), (5, 5)), (2, 1), (Food((4, 5), 3),), total_food_level=3)
    nxt, _, r, done = lbf_step(st, [EAT, EAT])
    best, _ = matrix_enumerate(2, 2, lambda u: [[1.0, 0.0], [0.0, 2.0]][u[0]][u[1]])
    return [
        Check("VAE loss vs closed form", worst_vae <= 1e-10, f"max abs diff {worst_vae:.2e}"),
        Check("mask L1 vs elementwise sum", worst_l1 <= 1e-10, f"max abs diff {worst_l1:.2e}"),
        Check("cooperative eat reward", abs(r - 1.0) < 1e-12 and nxt.foods[0].eaten and done, f"reward {r}"),
        Check("matrix enumeration argmax", best == (1, 1), f"argmax {best}"),
        Check("term counts", all(len(enumerate_terms(n, l)) == n_terms(n, l)
                                 for n in range(1, 9) for l in range(1, min(n, 3) + 1)), "n <= 8, l <= 3"),
    ]


SUITES: dict[str, Callable[[], list[Check]]] = {
    "numerics": suite_numerics,
    "igm": suite_igm,
    "credits": suite_credits,
    "oracle": suite_oracle,
}
