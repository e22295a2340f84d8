"""Mixing networks: the additive shape-function mixer and two baselines.

All mixers return a :class:`MixerOutput` in the common additive-credit form

    q_tot = bias + sum_k credits[k] * shape_k(...)

with ``contributions[k] = credits[k] * shape_k(...)`` exposed per term.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import torch
from torch import nn

from .numerics import DTYPE, Affine, DimensionError, elu, relu, softmax, uniform_init

SHAPE_WIDTHS = (8, 4)
MAX_ORDER = 3


class ConfigError(ValueError):
    pass


@dataclass
class MixerOutput:
    q_tot: torch.Tensor          # (B,)
    credits: torch.Tensor        # (B, m)
    contributions: torch.Tensor  # (B, m)
    bias: torch.Tensor           # (B,)

    def audit(self) -> float:
        """Largest |q_tot - bias - sum(contributions)| over the batch."""
        resid = (self.q_tot - self.bias - self.contributions.sum(-1)).detach()
        return float(resid.abs().max()) if resid.numel() else 0.0


def enumerate_terms(n: int, l_max: int) -> list[tuple[int, ...]]:
    """All agent subsets of size 1..l_max, ordered by size then lexicographically (0-based)."""
    if n < 1:
        raise ConfigError("need at least one agent")
    if not 1 <= l_max <= min(n, MAX_ORDER):
        raise ConfigError(f"order cap {l_max} outside [1, {min(n, MAX_ORDER)}] for {n} agents")
    return [t for size in range(1, l_max + 1) for t in itertools.combinations(range(n), size)]


def n_terms(n: int, l_max: int) -> int:
    return sum(comb(n, k) for k in range(1, l_max + 1))


class _OrderBlock(nn.Module):
    """Shape MLPs [order -> 8 -> 4 -> 1] for every term of one order, batched."""

    def __init__(self, terms: list[tuple[int, ...]], gen: torch.Generator | None):
        super().__init__()
        order = len(terms[0])
        self.register_buffer("index", torch.tensor(terms, dtype=torch.long), persistent=False)
        widths = (order, *SHAPE_WIDTHS, 1)
        m = len(terms)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            w = nn.Parameter(torch.empty(m, w_in, w_out, dtype=DTYPE))
            b = nn.Parameter(torch.empty(m, w_out, dtype=DTYPE))
            uniform_init(w, w_in, gen)
            uniform_init(b, w_in, gen)
            self.weights.append(w)
            self.biases.append(b)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        x = q[:, self.index].transpose(0, 1)  # (m, B, order)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.baddbmm(b.unsqueeze(1), x, w.abs())
            if i < last:
                x = elu(x)
        return x[..., 0].transpose(0, 1)


class ShapeFunctions(nn.Module):
    """One monotone shape function per term, evaluated together."""

    def __init__(self, terms: list[tuple[int, ...]], gen: torch.Generator | None = None):
        super().__init__()
        self.terms = list(terms)
        orders = sorted({len(t) for t in terms})
        self.blocks = nn.ModuleList(_OrderBlock([t for t in terms if len(t) == o], gen) for o in orders)
        self.identity = False

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        if self.identity:
            return torch.stack([q[:, list(t)].sum(-1) for t in self.terms], dim=-1)
        return torch.cat([blk(q) for blk in self.blocks], dim=-1)

    def term_forward(self, k: int, q_subset) -> torch.Tensor:
        """Evaluate term ``k`` on its own inputs; ``q_subset`` is (|D_k|,) or (B, |D_k|)."""
        term = self.terms[k]
        q_subset = torch.as_tensor(q_subset, dtype=DTYPE)
        single = q_subset.dim() == 1
        x = q_subset[None] if single else q_subset
        if x.shape[-1] != len(term):
            raise DimensionError(f"term {term} takes {len(term)} inputs, got {x.shape[-1]}")
        if self.identity:
            out = x.sum(-1)
        else:
            order = len(term)
            blk = next(b for b in self.blocks if b.index.shape[1] == order)
            j = [tuple(r) for r in blk.index.tolist()].index(term)
            last = len(blk.weights) - 1
            for i, (w, b) in enumerate(zip(blk.weights, blk.biases)):
                x = x @ w[j].abs() + b[j]
                if i < last:
                    x = elu(x)
            out = x[..., 0]
        return out[0] if single else out


class NA2QMixer(nn.Module):
    """Additive mixer with monotone shape functions and attention credits.

    Credits come from a shared query relu(w_s s) dotted with one key per term,
    w_z^(k) z, followed by a softmax over terms. With ``semantics=False`` the
    keys read the global state instead of the agents' latents; with
    ``attention=False`` credits are uniform.
    """

    def __init__(self, n_agents: int, state_dim: int, latent_dim: int, order_max: int = 2,
                 semantics: bool = True, attention: bool = True, embed: int = 64,
                 bias_hidden: int = 64, gen: torch.Generator | None = None):
        super().__init__()
        self.n_agents, self.state_dim, self.latent_dim = n_agents, state_dim, latent_dim
        self.order_max, self.semantics, self.attention, self.embed = order_max, semantics, attention, embed
        self.terms = enumerate_terms(n_agents, order_max)
        self.n_terms = len(self.terms)
        self.shapes = ShapeFunctions(self.terms, gen)
        self.bias1 = Affine(state_dim, bias_hidden, gen=gen)
        self.bias2 = Affine(bias_hidden, 1, gen=gen)
        key_in = n_agents * latent_dim if semantics else state_dim
        self.w_s = Affine(state_dim, embed, gen=gen)
        self.w_z = Affine(key_in, self.n_terms * embed, gen=gen)
        # test-harness hooks, never used for training
        self.fixed_credits: torch.Tensor | None = None
        self.zero_bias = False

    def freeze_identity(self, credits: float | torch.Tensor | None = None, zero_bias: bool = True) -> "NA2QMixer":
        """Identity-sum shape functions, optional constant credits, f_0 = 0."""
        self.shapes.identity = True
        if credits is not None:
            self.fixed_credits = torch.as_tensor(credits, dtype=DTYPE).expand(self.n_terms).clone()
        self.zero_bias = zero_bias
        return self

    def f0(self, s: torch.Tensor) -> torch.Tensor:
        if self.zero_bias:
            return torch.zeros(s.shape[0], dtype=DTYPE)
        return self.bias2(relu(self.bias1(s)))[:, 0]

    def scores(self, s: torch.Tensor, z_all: torch.Tensor | None) -> torch.Tensor:
        keys_in = z_all if self.semantics else s
        if keys_in is None:
            raise DimensionError("semantics-conditioned credits need z_all")
        query = relu(self.w_s(s))                                    # (B, E)
        keys = self.w_z(keys_in).view(-1, self.n_terms, self.embed)  # (B, m, E)
        return torch.bmm(keys, query.unsqueeze(-1)).squeeze(-1)

    def credits(self, s: torch.Tensor, z_all: torch.Tensor | None) -> torch.Tensor:
        b = s.shape[0]
        if self.fixed_credits is not None:
            return self.fixed_credits.expand(b, self.n_terms)
        if not self.attention:
            return torch.full((b, self.n_terms), 1.0 / self.n_terms, dtype=DTYPE)
        return softmax(self.scores(s, z_all), dim=-1)

    def forward(self, q: torch.Tensor, s: torch.Tensor, z_all: torch.Tensor | None = None) -> MixerOutput:
        if q.dim() != 2 or q.shape[1] != self.n_agents:
            raise DimensionError(f"q_locals {tuple(q.shape)} vs {self.n_agents} agents")
        if s.dim() != 2 or s.shape != (q.shape[0], self.state_dim):
            raise DimensionError(f"state {tuple(s.shape)} vs expected (B, {self.state_dim})")
        if self.semantics and z_all is not None and z_all.shape != (q.shape[0], self.n_agents * self.latent_dim):
            raise DimensionError(f"z_all {tuple(z_all.shape)}")
        shape_vals = self.shapes(q)
        alpha = self.credits(s, z_all)
        contrib = alpha * shape_vals
        bias = self.f0(s)
        return MixerOutput(bias + contrib.sum(-1), alpha, contrib, bias)


class VDNMixer(nn.Module):
    n_state_inputs = 0

    def __init__(self, n_agents: int):
        super().__init__()
        self.n_agents = n_agents
        self.terms = [(i,) for i in range(n_agents)]
        self.n_terms = n_agents

    def forward(self, q: torch.Tensor, s: torch.Tensor | None = None, z_all=None) -> MixerOutput:
        return vdn_mix(q)


def vdn_mix(q: torch.Tensor) -> MixerOutput:
    q = torch.as_tensor(q, dtype=DTYPE)
    if q.dim() == 1:
        q = q[None]
    if q.shape[-1] < 1:
        raise DimensionError("vdn_mix needs at least one agent")
    return MixerOutput(q.sum(-1), torch.ones_like(q), q, torch.zeros(q.shape[0], dtype=DTYPE))


class MonotonicMixer(nn.Module):
    """Two-layer mixing with state-conditioned non-negative weights.

    In the additive form the embedding units are the terms: hidden unit k is
    elu(q . |W1(s)|_k + b1(s)_k), its credit is |w2(s)_k|, and the bias is
    the state value V(s).
    """

    def __init__(self, n_agents: int, state_dim: int, embed: int = 32, hyper_hidden: int = 64,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.n_agents, self.state_dim, self.embed = n_agents, state_dim, embed
        self.hyper_w1 = Affine(state_dim, n_agents * embed, gen=gen)
        self.hyper_b1 = Affine(state_dim, embed, gen=gen)
        self.hyper_w2 = Affine(state_dim, embed, gen=gen)
        self.value1 = Affine(state_dim, hyper_hidden, gen=gen)
        self.value2 = Affine(hyper_hidden, 1, gen=gen)
        self.terms = [tuple(range(n_agents))] * embed
        self.n_terms = embed
        self.identity_sum = False

    def forward(self, q: torch.Tensor, s: torch.Tensor, z_all=None) -> MixerOutput:
        if self.identity_sum:
            return vdn_mix(q)
        b = q.shape[0]
        w1 = self.hyper_w1(s).abs().view(b, self.n_agents, self.embed)
        hidden = elu(torch.einsum("bn,bne->be", q, w1) + self.hyper_b1(s))
        w2 = self.hyper_w2(s).abs()
        bias = self.value2(relu(self.value1(s)))[:, 0]
        contrib = w2 * hidden
        return MixerOutput(bias + contrib.sum(-1), w2, contrib, bias)


def build_mixer(kind: str, n_agents: int, state_dim: int, latent_dim: int, *, order_max: int = 2,
                semantics: bool = True, attention: bool = True, embed: int = 64,
                gen: torch.Generator | None = None) -> nn.Module:
    if kind == "na2q":
        return NA2QMixer(n_agents, state_dim, latent_dim, order_max, semantics, attention, embed, gen=gen)
    if kind == "vdn":
        return VDNMixer(n_agents)
    if kind == "monotonic":
        return MonotonicMixer(n_agents, state_dim, gen=gen)
    raise ConfigError(f"unknown mixer {kind!r}")
