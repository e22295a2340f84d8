"""Identity-semantics VAE: hidden state -> Gaussian latent -> observation mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, Affine, NumericError, relu, sigmoid

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass
class SemanticBundle:
    mu: torch.Tensor
    log_var: torch.Tensor
    z: torch.Tensor
    mask: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class SemanticsVAE(nn.Module):
    """Encoder and decoder are each two affine layers with a 32-wide ReLU hidden layer."""

    def __init__(self, hidden_dim: int, obs_dim: int, latent_dim: int = 16, width: int = 32,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.hidden_dim, self.obs_dim, self.latent_dim = hidden_dim, obs_dim, latent_dim
        self.enc1 = Affine(hidden_dim, width, gen=gen)
        self.enc2 = Affine(width, 2 * latent_dim, gen=gen)
        self.dec1 = Affine(latent_dim, width, gen=gen)
        self.dec2 = Affine(width, obs_dim, gen=gen)

    def encode(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.enc2(relu(self.enc1(h)))
        mu, log_var = out.split(self.latent_dim, dim=-1)
        return mu, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    def decode_mask(self, z: torch.Tensor) -> torch.Tensor:
        return sigmoid(self.dec2(relu(self.dec1(z))))

    def forward(self, h: torch.Tensor, noise: torch.Tensor | None = None) -> SemanticBundle:
        """``noise=None`` uses the latent mean (evaluation and explanation)."""
        mu, log_var = self.encode(h)
        z = mu if noise is None else reparameterize(mu, log_var, noise)
        return SemanticBundle(mu, log_var, z, self.decode_mask(z))


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * log_var) * noise


def sample_z(mu: torch.Tensor, log_var: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    noise = torch.as_tensor(rng.standard_normal(tuple(mu.shape)), dtype=DTYPE)
    return reparameterize(mu, log_var, noise)


def kl_to_standard_normal(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    return 0.5 * (mu.pow(2) + (torch.expm1(log_var) - log_var)).sum(-1)


def vae_loss(obs: torch.Tensor, bundle: SemanticBundle) -> torch.Tensor:
    """Masked-overlay reconstruction error plus KL, summed over agents.

    ``obs`` has shape (..., n_agents, obs_dim); the result has the leading
    shape ``...`` (a scalar for a single (n_agents, obs_dim) instance).
    """
    recon = (obs - bundle.mask * obs).pow(2).sum(-1)
    out = (recon + kl_to_standard_normal(bundle.mu, bundle.log_var)).sum(-1)
    if not bool(torch.isfinite(out).all()):
        raise NumericError("non-finite VAE loss")
    return out


def mask_penalty(bundle: SemanticBundle) -> torch.Tensor:
    """L1 norm of every agent's mask, summed over agents."""
    return bundle.mask.abs().sum(-1).sum(-1)


def semantics_loss(obs: torch.Tensor, bundle: SemanticBundle) -> torch.Tensor:
    return vae_loss(obs, bundle) + mask_penalty(bundle)
