import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from na2q.numerics import DTYPE, NumericError, grad_check
from na2q.semantics import (LOG_VAR_MIN, SemanticBundle, SemanticsVAE, kl_to_standard_normal, mask_penalty,
                            sample_z, semantics_loss, vae_loss)


def t(a, grad=False):
    x = torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)
    return x.requires_grad_() if grad else x


def vae(seed=0, hidden=8, obs=6, latent=3, width=5):
    return SemanticsVAE(hidden, obs, latent, width, gen=torch.Generator().manual_seed(seed))


def zeroed(v):
    with torch.no_grad():
        for p in v.parameters():
            p.zero_()
    return v


def test_default_latent_and_width():
    v = SemanticsVAE(64, 76)
    assert v.latent_dim == 16 and v.enc1.weight.shape == (64, 32)


def test_zero_params_encode_standard_normal():
    mu, lv = zeroed(vae()).encode(torch.zeros(2, 8, dtype=DTYPE))
    assert torch.equal(mu, torch.zeros_like(mu)) and torch.equal(lv, torch.zeros_like(lv))
    assert torch.equal(SemanticBundle(mu, lv, mu, mu).sigma, torch.ones_like(mu))


def test_zero_params_mask_is_half():
    m = zeroed(vae()).decode_mask(torch.randn(4, 3, dtype=DTYPE))
    assert torch.equal(m, torch.full_like(m, 0.5))


def test_encode_deterministic_and_sigma_positive():
    v = vae()
    h = torch.randn(5, 8, dtype=DTYPE) * 100
    a, b = v.encode(h), v.encode(h)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert bool((SemanticBundle(a[0], a[1], a[0], a[0]).sigma > 0).all())
    assert float(a[1].detach().min()) >= LOG_VAR_MIN


def test_sample_z_collapses_at_clamped_log_var():
    mu = t([[0.3, -1.2]])
    z = sample_z(mu, t([[LOG_VAR_MIN, LOG_VAR_MIN]]), np.random.default_rng(0))
    assert torch.allclose(z, mu, atol=5e-2)


def test_sample_z_moments():
    rng = np.random.default_rng(3)
    n = 10_000
    z = sample_z(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE), rng).numpy()
    assert abs(z.mean()) <= 3 / np.sqrt(n)
    assert abs(z.var() - 1) <= 3 * np.sqrt(2 / n)


def test_sample_z_reproducible():
    a = sample_z(torch.zeros(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE), np.random.default_rng(9))
    b = sample_z(torch.zeros(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE), np.random.default_rng(9))
    assert torch.equal(a, b)


def test_mask_in_open_unit_interval_and_monotone():
    v = vae()
    z = torch.randn(20, 3, dtype=DTYPE)
    m = v.decode_mask(z)
    assert bool(((m > 0) & (m < 1)).all())
    with torch.no_grad():
        v.dec2.bias.zero_()
        prev = None
        for c in (0.0, 1.0, 5.0, 20.0):
            v.dec2.bias.fill_(c)
            cur = v.decode_mask(z)
            if prev is not None:
                assert bool((cur >= prev).all())
            prev = cur
    assert float(prev.min()) > 0.999


def test_forward_without_noise_uses_mean():
    v = vae()
    h = torch.randn(2, 8, dtype=DTYPE)
    b = v(h)
    assert torch.equal(b.z, b.mu)


def test_vae_loss_perfect_overlay_is_zero():
    o = t(np.random.default_rng(0).standard_normal((3, 6)))
    b = SemanticBundle(torch.zeros(3, 2, dtype=DTYPE), torch.zeros(3, 2, dtype=DTYPE),
                       torch.zeros(3, 2, dtype=DTYPE), torch.ones(3, 6, dtype=DTYPE))
    assert float(vae_loss(o, b)) == 0.0


def test_zero_observation_no_reconstruction_error():
    rng = np.random.default_rng(1)
    b = SemanticBundle(torch.zeros(2, 2, dtype=DTYPE), torch.zeros(2, 2, dtype=DTYPE),
                       torch.zeros(2, 2, dtype=DTYPE), t(rng.uniform(0, 1, (2, 4))))
    assert float(vae_loss(torch.zeros(2, 4, dtype=DTYPE), b)) == 0.0


def oracle_loss(o, mu, lv, m):
    total = 0.0
    for i in range(o.shape[0]):
        for j in range(o.shape[1]):
            total += (o[i, j] - m[i, j] * o[i, j]) ** 2
        for k in range(mu.shape[1]):
            total += 0.5 * (mu[i, k] ** 2 + np.exp(lv[i, k]) - 1.0 - lv[i, k])
    return total


def test_vae_loss_matches_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n, d, k = (int(x) for x in rng.integers(1, 6, size=3))
        o, mu, lv = rng.normal(0, 2, (n, d)), rng.standard_normal((n, k)), rng.standard_normal((n, k))
        m = rng.uniform(0.01, 0.99, (n, d))
        got = float(vae_loss(t(o), SemanticBundle(t(mu), t(lv), t(mu), t(m))))
        assert got == pytest.approx(oracle_loss(o, mu, lv, m), abs=1e-10)


def test_mask_penalty_values():
    half = SemanticBundle(None, None, None, torch.full((3, 10), 0.5, dtype=DTYPE))
    assert float(mask_penalty(half)) == 15.0
    tiny = SemanticBundle(None, None, None, torch.full((3, 10), 1e-12, dtype=DTYPE))
    assert float(mask_penalty(tiny)) < 1e-10
    m = np.random.default_rng(2).uniform(0, 1, (4, 7))
    assert float(mask_penalty(SemanticBundle(None, None, None, t(m)))) == pytest.approx(
        sum(abs(v) for v in m.ravel()), abs=1e-12)


def test_kl_zero_only_at_standard_normal():
    assert float(kl_to_standard_normal(torch.zeros(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))) == 0.0


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_kl_positive_elsewhere(mu, lv):
    if abs(mu) < 1e-6 and abs(lv) < 1e-6:
        return  # below this the positive KL is smaller than float64 rounding of its terms
    assert float(kl_to_standard_normal(t([mu]), t([lv]))) > 0.0


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_semantics_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    v = vae(seed)
    b = v(t(rng.normal(0, 3, (3, 8))), t(rng.standard_normal((3, 3))))
    assert float(semantics_loss(t(rng.normal(0, 3, (3, 6))), b).detach()) >= 0.0


def test_reconstruction_and_l1_pull_opposite_ways():
    o = t([[1.0, -2.0, 0.5]])
    m = torch.full((1, 3), 0.5, dtype=DTYPE, requires_grad=True)
    zero = torch.zeros(1, 1, dtype=DTYPE)
    b = SemanticBundle(zero, zero, zero, m)
    (g_recon,) = torch.autograd.grad((o - m * o).pow(2).sum(), m)
    (g_l1,) = torch.autograd.grad(mask_penalty(b), m)
    assert bool((g_recon < 0).all()) and bool((g_l1 > 0).all())


def test_semantics_loss_grad_check():
    v = vae(4)
    h = t(np.random.default_rng(0).standard_normal((3, 8)), grad=True)
    noise = t(np.random.default_rng(1).standard_normal((3, 3)))
    o = t(np.random.default_rng(2).standard_normal((3, 6)))
    assert grad_check(lambda: semantics_loss(o, v(h, noise)), [h, *v.parameters()]) < 1e-4


def test_non_finite_loss_raises():
    b = SemanticBundle(t([[float("nan")]]), t([[0.0]]), t([[0.0]]), t([[0.5]]))
    with pytest.raises(NumericError):
        vae_loss(t([[1.0]]), b)
