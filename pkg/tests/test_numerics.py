import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from na2q.numerics import (DTYPE, Affine, DimensionError, GRUCell, NumericError, ParamStore, affine, elu,
                           grad_check, gru_step, optimizer_step, relu, sigmoid, softmax)


def t(a, grad=False):
    x = torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)
    return x.requires_grad_() if grad else x


# -- affine ---------------------------------------------------------------------

def test_affine_identity_map():
    y = affine(t([[1, 2]]), t([[1, 0], [0, 1]]), t([0, 0]))
    assert y.tolist() == [[1.0, 2.0]]


def test_affine_absolute_weights():
    y = affine(t([[1, -1]]), t([[-2, 0], [0, -3]]), t([0, 0]), "absolute")
    assert y.tolist() == [[2.0, -3.0]]


def test_affine_matches_triple_loop():
    rng = np.random.default_rng(0)
    x = np.array([[0.5, 0.5]])
    w = rng.standard_normal((2, 2))
    expected = [[sum(x[i, k] * w[k, j] for k in range(2)) for j in range(2)] for i in range(1)]
    y = affine(t(x), t(w), t([0, 0]))
    np.testing.assert_allclose(y.numpy(), expected, atol=1e-12, rtol=0)


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        affine(t([[1, 2, 3]]), t([[1, 0], [0, 1]]), t([0, 0]))
    with pytest.raises(DimensionError):
        affine(t([[1, 2]]), t([[1, 0], [0, 1]]), t([0, 0, 0]))


def test_abs_subgradient_at_zero_is_zero():
    w = t([[0.0]], grad=True)
    affine(t([[1.0]]), w, None, "absolute").sum().backward()
    assert w.grad.item() == 0.0


def test_abs_affine_monotone_through_elu():
    rng = np.random.default_rng(1)
    lin = Affine(4, 3, nonneg=True, gen=torch.Generator().manual_seed(0))
    for _ in range(200):
        x = t(rng.normal(0, 3, (1, 4)))
        base = elu(lin(x)).sum()
        for i in range(4):
            xp = x.clone()
            xp[0, i] += 1e-4
            assert float((elu(lin(xp)).sum() - base).detach()) / 1e-4 >= -1e-9


# -- GRU ------------------------------------------------------------------------

def scalar_gru(x, h, wx, wh, bx, bh):
    """Scalar three-gate GRU written from the textbook equations."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    r = sig(wx[0] * x + bx[0] + wh[0] * h + bh[0])
    z = sig(wx[1] * x + bx[1] + wh[1] * h + bh[1])
    n = math.tanh(wx[2] * x + bx[2] + r * (wh[2] * h + bh[2]))
    return (1 - z) * n + z * h


def test_gru_zero_everything_gives_zero():
    cell = GRUCell(3, 4)
    with torch.no_grad():
        for p in cell.parameters():
            p.zero_()
    assert torch.equal(cell(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 4, dtype=DTYPE)),
                       torch.zeros(2, 4, dtype=DTYPE))


def test_gru_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        wx, wh, bx, bh = (rng.standard_normal(3) for _ in range(4))
        x, h = rng.standard_normal(), rng.uniform(-1, 1)
        params = {"w_x": t(wx[None]), "w_h": t(wh[None]), "b_x": t(bx), "b_h": t(bh)}
        got = gru_step(t([[x]]), t([[h]]), params).item()
        assert got == pytest.approx(scalar_gru(x, h, wx, wh, bx, bh), abs=1e-14)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_gru_output_in_open_unit_interval(seed):
    rng = np.random.default_rng(seed)
    cell = GRUCell(5, 6, gen=torch.Generator().manual_seed(seed))
    h = t(rng.uniform(-0.999, 0.999, (4, 6)))
    for _ in range(5):
        h = cell(t(rng.normal(0, 3, (4, 5))), h)
        assert bool((h.abs() < 1).all())


def test_gru_dimension_error():
    cell = GRUCell(3, 4)
    with pytest.raises(DimensionError):
        cell(torch.zeros(1, 2, dtype=DTYPE), torch.zeros(1, 4, dtype=DTYPE))


# -- softmax ----------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(t([0, 0, 0])).numpy(), [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    y = softmax(t([1000, 0])).numpy()
    assert np.isfinite(y).all()
    assert y[0] == pytest.approx(1.0) and y[1] < 1e-300


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    e = [mpmath.e ** k for k in (1, 2, 3)]
    expected = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(softmax(t([1, 2, 3])).numpy(), expected, atol=1e-12, rtol=0)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        softmax(t([0.0, float("nan")]))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_softmax_is_probability_vector(xs):
    y = softmax(t(xs))
    assert bool((y > 0).all()) or len(xs) > 1  # extreme gaps may underflow to 0 only off-argmax
    assert bool((y >= 0).all())
    assert abs(float(y.sum()) - 1.0) <= 1e-12


def test_activations():
    assert sigmoid(t([0.0])).item() == 0.5
    assert relu(t([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert elu(t([0.0])).item() == 0.0


# -- optimizer ------------------------------------------------------------------------

def store_with(value):
    return ParamStore({"w": t([value], grad=True)})


@pytest.mark.parametrize("rule", ["rmsprop", "adam"])
def test_zero_gradient_leaves_parameters(rule):
    store = store_with(1.5)
    for _ in range(3):
        optimizer_step(store, {"w": t([0.0])}, rule, 1e-2)
    assert store["w"].item() == 1.5


@pytest.mark.parametrize("rule", ["rmsprop", "adam"])
def test_zero_learning_rate_leaves_parameters(rule):
    store = store_with(1.5)
    optimizer_step(store, {"w": t([3.0])}, rule, 0.0)
    assert store["w"].item() == 1.5


def test_rmsprop_matches_scalar_trace():
    lr, g, alpha, eps = 5e-4, 0.7, 0.99, 1e-5
    p, v = 2.0, 0.0
    store = store_with(p)
    for _ in range(25):
        v = alpha * v + (1 - alpha) * g * g
        p = p - lr * g / (math.sqrt(v) + eps)
        optimizer_step(store, {"w": t([g])}, "rmsprop", lr, alpha=alpha, eps=eps)
    assert store["w"].item() == pytest.approx(p, abs=1e-14)


def test_adam_matches_scalar_trace():
    lr, g, b1, b2, eps = 1e-3, -0.3, 0.9, 0.999, 1e-5
    p, m, v = 0.5, 0.0, 0.0
    store = store_with(p)
    for k in range(1, 11):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + eps)
        optimizer_step(store, {"w": t([g])}, "adam", lr, eps=eps)
    assert store["w"].item() == pytest.approx(p, abs=1e-14)


def test_missing_gradient_is_key_error():
    store = ParamStore({"a": t([1.0], grad=True), "b": t([1.0], grad=True)})
    with pytest.raises(KeyError):
        optimizer_step(store, {"a": t([1.0])}, "rmsprop", 1e-3)


def test_optimizer_state_shapes_match():
    store = ParamStore({"a": t(np.ones((2, 3)), grad=True)})
    optimizer_step(store, {"a": t(np.ones((2, 3)))}, "adam", 1e-3)
    assert all(v.shape == (2, 3) for v in store.state["a"].values())


# -- grad_check ---------------------------------------------------------------------

def test_grad_check_square():
    w = t([3.0], grad=True)
    assert grad_check(lambda: (w * w).sum(), [w]) < 1e-8


def test_grad_check_constant():
    w = t([3.0], grad=True)
    assert grad_check(lambda: (w * 0).sum() + 5.0, [w]) < 1e-8


def test_grad_check_detects_wrong_gradient():
    w = t([3.0], grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g * 0.0

    assert grad_check(lambda: Wrong.apply(w).sum(), [w]) > 0.5


def test_grad_check_non_finite():
    w = t([0.0], grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: (1.0 / w).sum(), [w])


def test_differentiable_ops_pass_grad_check_randomized():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        b, i, o = (int(v) for v in rng.integers(1, 9, size=3))
        b = min(b, 4)
        gen = torch.Generator().manual_seed(trial)
        x = t(rng.standard_normal((b, i)), grad=True)
        proj = t(rng.standard_normal((b, o)))
        lin = Affine(i, o, nonneg=bool(trial % 2), gen=gen)
        with torch.no_grad():  # keep |w| off its kink so central differences are valid
            lin.weight.copy_(torch.where(lin.weight.abs() < 1e-3, torch.full_like(lin.weight, 1e-3), lin.weight))
        worst = max(worst, grad_check(lambda: (elu(lin(x)) * proj).sum(), [x, lin.weight, lin.bias]))
        cell = GRUCell(i, o, gen=gen)
        h = t(rng.uniform(-0.9, 0.9, (b, o)), grad=True)
        worst = max(worst, grad_check(lambda: (cell(x, h) * proj).sum(), [x, h, *cell.parameters()]))
        v = t(rng.standard_normal(o), grad=True)
        worst = max(worst, grad_check(lambda: (softmax(v) * proj[0]).sum(), [v]))
        worst = max(worst, grad_check(lambda: (sigmoid(x) ** 2).sum(), [x]))
    assert worst < 1e-4
