"""Dense float64 layers, update rules and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects in float64; reverse-mode gradients
come from torch autograd. Everything here is deliberately small: the networks
in this package only need affine maps (optionally with non-negative weights),
a GRU cell and a handful of pointwise activations.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64

WEIGHT_TRANSFORMS = ("identity", "absolute")


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")


def affine(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None,
           weight_transform: str = "identity") -> torch.Tensor:
    """y = x @ T(w) + b with T either the identity or elementwise |.|."""
    if weight_transform not in WEIGHT_TRANSFORMS:
        raise ValueError(f"unknown weight transform {weight_transform!r}")
    if w.dim() != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {tuple(b.shape)} vs weight {tuple(w.shape)}")
    if weight_transform == "absolute":
        # torch's abs backward uses sign(), so the subgradient at 0 is 0
        w = w.abs()
    if b is None:
        return x @ w
    if x.dim() == 2:
        return torch.addmm(b, x, w)
    return x @ w + b


def elu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.elu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax along ``dim``; NaN input raises NumericError."""
    if bool(torch.isnan(x).any()):
        raise NumericError("softmax received NaN input")
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def uniform_init(t: torch.Tensor, fan_in: int, gen: torch.Generator | None) -> None:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)


class Affine(nn.Module):
    """Affine layer storing its weight as (in, out).

    With ``nonneg=True`` the weight is passed through abs() on every forward
    pass, which keeps the map monotone nondecreasing in each input.
    """

    def __init__(self, n_in: int, n_out: int, nonneg: bool = False, bias: bool = True,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out, self.nonneg = n_in, n_out, nonneg
        self.weight = nn.Parameter(torch.empty(n_in, n_out, dtype=DTYPE))
        self.bias = nn.Parameter(torch.empty(n_out, dtype=DTYPE)) if bias else None
        uniform_init(self.weight, n_in, gen)
        if self.bias is not None:
            uniform_init(self.bias, n_in, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return affine(x, self.weight, self.bias, "absolute" if self.nonneg else "identity")


def gru_step(x: torch.Tensor, h: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """One GRU update.

    ``params`` holds ``w_x`` (in, 3*hid), ``w_h`` (hid, 3*hid), ``b_x`` and
    ``b_h`` (3*hid). Gate blocks are ordered reset, update, candidate.
    """
    w_x, w_h = params["w_x"], params["w_h"]
    hid = h.shape[-1]
    if w_x.shape != (x.shape[-1], 3 * hid) or w_h.shape != (hid, 3 * hid):
        raise DimensionError(
            f"gru_step: x {tuple(x.shape)}, h {tuple(h.shape)}, "
            f"w_x {tuple(w_x.shape)}, w_h {tuple(w_h.shape)}")
    gx = x @ w_x + params["b_x"]
    gh = h @ w_h + params["b_h"]
    xr, xz, xn = gx.split(hid, dim=-1)
    hr, hz, hn = gh.split(hid, dim=-1)
    r = torch.sigmoid(xr + hr)
    z = torch.sigmoid(xz + hz)
    n = torch.tanh(xn + r * hn)
    return (1.0 - z) * n + z * h


class GRUCell(nn.Module):
    def __init__(self, n_in: int, hidden: int = 64, gen: torch.Generator | None = None):
        super().__init__()
        self.hidden = hidden
        self.w_x = nn.Parameter(torch.empty(n_in, 3 * hidden, dtype=DTYPE))
        self.w_h = nn.Parameter(torch.empty(hidden, 3 * hidden, dtype=DTYPE))
        self.b_x = nn.Parameter(torch.empty(3 * hidden, dtype=DTYPE))
        self.b_h = nn.Parameter(torch.empty(3 * hidden, dtype=DTYPE))
        for p in (self.w_x, self.w_h, self.b_x, self.b_h):
            uniform_init(p, hidden, gen)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return gru_step(x, h, {"w_x": self.w_x, "w_h": self.w_h, "b_x": self.b_x, "b_h": self.b_h})


class ParamStore:
    """Named parameters plus per-parameter optimizer state.

    Parameter paths come from ``nn.Module.named_parameters`` prefixed by the
    owning component, so they are unique across the whole model.
    """

    def __init__(self, params: Mapping[str, torch.Tensor]):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict(params)
        self.state: dict[str, dict[str, torch.Tensor]] = {}
        self.step_count = 0

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> "ParamStore":
        named = OrderedDict()
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters():
                named[f"{prefix}.{name}"] = p
        return cls(named)

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.params[key]

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p))
                for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> float:
    gs = list(grads.values())
    total = float(torch.stack(torch._foreach_norm(gs)).norm()) if gs else 0.0
    if total > max_norm:
        torch._foreach_mul_(gs, max_norm / (total + 1e-6))
    return total


def optimizer_step(store: ParamStore, grads: Mapping[str, torch.Tensor], rule: str, lr: float,
                   *, alpha: float = 0.99, betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-5, weight_decay: float = 0.0) -> ParamStore:
    """Apply one RMSprop or Adam update in place and return the store.

    RMSprop: v <- a*v + (1-a)*g^2;  p <- p - lr*g/(sqrt(v)+eps).
    Adam uses bias-corrected moments with the same eps placement.
    """
    if rule not in ("rmsprop", "adam"):
        raise ValueError(f"unknown optimizer rule {rule!r}")
    missing = [k for k in store.params if k not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    names = list(store.params)
    ps = [store.params[k] for k in names]
    gs = [grads[k] for k in names]
    for name, p, g in zip(names, ps, gs):
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name}: {tuple(g.shape)} vs {tuple(p.shape)}")
    if not ps:
        return store
    store.step_count += 1
    t = store.step_count

    def slot(key: str) -> list[torch.Tensor]:
        out = []
        for k, p in zip(names, ps):
            st = store.state.setdefault(k, {})
            if key not in st:
                st[key] = torch.zeros_like(p)
            out.append(st[key])
        return out

    with torch.no_grad():
        if weight_decay:
            gs = torch._foreach_add(gs, ps, alpha=weight_decay)
        if rule == "rmsprop":
            vs = slot("square_avg")
            torch._foreach_mul_(vs, alpha)
            torch._foreach_addcmul_(vs, gs, gs, value=1.0 - alpha)
            denom = torch._foreach_sqrt(vs)
            torch._foreach_add_(denom, eps)
            torch._foreach_addcdiv_(ps, gs, denom, value=-lr)
        else:
            ms, vs = slot("exp_avg"), slot("exp_avg_sq")
            torch._foreach_mul_(ms, betas[0])
            torch._foreach_add_(ms, gs, alpha=1.0 - betas[0])
            torch._foreach_mul_(vs, betas[1])
            torch._foreach_addcmul_(vs, gs, gs, value=1.0 - betas[1])
            m_hat = torch._foreach_div(ms, 1.0 - betas[0] ** t)
            denom = torch._foreach_sqrt(torch._foreach_div(vs, 1.0 - betas[1] ** t))
            torch._foreach_add_(denom, eps)
            torch._foreach_addcdiv_(ps, m_hat, denom, value=-lr)
    return store


def grad_check(f: Callable[[], torch.Tensor], params: Iterable[torch.Tensor], eps: float = 1e-5,
               max_probes: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is a zero-argument closure that reads ``params`` and returns a
    scalar. Error per coordinate is |a - n| / max(1, |a|, |n|). With
    ``max_probes`` only that many randomly chosen coordinates of each
    parameter are probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    _check_finite(out, "grad_check objective")
    analytic = torch.autograd.grad(out, params, allow_unused=True)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_probes is not None and flat.numel() > max_probes:
                idx = rng.choice(flat.numel(), size=max_probes, replace=False)
            a_flat = a.reshape(-1)
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + eps
                fp = f()
                flat[i] = orig - eps
                fm = f()
                flat[i] = orig
                _check_finite(fp, "grad_check objective")
                _check_finite(fm, "grad_check objective")
                num = float(fp - fm) / (2 * eps)
                ana = float(a_flat[i])
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                worst = max(worst, err)
    return worst
