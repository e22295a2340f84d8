"""Explanation exports: shape curves, pairwise heatmaps, per-step traces, masks, stability."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ConfigError
from .mixers import NA2QMixer, VDNMixer
from .numerics import DTYPE
from .training import Learner

EXPLAIN_VERSION = 1
REFERENCE_STD = 0.124
STD_CONVENTION = "population (divide by the number of seeds)"


class CompatibilityError(ValueError):
    pass


def _shape_values(mixer, k: int, q_subset: np.ndarray) -> np.ndarray:
    if isinstance(mixer, VDNMixer):
        return np.asarray(q_subset, dtype=float).sum(-1)
    with torch.no_grad():
        return mixer.shapes.term_forward(k, torch.as_tensor(q_subset, dtype=DTYPE)).numpy()


def shape_curve(mixer, k: int, q_range: tuple[float, float], n_points: int, alpha: float = 1.0
                ) -> list[tuple[float, float]]:
    """(q, alpha * f_k(q)) pairs on an even grid over ``q_range`` for a unary term."""
    lo, hi = float(q_range[0]), float(q_range[1])
    if n_points < 1 or not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ConfigError(f"empty curve range [{lo}, {hi}] with {n_points} points")
    if len(mixer.terms[k]) != 1:
        raise ValueError(f"term {mixer.terms[k]} is not unary")
    qs = np.linspace(lo, hi, n_points)
    ys = alpha * _shape_values(mixer, k, qs[:, None])
    return [(float(q), float(y)) for q, y in zip(qs, ys)]


def pair_heatmap(mixer, k: int, qi: Sequence[float], qj: Sequence[float], alpha: float = 1.0) -> np.ndarray:
    """Matrix of alpha * f_k(qi[a], qj[b]) for a pairwise term."""
    if len(mixer.terms[k]) != 2:
        raise ValueError(f"term {mixer.terms[k]} is not pairwise")
    gi, gj = np.meshgrid(np.asarray(qi, dtype=float), np.asarray(qj, dtype=float), indexing="ij")
    pts = np.stack([gi.ravel(), gj.ravel()], -1)
    return alpha * _shape_values(mixer, k, pts).reshape(gi.shape)


def _mask_layout(mask: np.ndarray, window_shape) -> dict | list:
    if window_shape is None:
        return [float(x) for x in mask]
    size = int(np.prod(window_shape))
    return {"window": mask[:size].reshape(window_shape).tolist(),
            "own_level": [float(x) for x in mask[size:]]}


def explain_episode(learner: Learner, env, seed: int) -> tuple[list[dict], dict]:
    """Greedy episode with per-step credits, contributions and masks at the latent mean."""
    obs, state, avail = env.reset(seed)
    n = env.n_agents
    h = learner.agent.init_hidden(n)
    last = torch.full((n,), -1, dtype=torch.long)
    records = []
    for t in range(env.episode_limit):
        q, h = learner.act_step(obs, last, h)
        qn = q.numpy()
        actions = [int(np.flatnonzero(avail[i] > 0)[np.argmax(qn[i][avail[i] > 0])]) for i in range(n)]
        q_chosen = torch.as_tensor([qn[i, a] for i, a in enumerate(actions)], dtype=DTYPE)[None]
        with torch.no_grad():
            bundle = learner.vae(h) if learner.vae is not None else None
            z = None if bundle is None else bundle.mu.reshape(1, -1)
            out = learner.mixer(q_chosen, torch.as_tensor(state, dtype=DTYPE)[None], z)
        masks = None if bundle is None else [_mask_layout(m, env.window_shape) for m in bundle.mask.numpy()]
        obs, state, avail, reward, done, _ = env.step(actions)
        records.append({
            "step": t,
            "actions": actions,
            "reward": float(reward),
            "q_locals": [float(x) for x in q_chosen[0]],
            "q_tot": float(out.q_tot[0]),
            "bias": float(out.bias[0]),
            "credits": [float(x) for x in out.credits[0]],
            "contributions": [float(x) for x in out.contributions[0]],
            "masks": masks,
        })
        last = torch.as_tensor(actions, dtype=torch.long)
        if done:
            break
    audit = max(abs(r["q_tot"] - r["bias"] - sum(r["contributions"])) for r in records)
    summary = {
        "n_steps": len(records),
        "episode_return": float(sum(r["reward"] for r in records)),
        "max_audit_residual": audit,
        "mean_credits": np.mean([r["credits"] for r in records], axis=0).tolist(),
        "mean_contributions": np.mean([r["contributions"] for r in records], axis=0).tolist(),
    }
    return records, summary


EXPLAIN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "version", "seed", "mixer", "terms", "metadata", "records", "summary"],
    "properties": {
        "format": {"const": "na2q-explain"},
        "version": {"const": EXPLAIN_VERSION},
        "seed": {"type": "integer"},
        "mixer": {"type": "string"},
        "terms": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "metadata": {"type": "object"},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["step", "actions", "reward", "q_locals", "q_tot", "bias", "credits",
                             "contributions", "masks"],
                "properties": {
                    "step": {"type": "integer", "minimum": 0},
                    "actions": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "reward": {"type": "number"},
                    "q_locals": {"type": "array", "items": {"type": "number"}},
                    "q_tot": {"type": "number"},
                    "bias": {"type": "number"},
                    "credits": {"type": "array", "items": {"type": "number"}},
                    "contributions": {"type": "array", "items": {"type": "number"}},
                    "masks": {"type": ["array", "null"]},
                },
            },
        },
        "summary": {"type": "object", "required": ["n_steps", "episode_return", "max_audit_residual"]},
    },
}


def _percentile_range(values: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(values, [1, 99])
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    return float(lo), float(hi)


def write_explain(learner: Learner, env, seed: int, out_dir: str | Path, n_points: int = 50,
                  grid: int = 11, n_bins: int = 10) -> dict:
    """Write explain.json, curves.csv, heatmaps.csv and histograms.csv; return the JSON document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, summary = explain_episode(learner, env, seed)
    mixer = learner.mixer
    terms = [list(t) for t in getattr(mixer, "terms", [])]
    doc = {
        "format": "na2q-explain",
        "version": EXPLAIN_VERSION,
        "seed": int(seed),
        "mixer": learner.cfg.mixer_kind,
        "terms": terms,
        "metadata": {
            "mask_source": "latent_mean",
            "mask_layout": ({"window": list(env.window_shape), "extra": ["own_level"]}
                            if env.window_shape else "flat"),
            "credit_averaging": "batch (mean over the explained episode's steps)",
            "curve_range": "[1st, 99th] percentile of observed q_locals",
        },
        "records": records,
        "summary": summary,
    }
    (out / "explain.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    q_obs = np.asarray([r["q_locals"] for r in records])
    mean_alpha = np.asarray(summary["mean_credits"])
    additive = isinstance(mixer, (NA2QMixer, VDNMixer))
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term_id", "q", "value"])
        if additive:
            for k, t in enumerate(mixer.terms):
                if len(t) == 1:
                    rng_k = _percentile_range(q_obs[:, t[0]])
                    for q, y in shape_curve(mixer, k, rng_k, n_points, float(mean_alpha[k])):
                        w.writerow([k, repr(q), repr(y)])
    with open(out / "heatmaps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term_id", "q_i", "q_j", "value"])
        if isinstance(mixer, NA2QMixer):
            for k, t in enumerate(mixer.terms):
                if len(t) == 2:
                    gi = np.linspace(*_percentile_range(q_obs[:, t[0]]), grid)
                    gj = np.linspace(*_percentile_range(q_obs[:, t[1]]), grid)
                    hm = pair_heatmap(mixer, k, gi, gj, float(mean_alpha[k]))
                    for a, qi in enumerate(gi):
                        for b, qj in enumerate(gj):
                            w.writerow([k, repr(float(qi)), repr(float(qj)), repr(float(hm[a, b]))])
    with open(out / "histograms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "bin_lo", "bin_hi", "count"])
        for i in range(q_obs.shape[1]):
            counts, edges = np.histogram(q_obs[:, i], bins=n_bins, range=_percentile_range(q_obs[:, i]))
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([i, repr(float(lo)), repr(float(hi)), int(c)])
    return doc


# -- cross-seed stability ---------------------------------------------------------

def stability_from_values(values: np.ndarray) -> tuple[np.ndarray, float]:
    """``values`` is (seeds, ...); returns the per-point population std and the pooled std.

    Pooled std = sqrt(mean of per-point variances).
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        raise ValueError("stability needs at least two seeds")
    std = values.std(axis=0)
    return std, float(np.sqrt(np.mean(std ** 2)))


def probe_credits(learner: Learner, probe) -> np.ndarray:
    """Credits averaged over every valid step of an EpisodeBatch probe."""
    with torch.no_grad():
        q, h = learner.unroll(learner.agent, probe)
        bundle = learner.semantics(learner.vae, h[:, :-1], None)
        chosen = q[:, :-1].gather(-1, probe.actions.unsqueeze(-1)).squeeze(-1)
        out, _ = learner.mix(learner.mixer, chosen, probe.state[:, :-1], bundle)
    mask = probe.filled.reshape(-1) > 0
    return out.credits[mask].mean(0).numpy()


def probe_points(order: int, q_grid: np.ndarray) -> np.ndarray:
    if order == 1:
        return q_grid[:, None]
    mesh = np.meshgrid(*([q_grid] * order), indexing="ij")
    return np.stack([m.ravel() for m in mesh], -1)


def _comparable(cfg_flat: dict) -> dict:
    return {k: v for k, v in cfg_flat.items() if k not in ("run.seed", "run.out_dir")}


def stability_report(learners: Sequence[Learner], probe, q_grid: Sequence[float]) -> dict:
    """Per-(term, probe point) std of alpha_k * f_k across seeds, plus the pooled value."""
    if len(learners) < 2:
        raise ValueError("stability needs checkpoints from at least two seeds")
    base = _comparable(learners[0].cfg.to_flat())
    for lr in learners[1:]:
        if _comparable(lr.cfg.to_flat()) != base:
            raise CompatibilityError("checkpoints were trained with different configurations")
    if not isinstance(learners[0].mixer, NA2QMixer):
        raise CompatibilityError("stability report needs the additive shape-function mixer")
    q_grid = np.asarray(q_grid, dtype=float)
    terms = learners[0].mixer.terms
    per_seed = []
    for lr in learners:
        alpha = probe_credits(lr, probe)
        per_seed.append(np.concatenate([alpha[k] * _shape_values(lr.mixer, k, probe_points(len(t), q_grid))
                                        for k, t in enumerate(terms)]))
    std, pooled = stability_from_values(np.stack(per_seed))
    rows, pos = [], 0
    for k, t in enumerate(terms):
        n_pts = len(q_grid) ** len(t)
        for p in range(n_pts):
            rows.append({"term_id": k, "probe": p, "std": float(std[pos + p])})
        pos += n_pts
    return {"n_seeds": len(learners), "std_convention": STD_CONVENTION, "pooled_std": pooled,
            "reference_std": REFERENCE_STD, "terms": [list(t) for t in terms],
            "q_grid": q_grid.tolist(), "rows": rows}


def write_stability(report: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stability.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term_id", "probe", "std"])
        for r in report["rows"]:
            w.writerow([r["term_id"], r["probe"], repr(r["std"])])
    meta = {k: v for k, v in report.items() if k != "rows"}
    (out / "stability.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
