"""Run configuration: a flat, namespaced key/value mapping stored as YAML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml


class ConfigError(ValueError):
    pass


ENV_NAMES = ("lbf", "matrix")
LBF_PRESETS = ("3p3f", "4p2f")
MIXERS = ("na2q", "vdn", "monotonic")


@dataclass(frozen=True)
class RunConfig:
    # Attribute names are "<namespace>_<key>"; the file key is "<namespace>.<key>".
    env_name: str = "lbf"
    env_preset: str = "3p3f"
    env_max_episode_length: int = 50
    env_move_penalty: float = 0.002
    mixer_kind: str = "na2q"
    mixer_order_max: int = 2
    mixer_semantics: bool = True
    mixer_attention: bool = True
    mixer_embed: int = 64
    agent_hidden: int = 64
    semantics_latent_dim: int = 16
    semantics_width: int = 32
    optim_lr_agent: float = 5e-4
    optim_lr_vae: float = 5e-4
    optim_rms_alpha: float = 0.99
    optim_eps: float = 1e-5
    optim_weight_decay: float = 0.0
    optim_grad_clip: float = 10.0
    loss_beta: float = 0.1
    loss_gamma: float = 0.99
    explore_eps_start: float = 1.0
    explore_eps_finish: float = 0.05
    explore_eps_anneal_steps: int = 50_000
    buffer_capacity: int = 5000
    train_batch_size: int = 32
    train_target_interval: int = 200
    train_learning_starts: int = 0
    train_total_steps: int = 1_050_000
    eval_interval: int = 10_000
    eval_episodes: int = 32
    run_seed: int = 0
    run_out_dir: str = "runs/default"

    def to_flat(self) -> dict[str, Any]:
        return {_key(f.name): getattr(self, f.name) for f in fields(self)}

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        errors = []

        def check(cond: bool, name: str, msg: str):
            if not cond:
                errors.append(f"{_key(name)}: {msg} (got {getattr(self, name)!r})")

        check(self.env_name in ENV_NAMES, "env_name", f"must be one of {ENV_NAMES}")
        if self.env_name == "lbf":
            check(self.env_preset in LBF_PRESETS, "env_preset", f"must be one of {LBF_PRESETS}")
        check(1 <= self.env_max_episode_length <= 10_000, "env_max_episode_length", "must be in [1, 10000]")
        check(self.env_move_penalty >= 0, "env_move_penalty", "must be >= 0")
        check(self.mixer_kind in MIXERS, "mixer_kind", f"must be one of {MIXERS}")
        check(1 <= self.mixer_order_max <= 3, "mixer_order_max", "must be in [1, 3]")
        for name in ("mixer_embed", "agent_hidden", "semantics_latent_dim", "semantics_width",
                     "buffer_capacity", "train_batch_size", "train_target_interval",
                     "eval_interval", "eval_episodes"):
            check(getattr(self, name) >= 1, name, "must be >= 1")
        for name in ("optim_lr_agent", "optim_lr_vae", "optim_eps", "optim_grad_clip"):
            check(getattr(self, name) >= 0, name, "must be >= 0")
        check(0 < self.optim_rms_alpha < 1, "optim_rms_alpha", "must be in (0, 1)")
        check(self.optim_weight_decay >= 0, "optim_weight_decay", "must be >= 0")
        check(self.loss_beta >= 0, "loss_beta", "must be >= 0")
        check(0 <= self.loss_gamma < 1, "loss_gamma", "must be in [0, 1)")
        for name in ("explore_eps_start", "explore_eps_finish"):
            check(0 <= getattr(self, name) <= 1, name, "must be in [0, 1]")
        check(self.explore_eps_finish <= self.explore_eps_start, "explore_eps_finish", "must be <= start")
        check(self.explore_eps_anneal_steps >= 0, "explore_eps_anneal_steps", "must be >= 0")
        check(self.train_total_steps >= 0, "train_total_steps", "must be >= 0")
        check(0 <= self.train_learning_starts <= self.buffer_capacity, "train_learning_starts",
              "must be in [0, buffer.capacity]")
        check(self.train_batch_size <= self.buffer_capacity, "train_batch_size", "must not exceed buffer.capacity")
        check(self.run_seed >= 0, "run_seed", "must be >= 0")
        if errors:
            raise ConfigError("; ".join(errors))


def _key(attr: str) -> str:
    ns, _, rest = attr.partition("_")
    return f"{ns}.{rest}"


_ATTR = {_key(f.name): f.name for f in fields(RunConfig)}
_TYPES = {f.name: f.type for f in fields(RunConfig)}

PRESETS: dict[str, dict[str, Any]] = {
    "lbf-3p3f": {},
    "lbf-4p2f": {"env.preset": "4p2f"},
    "matrix": {
        "env.name": "matrix",
        "env.preset": "coop3x3",
        "env.max_episode_length": 1,
        "loss.gamma": 0.0,
        "explore.eps_finish": 1.0,
        "train.total_steps": 20_000,
        "train.learning_starts": 2000,
        "eval.interval": 2000,
        "eval.episodes": 1,
        "run.out_dir": "runs/matrix",
    },
}


def resolve_key(key: str) -> str:
    """Full dotted key for ``key``; a unique suffix such as ``total_steps`` is accepted."""
    if key in _ATTR:
        return key
    hits = [k for k in _ATTR if k.split(".", 1)[1] == key]
    if len(hits) == 1:
        return hits[0]
    if hits:
        raise ConfigError(f"ambiguous key {key!r}: {hits}")
    raise ConfigError(f"unknown key {key!r}")


def _coerce(key: str, value: Any) -> Any:
    typ = _TYPES[_ATTR[key]]
    if typ == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "on", "off", "1", "0"):
            return value.lower() in ("true", "on", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ == "int":
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        try:
            f = float(str(value).replace("_", ""))
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if not f.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if typ == "float":
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def from_mapping(values: Mapping[str, Any], preset: str | None = None) -> RunConfig:
    """Build a validated config from a preset plus flat dotted-key overrides."""
    values = dict(values)
    preset = values.pop("preset", preset) or "lbf-3p3f"
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[preset])
    for k, v in values.items():
        merged[resolve_key(str(k))] = v
    kwargs = {_ATTR[k]: _coerce(k, v) for k, v in merged.items()}
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def preset(name: str) -> RunConfig:
    return from_mapping({}, preset=name)


def parse_overrides(items: list[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[resolve_key(key.strip())] = yaml.safe_load(raw) if raw.strip() else ""
    return out


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{k}: nested values are not allowed")
    data = {str(k): v for k, v in data.items()}
    if overrides:
        data.update(overrides)
    return from_mapping(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_flat(), sort_keys=True, default_flow_style=False)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
