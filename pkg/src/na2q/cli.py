"""Command-line entry point: ``na2q {train,eval,explain,verify,stability}``.

Exit codes: 0 success, 1 a verification failed, 2 usage or configuration error.
Relative output paths are resolved under ``$NA2Q_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import FormatError
from .config import ConfigError, from_mapping, load_config, parse_overrides
from .envs import ConfigError as EnvConfigError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUTPUT_ROOT_ENV = "NA2Q_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def _out_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def cmd_train(args) -> int:
    from .training import train_run

    overrides = parse_overrides(args.override or [])
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config, overrides)
    else:
        cfg = from_mapping(overrides, preset=args.preset)
    out = _out_path(args.out or cfg.run_out_dir)
    result = train_run(cfg, out)
    last = result.metrics[-1] if result.metrics else None
    msg = f"wrote {len(result.checkpoints)} checkpoint(s) and metrics.csv to {out}"
    if last:
        msg += f"; final test return {last['mean_test_return']:.4f} +- {last['std_test_return']:.4f}"
    print(msg)
    return EXIT_OK


def _trajectory_records(episode_id: int, seed: int, ep) -> list[dict]:
    recs = []
    for t in range(len(ep)):
        recs.append({
            "episode": episode_id, "env_seed": seed, "t": t,
            "state": ep.env_states[t] if ep.env_states else None,
            "observations": ep.obs[t].tolist(),
            "actions": [int(a) for a in ep.actions[t]],
            "reward": float(ep.reward[t]),
            "done": t == len(ep) - 1,
        })
    return recs


def cmd_eval(args) -> int:
    from .envs import dump_trajectory
    from .training import greedy_episodes, load_learner, make_env

    learner, _ = load_learner(args.checkpoint)
    env = make_env(learner.cfg)
    rng = np.random.default_rng(args.seed)
    episodes = greedy_episodes(learner, env, args.episodes, rng, record_states=bool(args.dump_trajectories))
    returns = np.asarray([ep.episode_return for _, ep in episodes])
    out = _out_path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "env_seed", "return", "length"])
        for i, (seed, ep) in enumerate(episodes):
            w.writerow([i, seed, repr(ep.episode_return), len(ep)])
    if args.dump_trajectories:
        path = _out_path(args.dump_trajectories)
        with open(path, "w") as fh:
            for i, (seed, ep) in enumerate(episodes):
                dump_trajectory(_trajectory_records(i, seed, ep), fh)
    print(f"mean return {returns.mean():.6f} +- {returns.std():.6f} over {len(returns)} episode(s)")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .interpret import write_explain
    from .training import load_learner, make_env

    learner, _ = load_learner(args.checkpoint)
    out = _out_path(args.out) if args.out else Path(args.checkpoint).parent / "explain"
    doc = write_explain(learner, make_env(learner.cfg), args.seed, out)
    s = doc["summary"]
    print(f"explained {s['n_steps']} step(s), return {s['episode_return']:.4f}, "
          f"max audit residual {s['max_audit_residual']:.2e}; files in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES

    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {sorted(SUITES)}")
    checks = SUITES[args.suite]()
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{args.suite}: {len(checks) - failed}/{len(checks)} passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_stability(args) -> int:
    from .buffer import EpisodeBatch
    from .interpret import stability_report, write_stability
    from .training import greedy_episodes, load_learner, make_env

    learners = [load_learner(p)[0] for p in args.checkpoints]
    env = make_env(learners[0].cfg)
    probe_eps = [ep for _, ep in greedy_episodes(learners[0], env, args.probe_episodes,
                                                 np.random.default_rng(args.seed))]
    probe = EpisodeBatch.from_episodes(probe_eps)
    q_grid = np.linspace(args.q_min, args.q_max, args.points)
    report = stability_report(learners, probe, q_grid)
    write_stability(report, _out_path(args.out))
    print(f"pooled shape-function std over {report['n_seeds']} seeds: {report['pooled_std']:.4f} "
          f"({report['std_convention']}); reference value {report['reference_std']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="na2q", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file or preset")
    t.add_argument("config", nargs="?", help="flat YAML config file")
    t.add_argument("--preset", default="lbf-3p3f", help="lbf-3p3f, lbf-4p2f or matrix (used without a file)")
    t.add_argument("--override", action="append", metavar="KEY=VALUE")
    t.add_argument("--out", help="output directory (default: run.out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="per-episode CSV path")
    e.add_argument("--dump-trajectories", metavar="JSONL")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="explanation exports for one greedy episode")
    x.add_argument("checkpoint")
    x.add_argument("--seed", type=int, default=0, help="environment seed")
    x.add_argument("--out", help="output directory")
    x.set_defaults(func=cmd_explain)

    v = sub.add_parser("verify", help="run a fixed-seed property suite")
    v.add_argument("suite", help="numerics, igm, credits or oracle")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("stability", help="cross-seed spread of shape functions")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--out", default="stability")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--probe-episodes", type=int, default=8)
    s.add_argument("--q-min", type=float, default=-1.0)
    s.add_argument("--q-max", type=float, default=1.0)
    s.add_argument("--points", type=int, default=11)
    s.set_defaults(func=cmd_stability)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, ConfigError, EnvConfigError) as exc:
        print(f"na2q {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"na2q {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
