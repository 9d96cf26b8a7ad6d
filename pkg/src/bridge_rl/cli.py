"""Command-line entry point ``bridge``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .geometry import squared_hellinger
from .harness import aggregate_dir, run_experiment, run_radius_ablation, run_table1_sweep
from .mdp import check_policy, make_env


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig() if path is None else ExperimentConfig.from_json(path)


def read_policy_file(path, n_states: int, n_actions: int) -> np.ndarray:
    """One action index per line; blank lines and ``#`` comments are skipped."""
    actions = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            actions.append(int(line))
    return check_policy(actions, n_states, n_actions)


def cmd_run(args) -> int:
    config = _load_config(args.config)
    if args.output:
        config = config.replace(output_dir=args.output)
    agg = run_experiment(config)
    print(f"seeds={agg.n_seeds} final_mean_cum_regret={agg.final_mean_cum_regret!r} bc_regret_mean={agg.bc_regret_mean!r}")
    print(f"wrote {Path(config.output_dir) / 'aggregate.csv'}")
    return 0 if not agg.failed_seeds else 3


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    if args.output:
        config = config.replace(output_dir=args.output)
    if args.kind == "table1":
        if config.env != "gridworld" and args.config is None:
            config = config.replace(env="gridworld", radius="theoretical", pool="sample")
        cells = run_table1_sweep(config, runs=args.runs)
        print("n,noise_p,fraction_mean,fraction_std,expert_coverage")
        for c in cells:
            print(f"{c.n},{c.noise_p},{c.mean:.4f},{c.std:.4f},{c.expert_coverage:.3f}")
        return 0
    if not args.values:
        raise ConfigError("sweep radius needs --values")
    values = [float(v) for v in args.values.split(",")]
    results = run_radius_ablation(config, values)
    print("radius,final_mean_cum_regret,expert_survival")
    for r, (agg, survived) in results.items():
        rate = np.mean(list(survived.values())) if survived else float("nan")
        print(f"{r},{agg.final_mean_cum_regret:.4f},{rate:.3f}")
    return 0


def cmd_hellinger(args) -> int:
    env = make_env(args.env, args.p_succ)
    a = read_policy_file(args.policy_a, env.n_states, env.n_actions)
    b = read_policy_file(args.policy_b, env.n_states, env.n_actions)
    print(repr(squared_hellinger(env.transitions, a, env.transitions, b, env.initial_dist, env.horizon)))
    return 0


def cmd_env_info(args) -> int:
    env = make_env(args.name, args.p_succ)
    out = sys.stdout
    out.write(f"# name={env.name}\n# n_states={env.n_states}\n# n_actions={env.n_actions}\n# horizon={env.horizon}\n")
    out.write("# rewards\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["state", "reward", "initial_prob"])
    for s in range(env.n_states):
        writer.writerow([s, repr(float(env.rewards[s])), repr(float(env.initial_dist[s]))])
    out.write("# transitions\n")
    writer.writerow(["state", "action", "next_state", "prob"])
    for s in range(env.n_states):
        for a in range(env.n_actions):
            for s2 in range(env.n_states):
                writer.writerow([s, a, s2, repr(float(env.transitions[s, a, s2]))])
    return 0


def cmd_validate(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_aggregate(args) -> int:
    agg = aggregate_dir(args.directory)
    print(f"seeds={agg.n_seeds} final_mean_cum_regret={agg.final_mean_cum_regret!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridge", description="Offline-to-online preference-based RL on tabular MDPs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every seed of one configuration")
    p.add_argument("--config")
    p.add_argument("--output", help="override output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="confidence-set scaling table or radius ablation")
    p.add_argument("kind", choices=("table1", "radius"))
    p.add_argument("--config")
    p.add_argument("--values", help="comma-separated radii for the radius sweep")
    p.add_argument("--runs", type=int, default=30, help="runs per table cell")
    p.add_argument("--output", help="override output_dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("hellinger", help="squared Hellinger distance between two policies")
    p.add_argument("--env", required=True)
    p.add_argument("--policy-a", required=True)
    p.add_argument("--policy-b", required=True)
    p.add_argument("--p-succ", type=float)
    p.set_defaults(func=cmd_hellinger)

    p = sub.add_parser("env-info", help="print an environment as CSV")
    p.add_argument("name")
    p.add_argument("--p-succ", type=float)
    p.set_defaults(func=cmd_env_info)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("aggregate", help="rebuild aggregate.csv from per-seed CSVs")
    p.add_argument("directory")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
