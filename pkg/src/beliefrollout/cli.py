"""Command-line entry points.

Verbs::

    make-instance   write the built-in benchmark graph/chain files
    evaluate        evaluate configured policies, write results CSV
    compare         evaluate and run paired comparisons against the first policy
    train-pi        run approximate policy iteration, save classifiers + trace
    sweep-comms     evaluate a grid of communication architectures

Every verb takes ``--config FILE`` (JSON) except make-instance; common
flags override individual config entries.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .approx_pi import ClassifierConfig, pi_iterate
from .base_policy import GreedyPolicy
from .harness import ExperimentConfig, compare_grid, run_experiment
from .instances import write_instance_files
from .repair_env import RepairModel, TerminalDamageCost
from .rollout import RolloutConfig

__all__ = ["main"]


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--agents", type=int, help="agent count override")
    p.add_argument("--policy", action="append",
                   help="policy spec (repeatable; replaces the config's list)")
    p.add_argument("--rho", type=float, help="cloud probability for rho-less comms specs")
    p.add_argument("--radius", type=int, help="hop radius for radius-less comms specs")
    p.add_argument("--lookahead", type=int, help="rollout lookahead override")
    p.add_argument("--truncation", type=int, help="rollout truncation override")
    p.add_argument("--trajectories", type=int, help="Monte Carlo trajectories override")
    p.add_argument("--horizon", type=int, help="evaluation horizon override")
    p.add_argument("--jobs", type=int, help="worker process count")
    p.add_argument("--out", help="output directory override")


def _apply_param_defaults(policies, rho, radius):
    """Fill --rho / --radius into comms specs that omit them."""
    out = []
    for spec in policies:
        kind, _, arg = spec.partition(":")
        kind = kind.strip().lower()
        parts = [p for p in arg.split(",") if p]
        if kind in ("amr-ilc", "amr-ib1", "amr-ib0") and rho is not None \
                and not any(p.startswith("rho=") for p in parts):
            parts.append(f"rho={rho}")
        if kind in ("amr-lc", "amr-ilc") and radius is not None \
                and not any(p.startswith("r=") for p in parts):
            parts.append(f"r={radius}")
        out.append(kind + (":" + ",".join(parts) if parts else ""))
    return tuple(out)


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json(
        args.config,
        seed=args.seed,
        agents=args.agents,
        horizon=args.horizon,
        jobs=args.jobs,
        out_dir=args.out,
    )
    rollout = config.rollout
    updates = {}
    if args.lookahead is not None:
        updates["lookahead"] = args.lookahead
    if args.truncation is not None:
        updates["truncation"] = args.truncation
    if args.trajectories is not None:
        updates["n_traj"] = args.trajectories
    if updates:
        rollout = RolloutConfig(**{**_rollout_dict(rollout), **updates})
    policies = tuple(args.policy) if args.policy else config.policies
    policies = _apply_param_defaults(policies, args.rho, args.radius)
    return ExperimentConfig(**{**config.__dict__,
                               "rollout": rollout, "policies": policies})


def _rollout_dict(cfg: RolloutConfig) -> dict:
    return {
        "lookahead": cfg.lookahead, "truncation": cfg.truncation,
        "n_traj": cfg.n_traj, "obs_branch": cfg.obs_branch,
        "agent_order": cfg.agent_order, "obs_enum_cap": cfg.obs_enum_cap,
        "joint_control_cap": cfg.joint_control_cap, "tree_cap": cfg.tree_cap,
    }


def _cmd_make_instance(args) -> int:
    written = write_instance_files(args.out, args.which)
    for path in written:
        print(path)
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args)
    result = run_experiment(config)
    for row in result.rows:
        print(f"{row.policy}: mean {row.mean:.2f} +- {row.stderr:.2f} "
              f"({len(row.costs)} initial states)")
    print(f"results: {result.csv_path}")
    return 0


def _cmd_compare(args) -> int:
    config = _load_config(args)
    result, comparisons = compare_grid(config)
    for row in result.rows:
        print(f"{row.policy}: mean {row.mean:.2f} +- {row.stderr:.2f}")
    for cr in comparisons:
        print(f"{cr.policy} vs {cr.baseline}: mean diff {cr.mean_diff:.2f} "
              f"(t={cr.t_stat:.2f}, p={cr.p_one_sided:.4f}) -> {cr.verdict}")
    print(f"results: {os.path.join(config.out_dir, 'compare.csv')}")
    return 0


def _cmd_train_pi(args) -> int:
    config = _load_config(args)
    pi = config.extra.get("pi", {})
    model = RepairModel(config.graph, config.chain, config.agents, config.discount)
    base = GreedyPolicy(config.graph, config.chain, eps_damage=config.eps_damage)
    terminal = TerminalDamageCost(config.chain, config.discount)
    train_cfg = ClassifierConfig(**pi.get("classifier", {}))
    result = pi_iterate(
        model, base,
        iterations=pi.get("iterations", 3),
        samples_per_iteration=pi.get("samples_per_iteration", 10_000),
        rng=np.random.default_rng(config.seed),
        cfg=config.rollout,
        terminal=terminal,
        train_config=train_cfg,
        pool_size=pi.get("pool_size", 200),
        walk_len=pi.get("walk_len", 5),
        epsilon=pi.get("epsilon", 0.3),
        eval_horizon=pi.get("eval_horizon", config.horizon),
        eval_seed=pi.get("eval_seed", config.seed + 1),
        p_damage=config.p_damage,
    )
    os.makedirs(config.out_dir, exist_ok=True)
    clf_paths = []
    for k, clf in enumerate(result.classifiers, start=1):
        path = os.path.join(config.out_dir, f"policy_iter{k}.clf")
        clf.save(path)
        with open(path + ".json", "w") as f:
            json.dump(clf.to_json(), f)
        clf_paths.append(path)
    trace_path = os.path.join(config.out_dir, "pi_trace.csv")
    with open(trace_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "mean_cost", "train_accuracy"])
        w.writerow([0, repr(result.cost_trace[0]), ""])
        for k in range(1, len(result.cost_trace)):
            w.writerow([k, repr(result.cost_trace[k]),
                        repr(result.train_accuracies[k - 1])])
    print("cost trace:", " -> ".join(f"{c:.2f}" for c in result.cost_trace))
    for path in clf_paths:
        print(path)
    print(trace_path)
    return 0


def _cmd_sweep_comms(args) -> int:
    config = _load_config(args)
    sweep = config.extra.get("sweep", {})
    specs = sweep.get("policies")
    if not specs:
        rhos = sweep.get("rhos", [0.3, 0.5, 0.8, 1.0])
        radius = sweep.get("radius", 0 if args.radius is None else args.radius)
        variant = sweep.get("variant", "amr-ilc")
        if variant == "amr-ilc":
            specs = [f"amr-ilc:rho={r},r={radius}" for r in rhos]
        else:
            specs = [f"{variant}:rho={r}" for r in rhos]
    policies = tuple(["one-at-a-time"] + list(specs))
    config = ExperimentConfig(**{**config.__dict__, "policies": policies})
    result, comparisons = compare_grid(config)
    for row in result.rows:
        print(f"{row.policy}: mean {row.mean:.2f} +- {row.stderr:.2f}")
    print(f"results: {os.path.join(config.out_dir, 'compare.csv')}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="beliefrollout",
        description="Belief-space rollout planning experiments on the "
                    "multi-robot repair benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-instance", help="write built-in instance files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--which", choices=["benchmark32", "desk12", "desk12-terminating",
                                       "oracle2", "oracle3"],
                   help="write a single named instance (default: all)")
    p.set_defaults(fn=_cmd_make_instance)

    for name, fn, text in (
        ("evaluate", _cmd_evaluate, "evaluate policies, write results CSV"),
        ("compare", _cmd_compare, "evaluate and compare against the first policy"),
        ("train-pi", _cmd_train_pi, "run approximate policy iteration"),
        ("sweep-comms", _cmd_sweep_comms, "sweep communication architectures"),
    ):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
