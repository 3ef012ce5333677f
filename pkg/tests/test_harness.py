import csv
import json
import os

import numpy as np
import pytest

from beliefrollout import cli
from beliefrollout.base_policy import GreedyPolicy
from beliefrollout.harness import (
    ExperimentConfig,
    compare_grid,
    oscillation_rate,
    paired_stats,
    parse_policy_spec,
    run_experiment,
)
from beliefrollout.instances import desk_chain, desk_graph, oracle_chain, oracle_graph
from beliefrollout.pomdp_core import Policy, policy_cost_exact, simulate_trajectory
from beliefrollout.repair_env import RepairFlattening, RepairModel, random_initial_state
from beliefrollout.rollout import RolloutConfig


def tiny_config(tmp_path, **kw):
    defaults = dict(
        graph=desk_graph(), chain=desk_chain(), agents=2,
        policies=("base", "one-at-a-time"),
        rollout=RolloutConfig(truncation=4, n_traj=4),
        n_initial_states=4, horizon=12, seed=99,
        out_dir=str(tmp_path / "out"))
    defaults.update(kw)
    return ExperimentConfig(**defaults)


# -- policy spec parsing -----------------------------------------------------------


def test_policy_spec_parsing():
    assert parse_policy_spec("base").kind == "base"
    assert parse_policy_spec("1aat").kind == "one-at-a-time"
    spec = parse_policy_spec("amr-ilc:rho=0.8,r=2")
    assert spec.rho == 0.8 and spec.radius == 2
    assert parse_policy_spec("amr-lc:r=3").radius == 3
    assert parse_policy_spec("amr-ib0:rho=0.4").rho == 0.4
    assert parse_policy_spec("classifier:x.clf").classifier_paths == ("x.clf",)
    assert parse_policy_spec("amr-pi:a.clf,b.clf").classifier_paths == ("a.clf", "b.clf")
    for bad in ("bogus", "amr-lc", "amr-ib1", "amr-ilc:r=1,q=3", "amr-pi:a.clf"):
        with pytest.raises(ValueError):
            parse_policy_spec(bad)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        tiny_config(tmp_path, n_initial_states=0)
    with pytest.raises(ValueError):
        tiny_config(tmp_path, discount=1.0)
    with pytest.raises(FileNotFoundError):
        tiny_config(tmp_path, policies=("classifier:/no/such/file.clf",))


def test_config_from_json_with_overrides(tmp_path):
    desk_graph().save(tmp_path / "g.json")
    desk_chain().save(tmp_path / "c.json")
    doc = {
        "instance": {"graph": str(tmp_path / "g.json"), "chain": str(tmp_path / "c.json"),
                     "agents": 2, "p_damage": 0.25},
        "policies": ["base"],
        "rollout": {"truncation": 5, "n_traj": 3},
        "evaluation": {"n_initial_states": 3, "horizon": 9, "seed": 5},
        "output": {"dir": str(tmp_path / "res")},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    config = ExperimentConfig.from_json(str(cfg_path), seed=77)
    assert config.seed == 77                    # override wins
    assert config.rollout.truncation == 5
    assert config.p_damage == 0.25

    doc["instance"]["graph"] = str(tmp_path / "missing.json")
    cfg_path.write_text(json.dumps(doc))
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.from_json(str(cfg_path))


# -- oscillation metric --------------------------------------------------------------


def test_oscillation_rate_counts_aba_patterns():
    locs = [(0,), (1,), (0,), (1,), (2,)]
    fixes = [(False,), (False,), (False,), (False,)]
    # stage windows: (0,1,0) and (1,0,1) oscillate, (0,1,2) does not
    assert oscillation_rate(locs, fixes) == pytest.approx(2 / 3)

    assert oscillation_rate([(0,), (0,), (0,)], [(True,), (True,)]) == 0.0
    assert oscillation_rate([(0,)], []) == 0.0


# -- run_experiment -------------------------------------------------------------------


def test_zero_horizon_costs_are_zero(tmp_path):
    config = tiny_config(tmp_path, horizon=0, n_initial_states=2, policies=("base",))
    result = run_experiment(config, write=False)
    np.testing.assert_array_equal(result.rows[0].costs, 0.0)


def test_rerun_is_byte_identical(tmp_path):
    config = tiny_config(tmp_path)
    r1 = run_experiment(config)
    first = open(r1.csv_path, "rb").read()
    r2 = run_experiment(config)
    second = open(r2.csv_path, "rb").read()
    assert first == second


def test_worker_pool_size_does_not_change_results(tmp_path):
    serial = tiny_config(tmp_path, out_dir=str(tmp_path / "serial"))
    parallel = tiny_config(tmp_path, out_dir=str(tmp_path / "parallel"), jobs=2)
    r1 = run_experiment(serial)
    r2 = run_experiment(parallel)
    assert open(r1.csv_path, "rb").read() == open(r2.csv_path, "rb").read()


def test_results_csv_schema_and_aggregates(tmp_path):
    config = tiny_config(tmp_path)
    result = run_experiment(config)
    with open(result.csv_path) as f:
        rows = list(csv.DictReader(f))
    for policy in config.policies:
        states = [r for r in rows if r["policy"] == policy and r["row_type"] == "state"]
        agg = [r for r in rows if r["policy"] == policy and r["row_type"] == "aggregate"]
        assert len(states) == config.n_initial_states
        assert len(agg) == 1
        mean = np.mean([float(r["cost"]) for r in states])
        assert f"{mean:.2f}" == agg[0]["mean_cost"]
    assert all(r["schema"] == "1" for r in rows)
    # wall-clock stays out of the CSV, it lives in the manifest
    assert "wall_clock" not in rows[0]
    manifest = json.load(open(result.manifest_path))
    assert set(manifest["wall_clock_per_stage"]) == set(config.policies)
    assert manifest["config"]["evaluation"]["seed"] == config.seed


def test_trajectory_counts_grow_with_n_traj(tmp_path):
    lo = tiny_config(tmp_path, rollout=RolloutConfig(truncation=4, n_traj=2),
                     policies=("one-at-a-time",), n_initial_states=2, horizon=6)
    hi = tiny_config(tmp_path, rollout=RolloutConfig(truncation=4, n_traj=24),
                     policies=("one-at-a-time",), n_initial_states=2, horizon=6)
    row_lo = run_experiment(lo, write=False).rows[0]
    row_hi = run_experiment(hi, write=False).rows[0]
    assert np.all(row_hi.traj_per_stage > row_lo.traj_per_stage)
    assert np.all(row_lo.q_evals_per_stage > 0)


def test_q_count_per_belief_is_independent_of_n_traj():
    # the Q-factor count at a fixed belief is a structural law; only the
    # simulated-trajectory count scales with n_traj
    from beliefrollout.repair_env import TerminalDamageCost
    from beliefrollout.rollout import EvalCounter, one_at_a_time_control

    graph, chain = desk_graph(), desk_chain()
    model = RepairModel(graph, chain, 2, 0.95)
    base = GreedyPolicy(graph, chain)
    terminal = TerminalDamageCost(chain, 0.95)
    _, belief = random_initial_state(graph, chain, 2, np.random.default_rng(0),
                                     p_damage=0.5)
    counts = {}
    for n_traj in (2, 24):
        counter = EvalCounter()
        one_at_a_time_control(model, belief, base,
                              RolloutConfig(truncation=4, n_traj=n_traj),
                              terminal, np.random.default_rng(1), counter)
        counts[n_traj] = counter
    assert counts[2].q_factor_evaluations == counts[24].q_factor_evaluations
    assert counts[24].trajectories_simulated > counts[2].trajectories_simulated


def test_base_policy_mean_matches_exact_flattened_cost():
    # oracle-scale instance: the realized-cost simulator agrees with full
    # observation-tree enumeration on the tabular flattening within 3 sigma
    graph, chain = oracle_graph(2), oracle_chain()
    model = RepairModel(graph, chain, 1, 0.9)
    base = GreedyPolicy(graph, chain)
    flat = RepairFlattening(graph, chain, 1)
    tab = flat.build_pomdp(0.9)

    class LiftedGreedy(Policy):
        def joint_control(self, belief_vec):
            fb = flat.unflatten_belief(belief_vec)
            return flat.control_index(base.joint_control(fb))

    _, belief = random_initial_state(graph, chain, 1, np.random.default_rng(3),
                                     p_damage=0.5)
    horizon = 6
    exact = policy_cost_exact(tab, LiftedGreedy(), flat.flatten_belief(belief), horizon)
    n = 3000
    costs = np.empty(n)
    master = np.random.default_rng(8)
    for i in range(n):
        costs[i], _ = simulate_trajectory(model, base, belief, horizon, master)
    stderr = costs.std(ddof=1) / np.sqrt(n)
    assert abs(costs.mean() - exact) <= 3 * stderr


# -- compare_grid ---------------------------------------------------------------------


def test_identical_policies_have_exactly_zero_difference(tmp_path):
    config = tiny_config(tmp_path, policies=("base", "base"))
    result, comparisons = compare_grid(config, write=False)
    assert comparisons[0].mean_diff == 0.0
    assert comparisons[0].verdict == "tie"
    np.testing.assert_array_equal(result.rows[0].costs, result.rows[1].costs)


def test_rollout_improves_on_base_smoke(tmp_path):
    config = tiny_config(tmp_path, n_initial_states=8, horizon=30,
                         rollout=RolloutConfig(truncation=8, n_traj=6))
    result, comparisons = compare_grid(config, write=False)
    assert comparisons[0].mean_diff > 0          # direction only; stats in acceptance


def test_paired_stats_edge_cases():
    mean, stderr, t, p = paired_stats(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert (mean, stderr, t, p) == (0.0, 0.0, 0.0, 1.0)
    mean, _, t, p = paired_stats(np.array([2.0, 2.0]), np.array([1.0, 1.0]))
    assert mean == 1.0 and t == float("inf") and p == 0.0
    a = np.array([3.0, 4.0, 5.0, 6.0])
    b = a - np.array([1.0, 1.2, 0.8, 1.0])
    mean, stderr, t, p = paired_stats(a, b)
    assert mean == pytest.approx(1.0)
    assert p < 0.01


# -- CLI ------------------------------------------------------------------------------


def test_cli_make_instance_and_evaluate(tmp_path, capsys):
    inst_dir = tmp_path / "instances"
    assert cli.main(["make-instance", "--out", str(inst_dir)]) == 0
    for name in ("benchmark32.graph.json", "desk12.chain.json", "experiment.json"):
        assert (inst_dir / name).exists()

    config = {
        "instance": {"graph": str(inst_dir / "desk12.graph.json"),
                     "chain": str(inst_dir / "desk12.chain.json"), "agents": 2},
        "policies": ["base"],
        "rollout": {"truncation": 3, "n_traj": 3},
        "evaluation": {"n_initial_states": 2, "horizon": 6, "seed": 4},
        "output": {"dir": str(tmp_path / "res")},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    assert cli.main(["evaluate", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "res" / "results.csv").exists()
    assert (tmp_path / "res" / "manifest.json").exists()
    out = capsys.readouterr().out
    assert "base: mean" in out


def test_cli_compare_with_policy_overrides(tmp_path):
    inst_dir = tmp_path / "instances"
    cli.main(["make-instance", "--out", str(inst_dir), "--which", "desk12"])
    config = {
        "instance": {"graph": str(inst_dir / "desk12.graph.json"),
                     "chain": str(inst_dir / "desk12.chain.json"), "agents": 2},
        "policies": ["base"],
        "rollout": {"truncation": 3, "n_traj": 3},
        "evaluation": {"n_initial_states": 2, "horizon": 5, "seed": 4},
        "output": {"dir": str(tmp_path / "res")},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    rc = cli.main(["compare", "--config", str(cfg_path),
                   "--policy", "base", "--policy", "amr-ilc", "--rho", "0.7",
                   "--radius", "1", "--trajectories", "2", "--horizon", "4"])
    assert rc == 0
    with open(tmp_path / "res" / "compare.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["policy"] == "amr-ilc:rho=0.7,r=1"


def test_cli_train_pi_and_sweep(tmp_path):
    inst_dir = tmp_path / "instances"
    cli.main(["make-instance", "--out", str(inst_dir), "--which", "desk12"])
    config = {
        "instance": {"graph": str(inst_dir / "desk12.graph.json"),
                     "chain": str(inst_dir / "desk12.chain.json"), "agents": 2},
        "policies": ["base"],
        "rollout": {"truncation": 2, "n_traj": 2},
        "evaluation": {"n_initial_states": 2, "horizon": 5, "seed": 4},
        "output": {"dir": str(tmp_path / "pi")},
        "pi": {"iterations": 1, "samples_per_iteration": 16, "pool_size": 3,
               "eval_horizon": 5, "classifier": {"hidden1": 16, "hidden2": 8,
                                                 "epochs": 2}},
        "sweep": {"rhos": [0.5, 1.0], "radius": 1},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    assert cli.main(["train-pi", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "pi" / "policy_iter1.clf").exists()
    assert (tmp_path / "pi" / "policy_iter1.clf.json").exists()
    assert (tmp_path / "pi" / "pi_trace.csv").exists()

    config["output"]["dir"] = str(tmp_path / "sweep")
    cfg_path.write_text(json.dumps(config))
    assert cli.main(["sweep-comms", "--config", str(cfg_path)]) == 0
    with open(tmp_path / "sweep" / "compare.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["policy"] for r in rows] == ["amr-ilc:rho=0.5,r=1", "amr-ilc:rho=1.0,r=1"]


def test_cli_trained_classifier_usable_as_policy(tmp_path):
    inst_dir = tmp_path / "instances"
    cli.main(["make-instance", "--out", str(inst_dir), "--which", "desk12"])
    config = {
        "instance": {"graph": str(inst_dir / "desk12.graph.json"),
                     "chain": str(inst_dir / "desk12.chain.json"), "agents": 2},
        "policies": ["base"],
        "rollout": {"truncation": 2, "n_traj": 2},
        "evaluation": {"n_initial_states": 2, "horizon": 5, "seed": 4},
        "output": {"dir": str(tmp_path / "pi")},
        "pi": {"iterations": 1, "samples_per_iteration": 16, "pool_size": 3,
               "eval_horizon": 5, "classifier": {"hidden1": 16, "hidden2": 8,
                                                 "epochs": 2}},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    cli.main(["train-pi", "--config", str(cfg_path)])
    clf_path = str(tmp_path / "pi" / "policy_iter1.clf")
    rc = cli.main(["evaluate", "--config", str(cfg_path),
                   "--policy", f"classifier:{clf_path}",
                   "--policy", f"amr-n:{clf_path}",
                   "--out", str(tmp_path / "clf-eval")])
    assert rc == 0
    assert (tmp_path / "clf-eval" / "results.csv").exists()
