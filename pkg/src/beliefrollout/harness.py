"""Seeded experiment runner and comparison grids.

Every policy in a grid is evaluated on the same initial (hidden state,
belief) pairs, and the environment noise of stage k of initial state i is
drawn from a stream keyed by (root seed, i, k) alone, so policy choices
never shift the noise: comparisons are paired. Controller randomness is
keyed by (root seed, i, k, purpose), which makes any run byte-reproducible
regardless of worker-pool size.

Policies are named by spec strings::

    base                      greedy shortest-path policy
    standard                  standard rollout (joint minimization)
    one-at-a-time             one-agent-at-a-time rollout
    order-optimized           greedy agent-order rollout
    multistep                 sampled-tree lookahead (cfg.lookahead > 1)
    classifier:PATH           trained policy network
    amr-b                     base-policy signaling
    amr-n:PATH                network signaling
    amr-pi:PATH1,PATH2        policy-iteration signaling (last = signal)
    amr-lc:r=2                local communication within r hops
    amr-ilc:rho=0.8,r=2       intermittent cloud, local fallback
    amr-ib1:rho=0.8           local beliefs, local rollout offline
    amr-ib0:rho=0.8           local beliefs, base policy offline

Results go to a deterministic CSV (one row per policy and initial state
plus one aggregate row per policy); wall-clock timings are reported in the
run manifest, never in the CSV.
"""

import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from . import __version__
from .approx_pi import ClassifierPolicy, PolicyClassifier
from .base_policy import GreedyPolicy, build_paths
from .comms import (
    IBState,
    amr_b_control,
    amr_ib_advance,
    amr_ib_control,
    amr_ilc_control,
    amr_lc_control,
    amr_n_control,
    amr_pi_control,
)
from .repair_env import (
    FIX,
    DamageChain,
    RepairGraph,
    RepairModel,
    TerminalDamageCost,
    random_initial_state,
)
from .rng import substream
from .rollout import (
    EvalCounter,
    RolloutConfig,
    multistep_lookahead_control,
    one_at_a_time_control,
    order_optimized_control,
    standard_rollout_control,
)

__all__ = [
    "PolicySpec",
    "parse_policy_spec",
    "ExperimentConfig",
    "ResultRow",
    "ExperimentResult",
    "CompareRow",
    "run_experiment",
    "compare_grid",
    "paired_stats",
    "oscillation_rate",
    "CSV_SCHEMA_VERSION",
]

CSV_SCHEMA_VERSION = 1

_ROLLOUT_KINDS = ("standard", "one-at-a-time", "order-optimized", "multistep")
_SIMPLE_KINDS = ("base", "amr-b") + _ROLLOUT_KINDS


@dataclass(frozen=True)
class PolicySpec:
    """Parsed policy spec string."""

    raw: str
    kind: str
    radius: int | None = None
    rho: float | None = None
    classifier_paths: tuple = ()


def parse_policy_spec(spec: str) -> PolicySpec:
    spec = spec.strip()
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "1aat":
        kind = "one-at-a-time"
    if kind in _SIMPLE_KINDS:
        return PolicySpec(spec, kind)
    if kind == "classifier" or kind == "amr-n":
        if not arg:
            raise ValueError(f"{kind} needs a classifier path, e.g. '{kind}:policy.clf'")
        return PolicySpec(spec, kind, classifier_paths=(arg,))
    if kind == "amr-pi":
        paths = tuple(p for p in arg.split(",") if p)
        if len(paths) < 2:
            raise ValueError("amr-pi needs at least two classifier paths")
        return PolicySpec(spec, kind, classifier_paths=paths)
    if kind in ("amr-lc", "amr-ilc", "amr-ib1", "amr-ib0"):
        radius, rho = None, None
        for part in filter(None, (p.strip() for p in arg.split(","))):
            key, _, val = part.partition("=")
            if key == "r":
                radius = int(val)
            elif key == "rho":
                rho = float(val)
            else:
                raise ValueError(f"unknown parameter {key!r} in policy spec {spec!r}")
        if kind == "amr-lc" and radius is None:
            raise ValueError("amr-lc needs r=<hops>")
        if kind != "amr-lc" and rho is None:
            raise ValueError(f"{kind} needs rho=<prob>")
        if kind == "amr-ilc" and radius is None:
            radius = 0
        return PolicySpec(spec, kind, radius=radius, rho=rho)
    raise ValueError(f"unknown policy spec {spec!r}")


def _load_classifier(path: str) -> PolicyClassifier:
    if path.endswith(".json"):
        with open(path) as f:
            return PolicyClassifier.from_json(json.load(f))
    return PolicyClassifier.load(path)


@dataclass
class ExperimentConfig:
    """Resolved experiment description (instance, policies, evaluation)."""

    graph: RepairGraph
    chain: DamageChain
    agents: int = 2
    p_damage: float = 0.3
    eps_damage: float = 0.0
    policies: tuple = ("base",)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    n_initial_states: int = 100
    horizon: int = 150
    discount: float = 0.95
    seed: int = 1234
    out_dir: str = "results"
    jobs: int = 1
    graph_path: str | None = None
    chain_path: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.agents < 1:
            raise ValueError("need at least one agent")
        if not (0.0 <= self.p_damage <= 1.0):
            raise ValueError("p_damage must lie in [0, 1]")
        if self.n_initial_states < 1:
            raise ValueError("need at least one initial state")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not (0.0 < self.discount < 1.0):
            raise ValueError("discount must lie in (0, 1)")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        for spec in self.policies:
            parsed = parse_policy_spec(spec)
            for path in parsed.classifier_paths:
                if not os.path.exists(path):
                    raise FileNotFoundError(f"classifier file {path!r} does not exist")

    @classmethod
    def from_json(cls, path: str, **overrides) -> "ExperimentConfig":
        with open(path) as f:
            doc = json.load(f)
        inst = doc.get("instance", {})
        ev = doc.get("evaluation", {})
        out = doc.get("output", {})
        graph_path = overrides.pop("graph_path", None) or inst.get("graph")
        chain_path = overrides.pop("chain_path", None) or inst.get("chain")
        if graph_path is None or chain_path is None:
            raise ValueError("config must name instance.graph and instance.chain files")
        for p in (graph_path, chain_path):
            if not os.path.exists(p):
                raise FileNotFoundError(f"instance file {p!r} does not exist")
        kwargs = dict(
            graph=RepairGraph.load(graph_path),
            chain=DamageChain.load(chain_path),
            graph_path=graph_path,
            chain_path=chain_path,
            agents=inst.get("agents", 2),
            p_damage=inst.get("p_damage", 0.3),
            eps_damage=inst.get("eps_damage", 0.0),
            policies=tuple(doc.get("policies", ("base",))),
            rollout=RolloutConfig(**doc.get("rollout", {})),
            n_initial_states=ev.get("n_initial_states", 100),
            horizon=ev.get("horizon", 150),
            discount=ev.get("discount", 0.95),
            seed=ev.get("seed", 1234),
            out_dir=out.get("dir", "results"),
            jobs=doc.get("jobs", 1),
            extra={k: v for k, v in doc.items()
                   if k not in ("instance", "evaluation", "output", "policies",
                                "rollout", "jobs")},
        )
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def manifest_dict(self) -> dict:
        return {
            "instance": {
                "graph": self.graph_path or "<inline>",
                "chain": self.chain_path or "<inline>",
                "vertices": self.graph.n_vertices,
                "nu": self.chain.nu,
                "gamma": self.chain.gamma.tolist(),
                "cost": self.chain.cost.tolist(),
                "agents": self.agents,
                "p_damage": self.p_damage,
                "eps_damage": self.eps_damage,
            },
            "policies": list(self.policies),
            "rollout": {
                "lookahead": self.rollout.lookahead,
                "truncation": self.rollout.truncation,
                "n_traj": self.rollout.n_traj,
                "obs_branch": self.rollout.obs_branch,
                "obs_enum_cap": self.rollout.obs_enum_cap,
            },
            "evaluation": {
                "n_initial_states": self.n_initial_states,
                "horizon": self.horizon,
                "discount": self.discount,
                "seed": self.seed,
            },
            "jobs": self.jobs,
        }


# -- controllers -------------------------------------------------------------------


class _StageStreams:
    """Purpose-keyed random streams for one (initial state, stage) cell."""

    def __init__(self, root_seed: int, state_index: int, stage: int):
        self.key = (root_seed, state_index, stage)

    def __call__(self, purpose: str) -> np.random.Generator:
        root, idx, stage = self.key
        return substream(root, "ctl", idx, stage, purpose)


class Controller:
    """Per-trajectory policy driver; ``begin`` resets any internal state."""

    def begin(self, belief):
        pass

    def act(self, model, belief, stage, streams, counter):
        raise NotImplementedError

    def observe(self, control, observation):
        pass


class PolicyController(Controller):
    def __init__(self, policy):
        self.policy = policy

    def act(self, model, belief, stage, streams, counter):
        return self.policy.joint_control(belief)


class RolloutController(Controller):
    def __init__(self, kind, base, cfg, terminal):
        self.kind = kind
        self.base = base
        self.cfg = cfg
        self.terminal = terminal

    def act(self, model, belief, stage, streams, counter):
        rng = streams("rollout")
        if self.kind == "standard":
            return standard_rollout_control(model, belief, self.base, self.cfg,
                                            self.terminal, rng, counter)
        if self.kind == "one-at-a-time":
            return one_at_a_time_control(model, belief, self.base, self.cfg,
                                         self.terminal, rng, counter)
        if self.kind == "order-optimized":
            control, _ = order_optimized_control(model, belief, self.base, self.cfg,
                                                 self.terminal, rng, counter)
            return control
        if self.kind == "multistep":
            return multistep_lookahead_control(model, belief, self.base, self.cfg,
                                               self.terminal, rng, counter)
        raise ValueError(f"unknown rollout kind {self.kind!r}")


class AmrController(Controller):
    """Shared-belief imperfect control sharing (AMR-B/N/PI/LC/ILC)."""

    def __init__(self, spec: PolicySpec, base, cfg, terminal, paths, signaling=None,
                 pi_policies=None):
        self.spec = spec
        self.base = base
        self.cfg = cfg
        self.terminal = terminal
        self.paths = paths
        self.signaling = signaling
        self.pi_policies = pi_policies

    def act(self, model, belief, stage, streams, counter):
        rng = streams("rollout")
        kind = self.spec.kind
        if kind == "amr-b":
            return amr_b_control(model, belief, self.base, self.cfg, self.terminal,
                                 rng, counter)
        if kind == "amr-n":
            return amr_n_control(model, belief, self.base, self.signaling, self.cfg,
                                 self.terminal, rng, counter)
        if kind == "amr-pi":
            return amr_pi_control(model, belief, self.pi_policies, self.cfg,
                                  self.terminal, rng, counter)
        if kind == "amr-lc":
            return amr_lc_control(model, belief, self.base, self.cfg, self.terminal,
                                  self.spec.radius, rng, counter, self.paths)
        if kind == "amr-ilc":
            return amr_ilc_control(model, belief, self.base, self.cfg, self.terminal,
                                   self.spec.radius, self.spec.rho, rng, counter,
                                   comms_rng=streams("comms"), paths=self.paths)
        raise ValueError(f"unknown comms kind {kind!r}")


class IBController(Controller):
    """Imperfect belief and control sharing (AMR-IB1 / AMR-IB0)."""

    def __init__(self, variant, rho, base, cfg, terminal):
        self.variant = variant
        self.rho = rho
        self.base = base
        self.cfg = cfg
        self.terminal = terminal
        self.ib = None
        self._pending = None
        self._model = None

    def begin(self, belief):
        self.ib = None
        self._pending = None

    def act(self, model, belief, stage, streams, counter):
        if self.ib is None:
            self.ib = IBState.fresh(belief, model.num_agents)
        self._model = model
        control, connected, synced = amr_ib_control(
            model, self.ib, self.variant, self.base, self.cfg, self.terminal,
            self.rho, streams("rollout"), counter, comms_rng=streams("comms"))
        self._pending = (connected, synced)
        return control

    def observe(self, control, observation):
        connected, synced = self._pending
        self.ib = amr_ib_advance(self._model, synced, connected, control, observation,
                                 self.variant, self.base)


def build_controller(spec: PolicySpec, model: RepairModel, base, cfg: RolloutConfig,
                     terminal, paths) -> Controller:
    kind = spec.kind
    if kind == "base":
        return PolicyController(base)
    if kind in _ROLLOUT_KINDS:
        return RolloutController(kind, base, cfg, terminal)
    if kind == "classifier":
        clf = _load_classifier(spec.classifier_paths[0])
        return PolicyController(ClassifierPolicy(clf, base, model))
    if kind == "amr-n":
        clf = _load_classifier(spec.classifier_paths[0])
        return AmrController(spec, base, cfg, terminal, paths,
                             signaling=ClassifierPolicy(clf, base, model))
    if kind == "amr-pi":
        policies = []
        source = base
        for path in spec.classifier_paths:
            policy = ClassifierPolicy(_load_classifier(path), source, model)
            policies.append(policy)
            source = policy
        return AmrController(spec, base, cfg, terminal, paths, pi_policies=policies)
    if kind in ("amr-b", "amr-lc", "amr-ilc"):
        return AmrController(spec, base, cfg, terminal, paths)
    if kind in ("amr-ib1", "amr-ib0"):
        return IBController(kind.removeprefix("amr-"), spec.rho, base, cfg, terminal)
    raise ValueError(f"unknown policy spec {spec.raw!r}")


# -- trajectory evaluation ---------------------------------------------------------


def oscillation_rate(location_history, fix_history) -> float:
    """Fraction of (agent, stage) cells showing an A-B-A move with no repair."""
    H = len(fix_history)
    if H < 2:
        return 0.0
    m = len(location_history[0])
    events = 0
    for i in range(1, H):
        prev2, prev1, cur = location_history[i - 1], location_history[i], location_history[i + 1]
        for a in range(m):
            if cur[a] == prev2[a] != prev1[a] \
                    and not fix_history[i][a] and not fix_history[i - 1][a]:
                events += 1
    return events / (m * (H - 1))


def run_trajectory(model: RepairModel, controller: Controller, state, belief,
                   horizon: int, root_seed: int, state_index: int,
                   counter: EvalCounter):
    """Discounted realized cost of one controller from one initial state."""
    total = 0.0
    disc = 1.0
    controller.begin(belief)
    locations = [tuple(state.locations)]
    fixes = []
    for stage in range(horizon):
        streams = _StageStreams(root_seed, state_index, stage)
        u = controller.act(model, belief, stage, streams, counter)
        env_rng = substream(root_seed, "env", state_index, stage)
        state, z, cost = model.step(state, u, env_rng)
        total += disc * cost
        disc *= model.discount
        controller.observe(u, z)
        belief = model.belief_update(belief, u, z)
        locations.append(tuple(state.locations))
        fixes.append(tuple(c == FIX for c in u))
    return total, oscillation_rate(locations, fixes)


@dataclass
class ResultRow:
    """Per-policy evaluation results over the shared initial states."""

    policy: str
    costs: np.ndarray
    oscillation: np.ndarray
    q_evals_per_stage: np.ndarray
    traj_per_stage: np.ndarray
    wall_clock_per_stage: float

    @property
    def mean(self) -> float:
        return float(self.costs.mean())

    @property
    def stderr(self) -> float:
        if len(self.costs) < 2:
            return 0.0
        return float(self.costs.std(ddof=1) / np.sqrt(len(self.costs)))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    csv_path: str | None = None
    manifest_path: str | None = None

    def row(self, policy: str) -> ResultRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)


@dataclass
class _GridRunner:
    """Picklable evaluation context shared by all worker processes."""

    config: ExperimentConfig

    def __post_init__(self):
        c = self.config
        self.model = RepairModel(c.graph, c.chain, c.agents, c.discount)
        self.paths = build_paths(c.graph)
        self.base = GreedyPolicy(c.graph, c.chain, self.paths, c.eps_damage)
        self.terminal = TerminalDamageCost(c.chain, c.discount)

    def initial_state(self, index: int):
        rng = substream(self.config.seed, "init", index)
        return random_initial_state(self.config.graph, self.config.chain,
                                    self.config.agents, rng, self.config.p_damage)

    def run_block(self, spec_raw: str, indices: list) -> list:
        c = self.config
        spec = parse_policy_spec(spec_raw)
        controller = build_controller(spec, self.model, self.base, c.rollout,
                                      self.terminal, self.paths)
        out = []
        for idx in indices:
            state, belief = self.initial_state(idx)
            counter = EvalCounter()
            cost, osc = run_trajectory(self.model, controller, state, belief,
                                       c.horizon, c.seed, idx, counter)
            stages = max(1, c.horizon)
            out.append((idx, cost, osc,
                        counter.q_factor_evaluations / stages,
                        counter.trajectories_simulated / stages))
        return out


def _evaluate_policy(runner: _GridRunner, spec: str, pool) -> ResultRow:
    c = runner.config
    n = c.n_initial_states
    started = time.perf_counter()
    if pool is None:
        results = runner.run_block(spec, list(range(n)))
    else:
        blocks = np.array_split(np.arange(n), min(c.jobs, n))
        futures = [pool.submit(runner.run_block, spec, [int(i) for i in block])
                   for block in blocks if len(block)]
        results = [item for f in futures for item in f.result()]
    elapsed = time.perf_counter() - started
    results.sort(key=lambda item: item[0])
    costs = np.array([r[1] for r in results])
    osc = np.array([r[2] for r in results])
    qps = np.array([r[3] for r in results])
    tps = np.array([r[4] for r in results])
    return ResultRow(spec, costs, osc, qps, tps,
                     elapsed / max(1, n * max(1, c.horizon)))


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Evaluate every configured policy on shared seeded initial states.

    Returns the per-policy rows and, when ``write`` is set, persists the
    results CSV plus a manifest JSON under ``config.out_dir``. Reruns with
    the same seed produce byte-identical CSVs for any worker count.
    """
    runner = _GridRunner(config)
    rows = []
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            for spec in config.policies:
                rows.append(_evaluate_policy(runner, spec, pool))
    else:
        for spec in config.policies:
            rows.append(_evaluate_policy(runner, spec, None))
    result = ExperimentResult(config, rows)
    if write:
        _persist(result)
    return result


def _persist(result: ExperimentResult):
    c = result.config
    os.makedirs(c.out_dir, exist_ok=True)
    result.csv_path = os.path.join(c.out_dir, "results.csv")
    with open(result.csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["schema", "policy", "row_type", "state_index", "cost",
                    "q_evals_per_stage", "traj_per_stage", "oscillation_rate",
                    "mean_cost", "stderr_cost"])
        for row in result.rows:
            for i in range(len(row.costs)):
                w.writerow([CSV_SCHEMA_VERSION, row.policy, "state", i,
                            repr(float(row.costs[i])),
                            repr(float(row.q_evals_per_stage[i])),
                            repr(float(row.traj_per_stage[i])),
                            repr(float(row.oscillation[i])), "", ""])
            w.writerow([CSV_SCHEMA_VERSION, row.policy, "aggregate", "", "",
                        repr(float(row.q_evals_per_stage.mean())),
                        repr(float(row.traj_per_stage.mean())),
                        repr(float(row.oscillation.mean())),
                        f"{row.mean:.2f}", f"{row.stderr:.2f}"])
    result.manifest_path = os.path.join(c.out_dir, "manifest.json")
    manifest = {
        "schema": CSV_SCHEMA_VERSION,
        "config": c.manifest_dict(),
        "versions": {
            "beliefrollout": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "wall_clock_per_stage": {r.policy: r.wall_clock_per_stage for r in result.rows},
        "outputs": {"results_csv": result.csv_path},
    }
    with open(result.manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)


# -- paired comparison ----------------------------------------------------------------


@dataclass
class CompareRow:
    baseline: str
    policy: str
    n: int
    mean_baseline: float
    mean_policy: float
    mean_diff: float          # baseline - policy; positive = policy improves
    stderr_diff: float
    t_stat: float
    p_one_sided: float        # H1: policy improves on baseline
    verdict: str


def paired_stats(baseline_costs: np.ndarray, policy_costs: np.ndarray) -> tuple:
    """(mean diff, stderr, t, one-sided p) for H1: policy beats baseline."""
    d = np.asarray(baseline_costs, dtype=float) - np.asarray(policy_costs, dtype=float)
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 0.0, 0.0, 1.0
        return mean, 0.0, float("inf") if mean > 0 else float("-inf"), \
            0.0 if mean > 0 else 1.0
    stderr = sd / np.sqrt(n)
    t = mean / stderr
    p = float(sstats.t.sf(t, n - 1))
    return mean, float(stderr), float(t), p


def compare_grid(config: ExperimentConfig, write: bool = True,
                 result: ExperimentResult | None = None):
    """Paired comparison of every policy against the first one in the grid."""
    if len(config.policies) < 2:
        raise ValueError("compare needs at least two policies")
    if result is None:
        result = run_experiment(config, write=write)
    baseline = result.rows[0]
    comparisons = []
    for row in result.rows[1:]:
        mean, stderr, t, p = paired_stats(baseline.costs, row.costs)
        if mean > 0 and p < 0.05:
            verdict = "better"
        elif mean < 0 and 1.0 - p < 0.05:
            verdict = "worse"
        else:
            verdict = "tie"
        comparisons.append(CompareRow(baseline.policy, row.policy, len(row.costs),
                                      baseline.mean, row.mean, mean, stderr, t, p,
                                      verdict))
    if write:
        path = os.path.join(config.out_dir, "compare.csv")
        os.makedirs(config.out_dir, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["schema", "baseline", "policy", "n", "mean_baseline",
                        "mean_policy", "mean_diff", "stderr_diff", "t_stat",
                        "p_one_sided", "verdict"])
            for cr in comparisons:
                w.writerow([CSV_SCHEMA_VERSION, cr.baseline, cr.policy, cr.n,
                            f"{cr.mean_baseline:.2f}", f"{cr.mean_policy:.2f}",
                            repr(cr.mean_diff), repr(cr.stderr_diff),
                            repr(cr.t_stat), repr(cr.p_one_sided), cr.verdict])
    return result, comparisons
