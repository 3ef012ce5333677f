"""Truncated rollout control selection.

A Q-factor for (belief, u) is the expected stage cost of u plus the
discounted continuation value, where the continuation simulates the base
policy for ``truncation`` stages and closes the tail with a terminal cost
approximation. The observation expectation at the first step is computed
exactly whenever the model can enumerate the successor support within
``obs_enum_cap`` branches, and by Monte Carlo sampling otherwise.

Three single-stage selectors are provided:

* ``standard_rollout_control``  - one minimization over the joint control
  set (cost grows as C^m; refuses beyond a cap),
* ``one_at_a_time_control``     - m sequential single-component
  minimizations with earlier agents fixed to their chosen components and
  later agents to the base policy (cost C*m),
* ``order_optimized_control``   - greedy construction of the agent order
  via m(m+1)/2 single-component minimizations.

Candidate controls within one minimization share identical random draws
(common random numbers), which sharpens the comparison between Q-factor
estimates without biasing any of them.
"""

from dataclasses import dataclass

import numpy as np

from .pomdp_core import EnumerationCapError, POMDPModel

__all__ = [
    "RolloutConfig",
    "QFactorEstimate",
    "EvalCounter",
    "q_factor",
    "standard_rollout_control",
    "one_at_a_time_control",
    "order_optimized_control",
    "multistep_lookahead_control",
]

_SEED_BOUND = 2**63


def branch_allocation(probs: np.ndarray, n_traj: int) -> np.ndarray:
    """Continuation trajectories per observation branch.

    Proportional (stratified) allocation of the ``n_traj`` budget with at
    least one trajectory per branch; the estimate stays unbiased because
    branches are weighted by their exact probabilities, not their counts.
    """
    return np.maximum(1, np.rint(np.asarray(probs) * n_traj)).astype(np.int64)


@dataclass
class RolloutConfig:
    """Tunable knobs of the truncated rollout schemes.

    lookahead          - minimization depth l (stages); l > 1 expands a
                         sampled scenario tree.
    truncation         - base-policy continuation length t before the
                         terminal cost approximation is applied.
    n_traj             - Monte Carlo trajectories per Q-factor: with an
                         exact observation expansion, per successor branch;
                         otherwise the number of sampled first-step draws.
    obs_branch         - sampled observation branches per tree node when
                         lookahead > 1 (equally weighted).
    agent_order        - fixed decision permutation; None means 0..m-1.
    obs_enum_cap       - largest observation support expanded exactly.
    joint_control_cap  - refusal threshold for standard rollout.
    tree_cap           - refusal threshold (projected Q evaluations) for
                         multistep lookahead.
    """

    lookahead: int = 1
    truncation: int = 10
    n_traj: int = 30
    obs_branch: int = 4
    agent_order: tuple | None = None
    obs_enum_cap: int = 4096
    joint_control_cap: int = 10_000
    tree_cap: int = 50_000

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.truncation < 0:
            raise ValueError("truncation must be >= 0")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.obs_branch < 1:
            raise ValueError("obs_branch must be >= 1")

    def order(self, m: int) -> tuple:
        if self.agent_order is None:
            return tuple(range(m))
        order = tuple(self.agent_order)
        if sorted(order) != list(range(m)):
            raise ValueError(f"agent_order must be a permutation of 0..{m - 1}")
        return order


@dataclass
class QFactorEstimate:
    control: tuple
    mean: float
    stderr: float
    n: int


@dataclass
class EvalCounter:
    """Per-stage instrumentation of rollout computation."""

    q_factor_evaluations: int = 0
    trajectories_simulated: int = 0
    slot_minimizations: int = 0

    def reset(self):
        self.q_factor_evaluations = 0
        self.trajectories_simulated = 0
        self.slot_minimizations = 0


def q_factor(model: POMDPModel, belief, u, base, cfg: RolloutConfig, terminal,
             rng, counter: EvalCounter | None = None) -> QFactorEstimate:
    """Estimate the truncated-rollout Q-factor of control u at the belief.

    Returns g(b,u) + a * E_z[ J~(F(b,u,z)) ] where J~ simulates ``base``
    for ``cfg.truncation`` stages and adds a^t * terminal(final belief).
    Deterministic for a given generator state.
    """
    rng = np.random.default_rng(rng)
    u = tuple(u)
    alpha = model.discount
    g = model.expected_cost(belief, u)
    branches = model.successor_branches(belief, u, cap=cfg.obs_enum_cap)
    if branches is not None:
        probs = np.array([p for _, p, _ in branches])
        beliefs = [nb for _, _, nb in branches]
        counts = branch_allocation(probs, cfg.n_traj)
        samples = model.policy_value_samples_multi(
            base, beliefs, counts, cfg.truncation, terminal, rng)
        means = np.array([s.mean() for s in samples])
        variances = np.array([s.var(ddof=1) if len(s) > 1 else 0.0 for s in samples])
        mean = g + alpha * float(probs @ means)
        stderr = alpha * float(np.sqrt((probs**2 * variances / counts).sum()))
        n_sim = int(counts.sum())
    else:
        groups: dict = {}
        for _ in range(cfg.n_traj):
            z = model.sample_observation(belief, u, rng)
            groups[z] = groups.get(z, 0) + 1
        beliefs = [model.belief_update(belief, u, z) for z in groups]
        samples = model.policy_value_samples_multi(
            base, beliefs, list(groups.values()), cfg.truncation, terminal, rng)
        vals = np.concatenate(samples)
        mean = g + alpha * float(vals.mean())
        stderr = alpha * float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        n_sim = cfg.n_traj
    if counter is not None:
        counter.q_factor_evaluations += 1
        counter.trajectories_simulated += n_sim
    return QFactorEstimate(u, float(mean), float(stderr), cfg.n_traj)


def _assemble(others: dict, agent: int, comp, m: int) -> tuple:
    return tuple(comp if a == agent else others[a] for a in range(m))


def _q_estimates(model, belief, joints, base, cfg, terminal, seed: int, counter):
    """One Q-factor estimate per joint control, all sharing the same draws.

    Models may provide a fused ``q_factor_batch`` (the repair model does);
    the fallback evaluates candidates one by one, re-seeding the generator
    so every candidate sees identical randomness.
    """
    batch = getattr(model, "q_factor_batch", None)
    if batch is not None:
        return batch(belief, joints, base, cfg, terminal, seed, counter)
    return [q_factor(model, belief, u, base, cfg, terminal,
                     np.random.default_rng(seed), counter) for u in joints]


def _minimize_component(model, belief, agent, others, base_comp, base, cfg, terminal,
                        slot_seed: int, counter):
    """Single-component minimization with common random numbers.

    Exact Q ties break toward the base component, then toward the
    lowest-index candidate.
    """
    if counter is not None:
        counter.slot_minimizations += 1
    m = model.num_agents
    candidates = model.agent_controls(belief, agent)
    joints = [_assemble(others, agent, cand, m) for cand in candidates]
    estimates = _q_estimates(model, belief, joints, base, cfg, terminal,
                             slot_seed, counter)
    best = None
    best_key = None
    for idx, (cand, est) in enumerate(zip(candidates, estimates)):
        key = (est.mean, 0 if cand == base_comp else 1, idx)
        if best_key is None or key < best_key:
            best_key = key
            best = (cand, est)
    return best


def standard_rollout_control(model: POMDPModel, belief, base, cfg: RolloutConfig,
                             terminal, rng, counter: EvalCounter | None = None) -> tuple:
    """Argmin of the Q-factor over the full joint control set.

    Evaluates one Q-factor per joint control (the C^m scalability wall);
    refuses with EnumerationCapError when the joint set exceeds
    ``cfg.joint_control_cap``. Exact ties break toward the
    lexicographically smallest control tuple.
    """
    rng = np.random.default_rng(rng)
    per_agent = [model.agent_controls(belief, a) for a in range(model.num_agents)]
    total = 1
    for cs in per_agent:
        total *= len(cs)
    if total > cfg.joint_control_cap:
        raise EnumerationCapError(
            f"joint control set has {total} elements (cap {cfg.joint_control_cap}); "
            "use one-agent-at-a-time rollout instead")
    if counter is not None:
        counter.slot_minimizations += 1
    slot_seed = int(rng.integers(_SEED_BOUND))
    joints = model.joint_controls(belief)
    estimates = _q_estimates(model, belief, joints, base, cfg, terminal,
                             slot_seed, counter)
    best = None
    best_key = None
    for idx, (u, est) in enumerate(zip(joints, estimates)):
        key = (est.mean, idx)
        if best_key is None or key < best_key:
            best_key = key
            best = u
    return best


def one_at_a_time_control(model: POMDPModel, belief, base, cfg: RolloutConfig,
                          terminal, rng, counter: EvalCounter | None = None) -> tuple:
    """Sequential per-agent minimization (cost C*m per stage).

    Agents decide in ``cfg`` order; each slot fixes earlier agents to
    their chosen components and later agents to the base policy at the
    current belief. Ties break toward the base component, then the
    lowest candidate index.
    """
    rng = np.random.default_rng(rng)
    m = model.num_agents
    base_joint = tuple(base.joint_control(belief))
    others = dict(enumerate(base_joint))
    for agent in cfg.order(m):
        slot_seed = int(rng.integers(_SEED_BOUND))
        comp, _ = _minimize_component(model, belief, agent, others, base_joint[agent],
                                      base, cfg, terminal, slot_seed, counter)
        others[agent] = comp
    return tuple(others[a] for a in range(m))


def order_optimized_control(model: POMDPModel, belief, base, cfg: RolloutConfig,
                            terminal, rng, counter: EvalCounter | None = None):
    """Greedy agent-order construction (m(m+1)/2 single-slot minimizations).

    At each slot every unplaced agent runs its own minimization (placed
    agents at chosen components, the rest at base components); the agent
    with the smallest resulting Q is fixed. Q ties across agents break
    toward the lowest agent index. Returns (joint control, chosen order).
    """
    rng = np.random.default_rng(rng)
    m = model.num_agents
    base_joint = tuple(base.joint_control(belief))
    chosen = dict(enumerate(base_joint))
    placed: list = []
    unplaced = list(range(m))
    while unplaced:
        best_agent = None
        best_key = None
        best_comp = None
        for agent in unplaced:
            slot_seed = int(rng.integers(_SEED_BOUND))
            comp, est = _minimize_component(model, belief, agent, chosen,
                                            base_joint[agent], base, cfg, terminal,
                                            slot_seed, counter)
            key = (est.mean, agent)
            if best_key is None or key < best_key:
                best_key = key
                best_agent = agent
                best_comp = comp
        chosen[best_agent] = best_comp
        placed.append(best_agent)
        unplaced.remove(best_agent)
    return tuple(chosen[a] for a in range(m)), tuple(placed)


def multistep_lookahead_control(model: POMDPModel, belief, base, cfg: RolloutConfig,
                                terminal, rng, counter: EvalCounter | None = None) -> tuple:
    """l-step lookahead over a sampled scenario tree.

    Inner minimizations use the one-agent-at-a-time scheme; observation
    branching below the root samples ``cfg.obs_branch`` equally weighted
    successors per node; leaves are scored by the truncated base-policy
    continuation. With lookahead 1 this is exactly one-agent-at-a-time
    rollout.
    """
    if cfg.lookahead == 1:
        return one_at_a_time_control(model, belief, base, cfg, terminal, rng, counter)
    rng = np.random.default_rng(rng)
    m = model.num_agents
    alpha = model.discount
    sum_u = sum(len(model.agent_controls(belief, a)) for a in range(m))
    projected = 0
    layer = 1
    for _ in range(cfg.lookahead):
        projected += layer * sum_u
        layer *= cfg.obs_branch * sum_u
        if projected > cfg.tree_cap:
            raise EnumerationCapError(
                f"projected lookahead tree needs > {cfg.tree_cap} Q evaluations")

    def leaf_value(b, seed: int) -> float:
        vals = model.policy_value_samples(base, b, cfg.truncation, cfg.n_traj,
                                          terminal, np.random.default_rng(seed))
        if counter is not None:
            counter.trajectories_simulated += cfg.n_traj
        return float(vals.mean())

    def q_tree(b, u, remaining: int, seed: int) -> float:
        if counter is not None:
            counter.q_factor_evaluations += 1
        g = model.expected_cost(b, u)
        branch_rng = np.random.default_rng(seed)
        value = 0.0
        for _ in range(cfg.obs_branch):
            z = model.sample_observation(b, u, branch_rng)
            nb = model.belief_update(b, u, z)
            child_seed = int(branch_rng.integers(_SEED_BOUND))
            value += tree_value(nb, remaining, child_seed)
        return g + alpha * value / cfg.obs_branch

    def tree_value(b, remaining: int, seed: int) -> float:
        if remaining == 0:
            return leaf_value(b, seed)
        _, q = minimize_stage(b, remaining, seed)
        return q

    def minimize_stage(b, remaining: int, seed: int):
        stage_rng = np.random.default_rng(seed)
        base_joint = tuple(base.joint_control(b))
        others = dict(enumerate(base_joint))
        final_q = 0.0
        for agent in cfg.order(m):
            slot_seed = int(stage_rng.integers(_SEED_BOUND))
            if counter is not None:
                counter.slot_minimizations += 1
            best_key = None
            best_comp = None
            for idx, cand in enumerate(model.agent_controls(b, agent)):
                u = _assemble(others, agent, cand, m)
                q = q_tree(b, u, remaining - 1, slot_seed)
                key = (q, 0 if cand == base_joint[agent] else 1, idx)
                if best_key is None or key < best_key:
                    best_key = key
                    best_comp = cand
            others[agent] = best_comp
            final_q = best_key[0]
        return tuple(others[a] for a in range(m)), final_q

    control, _ = minimize_stage(belief, cfg.lookahead, int(rng.integers(_SEED_BOUND)))
    return control
