"""Control selection under imperfect communication.

Two families:

* Shared belief, imperfect control sharing: each agent minimizes only its
  own component, substituting estimates ("signaling") for the components
  it cannot receive - the base policy (AMR-B), a trained policy network
  (AMR-N), a pair of policy-iteration networks (AMR-PI), locally
  communicated components within a hop radius (AMR-LC), or an
  intermittently reachable cloud falling back to local communication
  (AMR-ILC).

* Imperfect belief and control sharing: each agent tracks a private local
  belief that only ever incorporates its own observations, resynchronized
  with the true global belief whenever the cloud is reachable (AMR-IB1
  executes a one-component local rollout offline, AMR-IB0 the plain base
  policy).

Cloud reachability is one Bernoulli(rho) draw per stage shared by all
agents. Hop distances are measured on the location graph between current
agent locations. "Within radius r" is strict (fewer than r hops), so r=0
disables local communication entirely.
"""

from dataclasses import dataclass

import numpy as np

from .base_policy import ShortestPathTable, build_paths
from .pomdp_core import POMDPModel
from .repair_env import FactoredBelief, HiddenRepairState, RepairModel
from .rollout import (
    EvalCounter,
    RolloutConfig,
    _minimize_component,
    one_at_a_time_control,
)

__all__ = [
    "CommsArchitecture",
    "LocalBeliefBank",
    "IBState",
    "IBStepResult",
    "amr_b_control",
    "amr_n_control",
    "amr_pi_control",
    "amr_lc_control",
    "amr_ilc_control",
    "local_belief_advance",
    "amr_ib_control",
    "amr_ib_advance",
    "amr_ib_step",
]

_SEED_BOUND = 2**63

_KINDS = ("perfect", "amr-b", "amr-n", "amr-pi", "amr-lc", "amr-ilc", "amr-ib1", "amr-ib0")


@dataclass(frozen=True)
class CommsArchitecture:
    """Tagged communication scheme plus its parameters.

    ``radius`` is the local-communication hop radius (AMR-LC / AMR-ILC);
    ``rho`` the per-stage cloud connection probability (AMR-ILC / AMR-IB*).
    """

    kind: str
    radius: int = 0
    rho: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}; expected one of {_KINDS}")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if not (0.0 < self.rho <= 1.0):
            raise ValueError("rho must lie in (0, 1]")


@dataclass
class LocalBeliefBank:
    """One private belief per agent, each evolved under assumed controls."""

    beliefs: list

    def copy(self) -> "LocalBeliefBank":
        return LocalBeliefBank([b.copy() for b in self.beliefs])


@dataclass
class IBState:
    """Trajectory state of the intermittent-belief architectures."""

    bank: LocalBeliefBank
    global_belief: FactoredBelief

    @classmethod
    def fresh(cls, belief: FactoredBelief, num_agents: int) -> "IBState":
        return cls(LocalBeliefBank([belief.copy() for _ in range(num_agents)]),
                   belief.copy())


@dataclass
class IBStepResult:
    control: tuple
    connected: bool
    state: HiddenRepairState
    observation: tuple
    cost: float
    next: IBState


def _slot_seeds(rng: np.random.Generator, m: int) -> list:
    """One Q-evaluation seed per decision slot (same draw pattern as 1-at-a-time)."""
    return [int(rng.integers(_SEED_BOUND)) for _ in range(m)]


def amr_b_control(model: POMDPModel, belief, base, cfg: RolloutConfig, terminal,
                  rng, counter: EvalCounter | None = None) -> tuple:
    """m independent single-component minimizations, all other components at base.

    No information flows between the agents' minimizations; this is the
    extreme no-communication case and is susceptible to duplicated or
    oscillatory moves.
    """
    rng = np.random.default_rng(rng)
    m = model.num_agents
    base_joint = tuple(base.joint_control(belief))
    others = dict(enumerate(base_joint))
    out = list(base_joint)
    for agent in cfg.order(m):
        seed = int(rng.integers(_SEED_BOUND))
        comp, _ = _minimize_component(model, belief, agent, others, base_joint[agent],
                                      base, cfg, terminal, seed, counter)
        out[agent] = comp  # never fed back into later slots
    return tuple(out)


def amr_n_control(model: POMDPModel, belief, base, signaling, cfg: RolloutConfig,
                  terminal, rng, counter: EvalCounter | None = None) -> tuple:
    """Like AMR-B, but predecessors are predicted by a trained signaling policy.

    ``signaling`` is a policy approximating one-agent-at-a-time rollout
    (typically a trained classifier policy); each agent substitutes the
    predicted components for its predecessors and base components for its
    successors. The prediction never sees the agents' own minimization
    results.
    """
    if signaling is None:
        raise ValueError("AMR-N requires a trained signaling policy")
    rng = np.random.default_rng(rng)
    m = model.num_agents
    base_joint = tuple(base.joint_control(belief))
    predicted = tuple(signaling.joint_control(belief))
    order = cfg.order(m)
    out = list(base_joint)
    for slot, agent in enumerate(order):
        seed = int(rng.integers(_SEED_BOUND))
        others = {}
        for pos, other in enumerate(order):
            if other == agent:
                continue
            others[other] = predicted[other] if pos < slot else base_joint[other]
        comp, _ = _minimize_component(model, belief, agent, others, base_joint[agent],
                                      base, cfg, terminal, seed, counter)
        out[agent] = comp
    return tuple(out)


def amr_pi_control(model: POMDPModel, belief, pi_policies, cfg: RolloutConfig,
                   terminal, rng, counter: EvalCounter | None = None,
                   iteration: int = -1) -> tuple:
    """AMR-N with both roles taken by approximate-PI networks.

    The signaling policy is the selected iteration (default: the last);
    the base policy is the previous iteration's network.
    """
    if len(pi_policies) < 2:
        raise ValueError("AMR-PI needs at least two trained policy iterations")
    k = range(len(pi_policies))[iteration]
    if k < 1:
        raise ValueError("selected iteration must have a predecessor")
    return amr_n_control(model, belief, pi_policies[k - 1], pi_policies[k],
                         cfg, terminal, rng, counter)


def amr_lc_control(model: RepairModel, belief, base, cfg: RolloutConfig, terminal,
                   radius: int, rng, counter: EvalCounter | None = None,
                   paths: ShortestPathTable | None = None) -> tuple:
    """Sequential minimization with predecessor components shared within a radius.

    A predecessor's chosen component reaches agent l only when the two
    agents' current locations are fewer than ``radius`` hops apart; all
    other components are estimated by the base policy. radius=0 is exactly
    AMR-B; radius above the graph diameter is exactly one-agent-at-a-time.
    """
    rng = np.random.default_rng(rng)
    if paths is None:
        paths = build_paths(model.graph)
    m = model.num_agents
    base_joint = tuple(base.joint_control(belief))
    order = cfg.order(m)
    chosen: dict = {}
    for slot, agent in enumerate(order):
        seed = int(rng.integers(_SEED_BOUND))
        others = {}
        for pos, other in enumerate(order):
            if other == agent:
                continue
            in_range = paths.dist[belief.locations[agent], belief.locations[other]] < radius
            if pos < slot and in_range:
                others[other] = chosen[other]
            else:
                others[other] = base_joint[other]
        comp, _ = _minimize_component(model, belief, agent, others, base_joint[agent],
                                      base, cfg, terminal, seed, counter)
        chosen[agent] = comp
    return tuple(chosen[a] for a in range(m))


def amr_ilc_control(model: RepairModel, belief, base, cfg: RolloutConfig, terminal,
                    radius: int, rho: float, rng,
                    counter: EvalCounter | None = None,
                    comms_rng: np.random.Generator | None = None,
                    paths: ShortestPathTable | None = None) -> tuple:
    """Cloud with probability rho, AMR-LC(radius) otherwise.

    When the cloud answers, all predecessor components are available and
    the stage is plain one-agent-at-a-time rollout. The connectivity draw
    comes from ``comms_rng`` (spawned from ``rng`` if absent) so that the
    rollout stream is untouched by it.
    """
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    if comms_rng is None:
        comms_rng, rng = rng.spawn(2)
    if comms_rng.random() < rho:
        return one_at_a_time_control(model, belief, base, cfg, terminal, rng, counter)
    return amr_lc_control(model, belief, base, cfg, terminal, radius, rng, counter, paths)


# -- imperfect belief and control sharing -------------------------------------------


def local_belief_advance(model: RepairModel, belief: FactoredBelief, assumed_joint,
                         agent: int, observed_level: int) -> FactoredBelief:
    """Advance one agent's private belief under an assumed joint control.

    Only the agent's own observation is applied: its new location collapses
    onto the ground-truth observed level (overwriting a stale prediction if
    the assumed play of the other agents turned out wrong); every other
    location is pure prediction.
    """
    damage, new_locs = model._predicted_damage(belief, assumed_joint)
    v = new_locs[agent]
    damage[v] = 0.0
    damage[v, int(observed_level)] = 1.0
    return FactoredBelief(new_locs, damage)


def amr_ib_control(model: RepairModel, ib: IBState, variant: str, base,
                   cfg: RolloutConfig, terminal, rho: float, rng,
                   counter: EvalCounter | None = None,
                   comms_rng: np.random.Generator | None = None):
    """Stage control of AMR-IB1 / AMR-IB0; returns (control, connected, synced state).

    Cloud reachable: every local belief is replaced by the true global
    belief and the stage is one-agent-at-a-time rollout on it. Offline,
    IB1 has each agent minimize its own component at its local belief
    (others at base), while IB0 executes the base component at the local
    belief.
    """
    if variant not in ("ib1", "ib0"):
        raise ValueError("variant must be 'ib1' or 'ib0'")
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    if comms_rng is None:
        comms_rng, rng = rng.spawn(2)
    m = model.num_agents
    connected = bool(comms_rng.random() < rho)
    if connected:
        ib = IBState.fresh(ib.global_belief, m)
        control = one_at_a_time_control(model, ib.global_belief, base, cfg, terminal,
                                        rng, counter)
        return control, True, ib
    components = []
    seeds = _slot_seeds(rng, m)
    for agent in range(m):
        local = ib.bank.beliefs[agent]
        if variant == "ib0":
            components.append(base.component(local, agent))
            continue
        base_joint = tuple(base.joint_control(local))
        others = dict(enumerate(base_joint))
        comp, _ = _minimize_component(model, local, agent, others, base_joint[agent],
                                      base, cfg, terminal, seeds[agent], counter)
        components.append(comp)
    return tuple(components), False, ib


def amr_ib_advance(model: RepairModel, ib: IBState, connected: bool, control,
                   observation, variant: str, base) -> IBState:
    """Advance the global belief and every local belief after the stage executed.

    The global belief sees the executed control and all observations. Each
    local belief sees its own observation only; offline it assumes the
    other agents played base at its own local belief (IB1 additionally
    knows its own executed component, which for IB0 coincides with base).
    """
    new_global = model.belief_update(ib.global_belief, control, observation)
    new_bank = []
    for agent in range(model.num_agents):
        if connected:
            source, assumed = ib.global_belief, tuple(control)
        else:
            source = ib.bank.beliefs[agent]
            assumed = list(base.joint_control(source))
            assumed[agent] = control[agent]
            assumed = tuple(assumed)
        new_bank.append(local_belief_advance(model, source, assumed, agent,
                                             observation[agent]))
    return IBState(LocalBeliefBank(new_bank), new_global)


def amr_ib_step(model: RepairModel, ib: IBState, state: HiddenRepairState,
                variant: str, base, cfg: RolloutConfig, terminal, rho: float,
                rng, counter: EvalCounter | None = None,
                comms_rng: np.random.Generator | None = None,
                env_rng: np.random.Generator | None = None) -> IBStepResult:
    """Full stage of an intermittent-belief architecture.

    Draws connectivity, selects the executed joint control, steps the true
    environment, and advances both the global belief and the per-agent
    local beliefs with their own observations.
    """
    rng = np.random.default_rng(rng)
    if env_rng is None:
        env_rng, rng = rng.spawn(2)
    control, connected, synced = amr_ib_control(model, ib, variant, base, cfg,
                                                terminal, rho, rng, counter, comms_rng)
    next_state, z, cost = model.step(state, control, env_rng)
    nxt = amr_ib_advance(model, synced, connected, control, z, variant, base)
    return IBStepResult(control, connected, next_state, z, cost, nxt)
