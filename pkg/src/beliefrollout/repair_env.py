"""Multi-robot repair POMDP on an undirected location graph.

Each location carries a damage level in 0..nu-1 that escalates one level
at a time through a Markov chain; agents move along edges or stay to
repair, observe the true level of their current location perfectly, and
share observations at the end of every stage. The shared belief factors
into known agent locations plus one damage distribution per location.

Control components are plain ints: ``FIX`` (= -1) repairs the agent's
current location; any other value is the target vertex of a move. The
class index used by policy networks maps FIX to 0 and a move to vertex
``w`` to ``w + 1``.

``RepairModel`` implements the generic ``POMDPModel`` contract over
``FactoredBelief`` and overrides the Monte Carlo continuation hook with
a vectorized batch simulator; ``RepairFlattening`` provides the exact
tabular bridge used as a brute-force oracle on tiny instances.
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .pomdp_core import (
    EnumerationCapError,
    InfeasibleControlError,
    POMDPModel,
    TabularPOMDP,
    ZeroLikelihoodError,
)

__all__ = [
    "FIX",
    "RepairGraph",
    "DamageChain",
    "FactoredBelief",
    "HiddenRepairState",
    "RepairModel",
    "TerminalDamageCost",
    "RepairFlattening",
    "chain_step",
    "stage_cost",
    "terminal_cost",
    "control_set",
    "env_step",
    "belief_step",
    "to_tabular",
    "random_initial_state",
]

FIX = -1  # control component: stay and repair the current location


@dataclass(frozen=True)
class RepairGraph:
    """Undirected, connected location graph. Vertices are 0..n_vertices-1."""

    n_vertices: int
    edges: tuple
    layout: tuple | None = None
    neighbors: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_vertices <= 0:
            raise ValueError("graph needs at least one vertex")
        adj = [set() for _ in range(self.n_vertices)]
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop at vertex {a}")
            if not (0 <= a < self.n_vertices and 0 <= b < self.n_vertices):
                raise ValueError(f"edge ({a},{b}) references unknown vertex")
            adj[a].add(b)
            adj[b].add(a)
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(s)) for s in adj))
        # connectivity check (single BFS)
        seen = {0}
        frontier = [0]
        while frontier:
            v = frontier.pop()
            for w in self.neighbors[v]:
                if w not in seen:
                    seen.add(w)
                    frontier.append(w)
        if len(seen) != self.n_vertices:
            raise ValueError("graph must be connected")

    def degree(self, v: int) -> int:
        return len(self.neighbors[v])

    def to_json(self) -> dict:
        doc = {"vertices": self.n_vertices, "edges": [list(e) for e in self.edges]}
        if self.layout is not None:
            doc["layout"] = [list(p) for p in self.layout]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RepairGraph":
        layout = doc.get("layout")
        return cls(int(doc["vertices"]),
                   tuple((int(a), int(b)) for a, b in doc["edges"]),
                   tuple(tuple(p) for p in layout) if layout is not None else None)

    @classmethod
    def load(cls, path) -> "RepairGraph":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


class DamageChain:
    """Per-location damage chain: nu levels, one-level-up escalation.

    Level k < nu-1 escalates to k+1 with probability gamma[k] and stays
    put otherwise; the top level is absorbing until repaired. ``cost``
    maps a level to the per-stage cost of leaving it unrepaired
    (non-decreasing, cost[0] = 0).
    """

    def __init__(self, nu: int, gamma, cost):
        self.nu = int(nu)
        self.gamma = np.asarray(gamma, dtype=float)
        self.cost = np.asarray(cost, dtype=float)
        if self.nu < 2:
            raise ValueError("need at least two damage levels")
        if self.gamma.shape != (self.nu - 1,):
            raise ValueError("gamma must have one entry per non-top level")
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ValueError("escalation probabilities must lie in [0, 1]")
        if self.cost.shape != (self.nu,):
            raise ValueError("cost vector must have one entry per level")
        if self.cost[0] != 0.0:
            raise ValueError("cost of level 0 must be 0")
        if np.any(np.diff(self.cost) < 0):
            raise ValueError("cost vector must be non-decreasing")
        P = np.zeros((self.nu, self.nu))
        for k in range(self.nu - 1):
            P[k, k] = 1.0 - self.gamma[k]
            P[k, k + 1] = self.gamma[k]
        P[self.nu - 1, self.nu - 1] = 1.0
        self.transition_matrix = P
        self.transition_matrix.setflags(write=False)
        self.gamma.setflags(write=False)
        self.cost.setflags(write=False)

    @property
    def terminating(self) -> bool:
        """True when repaired locations can never fall back into disrepair."""
        return bool(np.all(self.gamma == 0.0))

    def to_json(self) -> dict:
        return {"nu": self.nu, "gamma": self.gamma.tolist(), "cost": self.cost.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "DamageChain":
        return cls(doc["nu"], doc["gamma"], doc["cost"])

    @classmethod
    def load(cls, path) -> "DamageChain":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


@dataclass
class FactoredBelief:
    """Shared belief: known agent locations + per-location damage distributions.

    ``damage`` has shape (n_vertices, nu); row v is the conditional damage
    distribution of location v. On the shared belief, the row at each
    agent's current location is a point mass (a perfect local observation
    just occurred); decentralized local beliefs only guarantee this at the
    owning agent's location.
    """

    locations: tuple
    damage: np.ndarray

    def copy(self) -> "FactoredBelief":
        return FactoredBelief(tuple(self.locations), self.damage.copy())

    def validate(self, tol: float = 1e-12, require_observed: bool = True):
        d = self.damage
        if np.any(d < -tol) or np.any(d > 1 + tol):
            raise ValueError("damage probabilities must lie in [0, 1]")
        if np.max(np.abs(d.sum(axis=1) - 1.0)) > tol:
            raise ValueError("each damage distribution must sum to 1")
        if require_observed:
            for loc in self.locations:
                if not np.any(d[loc] == 1.0):
                    raise ValueError(f"location {loc} hosts an agent but is not a point mass")
        return self

    def expected_costs(self, chain: DamageChain) -> np.ndarray:
        """Per-location expected stage cost d^v . c."""
        return self.damage @ chain.cost


@dataclass
class HiddenRepairState:
    """Ground-truth state: agent locations and the true damage level per location."""

    locations: tuple
    levels: np.ndarray

    def copy(self) -> "HiddenRepairState":
        return HiddenRepairState(tuple(self.locations), self.levels.copy())


def chain_step(d: np.ndarray, chain: DamageChain, repaired: bool = False) -> np.ndarray:
    """Advance one damage distribution a single stage.

    ``repaired`` locations are reset to a point mass at level 0 before the
    chain transition is applied (a freshly repaired location can fall back
    into disrepair within the same stage).
    """
    if repaired:
        return chain.transition_matrix[0].copy()
    out = np.asarray(d, dtype=float) @ chain.transition_matrix
    s = out.sum()
    if s > 0:
        out /= s
    return out


def stage_cost(belief: FactoredBelief, chain: DamageChain) -> float:
    """Expected per-stage damage cost sum_v d^v . c."""
    return float(belief.expected_costs(chain).sum())


def terminal_cost(belief: FactoredBelief, chain: DamageChain, alpha: float) -> float:
    """Steady-state tail approximation: discounted damage cost with no control."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("discount must lie in (0, 1)")
    return stage_cost(belief, chain) / (1.0 - alpha)


class TerminalDamageCost:
    """Callable terminal cost: stage cost frozen forever, discounted."""

    def __init__(self, chain: DamageChain, alpha: float):
        if not (0.0 < alpha < 1.0):
            raise ValueError("discount must lie in (0, 1)")
        self.chain = chain
        self.scale = 1.0 / (1.0 - alpha)

    def __call__(self, belief: FactoredBelief) -> float:
        return float((belief.damage @ self.chain.cost).sum()) * self.scale

    def batch_values(self, damage: np.ndarray, locations: np.ndarray) -> np.ndarray:
        return (damage @ self.chain.cost).sum(axis=1) * self.scale


class ZeroTerminal:
    """Terminal cost approximation that is identically zero."""

    def __call__(self, belief) -> float:
        return 0.0

    def batch_values(self, damage: np.ndarray, locations: np.ndarray) -> np.ndarray:
        return np.zeros(damage.shape[0])


class RepairModel(POMDPModel):
    """POMDP dynamics of the repair problem over factored beliefs."""

    def __init__(self, graph: RepairGraph, chain: DamageChain, num_agents: int,
                 discount: float = 0.95):
        if num_agents < 1:
            raise ValueError("need at least one agent")
        if not (0.0 < discount < 1.0):
            raise ValueError("discount must lie in (0, 1)")
        self.graph = graph
        self.chain = chain
        self.m = int(num_agents)
        self._discount = float(discount)
        self._controls = tuple((FIX,) + self.graph.neighbors[v]
                               for v in range(graph.n_vertices))
        self._cost_flat = np.tile(chain.cost, graph.n_vertices)
        self._eye = np.eye(chain.nu)

    @property
    def discount(self) -> float:
        return self._discount

    @property
    def num_agents(self) -> int:
        return self.m

    # -- controls ------------------------------------------------------------

    def agent_controls(self, belief: FactoredBelief, agent: int) -> list:
        return list(self._controls[belief.locations[agent]])

    def _check_feasible(self, locations, u):
        if len(u) != self.m:
            raise InfeasibleControlError(f"expected {self.m} components, got {len(u)}")
        for loc, comp in zip(locations, u):
            if comp != FIX and comp not in self.graph.neighbors[loc]:
                raise InfeasibleControlError(
                    f"component {comp} is not adjacent to location {loc}")

    def _apply_controls(self, locations, u):
        """(fixed location set, new locations) implied by a joint control."""
        fixed = {loc for loc, comp in zip(locations, u) if comp == FIX}
        new_locs = tuple(loc if comp == FIX else comp for loc, comp in zip(locations, u))
        return fixed, new_locs

    # -- costs and observations ----------------------------------------------

    def expected_cost(self, belief: FactoredBelief, u) -> float:
        self._check_feasible(belief.locations, u)
        fixed, _ = self._apply_controls(belief.locations, u)
        per_loc = belief.expected_costs(self.chain)
        return float(per_loc.sum() - sum(per_loc[v] for v in fixed))

    def _predicted_damage(self, belief: FactoredBelief, u):
        """Damage matrix after fixes and one chain step, plus the new locations."""
        fixed, new_locs = self._apply_controls(belief.locations, u)
        damage = belief.damage.copy()
        for v in fixed:
            damage[v] = 0.0
            damage[v, 0] = 1.0
        damage = damage @ self.chain.transition_matrix
        damage /= damage.sum(axis=1, keepdims=True)
        return damage, new_locs

    def observation_distribution(self, belief: FactoredBelief, u, cap: int | None = None):
        self._check_feasible(belief.locations, u)
        damage, new_locs = self._predicted_damage(belief, u)
        unique_locs = sorted(set(new_locs))
        supports = []
        total = 1
        for v in unique_locs:
            levels = np.nonzero(damage[v] > 0.0)[0]
            supports.append([(int(k), float(damage[v, k])) for k in levels])
            total *= len(levels)
            if cap is not None and total > cap:
                return None
        out = []
        for combo in itertools.product(*supports):
            level_at = {v: k for v, (k, _) in zip(unique_locs, combo)}
            p = 1.0
            for _, q in combo:
                p *= q
            z = tuple(level_at[v] for v in new_locs)
            out.append((z, p))
        return out

    def successor_branches(self, belief: FactoredBelief, u, cap: int | None = None):
        self._check_feasible(belief.locations, u)
        damage, new_locs = self._predicted_damage(belief, u)
        unique_locs = sorted(set(new_locs))
        supports = []
        total = 1
        for v in unique_locs:
            levels = np.nonzero(damage[v] > 0.0)[0]
            supports.append([(int(k), float(damage[v, k])) for k in levels])
            total *= len(levels)
            if cap is not None and total > cap:
                return None
        out = []
        for combo in itertools.product(*supports):
            p = 1.0
            nxt = damage.copy()
            level_at = {}
            for v, (k, q) in zip(unique_locs, combo):
                p *= q
                level_at[v] = k
                nxt[v] = 0.0
                nxt[v, k] = 1.0
            z = tuple(level_at[v] for v in new_locs)
            out.append((z, p, FactoredBelief(new_locs, nxt)))
        return out

    # -- belief estimator ------------------------------------------------------

    def belief_update(self, belief: FactoredBelief, u, z, strict: bool = True):
        """Belief estimator specialized to perfect local damage observations.

        Applies fixes as point masses at level 0, moves the agents, pushes
        every location through the damage chain, then collapses each agent's
        new location onto the observed level. With ``strict`` (the shared
        belief), an observed level of zero prior probability raises
        ZeroLikelihoodError; decentralized local updates pass strict=False
        and let the ground-truth observation overwrite the stale prediction.
        """
        self._check_feasible(belief.locations, u)
        if len(z) != self.m:
            raise ValueError("observation must carry one level per agent")
        damage, new_locs = self._predicted_damage(belief, u)
        for agent, (v, k) in enumerate(zip(new_locs, z)):
            if not (0 <= k < self.chain.nu):
                raise ValueError(f"observed level {k} outside 0..{self.chain.nu - 1}")
            if strict and damage[v, k] <= 0.0:
                raise ZeroLikelihoodError(
                    f"agent {agent} observed level {k} at location {v}, "
                    f"which has zero predicted probability")
            damage[v] = 0.0
            damage[v, k] = 1.0
        return FactoredBelief(new_locs, damage)

    # -- simulator ---------------------------------------------------------------

    def sample_state(self, belief: FactoredBelief, rng: np.random.Generator) -> HiddenRepairState:
        cum = np.cumsum(belief.damage, axis=1)
        r = rng.random(self.graph.n_vertices) * cum[:, -1]
        levels = (cum <= r[:, None]).sum(axis=1)
        np.clip(levels, 0, self.chain.nu - 1, out=levels)
        return HiddenRepairState(tuple(belief.locations), levels.astype(np.int64))

    def step(self, state: HiddenRepairState, u, rng: np.random.Generator):
        """One environment stage.

        Fixes zero the true level at the repairing agents' locations, moves
        relocate; the realized stage cost is charged after fixes; every
        location then advances one chain step (one uniform is consumed per
        location regardless of the control, so paired policy comparisons
        share identical escalation noise); finally each agent observes the
        true post-escalation level at its new location.
        """
        self._check_feasible(state.locations, u)
        fixed, new_locs = self._apply_controls(state.locations, u)
        levels = state.levels.copy()
        for v in fixed:
            levels[v] = 0
        cost = float(self.chain.cost[levels].sum())
        draws = rng.random(self.graph.n_vertices)
        can_escalate = levels < self.chain.nu - 1
        esc = can_escalate & (draws < self.chain.gamma[np.minimum(levels, self.chain.nu - 2)])
        levels = levels + esc.astype(np.int64)
        z = tuple(int(levels[v]) for v in new_locs)
        return HiddenRepairState(new_locs, levels), z, cost

    def sample_observation(self, belief: FactoredBelief, u, rng: np.random.Generator):
        damage, new_locs = self._predicted_damage(belief, u)
        unique_locs = sorted(set(new_locs))
        level_at = {}
        for v in unique_locs:
            c = np.cumsum(damage[v])
            r = rng.random() * c[-1]
            level_at[v] = int(min(np.searchsorted(c, r, side="right"), self.chain.nu - 1))
        return tuple(level_at[v] for v in new_locs)

    # -- batched Monte Carlo continuation ------------------------------------------

    def _policy_batch_components(self, policy, locations: np.ndarray, damage: np.ndarray):
        if hasattr(policy, "batch_components"):
            return policy.batch_components(locations, damage, self)
        out = np.empty(locations.shape, dtype=np.int64)
        for r in range(locations.shape[0]):
            out[r] = policy.joint_control(
                FactoredBelief(tuple(int(v) for v in locations[r]), damage[r]))
        return out

    def _batch_rollout_values(self, policy, damage: np.ndarray, locations: np.ndarray,
                              t: int, terminal, rng: np.random.Generator | None = None,
                              noise: np.ndarray | None = None,
                              slot_ids: np.ndarray | None = None) -> np.ndarray:
        """Vectorized t-stage truncated policy cost from a batch of beliefs.

        Mirrors the scalar law exactly: expected stage cost after fixes,
        chain push, then observation sampling and collapse at each agent's
        new location (two agents sharing a location observe the same level).
        Observation noise comes either from ``rng`` or from a precomputed
        ``noise`` tensor of shape (t, n_slots, n_vertices) indexed by
        (stage, per-row ``slot_ids``, observed location): rows of different
        candidate controls that visit the same location at the same stage
        then see the same sampled level (common random numbers).
        """
        B = damage.shape[0]
        rows = np.arange(B)
        P = self.chain.transition_matrix
        alpha = self._discount
        total = np.zeros(B)
        disc = 1.0
        eye = self._eye
        for k in range(t):
            comps = self._policy_batch_components(policy, locations, damage)
            for a in range(self.m):
                fixers = comps[:, a] == FIX
                if np.any(fixers):
                    damage[fixers, locations[fixers, a]] = eye[0]
            total += disc * (damage.reshape(B, -1) @ self._cost_flat)
            locations = np.where(comps != FIX, comps, locations)
            damage = damage @ P
            if noise is None:
                draws = rng.random((B, self.m))
            else:
                draws = None  # looked up per agent location below
            for a in range(self.m):
                loc_a = locations[:, a]
                cum = np.cumsum(damage[rows, loc_a], axis=1)
                u_obs = draws[:, a] if noise is None else noise[k, slot_ids, loc_a]
                r = u_obs * cum[:, -1]
                lvl = np.minimum((cum <= r[:, None]).sum(axis=1), self.chain.nu - 1)
                damage[rows, loc_a] = eye[lvl]
            disc *= alpha
        if hasattr(terminal, "batch_values"):
            tail = terminal.batch_values(damage, locations)
        else:
            tail = np.array([terminal(FactoredBelief(tuple(int(v) for v in locations[r]),
                                                     damage[r])) for r in range(B)])
        return total + disc * tail

    def q_factor_batch(self, belief: FactoredBelief, joints, base, cfg, terminal,
                       seed: int, counter=None) -> list:
        """Fused Q-factor estimates for several candidate controls.

        All candidates share one continuation batch and one noise tensor
        (common random numbers: trajectory slot j of every candidate sees
        identical draws). Per candidate, the first-step observation
        expectation is exact when its successor support fits within
        ``cfg.obs_enum_cap``, and otherwise sampled with ``cfg.n_traj``
        shared hidden draws. Matches the generic ``rollout.q_factor`` law.
        """
        from .rollout import QFactorEstimate, branch_allocation

        rng = np.random.default_rng(seed)
        alpha = self._discount
        t, n_traj = cfg.truncation, cfg.n_traj
        V, nu, m = self.graph.n_vertices, self.chain.nu, self.m
        first_draws = rng.random((n_traj, V))   # keyed by (draw, location)
        plans = []
        total_rows = 0
        for u in joints:
            g = self.expected_cost(belief, u)
            pushed, new_locs = self._predicted_damage(belief, u)
            unique_locs = sorted(set(new_locs))
            supports = []
            n_branches = 1
            for v in unique_locs:
                lv = np.nonzero(pushed[v] > 0.0)[0]
                supports.append(lv)
                n_branches *= len(lv)
            probs = None
            level_rows = []
            if n_branches <= cfg.obs_enum_cap:
                level_rows = list(itertools.product(*supports))
                probs = np.empty(len(level_rows))
                for i, combo in enumerate(level_rows):
                    p = 1.0
                    for v, k in zip(unique_locs, combo):
                        p *= pushed[v, k]
                    probs[i] = p
                counts = branch_allocation(probs, n_traj)
            else:
                lvls = np.empty((n_traj, len(unique_locs)), dtype=np.int64)
                for i, v in enumerate(unique_locs):
                    c = np.cumsum(pushed[v])
                    lvls[:, i] = np.minimum(
                        np.searchsorted(c, first_draws[:, v] * c[-1], side="right"),
                        nu - 1)
                uniq, cnt = np.unique(lvls, axis=0, return_counts=True)
                level_rows = [tuple(row) for row in uniq]
                counts = cnt.astype(np.int64)
            branches = []
            for combo, cnt in zip(level_rows, counts):
                succ = pushed.copy()
                for v, k in zip(unique_locs, combo):
                    succ[v] = 0.0
                    succ[v, int(k)] = 1.0
                branches.append((int(cnt), succ))
            rows = int(counts.sum())
            plans.append((g, probs, counts, branches, new_locs, rows))
            total_rows += rows
        # Continuation noise is keyed by (stage, trajectory index within the
        # branch, location), so trajectories of different candidates that
        # share a branch index and visit the same location see identical
        # draws: Q-factor differences then reflect the controls, not the
        # noise (common random numbers).
        damage = np.empty((total_rows, V, nu))
        locations = np.empty((total_rows, m), dtype=np.int64)
        slot_ids = np.empty(total_rows, dtype=np.int64)
        max_slots = 1
        pos = 0
        for g, probs, counts, branches, new_locs, rows in plans:
            for cnt, succ in branches:
                damage[pos:pos + cnt] = succ
                locations[pos:pos + cnt] = new_locs
                slot_ids[pos:pos + cnt] = np.arange(cnt)
                max_slots = max(max_slots, cnt)
                pos += cnt
        noise = rng.random((t, max_slots, V))
        values = self._batch_rollout_values(base, damage, locations, t, terminal,
                                            noise=noise, slot_ids=slot_ids)
        out = []
        pos = 0
        for (g, probs, counts, branches, new_locs, rows), u in zip(plans, joints):
            vals = values[pos:pos + rows]
            pos += rows
            if probs is not None:
                starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
                sums = np.add.reduceat(vals, starts)
                sqs = np.add.reduceat(vals * vals, starts)
                means = sums / counts
                with np.errstate(invalid="ignore", divide="ignore"):
                    branch_var = np.where(counts > 1,
                                          (sqs - counts * means**2) / np.maximum(counts - 1, 1),
                                          0.0)
                branch_var = np.maximum(branch_var, 0.0)
                mean = g + alpha * float(probs @ means)
                stderr = alpha * float(np.sqrt((probs**2 * branch_var / counts).sum()))
            else:
                mean = g + alpha * vals.mean()
                stderr = alpha * float(vals.std(ddof=1) / np.sqrt(rows)) if rows > 1 else 0.0
            out.append(QFactorEstimate(tuple(u), float(mean), stderr, n_traj))
        if counter is not None:
            counter.q_factor_evaluations += len(joints)
            counter.trajectories_simulated += total_rows
        return out

    def policy_value_samples(self, policy, belief: FactoredBelief, t: int, n: int,
                             terminal, rng: np.random.Generator) -> np.ndarray:
        damage = np.broadcast_to(belief.damage, (n,) + belief.damage.shape).copy()
        locations = np.broadcast_to(np.asarray(belief.locations, dtype=np.int64),
                                    (n, self.m)).copy()
        return self._batch_rollout_values(policy, damage, locations, t, terminal, rng)

    def policy_value_samples_multi(self, policy, beliefs, counts, t: int, terminal,
                                   rng: np.random.Generator) -> list:
        counts = [int(k) for k in counts]
        B = sum(counts)
        V, nu = self.graph.n_vertices, self.chain.nu
        damage = np.empty((B, V, nu))
        locations = np.empty((B, self.m), dtype=np.int64)
        pos = 0
        for b, k in zip(beliefs, counts):
            damage[pos:pos + k] = b.damage
            locations[pos:pos + k] = np.asarray(b.locations, dtype=np.int64)
            pos += k
        vals = self._batch_rollout_values(policy, damage, locations, t, terminal, rng)
        out = []
        pos = 0
        for k in counts:
            out.append(vals[pos:pos + k])
            pos += k
        return out


# -- module-level operations ---------------------------------------------------------


def control_set(model: RepairModel, belief: FactoredBelief, agent: int) -> list:
    """{FIX} plus one move per neighbor of the agent's current location."""
    return model.agent_controls(belief, agent)


def env_step(model: RepairModel, state: HiddenRepairState, u, rng: np.random.Generator):
    """Simulate one stage; returns (next state, observation, realized cost)."""
    return model.step(state, u, rng)


def belief_step(model: RepairModel, belief: FactoredBelief, u, z,
                strict: bool = True) -> FactoredBelief:
    """Shared-belief estimator for the repair problem (see RepairModel.belief_update)."""
    return model.belief_update(belief, u, z, strict=strict)


def random_initial_state(graph: RepairGraph, chain: DamageChain, num_agents: int,
                         rng: np.random.Generator, p_damage: float = 0.3):
    """Sample a (hidden state, matching belief) pair.

    Agent locations are uniform; each location is independently damaged
    with probability ``p_damage`` at a level uniform in 1..nu-1. The belief
    carries the corresponding per-location prior, collapsed to the true
    point mass at each agent's start location.
    """
    if not (0.0 <= p_damage <= 1.0):
        raise ValueError("p_damage must lie in [0, 1]")
    V, nu = graph.n_vertices, chain.nu
    locations = tuple(int(v) for v in rng.integers(0, V, size=num_agents))
    damaged = rng.random(V) < p_damage
    levels = np.where(damaged, rng.integers(1, nu, size=V), 0).astype(np.int64)
    prior = np.empty(nu)
    prior[0] = 1.0 - p_damage
    prior[1:] = p_damage / (nu - 1)
    damage = np.tile(prior, (V, 1))
    for v in set(locations):
        damage[v] = 0.0
        damage[v, levels[v]] = 1.0
    state = HiddenRepairState(locations, levels)
    belief = FactoredBelief(locations, damage)
    return state, belief


class RepairFlattening:
    """Exact enumeration bridge between the factored and tabular views.

    Hidden states enumerate (agent locations, per-location levels); the
    per-agent tabular control set is [FIX, move-to-0, ..., move-to-V-1]
    so control indices coincide with policy-network class ids. A move to
    a non-adjacent vertex is flattened as a no-op (the agent stays and
    does not repair), keeping every transition row stochastic; feasible
    queries never hit that convention.
    """

    def __init__(self, graph: RepairGraph, chain: DamageChain, num_agents: int):
        self.graph = graph
        self.chain = chain
        self.m = int(num_agents)
        self.V = graph.n_vertices
        self.nu = chain.nu
        self.n_level_combos = self.nu ** self.V
        self.n_states = (self.V ** self.m) * self.n_level_combos
        self.components = [FIX] + list(range(self.V))

    # state index = locations (mixed radix V^m, agent 0 most significant)
    # * nu^V + levels (mixed radix, vertex 0 most significant)

    def state_index(self, locations, levels) -> int:
        loc_idx = 0
        for v in locations:
            loc_idx = loc_idx * self.V + int(v)
        lvl_idx = 0
        for k in levels:
            lvl_idx = lvl_idx * self.nu + int(k)
        return loc_idx * self.n_level_combos + lvl_idx

    def state_decode(self, index: int):
        loc_idx, lvl_idx = divmod(int(index), self.n_level_combos)
        locations = [0] * self.m
        for a in range(self.m - 1, -1, -1):
            loc_idx, locations[a] = divmod(loc_idx, self.V)
        levels = [0] * self.V
        for v in range(self.V - 1, -1, -1):
            lvl_idx, levels[v] = divmod(lvl_idx, self.nu)
        return tuple(locations), np.asarray(levels, dtype=np.int64)

    def obs_index(self, z) -> int:
        idx = 0
        for k in z:
            idx = idx * self.nu + int(k)
        return idx

    def control_index(self, u) -> tuple:
        """Map repair components to per-agent tabular control indices."""
        return tuple(0 if comp == FIX else comp + 1 for comp in u)

    def flatten_belief(self, belief: FactoredBelief) -> np.ndarray:
        level_probs = np.array([1.0])
        for v in range(self.V):
            level_probs = np.kron(level_probs, belief.damage[v])
        out = np.zeros(self.n_states)
        loc_idx = 0
        for v in belief.locations:
            loc_idx = loc_idx * self.V + int(v)
        start = loc_idx * self.n_level_combos
        out[start:start + self.n_level_combos] = level_probs
        return out

    def unflatten_belief(self, flat: np.ndarray) -> FactoredBelief:
        """Recover the factored form (agent locations and per-location marginals).

        Beliefs reachable through the repair filter are always product-form
        with a single location block, so the marginals are lossless.
        """
        support = np.nonzero(flat)[0]
        if len(support) == 0:
            raise ValueError("belief has empty support")
        locations = self.state_decode(int(support[0]))[0]
        damage = np.zeros((self.V, self.nu))
        for idx in support:
            locs, levels = self.state_decode(int(idx))
            if locs != locations:
                raise ValueError("belief support spans multiple agent locations")
            for v in range(self.V):
                damage[v, levels[v]] += flat[idx]
        damage /= damage.sum(axis=1, keepdims=True)
        return FactoredBelief(locations, damage)

    def build_pomdp(self, discount: float, cap: int = 100_000) -> TabularPOMDP:
        if self.n_states > cap:
            raise EnumerationCapError(
                f"flattening would create {self.n_states} states (cap {cap})")
        n = self.n_states
        V, nu, m = self.V, self.nu, self.m
        gamma = self.chain.gamma
        joint_controls = list(itertools.product(range(V + 1), repeat=m))
        n_obs = nu ** m
        transition, obs, cost = {}, {}, {}
        for u_idx in joint_controls:
            comps = [self.components[i] for i in u_idx]
            P = np.zeros((n, n))
            O = np.zeros((n, n_obs))
            G = np.zeros((n, n))
            for i in range(n):
                locations, levels = self.state_decode(i)
                new_locs = []
                post = levels.copy()
                for loc, comp in zip(locations, comps):
                    if comp == FIX:
                        post[loc] = 0
                        new_locs.append(loc)
                    elif comp in self.graph.neighbors[loc]:
                        new_locs.append(comp)
                    else:
                        new_locs.append(loc)  # infeasible move: stay, no repair
                g_val = float(self.chain.cost[post].sum())
                branches = []
                for v in range(V):
                    k = post[v]
                    if k < nu - 1 and gamma[k] > 0.0:
                        branches.append(((k, 1.0 - gamma[k]), (k + 1, gamma[k])))
                    else:
                        branches.append(((k, 1.0),))
                for combo in itertools.product(*branches):
                    p = 1.0
                    nxt = [0] * V
                    for v, (k, q) in enumerate(combo):
                        p *= q
                        nxt[v] = k
                    j = self.state_index(new_locs, nxt)
                    P[i, j] += p
                    G[i, j] = g_val
            for j in range(n):
                locations, levels = self.state_decode(j)
                O[j, self.obs_index(tuple(levels[v] for v in locations))] = 1.0
            transition[u_idx] = P
            obs[u_idx] = O
            cost[u_idx] = G
        control_sets = [list(self.components) for _ in range(m)]
        return TabularPOMDP(n, control_sets, transition, obs, cost, discount)


def to_tabular(graph: RepairGraph, chain: DamageChain, num_agents: int,
               discount: float, cap: int = 100_000) -> TabularPOMDP:
    """Exact tabular flattening for oracle-scale instances (refuses above cap)."""
    return RepairFlattening(graph, chain, num_agents).build_pomdp(discount, cap)
