"""Generic finite-state POMDP machinery in belief space.

Belief vectors are plain 1-D float64 arrays: entry i is the conditional
probability of hidden state i given the control-observation history.
The module provides the belief estimator (Bayes filter), exact expected
stage costs and observation likelihoods, a composite state/belief
simulator, and a brute-force exact policy evaluator used as an oracle
by the rest of the package.

Models with structured beliefs (see ``repair_env``) subclass
:class:`POMDPModel` and may override the generic hooks with faster,
equivalent implementations.
"""

import itertools
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ZeroLikelihoodError",
    "EnumerationCapError",
    "InfeasibleControlError",
    "validate_belief",
    "Policy",
    "POMDPModel",
    "TabularPOMDP",
    "TrajectoryRecord",
    "belief_update",
    "expected_stage_cost",
    "observation_likelihood",
    "simulate_trajectory",
    "policy_cost_exact",
]

BELIEF_TOL = 1e-12


class ZeroLikelihoodError(ValueError):
    """An observation with zero likelihood under (belief, control) was supplied.

    This signals an inconsistency between the model and the trajectory; it
    is never silently recovered.
    """


class EnumerationCapError(RuntimeError):
    """An exact enumeration would exceed its configured budget."""


class InfeasibleControlError(ValueError):
    """A control outside the admissible set was supplied."""


def validate_belief(probs: np.ndarray, tol: float = BELIEF_TOL) -> np.ndarray:
    """Check belief-vector invariants and return the array unchanged."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1:
        raise ValueError("belief must be a 1-D probability vector")
    if np.any(probs < -tol) or np.any(probs > 1 + tol):
        raise ValueError("belief entries must lie in [0, 1]")
    s = probs.sum()
    if abs(s - 1.0) > max(tol, 1e-12 * len(probs)):
        raise ValueError(f"belief entries sum to {s!r}, expected 1")
    return probs


def _sample_index(pmf: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an index from a pmf using a single uniform (stable, fast)."""
    c = np.cumsum(pmf)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right").clip(0, len(pmf) - 1))


class Policy(ABC):
    """Maps a belief to a joint control; optionally exposes per-agent components."""

    @abstractmethod
    def joint_control(self, belief):
        """Return the joint control at ``belief`` (a tuple, one entry per agent)."""

    def component(self, belief, agent: int):
        return self.joint_control(belief)[agent]


class POMDPModel(ABC):
    """Behavioral contract shared by tabular and structured POMDP backends.

    Implementations must be immutable after construction so they can be
    shared across workers; all mutation lives in per-trajectory state and
    per-task random streams.
    """

    @property
    @abstractmethod
    def discount(self) -> float: ...

    @property
    @abstractmethod
    def num_agents(self) -> int: ...

    @abstractmethod
    def agent_controls(self, belief, agent: int) -> list:
        """Admissible control components for one agent at this belief."""

    def joint_controls(self, belief) -> list:
        """Enumerate the joint control set (Cartesian product of components)."""
        per_agent = [self.agent_controls(belief, a) for a in range(self.num_agents)]
        return [tuple(u) for u in itertools.product(*per_agent)]

    @abstractmethod
    def expected_cost(self, belief, u) -> float:
        """Exact expected stage cost of applying u at this belief."""

    @abstractmethod
    def belief_update(self, belief, u, z):
        """Belief estimator: next belief given control u and observation z."""

    def observation_distribution(self, belief, u, cap: int | None = None):
        """Exact [(z, prob), ...] support of the next observation, or None.

        Returns None when the support cannot be enumerated within ``cap``
        entries; callers then fall back to sampling.
        """
        return None

    @abstractmethod
    def sample_state(self, belief, rng: np.random.Generator):
        """Draw a hidden state from the belief."""

    @abstractmethod
    def step(self, state, u, rng: np.random.Generator):
        """Simulate one transition: returns (next_state, observation, stage_cost)."""

    def sample_observation(self, belief, u, rng: np.random.Generator):
        """Draw z ~ p(z | belief, u) by simulating one hidden transition."""
        state = self.sample_state(belief, rng)
        _, z, _ = self.step(state, u, rng)
        return z

    def successor_branches(self, belief, u, cap: int | None = None):
        """Exact [(z, prob, next_belief), ...] enumeration, or None if too large."""
        dist = self.observation_distribution(belief, u, cap)
        if dist is None:
            return None
        return [(z, p, self.belief_update(belief, u, z)) for z, p in dist]

    def policy_value_samples(self, policy, belief, t: int, n: int, terminal,
                             rng: np.random.Generator) -> np.ndarray:
        """n Monte Carlo samples of the t-stage truncated cost of ``policy``.

        Each sample is sum_{k<t} a^k g(b_k, policy(b_k)) + a^t terminal(b_t)
        along a belief trajectory with sampled observations. Subclasses may
        override with a vectorized equivalent.
        """
        alpha = self.discount
        out = np.empty(n)
        for s in range(n):
            b = belief
            total = 0.0
            disc = 1.0
            for _ in range(t):
                u = policy.joint_control(b)
                total += disc * self.expected_cost(b, u)
                z = self.sample_observation(b, u, rng)
                b = self.belief_update(b, u, z)
                disc *= alpha
            out[s] = total + disc * terminal(b)
        return out

    def policy_value_samples_multi(self, policy, beliefs, counts, t: int, terminal,
                                   rng: np.random.Generator) -> list:
        """Per-belief sample arrays for several start beliefs in one call.

        Equivalent to calling :meth:`policy_value_samples` once per belief;
        structured models may override this with a single batched pass.
        """
        return [self.policy_value_samples(policy, b, t, int(k), terminal, rng)
                for b, k in zip(beliefs, counts)]


class TabularPOMDP(POMDPModel):
    """Explicit p_ij(u), p(z|j,u), g(i,u,j) model for small oracle instances.

    Joint controls are tuples of per-agent indices into ``control_sets``;
    observations are integers 0..n_obs-1. All matrices are validated at
    construction (rows sum to one within 1e-12).
    """

    def __init__(self, n, control_sets, transition, obs, cost, discount):
        self.n = int(n)
        self.control_sets = [list(cs) for cs in control_sets]
        self.transition = {tuple(k): np.asarray(v, dtype=float) for k, v in transition.items()}
        self.obs = {tuple(k): np.asarray(v, dtype=float) for k, v in obs.items()}
        self.cost = {tuple(k): np.asarray(v, dtype=float) for k, v in cost.items()}
        self._discount = float(discount)
        self._validate()
        # Cached per-control expected-cost vector: gvec[u][i] = sum_j p_ij g(i,u,j)
        self._gvec = {u: (self.transition[u] * self.cost[u]).sum(axis=1)
                      for u in self.transition}

    def _validate(self):
        if not (0.0 < self._discount < 1.0):
            raise ValueError("discount must lie in (0, 1)")
        joint = set(itertools.product(*[range(len(cs)) for cs in self.control_sets]))
        for table, name in ((self.transition, "transition"), (self.obs, "obs"), (self.cost, "cost")):
            if set(table) != joint:
                raise ValueError(f"{name} must have one matrix per joint control")
        n_obs = None
        for u in joint:
            p = self.transition[u]
            if p.shape != (self.n, self.n):
                raise ValueError("transition matrices must be n x n")
            if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError(f"transition rows for control {u} do not sum to 1")
            if np.any(p < 0):
                raise ValueError("transition probabilities must be nonnegative")
            o = self.obs[u]
            if n_obs is None:
                n_obs = o.shape[1]
            if o.shape != (self.n, n_obs):
                raise ValueError("observation matrices must be n x |Z| with a common Z")
            if np.max(np.abs(o.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError(f"observation rows for control {u} do not sum to 1")
            if np.any(o < 0):
                raise ValueError("observation probabilities must be nonnegative")
            if self.cost[u].shape != (self.n, self.n):
                raise ValueError("cost matrices must be n x n")
        self.n_obs = int(n_obs)

    # -- POMDPModel interface ------------------------------------------------

    @property
    def discount(self) -> float:
        return self._discount

    @property
    def num_agents(self) -> int:
        return len(self.control_sets)

    def agent_controls(self, belief, agent: int) -> list:
        return list(range(len(self.control_sets[agent])))

    def _require(self, u):
        u = tuple(u)
        if u not in self.transition:
            raise InfeasibleControlError(f"unknown joint control {u}")
        return u

    def expected_cost(self, belief, u) -> float:
        u = self._require(u)
        return float(np.dot(belief, self._gvec[u]))

    def observation_likelihood(self, belief, u) -> np.ndarray:
        """Full predicted observation distribution p(z | belief, u) over Z."""
        u = self._require(u)
        pred = belief @ self.transition[u]
        return pred @ self.obs[u]

    def observation_distribution(self, belief, u, cap: int | None = None):
        probs = self.observation_likelihood(belief, u)
        support = [(z, float(p)) for z, p in enumerate(probs) if p > 0.0]
        if cap is not None and len(support) > cap:
            return None
        return support

    def belief_update(self, belief, u, z):
        u = self._require(u)
        pred = belief @ self.transition[u]
        post = pred * self.obs[u][:, z]
        s = post.sum()
        if s <= 0.0:
            raise ZeroLikelihoodError(
                f"observation {z} has zero likelihood under control {u}")
        return post / s

    def sample_state(self, belief, rng: np.random.Generator) -> int:
        return _sample_index(belief, rng)

    def step(self, state, u, rng: np.random.Generator):
        u = self._require(u)
        j = _sample_index(self.transition[u][state], rng)
        z = _sample_index(self.obs[u][j], rng)
        return j, z, float(self.cost[u][state, j])

    def sample_observation(self, belief, u, rng: np.random.Generator) -> int:
        return _sample_index(self.observation_likelihood(belief, u), rng)

    # -- serialization ---------------------------------------------------------

    @staticmethod
    def _key(u) -> str:
        return "_".join(str(i) for i in u)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "controls": self.control_sets,
            "transition": {self._key(u): m.tolist() for u, m in self.transition.items()},
            "obs": {self._key(u): m.tolist() for u, m in self.obs.items()},
            "cost": {self._key(u): m.tolist() for u, m in self.cost.items()},
            "discount": self._discount,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TabularPOMDP":
        def parse(table):
            return {tuple(int(i) for i in k.split("_")): v for k, v in table.items()}

        return cls(doc["n"], doc["controls"], parse(doc["transition"]),
                   parse(doc["obs"]), parse(doc["cost"]), doc["discount"])

    @classmethod
    def load(cls, path) -> "TabularPOMDP":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


# -- module-level operations ----------------------------------------------------


def belief_update(model: POMDPModel, belief, u, z):
    """Belief estimator F(belief, u, z); raises ZeroLikelihoodError on impossible z."""
    return model.belief_update(belief, u, z)


def expected_stage_cost(model: POMDPModel, belief, u) -> float:
    """Exact expected stage cost of applying u at the belief (no sampling)."""
    return model.expected_cost(belief, u)


def observation_likelihood(model: POMDPModel, belief, u):
    """Predicted observation distribution given (belief, u)."""
    if hasattr(model, "observation_likelihood"):
        return model.observation_likelihood(belief, u)
    dist = model.observation_distribution(belief, u, cap=None)
    if dist is None:
        raise EnumerationCapError("model does not expose an enumerable observation set")
    return dist


@dataclass
class TrajectoryRecord:
    """Per-stage log of one simulated trajectory."""

    states: list = field(default_factory=list)        # length horizon + 1
    controls: list = field(default_factory=list)      # length horizon
    observations: list = field(default_factory=list)  # length horizon
    costs: list = field(default_factory=list)         # realized, undiscounted


def simulate_trajectory(model: POMDPModel, policy, b0, horizon: int, rng,
                        initial_state=None):
    """Composite simulator: run policy for ``horizon`` stages from belief b0.

    The hidden initial state is drawn from b0 (or fixed by ``initial_state``);
    each stage applies the policy, steps the hidden state, accrues the
    discounted realized cost, and filters the belief with the generated
    observation. Identical seeds give identical trajectories.

    Returns (discounted cost, TrajectoryRecord).
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rng = np.random.default_rng(rng)
    state = model.sample_state(b0, rng) if initial_state is None else initial_state
    record = TrajectoryRecord(states=[state])
    belief = b0
    alpha = model.discount
    total = 0.0
    disc = 1.0
    for _ in range(horizon):
        u = policy.joint_control(belief)
        state, z, cost = model.step(state, u, rng)
        total += disc * cost
        disc *= alpha
        belief = model.belief_update(belief, u, z)
        record.states.append(state)
        record.controls.append(u)
        record.observations.append(z)
        record.costs.append(cost)
    return total, record


def policy_cost_exact(model: TabularPOMDP, policy, b0, horizon: int,
                      branch_cap: int = 10_000_000) -> float:
    """Exact finite-horizon discounted cost of ``policy`` from belief b0.

    Fully enumerates observation sequences, weighting each branch by its
    predicted likelihood. Refuses (EnumerationCapError) rather than silently
    truncating when more than ``branch_cap`` belief nodes would be expanded.
    """
    alpha = model.discount
    visited = 0

    def expand(belief, depth):
        nonlocal visited
        visited += 1
        if visited > branch_cap:
            raise EnumerationCapError(
                f"exact evaluation exceeds branch cap {branch_cap}")
        if depth == 0:
            return 0.0
        u = policy.joint_control(belief)
        value = model.expected_cost(belief, u)
        for z, p in model.observation_distribution(belief, u):
            value += alpha * p * expand(model.belief_update(belief, u, z), depth - 1)
        return value

    return expand(validate_belief(b0), horizon)
