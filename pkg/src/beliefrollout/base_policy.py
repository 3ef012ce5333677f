"""Greedy shortest-path repair policy.

Fix the current location when its expected damage cost is positive,
otherwise take one hop along a precomputed shortest path toward the
nearest damaged location. All pairwise hop distances and deterministic
next hops are built once per graph with Dijkstra's algorithm.
"""

import heapq
from dataclasses import dataclass

import numpy as np

from .pomdp_core import Policy
from .repair_env import FIX, DamageChain, FactoredBelief, RepairGraph

__all__ = ["ShortestPathTable", "build_paths", "greedy_control", "GreedyPolicy"]

_FAR = np.iinfo(np.int64).max  # stands in for "unreachable" in vectorized argmins


@dataclass(frozen=True)
class ShortestPathTable:
    """All-pairs hop distances plus the first hop of a deterministic shortest path.

    ``next_hop[s, t]`` is the lowest-index neighbor of s that lies on some
    shortest s-t path; ``next_hop[v, v] = v``.
    """

    dist: np.ndarray
    next_hop: np.ndarray

    @property
    def diameter(self) -> int:
        return int(self.dist.max())


def build_paths(graph: RepairGraph) -> ShortestPathTable:
    """Dijkstra from every source (unit edge weights)."""
    V = graph.n_vertices
    dist = np.full((V, V), -1, dtype=np.int64)
    for s in range(V):
        d = dist[s]
        d[s] = 0
        heap = [(0, s)]
        while heap:
            du, u = heapq.heappop(heap)
            if du > d[u]:
                continue
            for w in graph.neighbors[u]:
                alt = du + 1
                if d[w] < 0 or alt < d[w]:
                    d[w] = alt
                    heapq.heappush(heap, (alt, w))
    if np.any(dist < 0):
        raise ValueError("graph must be connected")
    next_hop = np.empty((V, V), dtype=np.int64)
    for s in range(V):
        next_hop[s, s] = s
        for t in range(V):
            if t == s:
                continue
            for w in graph.neighbors[s]:  # ascending, so ties pick the lowest index
                if dist[w, t] == dist[s, t] - 1:
                    next_hop[s, t] = w
                    break
    dist.setflags(write=False)
    next_hop.setflags(write=False)
    return ShortestPathTable(dist, next_hop)


def greedy_control(belief: FactoredBelief, agent: int, paths: ShortestPathTable,
                   chain: DamageChain, eps_damage: float = 0.0) -> int:
    """Greedy control component for one agent.

    A location counts as damaged when its expected per-stage cost d^v . c
    exceeds ``eps_damage``. Fix when standing on a damaged location; else
    move one hop toward the nearest damaged location (ties: lowest vertex
    index); fix in place when nothing is damaged.
    """
    per_loc = belief.damage @ chain.cost
    damaged = per_loc > eps_damage
    loc = belief.locations[agent]
    if damaged[loc]:
        return FIX
    targets = np.nonzero(damaged)[0]
    if len(targets) == 0:
        return FIX
    goal = targets[np.argmin(paths.dist[loc, targets])]
    return int(paths.next_hop[loc, goal])


class GreedyPolicy(Policy):
    """Per-agent greedy repair policy over a shared factored belief."""

    def __init__(self, graph: RepairGraph, chain: DamageChain,
                 paths: ShortestPathTable | None = None, eps_damage: float = 0.0):
        self.graph = graph
        self.chain = chain
        self.paths = build_paths(graph) if paths is None else paths
        self.eps_damage = float(eps_damage)

    def component(self, belief: FactoredBelief, agent: int) -> int:
        return greedy_control(belief, agent, self.paths, self.chain, self.eps_damage)

    def joint_control(self, belief: FactoredBelief) -> tuple:
        return tuple(self.component(belief, a) for a in range(len(belief.locations)))

    def batch_components(self, locations: np.ndarray, damage: np.ndarray, model) -> np.ndarray:
        """Vectorized joint controls for a batch of beliefs (same law as scalar)."""
        per_loc = damage @ self.chain.cost               # (B, V)
        damaged = per_loc > self.eps_damage
        any_damaged = damaged.any(axis=1)
        cand = np.where(damaged[:, None, :], self.paths.dist[locations], _FAR)
        goal = cand.argmin(axis=2)                       # ties: lowest vertex index
        hop = self.paths.next_hop[locations, goal]       # (B, m)
        at_damaged = np.take_along_axis(damaged, locations, axis=1)
        stay = at_damaged | ~any_damaged[:, None]
        return np.where(stay, FIX, hop)
