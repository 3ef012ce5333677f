"""Built-in benchmark instances.

* ``benchmark32`` - 32-vertex graph (4x8 grid plus 8 seed-fixed random
  chords) with a 5-level damage chain; the default large instance. Users
  can substitute exact topologies by editing the emitted JSON files.
* ``desk12``      - 12-vertex grid with a 3-level chain; small enough for
  multi-policy comparison studies on one machine.
* ``desk12-terminating`` - same graph, escalation disabled and a higher
  discount; repaired locations stay fixed.
* ``oracle``      - tiny path instances whose exact tabular flattening
  fits comfortably under the enumeration cap.
"""

import json
import os

import numpy as np

from .repair_env import DamageChain, RepairGraph

__all__ = [
    "grid_graph",
    "desk_graph",
    "desk_chain",
    "desk_chain_terminating",
    "benchmark_graph",
    "benchmark_chain",
    "oracle_graph",
    "oracle_chain",
    "write_instance_files",
]


def grid_graph(rows: int, cols: int, extra_chords: int = 0, seed: int = 0) -> RepairGraph:
    """Row-major grid plus optional random non-adjacent chords (seed-fixed)."""
    V = rows * cols
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    if extra_chords:
        rng = np.random.default_rng(seed)
        present = {frozenset(e) for e in edges}
        added = 0
        while added < extra_chords:
            a, b = (int(x) for x in rng.integers(0, V, 2))
            if a == b or frozenset((a, b)) in present:
                continue
            present.add(frozenset((a, b)))
            edges.append((a, b))
            added += 1
    layout = tuple((c, r) for r in range(rows) for c in range(cols))
    return RepairGraph(V, tuple(edges), layout)


def desk_graph() -> RepairGraph:
    return grid_graph(3, 4)


def desk_chain() -> DamageChain:
    return DamageChain(3, [0.01, 0.02], [0.0, 1.0, 10.0])


def desk_chain_terminating() -> DamageChain:
    return DamageChain(3, [0.0, 0.0], [0.0, 1.0, 10.0])


def benchmark_graph() -> RepairGraph:
    return grid_graph(4, 8, extra_chords=8, seed=32)


def benchmark_chain() -> DamageChain:
    return DamageChain(5, [0.01, 0.02, 0.03, 0.05], [0.0, 0.1, 1.0, 10.0, 100.0])


def oracle_graph(n_vertices: int = 2) -> RepairGraph:
    return RepairGraph(n_vertices, tuple((v, v + 1) for v in range(n_vertices - 1)))


def oracle_chain() -> DamageChain:
    return DamageChain(2, [0.1], [0.0, 5.0])


_NAMED = {
    "benchmark32": (benchmark_graph, benchmark_chain, 0.95),
    "desk12": (desk_graph, desk_chain, 0.95),
    "desk12-terminating": (desk_graph, desk_chain_terminating, 0.99),
    "oracle2": (lambda: oracle_graph(2), oracle_chain, 0.9),
    "oracle3": (lambda: oracle_graph(3), oracle_chain, 0.9),
}


def write_instance_files(out_dir: str, which=None) -> list:
    """Write graph/chain JSON pairs plus a starter experiment config; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    names = list(_NAMED) if which is None else [which]
    written = []
    for name in names:
        graph_fn, chain_fn, discount = _NAMED[name]
        gpath = os.path.join(out_dir, f"{name}.graph.json")
        cpath = os.path.join(out_dir, f"{name}.chain.json")
        graph_fn().save(gpath)
        chain_fn().save(cpath)
        written += [gpath, cpath]
    config = {
        "instance": {
            "graph": os.path.join(out_dir, "desk12.graph.json"),
            "chain": os.path.join(out_dir, "desk12.chain.json"),
            "agents": 2,
            "p_damage": 0.3,
        },
        "policies": ["base", "one-at-a-time"],
        "rollout": {"lookahead": 1, "truncation": 10, "n_traj": 30},
        "evaluation": {"n_initial_states": 50, "horizon": 150,
                       "discount": 0.95, "seed": 1234},
        "output": {"dir": os.path.join(out_dir, "results")},
    }
    cfg_path = os.path.join(out_dir, "experiment.json")
    with open(cfg_path, "w") as f:
        json.dump(config, f, indent=2)
    written.append(cfg_path)
    return written
