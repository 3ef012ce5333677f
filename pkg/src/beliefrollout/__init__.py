"""Belief-space rollout planning for multiagent POMDPs.

Library layout:

* ``pomdp_core``  - belief filtering, exact costs, composite simulator,
  tabular oracle backend.
* ``repair_env``  - the multi-robot graph-repair POMDP and its exact
  tabular flattening.
* ``base_policy`` - greedy shortest-path repair policy.
* ``rollout``     - standard / one-agent-at-a-time / order-optimized
  truncated rollout with Q-factor instrumentation.
* ``comms``       - control selection under imperfect communication
  (signaling, local radius, intermittent cloud, local beliefs).
* ``approx_pi``   - approximate policy iteration with a from-scratch
  feedforward policy classifier.
* ``harness``     - seeded experiment runner, comparison grids, CSV
  persistence; ``cli`` exposes the command-line verbs.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    approx_pi,
    base_policy,
    comms,
    instances,
    pomdp_core,
    repair_env,
    rng,
    rollout,
)
