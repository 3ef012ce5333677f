import numpy as np
import pytest

from beliefrollout.pomdp_core import Policy, TabularPOMDP


def random_tabular(rng, n=3, sizes=(2,), n_obs=3, discount=0.9, cost_scale=5.0):
    """Random dense TabularPOMDP with strictly positive probabilities."""
    import itertools

    joint = list(itertools.product(*[range(s) for s in sizes]))
    transition, obs, cost = {}, {}, {}
    for u in joint:
        p = rng.random((n, n)) + 0.1
        transition[u] = p / p.sum(axis=1, keepdims=True)
        o = rng.random((n, n_obs)) + 0.1
        obs[u] = o / o.sum(axis=1, keepdims=True)
        cost[u] = cost_scale * rng.random((n, n))
    control_sets = [list(range(s)) for s in sizes]
    return TabularPOMDP(n, control_sets, transition, obs, cost, discount)


class CyclingPolicy(Policy):
    """Deterministic tabular policy: control indices keyed by the likeliest state."""

    def __init__(self, model):
        self.sizes = [len(cs) for cs in model.control_sets]

    def joint_control(self, belief):
        top = int(np.argmax(belief))
        return tuple((top + a) % s for a, s in enumerate(self.sizes))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
