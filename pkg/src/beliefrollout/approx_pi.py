"""Approximate policy iteration with a feedforward policy classifier.

Each iteration runs one-agent-at-a-time rollout on beliefs drawn from a
memory buffer, records one (features, chosen component) pair per agent
slot, trains a softmax classifier on the q*m pairs, and uses the trained
network as the base policy of the next iteration.

The network is built from first principles on numpy: two ReLU hidden
layers (256 and 64 units), one batch-normalization layer after the second
hidden layer, a softmax output over |V|+1 classes (class 0 repairs in
place, class v+1 moves to vertex v), cross-entropy loss, and mini-batch
RMSProp. Analytic gradients for every layer are exposed for finite
difference verification.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .pomdp_core import Policy
from .repair_env import FIX, FactoredBelief, RepairModel
from .rollout import RolloutConfig, _minimize_component

__all__ = [
    "class_of_component",
    "component_of_class",
    "feature_dim",
    "encode_features",
    "encode_features_batch",
    "TrainingSample",
    "SampleSet",
    "MemoryBuffer",
    "ClassifierConfig",
    "PolicyClassifier",
    "ClassifierPolicy",
    "generate_samples",
    "train",
    "infer_control",
    "pi_iterate",
    "PIResult",
]

_SEED_BOUND = 2**63
_MAGIC = b"BRCLF001"


def class_of_component(comp: int) -> int:
    """FIX -> 0, move-to-vertex-w -> w + 1."""
    return 0 if comp == FIX else int(comp) + 1


def component_of_class(cls: int) -> int:
    return FIX if cls == 0 else int(cls) - 1


def feature_dim(n_vertices: int, nu: int, m: int) -> int:
    """V*nu damage block + m*V location one-hots + m agent one-hot + m*(V+2) controls."""
    return n_vertices * nu + m * n_vertices + m + m * (n_vertices + 2)


def encode_features_batch(damage: np.ndarray, locations: np.ndarray, agent: int,
                          predecessors: np.ndarray, successors: np.ndarray) -> np.ndarray:
    """Vectorized tuple encoding for a batch of beliefs.

    Block layout (fixed given V, nu, m): flattened damage distributions,
    one-hot agent locations, one-hot deciding-agent index, then one
    (V+2)-wide slot per agent holding a one-hot control class plus a
    predecessor flag. The deciding agent's own slot stays zero.
    """
    B, V, nu = damage.shape
    m = locations.shape[1]
    rows = np.arange(B)
    out = np.zeros((B, feature_dim(V, nu, m)))
    out[:, :V * nu] = damage.reshape(B, -1)
    off = V * nu
    for a in range(m):
        out[rows, off + a * V + locations[:, a]] = 1.0
    off += m * V
    out[:, off + agent] = 1.0
    off += m
    for a in range(m):
        slot = off + a * (V + 2)
        if a == agent:
            continue
        comp = predecessors[:, a] if a < agent else successors[:, a - agent - 1]
        cls = np.where(comp == FIX, 0, comp + 1)
        out[rows, slot + cls] = 1.0
        if a < agent:
            out[:, slot + V + 1] = 1.0
    return out


def encode_features(belief: FactoredBelief, agent: int, predecessors, successors) -> np.ndarray:
    """Deterministic fixed-length encoding of one decision tuple."""
    m = len(belief.locations)
    preds = np.asarray(list(predecessors), dtype=np.int64).reshape(1, -1)
    succs = np.asarray(list(successors), dtype=np.int64).reshape(1, -1)
    if preds.shape[1] != agent or succs.shape[1] != m - agent - 1:
        raise ValueError("need one predecessor per earlier agent and one successor per later agent")
    locs = np.asarray(belief.locations, dtype=np.int64).reshape(1, -1)
    return encode_features_batch(belief.damage[None], locs, agent, preds, succs)[0]


@dataclass
class TrainingSample:
    features: np.ndarray
    label: int


@dataclass
class SampleSet:
    """Encoded decision tuples and their rollout component labels."""

    features: np.ndarray  # (N, D)
    labels: np.ndarray    # (N,)
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def samples(self):
        for x, y in zip(self.features, self.labels):
            yield TrainingSample(x, int(y))


class MemoryBuffer:
    """Pool of beliefs gathered by walks from an initial-state pool.

    Half of the walks follow one of the supplied policies, the other half
    follow an epsilon-randomized version of one (each agent independently
    replaced by a uniform feasible component with probability epsilon).
    Every belief along a walk is stored, the start included.

    Beliefs with zero expected damage anywhere are skipped and end their
    walk: they are control-indifferent absorbing states (every Q-factor
    ties), so they would flood terminating-variant buffers with
    uninformative fix-in-place labels.
    """

    def __init__(self, beliefs: list):
        self.beliefs = list(beliefs)

    def __len__(self) -> int:
        return len(self.beliefs)

    def draw(self, rng: np.random.Generator) -> FactoredBelief:
        if not self.beliefs:
            raise ValueError("memory buffer is empty")
        return self.beliefs[int(rng.integers(len(self.beliefs)))]

    @classmethod
    def build(cls, model: RepairModel, policies, initial_states, rng: np.random.Generator,
              walk_len: int = 5, epsilon: float = 0.3) -> "MemoryBuffer":
        cost = model.chain.cost
        beliefs = []
        for state, belief in initial_states:
            policy = policies[int(rng.integers(len(policies)))]
            randomized = rng.random() < 0.5
            state = state.copy()
            for _ in range(walk_len + 1):
                if float((belief.damage @ cost).sum()) <= 0.0:
                    break
                beliefs.append(belief)
                u = list(policy.joint_control(belief))
                if randomized:
                    for a in range(model.num_agents):
                        if rng.random() < epsilon:
                            options = model.agent_controls(belief, a)
                            u[a] = options[int(rng.integers(len(options)))]
                state, z, _ = model.step(state, tuple(u), rng)
                belief = model.belief_update(belief, tuple(u), z)
        return cls(beliefs)


@dataclass
class ClassifierConfig:
    hidden1: int = 256
    hidden2: int = 64
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 20
    patience: int = 5          # early stop after this many epochs without improvement
    min_delta: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


class PolicyClassifier:
    """input -> 256 ReLU -> 64 ReLU -> batch-norm -> softmax over |V|+1 classes."""

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "gamma", "beta", "W3", "b3")

    def __init__(self, d_in: int, n_out: int, config: ClassifierConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config or ClassifierConfig()
        rng = np.random.default_rng(rng)
        h1, h2 = self.config.hidden1, self.config.hidden2
        self.d_in, self.n_out = int(d_in), int(n_out)
        self.params = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, h1)),
            "b1": np.zeros(h1),
            "W2": rng.normal(0.0, np.sqrt(2.0 / h1), (h1, h2)),
            "b2": np.zeros(h2),
            "gamma": np.ones(h2),
            "beta": np.zeros(h2),
            "W3": rng.normal(0.0, np.sqrt(1.0 / h2), (h2, n_out)),
            "b3": np.zeros(n_out),
        }
        self.running_mean = np.zeros(h2)
        self.running_var = np.ones(h2)
        self.train_accuracy: float | None = None

    # -- forward / backward -------------------------------------------------

    def _forward(self, X: np.ndarray, training: bool, update_stats: bool = False):
        p = self.params
        z1 = X @ p["W1"] + p["b1"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ p["W2"] + p["b2"]
        a2 = np.maximum(z2, 0.0)
        eps = self.config.bn_eps
        if training:
            mu = a2.mean(axis=0)
            var = a2.var(axis=0)
            if update_stats:
                mom = self.config.bn_momentum
                self.running_mean = (1 - mom) * self.running_mean + mom * mu
                self.running_var = (1 - mom) * self.running_var + mom * var
        else:
            mu, var = self.running_mean, self.running_var
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (a2 - mu) * ivar
        y = p["gamma"] * xhat + p["beta"]
        logits = y @ p["W3"] + p["b3"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        cache = (X, z1, a1, z2, a2, xhat, ivar, probs, training)
        return probs, logits, cache

    def predict_logits(self, X: np.ndarray) -> np.ndarray:
        _, logits, _ = self._forward(np.atleast_2d(X), training=False)
        return logits

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        probs, _, _ = self._forward(np.atleast_2d(X), training=False)
        return probs

    def loss(self, X: np.ndarray, labels: np.ndarray, training: bool = True) -> float:
        probs, _, _ = self._forward(X, training)
        return float(-np.log(probs[np.arange(len(labels)), labels] + 1e-300).mean())

    def loss_and_grads(self, X: np.ndarray, labels: np.ndarray, training: bool = True):
        """Cross-entropy and its analytic gradient for every parameter."""
        p = self.params
        probs, _, cache = self._forward(X, training)
        X, z1, a1, z2, a2, xhat, ivar, probs, _ = cache
        B = X.shape[0]
        loss = float(-np.log(probs[np.arange(B), labels] + 1e-300).mean())
        dlogits = probs.copy()
        dlogits[np.arange(B), labels] -= 1.0
        dlogits /= B
        y = p["gamma"] * xhat + p["beta"]
        grads = {
            "W3": y.T @ dlogits,
            "b3": dlogits.sum(axis=0),
        }
        dy = dlogits @ p["W3"].T
        grads["gamma"] = (dy * xhat).sum(axis=0)
        grads["beta"] = dy.sum(axis=0)
        dxhat = dy * p["gamma"]
        if training:
            da2 = (ivar / B) * (B * dxhat - dxhat.sum(axis=0)
                                - xhat * (dxhat * xhat).sum(axis=0))
        else:
            da2 = dxhat * ivar
        dz2 = da2 * (z2 > 0)
        grads["W2"] = a1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ p["W2"].T
        dz1 = da1 * (z1 > 0)
        grads["W1"] = X.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        return loss, grads

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        """Versioned binary: magic, dims, then row-major float64 blocks."""
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<4q", self.d_in, self.config.hidden1,
                                self.config.hidden2, self.n_out))
            for name in self.PARAM_NAMES:
                np.ascontiguousarray(self.params[name], dtype="<f8").tofile(f)
            np.ascontiguousarray(self.running_mean, dtype="<f8").tofile(f)
            np.ascontiguousarray(self.running_var, dtype="<f8").tofile(f)
            acc = -1.0 if self.train_accuracy is None else float(self.train_accuracy)
            f.write(struct.pack("<d", acc))

    @classmethod
    def load(cls, path) -> "PolicyClassifier":
        with open(path, "rb") as f:
            magic = f.read(len(_MAGIC))
            if magic != _MAGIC:
                raise ValueError(f"not a policy-classifier file (magic {magic!r})")
            d_in, h1, h2, n_out = struct.unpack("<4q", f.read(32))
            clf = cls(d_in, n_out, ClassifierConfig(hidden1=h1, hidden2=h2))
            shapes = {"W1": (d_in, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,),
                      "gamma": (h2,), "beta": (h2,), "W3": (h2, n_out), "b3": (n_out,)}
            for name in cls.PARAM_NAMES:
                size = int(np.prod(shapes[name]))
                clf.params[name] = np.fromfile(f, dtype="<f8", count=size).reshape(shapes[name])
            clf.running_mean = np.fromfile(f, dtype="<f8", count=h2)
            clf.running_var = np.fromfile(f, dtype="<f8", count=h2)
            acc = struct.unpack("<d", f.read(8))[0]
            clf.train_accuracy = None if acc < 0 else acc
            return clf

    def to_json(self) -> dict:
        return {
            "format": _MAGIC.decode(),
            "dims": [self.d_in, self.config.hidden1, self.config.hidden2, self.n_out],
            "params": {k: v.tolist() for k, v in self.params.items()},
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
            "train_accuracy": self.train_accuracy,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PolicyClassifier":
        d_in, h1, h2, n_out = doc["dims"]
        clf = cls(d_in, n_out, ClassifierConfig(hidden1=h1, hidden2=h2))
        clf.params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
        clf.running_mean = np.asarray(doc["running_mean"], dtype=float)
        clf.running_var = np.asarray(doc["running_var"], dtype=float)
        clf.train_accuracy = doc.get("train_accuracy")
        return clf


def train(samples: SampleSet, config: ClassifierConfig | None = None,
          rng=None) -> PolicyClassifier:
    """Mini-batch RMSProp on the cross-entropy of the sample set.

    Runs for ``config.epochs`` epochs with early stopping once the epoch
    loss stops improving; records the final full-set training accuracy on
    the returned classifier. Degenerate single-class sets train fine.
    """
    if len(samples) < 1:
        raise ValueError("need at least one training sample")
    config = config or ClassifierConfig()
    rng = np.random.default_rng(rng)
    clf = PolicyClassifier(samples.features.shape[1], samples.n_classes, config, rng)
    X, y = samples.features, samples.labels.astype(np.int64)
    cache = {k: np.zeros_like(v) for k, v in clf.params.items()}
    best = np.inf
    stall = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(y))
        epoch_loss = 0.0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = X[idx], y[idx]
            clf._forward(xb, training=True, update_stats=True)
            loss, grads = clf.loss_and_grads(xb, yb, training=True)
            epoch_loss += loss * len(idx)
            for name, g in grads.items():
                c = cache[name]
                c *= config.rms_decay
                c += (1.0 - config.rms_decay) * g * g
                clf.params[name] -= config.learning_rate * g / (np.sqrt(c) + config.rms_eps)
        epoch_loss /= len(y)
        if epoch_loss < best - config.min_delta:
            best = epoch_loss
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    pred = np.argmax(clf.predict_proba(X), axis=1)
    clf.train_accuracy = float((pred == y).mean())
    return clf


# -- sample generation -----------------------------------------------------------


def rollout_with_slots(model, belief, base, cfg: RolloutConfig, terminal, rng,
                       counter=None):
    """One-agent-at-a-time rollout that also returns per-slot decision tuples.

    Identical control law and random-stream usage as
    ``rollout.one_at_a_time_control``; each record carries
    (agent, predecessor components, successor base components, chosen).
    """
    rng = np.random.default_rng(rng)
    m = model.num_agents
    base_joint = tuple(base.joint_control(belief))
    others = dict(enumerate(base_joint))
    order = cfg.order(m)
    records = []
    for slot, agent in enumerate(order):
        seed = int(rng.integers(_SEED_BOUND))
        preds = tuple(others[order[k]] for k in range(slot))
        succs = tuple(base_joint[order[k]] for k in range(slot + 1, m))
        comp, _ = _minimize_component(model, belief, agent, others, base_joint[agent],
                                      base, cfg, terminal, seed, counter)
        others[agent] = comp
        records.append((agent, preds, succs, comp))
    return tuple(others[a] for a in range(m)), records


def generate_samples(model: RepairModel, base, cfg: RolloutConfig, terminal,
                     q: int, buffer: MemoryBuffer, rng) -> SampleSet:
    """Label q buffer beliefs with one-agent-at-a-time rollout: q*m samples."""
    if q < 1:
        raise ValueError("need at least one belief")
    if len(buffer) == 0:
        raise ValueError("memory buffer is empty")
    rng = np.random.default_rng(rng)
    V, nu, m = model.graph.n_vertices, model.chain.nu, model.num_agents
    features = np.empty((q * m, feature_dim(V, nu, m)))
    labels = np.empty(q * m, dtype=np.int64)
    row = 0
    for _ in range(q):
        belief = buffer.draw(rng)
        seed = int(rng.integers(_SEED_BOUND))
        _, records = rollout_with_slots(model, belief, base, cfg, terminal,
                                        np.random.default_rng(seed))
        for agent, preds, succs, comp in records:
            features[row] = encode_features(belief, agent, preds, succs)
            labels[row] = class_of_component(comp)
            row += 1
    return SampleSet(features, labels, n_classes=V + 1)


# -- inference -----------------------------------------------------------------


def infer_control(classifier: PolicyClassifier, belief: FactoredBelief, base,
                  model: RepairModel) -> tuple:
    """Reconstruct the rollout control with m sequential network calls.

    Slot l encodes the already-inferred predecessors plus base successors,
    masks classes that are infeasible at the agent's location, and takes
    the argmax (ties to the lowest class index).
    """
    m = model.num_agents
    base_joint = tuple(base.joint_control(belief))
    comps = []
    for agent in range(m):
        feats = encode_features(belief, agent, comps, base_joint[agent + 1:])
        logits = classifier.predict_logits(feats)[0]
        feasible = {class_of_component(c) for c in model.agent_controls(belief, agent)}
        masked = np.full_like(logits, -np.inf)
        for cls in feasible:
            masked[cls] = logits[cls]
        comps.append(component_of_class(int(np.argmax(masked))))
    return tuple(comps)


class ClassifierPolicy(Policy):
    """Trained classifier acting as a policy (usable as a rollout base).

    The successor slots of the encoding are filled by ``successor_source``,
    the policy that played that role when the classifier was trained (the
    previous PI iterate, or the greedy policy at iteration one).
    """

    def __init__(self, classifier: PolicyClassifier, successor_source, model: RepairModel):
        self.classifier = classifier
        self.base = successor_source
        self.model = model
        V = model.graph.n_vertices
        mask = np.zeros((V, V + 1), dtype=bool)
        mask[:, 0] = True
        for v in range(V):
            for w in model.graph.neighbors[v]:
                mask[v, w + 1] = True
        self._feasible = mask

    def joint_control(self, belief: FactoredBelief) -> tuple:
        return infer_control(self.classifier, belief, self.base, self.model)

    def batch_components(self, locations: np.ndarray, damage: np.ndarray, model) -> np.ndarray:
        B, m = locations.shape
        base_joint = model._policy_batch_components(self.base, locations, damage)
        comps = np.empty((B, m), dtype=np.int64)
        for agent in range(m):
            feats = encode_features_batch(damage, locations, agent,
                                          comps[:, :agent], base_joint[:, agent + 1:])
            logits = self.classifier.predict_logits(feats)
            masked = np.where(self._feasible[locations[:, agent]], logits, -np.inf)
            cls = np.argmax(masked, axis=1)
            comps[:, agent] = np.where(cls == 0, FIX, cls - 1)
        return comps


# -- policy iteration ------------------------------------------------------------


@dataclass
class PIResult:
    classifiers: list
    policies: list              # ClassifierPolicy per iteration
    cost_trace: list            # K + 1 entries: base policy first
    train_accuracies: list = field(default_factory=list)


def _mean_cost(model, policy, eval_states, horizon, root_seed):
    from .pomdp_core import simulate_trajectory
    from .rng import substream

    costs = np.empty(len(eval_states))
    for i, (state, belief) in enumerate(eval_states):
        cost, _ = simulate_trajectory(model, policy, belief, horizon,
                                      substream(root_seed, "pi-eval", i),
                                      initial_state=state.copy())
        costs[i] = cost
    return float(costs.mean())


def pi_iterate(model: RepairModel, base, iterations: int, samples_per_iteration: int,
               rng, *, cfg: RolloutConfig | None = None, terminal=None,
               train_config: ClassifierConfig | None = None,
               pool_size: int = 200, walk_len: int = 5, epsilon: float = 0.3,
               eval_states=None, eval_horizon: int = 100,
               eval_seed: int = 20_000, p_damage: float = 0.3) -> PIResult:
    """Run K approximate policy iterations from the given base policy.

    Iteration k draws beliefs from a memory buffer grown under the previous
    policies, labels them with one-agent-at-a-time rollout against policy
    k-1, trains a classifier on the q*m samples, and evaluates the new
    policy's mean discounted cost on one fixed seeded initial-state suite
    shared by every iteration. The cost trace has K+1 entries: base policy
    first, then one per iteration.
    """
    from .repair_env import TerminalDamageCost, random_initial_state

    if iterations < 1:
        raise ValueError("need at least one iteration")
    rng = np.random.default_rng(rng)
    cfg = cfg or RolloutConfig()
    terminal = terminal or TerminalDamageCost(model.chain, model.discount)
    if eval_states is None:
        eval_rng = np.random.default_rng(eval_seed)
        eval_states = [random_initial_state(model.graph, model.chain, model.num_agents,
                                            eval_rng, p_damage)
                       for _ in range(64)]
    q = max(1, samples_per_iteration // model.num_agents)
    result = PIResult([], [], [_mean_cost(model, base, eval_states, eval_horizon, eval_seed)])
    current = base
    previous = [base]
    for k in range(iterations):
        pool_rng, buffer_rng, sample_rng, train_rng = rng.spawn(4)
        pool = [random_initial_state(model.graph, model.chain, model.num_agents,
                                     pool_rng, p_damage) for _ in range(pool_size)]
        buffer = MemoryBuffer.build(model, previous, pool, buffer_rng,
                                    walk_len=walk_len, epsilon=epsilon)
        samples = generate_samples(model, current, cfg, terminal, q, buffer, sample_rng)
        clf = train(samples, train_config, train_rng)
        policy = ClassifierPolicy(clf, current, model)
        result.classifiers.append(clf)
        result.policies.append(policy)
        result.train_accuracies.append(clf.train_accuracy)
        result.cost_trace.append(_mean_cost(model, policy, eval_states,
                                            eval_horizon, eval_seed))
        current = policy
        previous = previous + [policy]
    return result
