"""Pairwise relation predictor.

Two architectures are embedded by a small graph-convolution encoder over
their fixed cell DAG, concatenated with a projected task embedding, and
passed through a one-hidden-layer head that outputs ``(p_a, p_b)`` with a
softmax.  Everything is plain numpy with hand-written backpropagation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from archgraph.errors import DegenerateLabels, ShapeMismatch
from archgraph.graph import DirectedGraph, is_acyclic

CHECKPOINT_VERSION = 1
FIRST_BETTER, SECOND_BETTER = 0, 1


@dataclass(frozen=True, eq=False)
class ArchEncoding:
    """One architecture in operation-on-node form."""

    node_ops: tuple
    adjacency: np.ndarray
    op_vocab_size: int

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ShapeMismatch("adjacency must be square")
        if len(self.node_ops) != adj.shape[0]:
            raise ShapeMismatch(f"{len(self.node_ops)} ops for {adj.shape[0]} nodes")
        if any(not 0 <= op < self.op_vocab_size for op in self.node_ops):
            raise ShapeMismatch("operation id out of range")
        if not is_acyclic(DirectedGraph(adj)):
            raise ShapeMismatch("cell adjacency must be acyclic")
        object.__setattr__(self, "node_ops", tuple(int(o) for o in self.node_ops))
        object.__setattr__(self, "adjacency", adj)

    def __eq__(self, other):
        return (
            isinstance(other, ArchEncoding)
            and self.node_ops == other.node_ops
            and self.op_vocab_size == other.op_vocab_size
            and np.array_equal(self.adjacency, other.adjacency)
        )

    def __hash__(self):
        return hash((self.node_ops, self.op_vocab_size))


@dataclass(frozen=True)
class TaskEmbedding:
    vec: np.ndarray
    source: str = "external-file"

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise ValueError("task embedding must be finite")
        if self.source not in ("external-file", "diag-fim", "zeros"):
            raise ValueError(f"unknown task embedding source {self.source!r}")
        object.__setattr__(self, "vec", vec)

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), "zeros")

    @classmethod
    def load(cls, path):
        return cls(np.asarray(json.loads(Path(path).read_text()), dtype=np.float64))

    def save(self, path):
        Path(path).write_text(json.dumps([float(v) for v in self.vec]))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    finetune_epochs: int = 50
    batch_size: int = 64
    weight_decay: float = 1e-4
    m: int = 50
    b_f: int = 20
    b_v: int = 10

    def __post_init__(self):
        if self.m < 2 or self.b_f < 2 or self.b_v < 2:
            raise ValueError("m, b_f and b_v must all be at least 2")
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


@dataclass(frozen=True)
class PredictorConfig:
    n_nodes: int
    op_vocab: int
    task_dim: int
    hidden_dim: int = 64
    emb_dim: int = 32
    task_proj_dim: int = 16
    head_dim: int = 64


PARAM_NAMES = ("W0", "b0", "W1", "b1", "Wt", "bt", "Wh", "bh", "Wo", "bo")
WEIGHT_NAMES = ("W0", "W1", "Wt", "Wh", "Wo")


@dataclass
class PredictorState:
    config: PredictorConfig
    adjacency: np.ndarray
    params: dict
    rng_seed: int
    history: list = field(default_factory=list, compare=False)

    def copy(self):
        return PredictorState(
            self.config, self.adjacency, {k: v.copy() for k, v in self.params.items()}, self.rng_seed
        )

    def save(self, path):
        doc = {
            "version": CHECKPOINT_VERSION,
            "config": vars(self.config),
            "seed": self.rng_seed,
            "adjacency": self.adjacency.astype(int).tolist(),
            "params": {k: self.params[k].tolist() for k in PARAM_NAMES},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        cfg = PredictorConfig(**doc["config"])
        params = {k: np.asarray(doc["params"][k], dtype=np.float64) for k in PARAM_NAMES}
        return cls(cfg, np.asarray(doc["adjacency"], dtype=bool), params, int(doc["seed"]))


def normalized_adjacency(adj):
    """``D^-1/2 (A + A^T + I) D^-1/2``; messages flow both ways along cell edges."""
    a = np.asarray(adj, dtype=np.float64)
    a = a + a.T + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


_A_HAT_CACHE = {}


def _a_hat(adj):
    key = adj.tobytes() + bytes(adj.shape)
    cached = _A_HAT_CACHE.get(key)
    if cached is None:
        cached = _A_HAT_CACHE[key] = normalized_adjacency(adj)
    return cached


def init_predictor(config: PredictorConfig, adjacency, seed: int) -> PredictorState:
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    c = config
    head_in = 2 * c.emb_dim + c.task_proj_dim
    params = {
        "W0": glorot(c.op_vocab, c.hidden_dim),
        "b0": np.zeros(c.hidden_dim),
        "W1": glorot(c.hidden_dim, c.emb_dim),
        "b1": np.zeros(c.emb_dim),
        "Wt": glorot(c.task_dim, c.task_proj_dim),
        "bt": np.zeros(c.task_proj_dim),
        "Wh": glorot(head_in, c.head_dim),
        "bh": np.zeros(c.head_dim),
        "Wo": glorot(c.head_dim, 2),
        "bo": np.zeros(2),
    }
    adj = np.asarray(adjacency, dtype=bool)
    if adj.shape != (c.n_nodes, c.n_nodes):
        raise ShapeMismatch("adjacency does not match n_nodes")
    return PredictorState(config, adj, params, seed)


def ops_matrix(archs) -> np.ndarray:
    """Stack architectures' op ids into an ``(n_archs, n_nodes)`` int array."""
    if isinstance(archs, np.ndarray):
        return archs.astype(np.intp)
    return np.array([a.node_ops for a in archs], dtype=np.intp)


def _check_ops(state, ops):
    c = state.config
    if ops.ndim != 2 or ops.shape[1] != c.n_nodes:
        raise ShapeMismatch(f"expected {c.n_nodes} nodes per architecture, got shape {ops.shape}")
    if ops.size and (ops.min() < 0 or ops.max() >= c.op_vocab):
        raise ShapeMismatch("operation id out of range for this predictor")


def _task_vec(state, t):
    vec = t.vec if isinstance(t, TaskEmbedding) else np.asarray(t, dtype=np.float64)
    if vec.shape != (state.config.task_dim,):
        raise ShapeMismatch(f"task embedding has shape {vec.shape}, expected ({state.config.task_dim},)")
    return vec


def _encode(state, ops):
    """Encoder forward pass; returns embeddings and the cache backprop needs."""
    p = state.params
    a_hat = _a_hat(state.adjacency)
    x = np.eye(state.config.op_vocab)[ops]  # (B, N, V)
    ax = np.matmul(a_hat, x)
    p1 = ax @ p["W0"] + p["b0"]
    h1 = np.maximum(p1, 0.0)
    q = np.matmul(a_hat, h1)
    p2 = q @ p["W1"] + p["b1"]
    h2 = np.maximum(p2, 0.0)
    emb = h2.mean(axis=1)
    return emb, (a_hat, ax, p1, q, p2)


def encode_archs(state: PredictorState, archs) -> np.ndarray:
    """Embeddings for a batch of architectures, shape ``(n, emb_dim)``."""
    ops = ops_matrix(archs)
    _check_ops(state, ops)
    return _encode(state, ops)[0]


def encode_arch(a: ArchEncoding, state: PredictorState) -> np.ndarray:
    if not np.array_equal(np.asarray(a.adjacency, dtype=bool), state.adjacency):
        raise ShapeMismatch("architecture adjacency differs from the predictor's cell")
    return encode_archs(state, [a])[0]


def _head(state, emb_a, emb_b, tvec):
    p = state.params
    u = tvec @ p["Wt"] + p["bt"]
    z = np.concatenate([emb_a, emb_b, np.broadcast_to(u, (len(emb_a), u.size))], axis=1)
    p3 = z @ p["Wh"] + p["bh"]
    h = np.maximum(p3, 0.0)
    logits = h @ p["Wo"] + p["bo"]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, h, (u, z, p3)


def forward_pairs(state, ops, ia, ib, t):
    """Probabilities ``(P, 2)`` and penultimate features for index pairs into ``ops``."""
    ops = ops_matrix(ops)
    _check_ops(state, ops)
    emb = _encode(state, ops)[0]
    probs, h, _ = _head(state, emb[ia], emb[ib], _task_vec(state, t))
    return probs, h


def forward_pair(a: ArchEncoding, b: ArchEncoding, t, state: PredictorState):
    """``(p_a, p_b)``; ``p_a > p_b`` means ``a`` is predicted better."""
    probs, _ = forward_pairs(state, [a, b], [0], [1], t)
    return float(probs[0, 0]), float(probs[0, 1])


def pair_loss_and_grads(state, ops, ia, ib, y, t):
    """Mean binary cross-entropy over pairs and its gradient for every parameter.

    ``y`` holds the winning class per pair (0: first better).  With a
    two-way softmax and one-hot targets the per-output BCE terms coincide
    with the categorical cross-entropy.
    """
    p = state.params
    ops = ops_matrix(ops)
    ia = np.asarray(ia, dtype=np.intp)
    ib = np.asarray(ib, dtype=np.intp)
    y = np.asarray(y, dtype=np.intp)
    tvec = _task_vec(state, t)
    emb, (a_hat, ax, p1, q, p2) = _encode(state, ops)
    probs, h, (u, z, p3) = _head(state, emb[ia], emb[ib], tvec)
    n_pairs = len(y)
    rows = np.arange(n_pairs)
    loss = float(-np.log(np.maximum(probs[rows, y], 1e-300)).mean())

    g = {}
    dlogits = probs.copy()
    dlogits[rows, y] -= 1.0
    dlogits /= n_pairs
    g["Wo"] = h.T @ dlogits
    g["bo"] = dlogits.sum(axis=0)
    dp3 = (dlogits @ p["Wo"].T) * (p3 > 0)
    g["Wh"] = z.T @ dp3
    g["bh"] = dp3.sum(axis=0)
    dz = dp3 @ p["Wh"].T
    e = emb.shape[1]
    du = dz[:, 2 * e :].sum(axis=0)
    g["Wt"] = np.outer(tvec, du)
    g["bt"] = du
    demb = np.zeros_like(emb)
    np.add.at(demb, ia, dz[:, :e])
    np.add.at(demb, ib, dz[:, e : 2 * e])
    n_nodes = p2.shape[1]
    dp2 = (demb[:, None, :] / n_nodes) * (p2 > 0)
    g["W1"] = q.reshape(-1, q.shape[-1]).T @ dp2.reshape(-1, dp2.shape[-1])
    g["b1"] = dp2.sum(axis=(0, 1))
    dq = dp2 @ p["W1"].T
    dh1 = np.matmul(a_hat.T, dq)
    dp1 = dh1 * (p1 > 0)
    g["W0"] = ax.reshape(-1, ax.shape[-1]).T @ dp1.reshape(-1, dp1.shape[-1])
    g["b0"] = dp1.sum(axis=(0, 1))
    return loss, g


def ordered_pairs(metrics, higher_is_better=True):
    """All ordered pairs ``(a, b, label)`` among distinct items, skipping ties.

    Label 0 means ``a`` is better.  Both orders of every untied pair are
    present, so ``m`` untied items give ``m*m - m`` pairs.
    """
    v = np.asarray(metrics, dtype=np.float64)
    if not higher_is_better:
        v = -v
    ia, ib = np.nonzero(~np.eye(len(v), dtype=bool))
    diff = v[ia] - v[ib]
    keep = diff != 0
    ia, ib, diff = ia[keep], ib[keep], diff[keep]
    return ia, ib, np.where(diff > 0, FIRST_BETTER, SECOND_BETTER)


def pair_accuracy(state, ops, ia, ib, y, t) -> float:
    probs, _ = forward_pairs(state, ops, ia, ib, t)
    return float((probs.argmax(axis=1) == np.asarray(y)).mean())


def _fit(state, ops, ia, ib, y, t, cfg: TrainConfig, epochs, rng, on_epoch=None):
    """Mini-batch gradient descent with momentum and L2 weight decay (in place)."""
    vel = {k: np.zeros_like(v) for k, v in state.params.items()}
    n = len(y)
    losses = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            # only the architectures in this batch need encoding
            used, inv = np.unique(np.concatenate([ia[idx], ib[idx]]), return_inverse=True)
            loss, grads = pair_loss_and_grads(
                state, ops[used], inv[: len(idx)], inv[len(idx) :], y[idx], t
            )
            total += loss * len(idx)
            for k, grad in grads.items():
                if k in WEIGHT_NAMES:
                    grad = grad + cfg.weight_decay * state.params[k]
                vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * grad
                state.params[k] += vel[k]
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, state)
    return losses


def train_source(
    archs,
    t,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    higher_is_better: bool = True,
    config: PredictorConfig | None = None,
) -> PredictorState:
    """Train a fresh predictor on all ordered pairs of ``archs``.

    ``archs`` is a list of ``(ArchEncoding, metric)``.  Per-epoch mean
    training losses are left in ``state.history``.
    """
    encs = [a for a, _ in archs]
    metrics = [m for _, m in archs]
    ia, ib, y = ordered_pairs(metrics, higher_is_better)
    if len(y) == 0:
        raise DegenerateLabels("all source metrics are equal")
    if config is None:
        tdim = _task_dim(t)
        config = PredictorConfig(len(encs[0].node_ops), encs[0].op_vocab_size, tdim)
    rng = np.random.default_rng(seed)
    state = init_predictor(config, encs[0].adjacency, int(rng.integers(2**31)))
    state.rng_seed = seed
    ops = ops_matrix(encs)
    _check_ops(state, ops)
    state.history = _fit(state, ops, ia, ib, y, t, cfg, cfg.epochs, rng)
    return state


def _task_dim(t):
    return (t.vec if isinstance(t, TaskEmbedding) else np.asarray(t)).size


def finetune_target(state: PredictorState, target_archs, t_target, cfg: TrainConfig = TrainConfig(), seed: int = 0, higher_is_better: bool = True):
    """Finetune on ``b_f`` architectures, select the epoch snapshot by validation accuracy.

    ``target_archs`` (``b_f + b_v`` pairs of encoding and metric) is
    shuffled with ``seed``; the first ``b_f`` train and the last ``b_v``
    validate.  The starting state counts as the epoch-0 snapshot.
    Returns ``(best_state, best_val_acc)``; the input state is not modified.
    """
    if len(target_archs) != cfg.b_f + cfg.b_v:
        raise ValueError(f"expected b_f + b_v = {cfg.b_f + cfg.b_v} architectures, got {len(target_archs)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(target_archs))
    shuffled = [target_archs[i] for i in order]
    train, val = shuffled[: cfg.b_f], shuffled[cfg.b_f :]
    tr_ops = ops_matrix([a for a, _ in train])
    va_ops = ops_matrix([a for a, _ in val])
    tia, tib, ty = ordered_pairs([m for _, m in train], higher_is_better)
    via, vib, vy = ordered_pairs([m for _, m in val], higher_is_better)
    if len(ty) == 0 or len(vy) == 0:
        raise DegenerateLabels("finetune or validation metrics are all equal")

    work = state.copy()
    best = (pair_accuracy(work, va_ops, via, vib, vy, t_target), work.copy())

    def snapshot(_epoch, s):
        nonlocal best
        acc = pair_accuracy(s, va_ops, via, vib, vy, t_target)
        if acc > best[0]:
            best = (acc, s.copy())

    work.history = _fit(work, tr_ops, tia, tib, ty, t_target, cfg, cfg.finetune_epochs, rng, snapshot)
    acc, chosen = best
    chosen.history = work.history
    return chosen, acc


class PairScorer:
    """Fast pairwise queries over a fixed candidate list.

    The head's first layer is linear in the concatenated input, so each
    architecture's contribution is projected once and a pair costs one
    vector add plus the small output layer.
    """

    def __init__(self, state: PredictorState, ops, t):
        p = state.params
        self.state = state
        self.ops = ops_matrix(ops)
        _check_ops(state, self.ops)
        emb = _encode(state, self.ops)[0]
        e = state.config.emb_dim
        tvec = _task_vec(state, t)
        u = tvec @ p["Wt"] + p["bt"]
        self.left = emb @ p["Wh"][:e]
        self.right = emb @ p["Wh"][e : 2 * e]
        self.const = u @ p["Wh"][2 * e :] + p["bh"]
        self.wo = p["Wo"]
        self.bo = p["bo"]
        self.n = len(self.ops)
        self._lc = None

    def subset(self, idx):
        """Scorer restricted to the candidates ``idx`` (re-indexed from 0)."""
        idx = np.asarray(idx, dtype=np.intp)
        sub = object.__new__(PairScorer)
        sub.state, sub.ops = self.state, self.ops[idx]
        sub.left, sub.right = self.left[idx], self.right[idx]
        sub.const, sub.wo, sub.bo = self.const, self.wo, self.bo
        sub.n = len(idx)
        sub._lc = None
        return sub

    def hidden(self, ia, ib):
        return np.maximum(self.left[ia] + self.right[ib] + self.const, 0.0)

    def _margin_of_hidden(self, h):
        return h @ (self.wo[:, 0] - self.wo[:, 1]) + (self.bo[0] - self.bo[1])

    def margin(self, ia, ib):
        """Logit difference ``l_a - l_b``; positive means first predicted better."""
        return self._margin_of_hidden(self.hidden(ia, ib))

    def probs(self, ia, ib):
        m = self.margin(ia, ib)
        pa = 1.0 / (1.0 + np.exp(-m))
        return np.stack([pa, 1.0 - pa], axis=-1)

    def compare_one(self, x, y) -> int:
        """Scalar ``compare`` for a single pair; avoids the batch overhead."""
        if self._lc is None:
            self._lc = self.left + self.const
            self._wd = self.wo[:, 0] - self.wo[:, 1]
            self._bd = self.bo[0] - self.bo[1]
        fwd = np.maximum(self._lc[x] + self.right[y], 0.0) @ self._wd + self._bd > 0
        bwd = np.maximum(self._lc[y] + self.right[x], 0.0) @ self._wd + self._bd > 0
        if fwd and not bwd:
            return 1
        if bwd and not fwd:
            return -1
        return 0

    def compare(self, x, others):
        """Agreement comparator of ``x`` against each index in ``others``.

        +1: x better in both query orders, -1: other better in both,
        0: the two orders disagree (incomparable).
        """
        others = np.asarray(others, dtype=np.intp)
        base = self.left[x] + self.const
        fwd = self._margin_of_hidden(np.maximum(self.right[others] + base, 0.0)) > 0
        base = self.right[x] + self.const
        bwd = self._margin_of_hidden(np.maximum(self.left[others] + base, 0.0)) > 0
        return np.where(fwd & ~bwd, 1, np.where(~fwd & bwd, -1, 0))


@dataclass
class PairData:
    """Per-edge features behind a relation graph, used for trust weighting."""

    edges: np.ndarray  # (E, 2) int
    embeddings: np.ndarray  # (E, head_dim) penultimate features of the (i, j) query
    preds: np.ndarray  # (E,) predicted class of the (i, j) query


def build_relation_graph(cands, state: PredictorState, t, chunk=20000):
    """Relation digraph over ``cands`` using the two-order agreement rule.

    Edge ``i -> j`` exists iff the predictor says i is better when asked
    about ``(i, j)`` and also when asked about ``(j, i)``.  Returns the
    graph and the ``PairData`` of each edge's ``(i, j)`` query.
    """
    scorer = cands if isinstance(cands, PairScorer) else PairScorer(state, cands, t)
    n = scorer.n
    if n < 2:
        raise ValueError("need at least two candidates")
    iu, ju = np.triu_indices(n, k=1)
    adj = np.zeros((n, n), dtype=bool)
    for lo in range(0, len(iu), chunk):
        i, j = iu[lo : lo + chunk], ju[lo : lo + chunk]
        fwd = scorer.margin(i, j) > 0
        bwd = scorer.margin(j, i) > 0
        i_wins = fwd & ~bwd
        j_wins = ~fwd & bwd
        adj[i[i_wins], j[i_wins]] = True
        adj[j[j_wins], i[j_wins]] = True
    src, dst = np.nonzero(adj)
    emb = np.empty((len(src), scorer.const.size))
    for lo in range(0, len(src), chunk):
        emb[lo : lo + chunk] = scorer.hidden(src[lo : lo + chunk], dst[lo : lo + chunk])
    data = PairData(np.stack([src, dst], axis=1), emb, np.full(len(src), FIRST_BETTER))
    return DirectedGraph(adj), data


def pair_embeddings(state, ops, ia, ib, t):
    """Penultimate features of the given ordered pairs (trust-score space)."""
    _, h = forward_pairs(state, ops, ia, ib, t)
    return h


# ---------------------------------------------------------------------------
# Task embeddings from a diagonal Fisher information matrix


class BernoulliProbe:
    """Logistic model ``p(y=1 | x) = sigmoid(w . x)`` used as an FIM probe."""

    labels = (0, 1)

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def probs(self, x):
        s = 1.0 / (1.0 + np.exp(-float(self.w @ x)))
        return np.array([1.0 - s, s])

    def grad_log_prob(self, x, y):
        s = 1.0 / (1.0 + np.exp(-float(self.w @ x)))
        return (y - s) * np.asarray(x, dtype=np.float64)


class SoftmaxProbe:
    """Linear softmax classifier ``p(y | x) = softmax(W x)_y``; parameters flattened row-major."""

    def __init__(self, W):
        self.W = np.asarray(W, dtype=np.float64)
        self.labels = tuple(range(self.W.shape[0]))

    def probs(self, x):
        z = self.W @ x
        e = np.exp(z - z.max())
        return e / e.sum()

    def grad_log_prob(self, x, y):
        p = self.probs(x)
        onehot = np.zeros_like(p)
        onehot[y] = 1.0
        return np.outer(onehot - p, x).ravel()


def diag_fim(probe, inputs) -> TaskEmbedding:
    """Diagonal of ``E_x E_{y~p(y|x)} [grad log p(y|x) grad log p(y|x)^T]``.

    The label expectation is taken exactly over the probe's finite label
    set; the input expectation is the mean over ``inputs``.
    """
    total = None
    count = 0
    for x in inputs:
        x = np.asarray(x, dtype=np.float64)
        p = probe.probs(x)
        acc = sum(p[k] * probe.grad_log_prob(x, y) ** 2 for k, y in enumerate(probe.labels))
        total = acc if total is None else total + acc
        count += 1
    if count == 0:
        raise ValueError("diag_fim needs at least one input")
    return TaskEmbedding(total / count, "diag-fim")
