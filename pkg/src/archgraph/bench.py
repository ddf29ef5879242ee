"""Tabular benchmarks, synthetic spaces, ranking metrics and the evaluation ledger."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from archgraph.errors import (
    BudgetExceeded,
    DegenerateInput,
    DuplicateEvaluation,
    MissingMetric,
    ParseError,
)
from archgraph.predictor import ArchEncoding, BernoulliProbe, TaskEmbedding, diag_fim

HIGHER, LOWER = "higher-better", "lower-better"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    direction: str
    embedding: TaskEmbedding

    def __post_init__(self):
        if self.direction not in (HIGHER, LOWER):
            raise ValueError(f"direction must be {HIGHER!r} or {LOWER!r}, got {self.direction!r}")

    @property
    def higher_is_better(self):
        return self.direction == HIGHER


@dataclass
class TabularBenchmark:
    """Architecture -> metric lookup for every task of one search space.

    ``ops[i]`` holds the op id of every node of architecture ``i``; all
    architectures share ``adjacency``.  ``metrics[i, k]`` is the metric of
    architecture ``i`` on task ``k``.
    """

    ids: list
    ops: np.ndarray
    adjacency: np.ndarray
    op_vocab: int
    tasks: list
    metrics: np.ndarray

    def __post_init__(self):
        self.ops = np.asarray(self.ops, dtype=np.intp)
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        self.metrics = np.asarray(self.metrics, dtype=np.float64)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("architecture ids must be unique")
        if self.metrics.shape != (len(self.ids), len(self.tasks)):
            raise MissingMetric("metric table does not cover every (arch, task) cell")
        if not np.all(np.isfinite(self.metrics)):
            bad = np.argwhere(~np.isfinite(self.metrics))[0]
            raise MissingMetric(f"non-finite metric for {self.ids[bad[0]]!r} on {self.tasks[bad[1]].name!r}")
        self._index = {a: i for i, a in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def task_names(self):
        return [t.name for t in self.tasks]

    def task_index(self, task) -> int:
        if isinstance(task, int):
            return task
        for k, t in enumerate(self.tasks):
            if t.name == task:
                return k
        raise KeyError(f"unknown task {task!r}")

    def task(self, task) -> TaskSpec:
        return self.tasks[self.task_index(task)]

    def arch_index(self, arch_id) -> int:
        return self._index[arch_id]

    def arch(self, i) -> ArchEncoding:
        return ArchEncoding(tuple(self.ops[i]), self.adjacency, self.op_vocab)

    def scores(self, task) -> np.ndarray:
        """Metrics oriented so that larger is always better."""
        k = self.task_index(task)
        col = self.metrics[:, k]
        return col if self.tasks[k].higher_is_better else -col

    def __eq__(self, other):
        return (
            isinstance(other, TabularBenchmark)
            and self.ids == other.ids
            and np.array_equal(self.ops, other.ops)
            and np.array_equal(self.adjacency, other.adjacency)
            and self.op_vocab == other.op_vocab
            and [(t.name, t.direction) for t in self.tasks] == [(t.name, t.direction) for t in other.tasks]
            and all(np.array_equal(a.embedding.vec, b.embedding.vec) for a, b in zip(self.tasks, other.tasks))
            and np.array_equal(self.metrics, other.metrics)
        )


def better(bench: TabularBenchmark, task, i, j) -> str:
    s = bench.scores(task)
    if s[i] > s[j]:
        return "i-better"
    if s[j] > s[i]:
        return "j-better"
    return "tie"


def true_rank(bench: TabularBenchmark, task, arch) -> int:
    """1 for the best architecture; tied architectures share the smaller rank."""
    s = bench.scores(task)
    return int((s > s[arch]).sum()) + 1


def true_ranks(bench: TabularBenchmark, task) -> np.ndarray:
    s = bench.scores(task)
    return stats.rankdata(-s, method="min").astype(np.int64)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if len(a) < 2:
        raise ValueError("need at least two observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateInput("zero variance input")
    return a, b


def kendall_tau(rank_a, rank_b) -> float:
    """Kendall tau-b (tie corrected)."""
    a, b = _check_pair(rank_a, rank_b)
    return float(stats.kendalltau(a, b, variant="b").statistic)


def spearman(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(stats.spearmanr(a, b).statistic)


def pearson(values_a, values_b) -> float:
    a, b = _check_pair(values_a, values_b)
    return float(stats.pearsonr(a, b).statistic)


# ---------------------------------------------------------------------------
# Ledger


@dataclass
class BudgetLedger:
    """Every ground-truth lookup of a search run, with per-phase caps."""

    caps: dict
    evaluated: list = field(default_factory=list)

    def __post_init__(self):
        self._seen = {(a, t) for a, t, _, _ in self.evaluated}

    def seen(self, arch_id, task) -> bool:
        return (arch_id, task) in self._seen

    def used(self, phase=None) -> int:
        return sum(1 for e in self.evaluated if phase is None or e[3] == phase)

    def evaluate(self, bench: TabularBenchmark, arch, task, phase) -> float:
        arch_id = bench.ids[arch]
        task_name = bench.task(task).name
        if phase not in self.caps:
            raise BudgetExceeded(f"no budget declared for phase {phase!r}")
        if self.seen(arch_id, task_name):
            raise DuplicateEvaluation(f"{arch_id!r} already evaluated on {task_name!r}")
        if self.used(phase) >= self.caps[phase]:
            raise BudgetExceeded(f"phase {phase!r} budget of {self.caps[phase]} exhausted")
        value = float(bench.metrics[arch, bench.task_index(task)])
        self.evaluated.append((arch_id, task_name, value, phase))
        self._seen.add((arch_id, task_name))
        return value

    def copy(self):
        return BudgetLedger(dict(self.caps), list(self.evaluated))


# ---------------------------------------------------------------------------
# Synthetic spaces


def cell_adjacency(node_count: int) -> np.ndarray:
    """Fixed cell DAG in operation-on-node form.

    Six nodes reproduce the four-node, six-edge micro cell with one node
    per edge op; other sizes use a ladder with skip connections.
    """
    adj = np.zeros((node_count, node_count), dtype=bool)
    if node_count == 6:
        cell_edges = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        for a, (u, v) in enumerate(cell_edges):
            for b, (x, _) in enumerate(cell_edges):
                if v == x:
                    adj[a, b] = True
        return adj
    for i in range(node_count):
        for j in (i + 1, i + 2):
            if j < node_count:
                adj[i, j] = True
    return adj


def _unit_rms(v, node_count):
    """Scale so each term has unit variance under uniformly random ops."""
    rms = float(np.sqrt(np.mean(v**2) * node_count))
    return v / rms if rms > 0 else v


def _latent_coeffs(rng, node_count, op_vocab):
    # centring per_op and each pos row only shifts the latent by a constant;
    # the scaling makes the term weights below the actual variance shares
    per_op = rng.standard_normal(op_vocab)
    per_op = _unit_rms(per_op - per_op.mean(), node_count)
    pos = rng.standard_normal((node_count, op_vocab))
    pos = _unit_rms(pos - pos.mean(axis=1, keepdims=True), node_count)
    quad = _unit_rms(rng.standard_normal(op_vocab), node_count)
    return per_op, pos, quad


# relative strength of the op-count, per-position and curvature terms
_COUNT_W, _POS_W, _QUAD_W = 1.0, 0.3, 0.3


def _latent(ops, coeffs, op_vocab):
    per_op, pos, quad = coeffs
    n_nodes = ops.shape[1]
    counts = np.stack([(ops == o).sum(axis=1) for o in range(op_vocab)], axis=1)
    val = (
        _COUNT_W * counts @ per_op
        + _POS_W * pos[np.arange(n_nodes)[None, :], ops].sum(axis=1)
        + _QUAD_W * (counts**2 / n_nodes) @ quad
    )
    return (val - val.mean()) / (val.std() or 1.0)


def _probe_weights(coeffs):
    """Per-(position, op) linear weights of a latent, flattened; used for the FIM probe."""
    per_op, pos, _ = coeffs
    return (_COUNT_W * per_op[None, :] + _POS_W * pos).ravel()


def gen_synthetic(
    n_archs=4096,
    node_count=6,
    op_vocab=4,
    tasks=(("source", HIGHER, 1.0), ("target", HIGHER, 0.8)),
    noise_sd=0.0,
    seed=0,
) -> TabularBenchmark:
    """Synthetic tabular benchmark with controllable cross-task rank correlation.

    Task 0's latent score mixes per-position op effects with a quadratic
    term in the op counts.  Task k mixes that latent with a second one,
    orthogonalised against it, using Pearson weight ``2 sin(pi corr / 6)``;
    that is the value giving Spearman correlation ``corr`` for Gaussian
    pairs.
    """
    space = op_vocab**node_count
    if n_archs > space:
        raise ValueError(f"space holds only {space} architectures")
    rng = np.random.default_rng(seed)
    if n_archs == space:
        ops = np.array(list(itertools.product(range(op_vocab), repeat=node_count)), dtype=np.intp)
    else:
        codes = np.sort(rng.choice(space, size=n_archs, replace=False))
        ops = np.stack([(codes // op_vocab**p) % op_vocab for p in range(node_count - 1, -1, -1)], axis=1)
    base_coeffs = _latent_coeffs(rng, node_count, op_vocab)
    base = _latent(ops, base_coeffs, op_vocab)
    onehot = np.eye(op_vocab)[ops].reshape(len(ops), -1)
    probe_inputs = onehot[: min(256, len(ops))]

    specs, cols = [], []
    for k, (name, direction, corr) in enumerate(tasks):
        if not -1.0 <= corr <= 1.0:
            raise ValueError(f"corr for task {name!r} must lie in [-1, 1]")
        own = _latent_coeffs(rng, node_count, op_vocab)
        if k == 0:
            z, w = base, _probe_weights(base_coeffs)
        else:
            r = 2.0 * math.sin(math.pi * corr / 6.0)
            # few coefficients make two random latents correlated by chance;
            # project that out so the mix has Pearson correlation exactly r
            indep = _latent(ops, own, op_vocab)
            indep = indep - float(indep @ base) / len(base) * base
            indep = indep / (indep.std() or 1.0)
            z = r * base + math.sqrt(max(1.0 - r * r, 0.0)) * indep
            w = r * _probe_weights(base_coeffs) + math.sqrt(max(1.0 - r * r, 0.0)) * _probe_weights(own)
        noise = rng.standard_normal(len(ops)) * noise_sd
        z = z + noise
        cols.append(50.0 + 5.0 * z if direction == HIGHER else 60.0 - 5.0 * z)
        emb = diag_fim(BernoulliProbe(w), probe_inputs)
        specs.append(TaskSpec(name, direction, emb))
    ids = [f"a{i:05d}" for i in range(len(ops))]
    return TabularBenchmark(ids, ops, cell_adjacency(node_count), op_vocab, specs, np.stack(cols, axis=1))


DEFAULT_TASKS = (
    ("source", HIGHER, 1.0),
    ("cls", HIGHER, 0.8),
    ("seg", HIGHER, 0.6),
    ("room", LOWER, 0.7),
)


def default_synthetic(seed=0, n_archs=4096) -> TabularBenchmark:
    """The shipped default space: micro-cell sized, one source and three targets."""
    return gen_synthetic(n_archs, 6, 4, DEFAULT_TASKS, noise_sd=0.1, seed=seed)


# ---------------------------------------------------------------------------
# JSON-lines I/O


def save_benchmark(bench: TabularBenchmark, path) -> None:
    header = {
        "tasks": [
            {"name": t.name, "direction": t.direction, "embedding": [float(v) for v in t.embedding.vec]}
            for t in bench.tasks
        ],
        "op_vocab": int(bench.op_vocab),
        "adjacency": bench.adjacency.astype(int).tolist(),
    }
    lines = [json.dumps(header)]
    for i, aid in enumerate(bench.ids):
        rec = {
            "id": aid,
            "ops": [int(o) for o in bench.ops[i]],
            "metrics": {t.name: float(bench.metrics[i, k]) for k, t in enumerate(bench.tasks)},
        }
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_benchmark(path) -> TabularBenchmark:
    """Read a JSON-lines benchmark: one header line, then one record per architecture."""
    header = None
    ids, ops, rows = [], [], []
    adjacency = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, lineno) from None
            if not isinstance(doc, dict):
                raise ParseError("expected a JSON object", lineno)
            if header is None:
                if "tasks" not in doc or "op_vocab" not in doc:
                    raise ParseError("header must declare 'tasks' and 'op_vocab'", lineno)
                header = doc
                adjacency = doc.get("adjacency")
                continue
            try:
                aid, rec_ops, metrics = str(doc["id"]), [int(o) for o in doc["ops"]], doc["metrics"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed record ({exc})", lineno) from None
            rec_adj = doc.get("adjacency", adjacency)
            if rec_adj is None:
                raise ParseError("no adjacency in record or header", lineno)
            if adjacency is None:
                adjacency = rec_adj
            elif rec_adj != adjacency:
                raise ParseError("all architectures must share one cell adjacency", lineno)
            if len(rec_ops) != len(adjacency):
                raise ParseError(f"{len(rec_ops)} ops for a {len(adjacency)}-node cell", lineno)
            row = []
            for t in header["tasks"]:
                v = metrics.get(t["name"]) if isinstance(metrics, dict) else None
                if v is None or not isinstance(v, (int, float)) or not math.isfinite(v):
                    raise MissingMetric(f"line {lineno}: missing or non-finite metric for task {t['name']!r}")
                row.append(float(v))
            ids.append(aid)
            ops.append(rec_ops)
            rows.append(row)
    if header is None:
        raise ParseError("empty benchmark file")
    op_vocab = int(header["op_vocab"])
    n_nodes = len(adjacency) if adjacency is not None else 0
    specs = []
    for t in header["tasks"]:
        emb = t.get("embedding")
        emb = TaskEmbedding(emb) if emb is not None else TaskEmbedding.zeros(n_nodes * op_vocab)
        specs.append(TaskSpec(t["name"], t["direction"], emb))
    ops_arr = np.asarray(ops, dtype=np.intp).reshape(len(ops), n_nodes)
    if ops_arr.size and (ops_arr.min() < 0 or ops_arr.max() >= op_vocab):
        raise ParseError("operation id out of range")
    return TabularBenchmark(ids, ops_arr, np.asarray(adjacency, dtype=bool), op_vocab, specs, np.asarray(rows).reshape(len(ids), len(specs)))
