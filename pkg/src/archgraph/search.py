"""End-to-end search drivers on a tabular benchmark.

A run spends its target-task budget in two places: ``b_f + b_v``
architectures to finetune and validate the predictor, and ``p`` final
evaluations of the architectures ranked highest by the ordering stage.
Every ground-truth lookup goes through a ``BudgetLedger``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from archgraph.bench import BudgetLedger, TabularBenchmark, kendall_tau, true_rank
from archgraph.errors import ConfigError, DegenerateInput
from archgraph.graph import DirectedGraph, topological_order, transitive_reduction
from archgraph.mwas import MwasParams, mwas_approx
from archgraph.predictor import (
    PairScorer,
    PredictorConfig,
    PredictorState,
    TrainConfig,
    build_relation_graph,
    finetune_target,
    init_predictor,
    ordered_pairs,
    pair_embeddings,
    train_source,
)
from archgraph.trust import DEFAULT_ALPHA, DEFAULT_CAP, DEFAULT_K, build_reference_set, trust_scores

FIRST, SECOND, INCOMPARABLE = 1, -1, 0
METHODS = ("arch-graph", "arch-graph-zero", "arch-graph-single", "random-search")


def derive_seed(root, *names) -> int:
    """Independent 63-bit stream seed from a root seed and a path of names."""
    key = "/".join([str(int(root))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class SearchConfig:
    m: int = 50
    b_f: int = 20
    b_v: int = 10
    p: int = 20
    top_k: int = 500
    source_task: str = "source"
    target_task: str = ""
    seed: int = 0
    mwas: MwasParams = MwasParams()
    trust_alpha: float = DEFAULT_ALPHA
    trust_k: int = DEFAULT_K
    trust_cap: float = DEFAULT_CAP
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        for name in ("m", "b_f", "b_v", "p", "top_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.p > self.top_k:
            raise ConfigError("p must not exceed top_k")
        if self.b_f < 2 or self.b_v < 2 or self.m < 2:
            raise ConfigError("m, b_f and b_v must be at least 2")

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            t.learning_rate, t.momentum, t.epochs, t.finetune_epochs, t.batch_size,
            t.weight_decay, self.m, self.b_f, self.b_v,
        )

    def with_target(self, target):
        return _replace(self, target_task=target)


def _replace(cfg, **changes):
    import dataclasses

    return dataclasses.replace(cfg, **changes)


@dataclass
class SearchResult:
    method: str
    task: str
    seed: int
    best_arch: str
    best_metric: float
    best_true_rank: int
    coarse_tau: float
    final_tau: float
    ledger: BudgetLedger
    val_acc: float = math.nan
    mwas_summary: dict | None = None

    @property
    def n_evaluated(self):
        return len([e for e in self.ledger.evaluated if e[1] == self.task])


# ---------------------------------------------------------------------------
# Arch-Graph-zero


def _probe(cmp, x, order, lo, hi, mid):
    """Nearest decisive comparison to ``mid`` inside ``[lo, hi)``, or None."""
    for off in range(hi - lo):
        for k in (mid + off, mid - off - 1):
            if lo <= k < hi:
                c = cmp(x, order[k])
                if c != INCOMPARABLE:
                    return k, c
        if mid + off >= hi and mid - off - 1 < lo:
            break
    return None


def arch_graph_zero(cands, cmp=None, batch_cmp=None):
    """Insertion sort driven by a fallible comparator, best first.

    ``cmp(x, y)`` returns ``FIRST`` (x better), ``SECOND`` (y better) or
    ``INCOMPARABLE``.  Each item is placed by binary search over the
    sorted prefix; an incomparable answer is skipped by probing the
    nearest other element of the current interval instead.  If every
    element of the interval is incomparable the item goes to its end, so
    a comparator that never decides leaves the input order unchanged.

    ``batch_cmp(x, ys)`` returning one outcome per ``y`` may be given
    instead of ``cmp``.
    """
    if cmp is None:
        if batch_cmp is None:
            raise ValueError("a comparator is required")

        def cmp(x, y):
            return int(batch_cmp(x, [y])[0])

    order = []
    for x in cands:
        lo, hi = 0, len(order)
        while lo < hi:
            hit = _probe(cmp, x, order, lo, hi, (lo + hi) // 2)
            if hit is None:
                lo = hi
                break
            k, c = hit
            if c == FIRST:
                hi = k
            else:
                lo = k + 1
        order.insert(lo, x)
    return order


class OracleScorer:
    """Ground-truth stand-in for ``PairScorer``: a perfect, fully decisive comparator."""

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)
        self.n = len(self.scores)

    def compare(self, x, others):
        return np.sign(self.scores[x] - self.scores[np.asarray(others, dtype=np.intp)]).astype(int)

    def compare_one(self, x, y) -> int:
        d = self.scores[x] - self.scores[y]
        return FIRST if d > 0 else SECOND if d < 0 else INCOMPARABLE

    def subset(self, idx):
        return OracleScorer(self.scores[np.asarray(idx)])


# ---------------------------------------------------------------------------
# Predictor phases


@dataclass
class Pretrained:
    """Source-task predictor plus the labelled source sample it was fit on."""

    state: PredictorState
    source_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    source_task: str | None = None


def predictor_config(bench: TabularBenchmark) -> PredictorConfig:
    n_nodes = bench.ops.shape[1]
    return PredictorConfig(n_nodes, bench.op_vocab, bench.tasks[0].embedding.vec.size)


def pretrain(bench: TabularBenchmark, cfg: SearchConfig, ledger: BudgetLedger | None = None) -> Pretrained:
    """Sample ``m`` source architectures, evaluate them and train the predictor."""
    src = bench.task(cfg.source_task)
    rng = np.random.default_rng(derive_seed(cfg.seed, "source-sample", src.name))
    idx = np.sort(rng.choice(len(bench), size=cfg.m, replace=False))
    if ledger is None:
        ledger = BudgetLedger({"source": cfg.m})
    metrics = [ledger.evaluate(bench, int(i), src.name, "source") for i in idx]
    state = train_source(
        [(bench.arch(int(i)), v) for i, v in zip(idx, metrics)],
        src.embedding,
        cfg.train_config(),
        seed=derive_seed(cfg.seed, "source-train", src.name),
        higher_is_better=src.higher_is_better,
        config=predictor_config(bench),
    )
    return Pretrained(state, idx, src.name)


def _split(n, cfg, seed):
    order = np.random.default_rng(seed).permutation(n)
    return order[: cfg.b_f], order[cfg.b_f :]


@dataclass
class Prepared:
    """Everything the ordering stages share: finetuned predictor and coarse order."""

    bench: TabularBenchmark
    cfg: SearchConfig
    task: str
    ledger: BudgetLedger
    scorer: object
    coarse: list
    val_acc: float
    state: PredictorState | None = None
    ref_pairs: list = field(default_factory=list)


def prepare_target(bench, cfg: SearchConfig, pretrained: Pretrained | None, single=False, oracle=False) -> Prepared:
    """Finetune on the target and compute the Arch-Graph-zero coarse ranking."""
    tgt = bench.task(cfg.target_task)
    caps = {"finetune": cfg.b_f + cfg.b_v, "final": cfg.p}
    ledger = BudgetLedger(caps)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "insertion-order", tgt.name))
    if oracle:
        scorer = OracleScorer(bench.scores(tgt.name))
        val_acc, state, ref_pairs = 1.0, None, []
    else:
        rng = np.random.default_rng(derive_seed(cfg.seed, "target-sample", tgt.name))
        idx = rng.choice(len(bench), size=cfg.b_f + cfg.b_v, replace=False)
        metrics = [ledger.evaluate(bench, int(i), tgt.name, "finetune") for i in idx]
        tcfg = cfg.train_config()
        ft_seed = derive_seed(cfg.seed, "finetune", tgt.name)
        if single or pretrained is None:
            start = init_predictor(predictor_config(bench), bench.adjacency, derive_seed(cfg.seed, "init", tgt.name))
            # from scratch: give the target-only predictor the full source schedule
            tcfg = _replace(tcfg, finetune_epochs=tcfg.epochs)
        else:
            start = pretrained.state
        state, val_acc = finetune_target(
            start,
            [(bench.arch(int(i)), v) for i, v in zip(idx, metrics)],
            tgt.embedding,
            tcfg,
            seed=ft_seed,
            higher_is_better=tgt.higher_is_better,
        )
        train_pos, _ = _split(len(idx), cfg, ft_seed)
        ref_pairs = [(idx[train_pos], np.asarray(metrics)[train_pos], tgt)]
        if pretrained is not None and not single and len(pretrained.source_idx):
            src = bench.task(pretrained.source_task)
            ref_pairs.append((pretrained.source_idx, bench.metrics[pretrained.source_idx, bench.task_index(src.name)], src))
        scorer = PairScorer(state, bench.ops, tgt.embedding)
    insertion = order_rng.permutation(len(bench))
    coarse = arch_graph_zero(insertion.tolist(), scorer.compare_one)
    return Prepared(bench, cfg, tgt.name, ledger, scorer, coarse, val_acc, state, ref_pairs)


def _rank_tau(bench, task, ranked):
    """Kendall tau between a best-first list and ground truth on the same items."""
    ranked = np.asarray(ranked, dtype=np.intp)
    try:
        return kendall_tau(-np.arange(len(ranked)), bench.scores(task)[ranked])
    except (DegenerateInput, ValueError):
        return math.nan


def _evaluate_top(prep: Prepared, ledger, ranked):
    done = 0
    for i in ranked:
        if done >= prep.cfg.p:
            break
        if ledger.seen(prep.bench.ids[i], prep.task):
            continue
        ledger.evaluate(prep.bench, int(i), prep.task, "final")
        done += 1


def _best(prep: Prepared, ledger, method, mwas_summary, final_tau):
    bench, task = prep.bench, prep.task
    evaluated = [bench.arch_index(a) for a, t, _, _ in ledger.evaluated if t == task]
    scores = bench.scores(task)
    best = max(evaluated, key=lambda i: (scores[i], -i))
    top = prep.coarse[: prep.cfg.top_k]
    return SearchResult(
        method, task, prep.cfg.seed, bench.ids[best], float(bench.metrics[best, bench.task_index(task)]),
        true_rank(bench, task, best), _rank_tau(bench, task, top), final_tau, ledger,
        prep.val_acc, mwas_summary,
    )


def finish_zero(prep: Prepared, method="arch-graph-zero") -> SearchResult:
    """Evaluate the top ``p`` unseen architectures of the coarse order."""
    ledger = prep.ledger.copy()
    _evaluate_top(prep, ledger, prep.coarse)
    top = prep.coarse[: prep.cfg.top_k]
    return _best(prep, ledger, method, None, _rank_tau(prep.bench, prep.task, top))


def _reference_set(prep: Prepared):
    embs, labels = [], []
    for idx, metrics, task in prep.ref_pairs:
        ia, ib, y = ordered_pairs(metrics, task.higher_is_better)
        if len(y) == 0:
            continue
        embs.append(pair_embeddings(prep.state, prep.bench.ops[idx], ia, ib, task.embedding))
        labels.append(y)
    return build_reference_set(
        np.concatenate(embs), np.concatenate(labels), prep.cfg.trust_alpha, prep.cfg.trust_k
    )


def relation_graph(prep: Prepared, top):
    """Trust-weighted relation graph over the coarse top-k candidates."""
    top = np.asarray(top, dtype=np.intp)
    if isinstance(prep.scorer, OracleScorer):
        s = prep.scorer.scores[top]
        adj = s[:, None] > s[None, :]
        return DirectedGraph(adj, adj.astype(np.float64))
    sub = prep.scorer.subset(top)
    g, data = build_relation_graph(sub, prep.state, None)
    if g.n_edges == 0:
        return g
    ref = _reference_set(prep)
    w = np.maximum(trust_scores(data.embeddings, data.preds, ref, prep.cfg.trust_cap), np.finfo(float).tiny)
    weights = np.zeros(g.adj.shape)
    weights[data.edges[:, 0], data.edges[:, 1]] = w
    return DirectedGraph(g.adj, weights)


def finish_arch_graph(prep: Prepared, method="arch-graph") -> SearchResult:
    """MWAS over the top-k relation graph, then evaluate its topological top ``p``."""
    top = np.asarray(prep.coarse[: prep.cfg.top_k], dtype=np.intp)
    g = relation_graph(prep, top)
    summary = {"score": 0.0, "drop_ratio": 0.0, "met_threshold": True, "r_used": 0}
    if g.n_edges:
        eps = min(max(1.0 - prep.val_acc, 0.0), 1.0)
        res = mwas_approx(g, _replace(prep.cfg.mwas, eps=eps, seed=derive_seed(prep.cfg.seed, "mwas", prep.task) % 2**32))
        dag = res.subgraph
        summary = res.summary()
    else:
        dag = g
    order = topological_order(transitive_reduction(dag))
    ranked = top[order]
    ledger = prep.ledger.copy()
    _evaluate_top(prep, ledger, ranked)
    return _best(prep, ledger, method, summary, _rank_tau(prep.bench, prep.task, ranked))


def random_search(bench, cfg: SearchConfig) -> SearchResult:
    budget = cfg.b_f + cfg.b_v + cfg.p
    task = bench.task(cfg.target_task).name
    ledger = BudgetLedger({"random": budget})
    rng = np.random.default_rng(derive_seed(cfg.seed, "random-search", task))
    for i in rng.choice(len(bench), size=min(budget, len(bench)), replace=False):
        ledger.evaluate(bench, int(i), task, "random")
    scores = bench.scores(task)
    evaluated = [bench.arch_index(a) for a, _, _, _ in ledger.evaluated]
    best = max(evaluated, key=lambda i: (scores[i], -i))
    return SearchResult(
        "random-search", task, cfg.seed, bench.ids[best], float(bench.metrics[best, bench.task_index(task)]),
        true_rank(bench, task, best), math.nan, math.nan, ledger,
    )


def arch_graph_search(bench, cfg: SearchConfig, pretrained: Pretrained | None = None, method="arch-graph", oracle=False) -> SearchResult:
    """Run one search method on ``cfg.target_task``.

    Without ``pretrained`` the transfer methods first pretrain on the
    source task (those evaluations are not charged to the target).
    ``oracle=True`` swaps the predictor for the ground truth.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if not cfg.target_task:
        raise ConfigError("target_task is required")
    if method == "random-search":
        return random_search(bench, cfg)
    single = method == "arch-graph-single"
    if not single and not oracle and cfg.source_task == cfg.target_task:
        raise ConfigError("source and target must differ in transfer mode")
    if pretrained is None and not single and not oracle:
        pretrained = pretrain(bench, cfg)
    prep = prepare_target(bench, cfg, pretrained, single=single, oracle=oracle)
    if method == "arch-graph-zero":
        return finish_zero(prep)
    return finish_arch_graph(prep, method)


# ---------------------------------------------------------------------------
# Experiments


def target_tasks(bench, cfg: SearchConfig):
    return [t for t in bench.task_names if t != cfg.source_task]


def _run_seed(args):
    bench, cfg, methods, seed, targets = args
    cfg = _replace(cfg, seed=seed)
    results = []
    pre = pretrain(bench, cfg) if {"arch-graph", "arch-graph-zero"} & set(methods) else None
    for task in targets:
        tcfg = cfg.with_target(task)
        prep = None
        if {"arch-graph", "arch-graph-zero"} & set(methods):
            prep = prepare_target(bench, tcfg, pre)
        single = prepare_target(bench, tcfg, None, single=True) if "arch-graph-single" in methods else None
        for method in methods:
            if method == "arch-graph":
                results.append(finish_arch_graph(prep))
            elif method == "arch-graph-zero":
                results.append(finish_zero(prep))
            elif method == "arch-graph-single":
                results.append(finish_arch_graph(single, "arch-graph-single"))
            else:
                results.append(random_search(bench, tcfg))
    return results


def run_experiment(bench, methods, seeds, cfg: SearchConfig, jobs: int = 1, targets=None):
    """Every method on every target task for every seed.

    Per seed the source predictor is trained once and shared by all
    targets; arch-graph and arch-graph-zero also share the finetuned
    predictor, so their comparison is paired.  Results are ordered by
    (method, task, seed) regardless of scheduling.  ``targets`` defaults
    to every task except the source.
    """
    methods = list(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}")
    seeds = [int(s) for s in seeds]
    tasks = list(targets) if targets else target_tasks(bench, cfg)
    if cfg.source_task in tasks:
        raise ConfigError("the source task cannot also be a target")
    work = [(bench, cfg, methods, s, tasks) for s in seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_seed, work))
    else:
        chunks = [_run_seed(w) for w in work]
    results = [r for chunk in chunks for r in chunk]
    results.sort(key=lambda r: (methods.index(r.method), tasks.index(r.task), seeds.index(r.seed)))
    return results


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def results_csv(results) -> str:
    """Long-format report: one ``best_true_rank`` row per (method, task, seed)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "task", "metric", "value", "seed"])
    for r in results:
        w.writerow([r.method, r.task, "best_true_rank", r.best_true_rank, r.seed])
    return buf.getvalue()


RUN_FIELDS = (
    "method", "task", "seed", "best_arch", "best_metric", "best_true_rank",
    "coarse_tau", "final_tau", "val_acc", "n_evaluated", "mwas_score", "mwas_drop_ratio",
    "mwas_met_threshold", "mwas_r_used",
)


def runs_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_FIELDS)
    for r in results:
        m = r.mwas_summary or {}
        w.writerow([_fmt(v) for v in (
            r.method, r.task, r.seed, r.best_arch, r.best_metric, r.best_true_rank,
            r.coarse_tau, r.final_tau, r.val_acc, r.n_evaluated,
            m.get("score", ""), m.get("drop_ratio", ""), m.get("met_threshold", ""), m.get("r_used", ""),
        )])
    return buf.getvalue()


def summarize(results):
    """Mean and variance of best_true_rank per (method, task), plus per-method average over tasks."""
    groups = {}
    for r in results:
        groups.setdefault((r.method, r.task), []).append(r.best_true_rank)
    rows = []
    for (method, task), ranks in groups.items():
        a = np.asarray(ranks, dtype=np.float64)
        rows.append((method, task, float(a.mean()), float(a.var()), len(a)))
    by_method = {}
    for method, _, mean, _, _ in rows:
        by_method.setdefault(method, []).append(mean)
    for method, means in by_method.items():
        rows.append((method, "avg", float(np.mean(means)), math.nan, len(means)))
    return rows


def summary_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "task", "mean_rank", "var_rank", "n"])
    for row in summarize(results):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()
