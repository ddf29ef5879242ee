import math

import numpy as np
import pytest

from archgraph.bench import HIGHER, LOWER, gen_synthetic, kendall_tau, true_rank
from archgraph.errors import ConfigError
from archgraph.search import (
    FIRST,
    INCOMPARABLE,
    SECOND,
    OracleScorer,
    SearchConfig,
    arch_graph_search,
    arch_graph_zero,
    derive_seed,
    pretrain,
    random_search,
    results_csv,
    run_experiment,
    runs_csv,
    summary_csv,
)

SMALL = dict(m=12, b_f=8, b_v=6, p=6, top_k=40)


def small_bench(seed=0):
    tasks = (("source", HIGHER, 1.0), ("cls", HIGHER, 0.8), ("room", LOWER, 0.7))
    return gen_synthetic(256, 6, 4, tasks, noise_sd=0.1, seed=seed)


def small_cfg(**kw):
    from archgraph.predictor import TrainConfig

    return SearchConfig(**{**SMALL, "train": TrainConfig(epochs=5, finetune_epochs=5), **kw})


def perfect(values):
    def cmp(x, y):
        return FIRST if values[x] > values[y] else SECOND

    return cmp


def noisy(values, flip, rng):
    n = len(values)
    flips = np.triu(rng.random((n, n)) < flip, k=1)
    flips = flips | flips.T

    def cmp(x, y):
        c = FIRST if values[x] > values[y] else SECOND
        return -c if flips[x, y] else c

    return cmp


class TestArchGraphZero:
    def test_perfect_comparator(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal(10)
        for _ in range(20):
            out = arch_graph_zero(rng.permutation(10).tolist(), perfect(values))
            assert out == list(np.argsort(-values))

    def test_all_incomparable_keeps_input_order(self):
        cands = [4, 2, 9, 0, 7]
        assert arch_graph_zero(cands, lambda x, y: INCOMPARABLE) == cands

    def test_incomparable_item_goes_to_interval_end(self):
        table = {(1, 0): SECOND, (2, 1): INCOMPARABLE, (2, 0): SECOND}
        assert arch_graph_zero([0, 1, 2], lambda x, y: table[(x, y)]) == [0, 1, 2]

    def test_incomparable_midpoint_is_skipped(self):
        # item 3 cannot be compared with 1; the neighbours decide instead
        values = [3.0, 1.0, 0.0, 2.0]

        def cmp(x, y):
            if {x, y} == {1, 3}:
                return INCOMPARABLE
            return FIRST if values[x] > values[y] else SECOND

        assert arch_graph_zero([0, 1, 2, 3], cmp) == [0, 1, 3, 2]

    def test_logarithmic_calls_with_perfect_comparator(self):
        rng = np.random.default_rng(2)
        values = rng.standard_normal(200)
        calls = []

        def cmp(x, y):
            calls.append(1)
            return FIRST if values[x] > values[y] else SECOND

        arch_graph_zero(rng.permutation(200).tolist(), cmp)
        assert len(calls) <= 200 * math.ceil(math.log2(200))

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = 60
            table = rng.choice([FIRST, SECOND, INCOMPARABLE], size=(n, n), p=[0.45, 0.45, 0.1])

            def cmp(x, y):
                return table[x, y]

            def batch(x, order):
                return table[x, np.asarray(order, dtype=np.intp)]

            cands = rng.permutation(n).tolist()
            assert arch_graph_zero(cands, cmp) == arch_graph_zero(cands, batch_cmp=batch)

    def test_requires_comparator(self):
        with pytest.raises(ValueError):
            arch_graph_zero([1, 2])

    def test_noisy_comparator(self):
        taus = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            values = rng.standard_normal(50)
            out = arch_graph_zero(rng.permutation(50).tolist(), noisy(values, 0.1, rng))
            taus.append(kendall_tau(-np.arange(50), values[out]))
        assert np.mean(taus) >= 0.6


class TestConfig:
    def test_defaults(self):
        c = SearchConfig()
        assert (c.m, c.b_f, c.b_v, c.p, c.top_k) == (50, 20, 10, 20, 500)

    @pytest.mark.parametrize("kw", [dict(p=600), dict(m=0), dict(b_f=1), dict(top_k=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SearchConfig(**kw)

    def test_same_source_and_target(self):
        b = small_bench()
        with pytest.raises(ConfigError):
            arch_graph_search(b, small_cfg(target_task="source"))

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            arch_graph_search(small_bench(), small_cfg(target_task="cls"), method="nope")

    def test_seed_streams_independent(self):
        assert derive_seed(0, "a") != derive_seed(0, "b")
        assert derive_seed(0, "a") != derive_seed(1, "a")
        assert derive_seed(3, "x", "y") == derive_seed(3, "x", "y")


class TestPipeline:
    def test_oracle_finds_optimum(self):
        b = small_bench()
        cfg = small_cfg(target_task="room")
        for method in ("arch-graph", "arch-graph-zero"):
            res = arch_graph_search(b, cfg, method=method, oracle=True)
            assert res.best_true_rank == 1
            assert res.final_tau == pytest.approx(1.0)

    @pytest.mark.parametrize("method", ["arch-graph", "arch-graph-zero", "arch-graph-single"])
    def test_budget_respected(self, method):
        b = small_bench()
        cfg = small_cfg(target_task="cls")
        res = arch_graph_search(b, cfg, method=method)
        target = [e for e in res.ledger.evaluated if e[1] == "cls"]
        assert len(target) == cfg.b_f + cfg.b_v + cfg.p
        ids = [e[0] for e in target]
        assert len(ids) == len(set(ids))
        assert res.best_arch in ids
        assert res.best_true_rank == true_rank(b, "cls", b.arch_index(res.best_arch))
        assert 0.0 <= res.val_acc <= 1.0

    def test_final_evaluations_skip_seen(self):
        b = small_bench()
        cfg = small_cfg(target_task="cls")
        res = arch_graph_search(b, cfg)
        assert res.ledger.used("final") == cfg.p
        assert res.ledger.used("finetune") == cfg.b_f + cfg.b_v

    def test_deterministic(self):
        b = small_bench()
        cfg = small_cfg(target_task="cls", seed=5)
        pre = pretrain(b, cfg)
        r1 = arch_graph_search(b, cfg, pre)
        r2 = arch_graph_search(b, cfg, pretrain(b, cfg))
        assert r1.ledger.evaluated == r2.ledger.evaluated
        assert r1.best_arch == r2.best_arch

    def test_mwas_summary_recorded(self):
        res = arch_graph_search(small_bench(), small_cfg(target_task="cls"))
        assert set(res.mwas_summary) == {"score", "drop_ratio", "met_threshold", "r_used"}


class TestRandomSearch:
    def test_budget(self):
        b = small_bench()
        res = random_search(b, small_cfg(target_task="cls"))
        assert res.ledger.used("random") == SMALL["b_f"] + SMALL["b_v"] + SMALL["p"]

    def test_order_statistics(self):
        b = gen_synthetic(4096, 6, 4, (("source", HIGHER, 1.0), ("t", HIGHER, 0.5)), seed=3)
        n, k = len(b), 50
        ranks = [random_search(b, SearchConfig(target_task="t", seed=s)).best_true_rank for s in range(50)]
        mean = (n + 1) / (k + 1)
        var = (n + 1) * (n - k) * k / ((k + 1) ** 2 * (k + 2))
        assert abs(np.mean(ranks) - mean) <= 3 * math.sqrt(var / len(ranks))


class TestExperiment:
    def test_rows_and_order(self):
        b = small_bench()
        res = run_experiment(b, ["random-search", "arch-graph"], [2, 1], small_cfg())
        assert [(r.method, r.task, r.seed) for r in res] == [
            ("random-search", "cls", 2), ("random-search", "cls", 1),
            ("random-search", "room", 2), ("random-search", "room", 1),
            ("arch-graph", "cls", 2), ("arch-graph", "cls", 1),
            ("arch-graph", "room", 2), ("arch-graph", "room", 1),
        ]
        lines = results_csv(res).splitlines()
        assert lines[0] == "method,task,metric,value,seed"
        assert len(lines) == 1 + 8
        assert len(runs_csv(res).splitlines()) == 9

    def test_single_row(self):
        res = run_experiment(small_bench(), ["random-search"], [0], small_cfg(), targets=["cls"])
        assert len(results_csv(res).splitlines()) == 2

    def test_parallel_matches_serial(self):
        b = small_bench()
        cfg = small_cfg()
        serial = run_experiment(b, ["arch-graph", "random-search"], [0, 1], cfg, jobs=1)
        parallel = run_experiment(b, ["arch-graph", "random-search"], [0, 1], cfg, jobs=2)
        assert runs_csv(serial) == runs_csv(parallel)

    def test_summary_average_row(self):
        res = run_experiment(small_bench(), ["random-search"], [0, 1, 2], small_cfg())
        rows = summary_csv(res).splitlines()
        assert rows[-1].startswith("random-search,avg,")
        per_task = [float(r.split(",")[2]) for r in rows[1:-1]]
        assert float(rows[-1].split(",")[2]) == pytest.approx(np.mean(per_task))

    def test_bad_inputs(self):
        b = small_bench()
        with pytest.raises(ConfigError):
            run_experiment(b, ["bogus"], [0], small_cfg())
        with pytest.raises(ConfigError):
            run_experiment(b, ["random-search"], [0], small_cfg(), targets=["source"])
