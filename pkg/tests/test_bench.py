import itertools
import json

import numpy as np
import pytest

from archgraph.bench import (
    HIGHER,
    LOWER,
    BudgetLedger,
    TabularBenchmark,
    TaskSpec,
    better,
    default_synthetic,
    gen_synthetic,
    kendall_tau,
    load_benchmark,
    pearson,
    save_benchmark,
    spearman,
    true_rank,
    true_ranks,
)
from archgraph.errors import BudgetExceeded, DegenerateInput, DuplicateEvaluation, MissingMetric, ParseError
from archgraph.predictor import TaskEmbedding


def fixture_lines(nan=False):
    header = {
        "tasks": [{"name": "acc", "direction": HIGHER}, {"name": "loss", "direction": LOWER}],
        "op_vocab": 2,
        "adjacency": [[0, 1], [0, 0]],
    }
    recs = [
        {"id": "x", "ops": [0, 1], "metrics": {"acc": 0.9, "loss": 57.75}},
        {"id": "y", "ops": [1, 1], "metrics": {"acc": 0.7, "loss": 59.35}},
        {"id": "z", "ops": [0, 0], "metrics": {"acc": 0.7, "loss": "NaN" if nan else 58.0}},
    ]
    lines = [json.dumps(header)] + [json.dumps(r) for r in recs]
    if nan:
        lines[-1] = lines[-1].replace('"NaN"', "NaN")
    return "\n".join(lines) + "\n"


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "b.jsonl"
    path.write_text(fixture_lines())
    return load_benchmark(path)


def brute_tau_b(a, b):
    conc = disc = ties_a = ties_b = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        da, db = np.sign(a[i] - a[j]), np.sign(b[i] - b[j])
        if da == 0 and db == 0:
            continue
        if da == 0:
            ties_a += 1
        elif db == 0:
            ties_b += 1
        elif da == db:
            conc += 1
        else:
            disc += 1
    return (conc - disc) / np.sqrt((conc + disc + ties_a) * (conc + disc + ties_b))


class TestLoad:
    def test_fixture_cells(self, tiny):
        assert tiny.metrics.shape == (3, 2)
        assert tiny.ids == ["x", "y", "z"]
        assert tiny.tasks[1].direction == LOWER

    def test_nan_cell(self, tmp_path):
        path = tmp_path / "b.jsonl"
        path.write_text(fixture_lines(nan=True))
        with pytest.raises(MissingMetric):
            load_benchmark(path)

    def test_missing_cell(self, tmp_path):
        text = fixture_lines().replace(', "loss": 59.35', "")
        (tmp_path / "b.jsonl").write_text(text)
        with pytest.raises(MissingMetric):
            load_benchmark(tmp_path / "b.jsonl")

    def test_parse_error_line_number(self, tmp_path):
        lines = fixture_lines().splitlines()
        lines[2] = "{not json"
        (tmp_path / "b.jsonl").write_text("\n".join(lines))
        with pytest.raises(ParseError) as info:
            load_benchmark(tmp_path / "b.jsonl")
        assert info.value.line == 3

    def test_wrong_op_count(self, tmp_path):
        text = fixture_lines().replace('"ops": [1, 1]', '"ops": [1, 1, 0]')
        (tmp_path / "b.jsonl").write_text(text)
        with pytest.raises(ParseError):
            load_benchmark(tmp_path / "b.jsonl")

    def test_round_trip(self, tmp_path):
        b = gen_synthetic(64, 4, 3, seed=2)
        save_benchmark(b, tmp_path / "s.jsonl")
        assert load_benchmark(tmp_path / "s.jsonl") == b

    def test_duplicate_ids_rejected(self):
        t = [TaskSpec("a", HIGHER, TaskEmbedding.zeros(2))]
        with pytest.raises(ValueError):
            TabularBenchmark(["p", "p"], np.zeros((2, 1)), np.zeros((1, 1)), 2, t, np.zeros((2, 1)))


class TestComparisons:
    def test_better_higher(self, tiny):
        assert better(tiny, "acc", 0, 1) == "i-better"

    def test_better_lower(self, tiny):
        assert better(tiny, "loss", 0, 1) == "i-better"

    def test_tie(self, tiny):
        assert better(tiny, "acc", 1, 2) == "tie"

    def test_true_rank(self, tiny):
        assert true_rank(tiny, "acc", 0) == 1
        assert true_rank(tiny, "acc", 1) == true_rank(tiny, "acc", 2) == 2
        assert true_rank(tiny, "loss", 1) == 3

    def test_true_rank_matches_sort_oracle(self):
        b = gen_synthetic(200, 4, 4, seed=5)
        ranks = true_ranks(b, 0)
        order = np.argsort(-b.metrics[:, 0], kind="stable")
        assert ranks[order[0]] == 1 and ranks[order[-1]] == 200
        for i in np.random.default_rng(0).choice(200, 20, replace=False):
            assert true_rank(b, 0, int(i)) == ranks[i] == int(np.flatnonzero(order == i)[0]) + 1


class TestRankMetrics:
    def test_identical_and_reversed(self):
        x = np.arange(10)
        assert kendall_tau(x, x) == pytest.approx(1.0)
        assert kendall_tau(x, -x) == pytest.approx(-1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(3, 50))
            a, b = rng.integers(0, 8, n), rng.integers(0, 8, n)
            if len(set(a)) < 2 or len(set(b)) < 2:
                continue
            assert kendall_tau(a, b) == pytest.approx(brute_tau_b(a, b), abs=1e-12)
            assert kendall_tau(a, b) == pytest.approx(kendall_tau(b, a), abs=1e-12)

    def test_pearson_affine_invariance(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(30), rng.standard_normal(30)
        assert pearson(3 * a + 2, b) == pytest.approx(pearson(a, b))

    def test_spearman_monotone(self):
        x = np.linspace(0.1, 3, 20)
        assert spearman(x, np.exp(x)) == pytest.approx(1.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateInput):
            kendall_tau([1, 1, 1], [1, 2, 3])
        with pytest.raises(DegenerateInput):
            pearson([1, 2, 3], [4, 4, 4])


class TestLedger:
    def test_duplicate_rejected(self, tiny):
        led = BudgetLedger({"final": 5})
        led.evaluate(tiny, 0, "acc", "final")
        with pytest.raises(DuplicateEvaluation):
            led.evaluate(tiny, 0, "acc", "final")

    def test_same_arch_other_task_allowed(self, tiny):
        led = BudgetLedger({"final": 5})
        led.evaluate(tiny, 0, "acc", "final")
        assert led.evaluate(tiny, 0, "loss", "final") == 57.75

    def test_cap(self, tiny):
        led = BudgetLedger({"final": 1})
        led.evaluate(tiny, 0, "acc", "final")
        with pytest.raises(BudgetExceeded):
            led.evaluate(tiny, 1, "acc", "final")

    def test_undeclared_phase(self, tiny):
        with pytest.raises(BudgetExceeded):
            BudgetLedger({"final": 1}).evaluate(tiny, 0, "acc", "source")

    def test_adversarial_driver(self):
        b = gen_synthetic(64, 4, 3, seed=0)
        rng = np.random.default_rng(3)
        led = BudgetLedger({"a": 20, "b": 10})
        for _ in range(500):
            try:
                led.evaluate(b, int(rng.integers(64)), int(rng.integers(2)), str(rng.choice(["a", "b"])))
            except (DuplicateEvaluation, BudgetExceeded):
                pass
        keys = [(a, t) for a, t, _, _ in led.evaluated]
        assert len(keys) == len(set(keys))
        assert led.used("a") <= 20 and led.used("b") <= 10 and len(led.evaluated) <= 30

    def test_copy_is_independent(self, tiny):
        led = BudgetLedger({"final": 3})
        led.evaluate(tiny, 0, "acc", "final")
        other = led.copy()
        other.evaluate(tiny, 1, "acc", "final")
        assert led.used() == 1 and other.used() == 2
        assert not led.seen("y", "acc")


class TestSynthetic:
    def test_deterministic_bytes(self, tmp_path):
        save_benchmark(gen_synthetic(128, 4, 4, seed=9), tmp_path / "a.jsonl")
        save_benchmark(gen_synthetic(128, 4, 4, seed=9), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_full_micro_space(self):
        b = default_synthetic(0)
        assert len(b) == 4096 == 4**6
        assert len({tuple(o) for o in b.ops}) == 4096
        assert b.task_names == ["source", "cls", "seg", "room"]

    def test_corr_one_identical_ranking(self):
        b = gen_synthetic(500, 6, 4, (("s", HIGHER, 1.0), ("t", HIGHER, 1.0)), noise_sd=0.0, seed=1)
        assert np.array_equal(true_ranks(b, 0), true_ranks(b, 1))

    def test_corr_one_lower_better(self):
        b = gen_synthetic(500, 6, 4, (("s", HIGHER, 1.0), ("t", LOWER, 1.0)), noise_sd=0.0, seed=1)
        assert np.array_equal(true_ranks(b, 0), true_ranks(b, 1))

    @pytest.mark.parametrize("seed", range(5))
    def test_corr_zero_uncorrelated(self, seed):
        b = gen_synthetic(4096, 6, 4, (("s", HIGHER, 1.0), ("t", HIGHER, 0.0)), seed=seed)
        assert abs(spearman(b.metrics[:, 0], b.metrics[:, 1])) < 0.1

    def test_corr_tracks_target(self):
        b = gen_synthetic(4096, 6, 4, (("s", HIGHER, 1.0), ("t", HIGHER, 0.8)), seed=0)
        assert spearman(b.metrics[:, 0], b.metrics[:, 1]) == pytest.approx(0.8, abs=0.1)

    def test_task_embeddings_from_fim(self):
        b = default_synthetic(0)
        for t in b.tasks:
            assert t.embedding.source == "diag-fim"
            assert t.embedding.vec.shape == (24,)
            assert np.all(t.embedding.vec >= 0)

    def test_space_too_small(self):
        with pytest.raises(ValueError):
            gen_synthetic(100, 3, 2)
