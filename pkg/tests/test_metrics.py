import numpy as np
import pytest

from fsret.benchmark import BenchmarkManifest, FewShotReferenceSet, QueryEntry
from fsret.embeddings import EmbeddingCorpus, EmbeddingRecord, normalize
from fsret.errors import EmptyPositives, FsrLeak, SchemaError, UnknownQuery
from fsret.metrics import (
    RankedRun,
    average_precision_at_k,
    evaluate_run,
    format_report,
    read_run,
    recall_at_k,
    report_to_dict,
    write_run,
)


def oracle_ap(ranking, positives, k):
    """Direct transcription of the definition: quadratic, no running state."""
    positives = set(positives)
    total = 0.0
    for i in range(1, k + 1):
        if i <= len(ranking) and ranking[i - 1] in positives:
            hits = sum(1 for j in range(1, i + 1)
                       if j <= len(ranking) and ranking[j - 1] in positives)
            total += hits / i
    return total / min(k, len(positives))


def random_instance(rng):
    n = int(rng.integers(3, 40))
    ranking = [f"i{j}" for j in rng.permutation(n)]
    n_pos = int(rng.integers(1, n + 1))
    positives = set(rng.choice([f"i{j}" for j in range(n)], size=n_pos, replace=False))
    k = int(rng.integers(1, 50))
    return ranking, positives, k


class TestAveragePrecision:
    def test_hand_case_plus_minus_plus(self):
        ap = average_precision_at_k(["a", "x", "b"], {"a", "b"}, k=3)
        assert ap == pytest.approx(5 / 6, abs=1e-9)

    def test_perfect_ranking(self):
        ap = average_precision_at_k(["a", "b", "c"], {"a", "b", "c"}, k=10)
        assert ap == 1.0

    def test_no_positive_in_top_k(self):
        ap = average_precision_at_k(["x", "y"], {"a"}, k=2)
        assert ap == 0.0

    def test_more_positives_than_k_still_reaches_one(self):
        ranking = [f"p{i}" for i in range(5)]
        positives = {f"p{i}" for i in range(20)}
        assert average_precision_at_k(ranking, positives, k=5) == 1.0

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(101)
        for _ in range(300):
            ranking, positives, k = random_instance(rng)
            got = average_precision_at_k(ranking, positives, k)
            assert got == pytest.approx(oracle_ap(ranking, positives, k), abs=1e-9)

    def test_invariant_under_permutation_below_k(self):
        rng = np.random.default_rng(103)
        ranking = [f"i{j}" for j in range(30)]
        positives = {"i1", "i4", "i17", "i25"}
        k = 10
        base = average_precision_at_k(ranking, positives, k)
        for _ in range(20):
            tail = ranking[k:]
            rng.shuffle(tail)
            assert average_precision_at_k(ranking[:k] + tail, positives, k) == base

    def test_promoting_a_positive_strictly_improves(self):
        rng = np.random.default_rng(107)
        for _ in range(50):
            ranking, positives, k = random_instance(rng)
            # find a negative directly above a positive inside the window
            swap_at = None
            for i in range(min(k, len(ranking)) - 1):
                if ranking[i] not in positives and ranking[i + 1] in positives:
                    swap_at = i
                    break
            if swap_at is None:
                continue
            before = average_precision_at_k(ranking, positives, k)
            swapped = list(ranking)
            swapped[swap_at], swapped[swap_at + 1] = swapped[swap_at + 1], swapped[swap_at]
            assert average_precision_at_k(swapped, positives, k) > before

    def test_empty_positives(self):
        with pytest.raises(EmptyPositives):
            average_precision_at_k(["a"], set(), k=1)

    def test_k_below_one(self):
        with pytest.raises(ValueError):
            average_precision_at_k(["a"], {"a"}, k=0)


class TestRecall:
    def test_both_positives_found(self):
        assert recall_at_k(["a", "b", "x"], {"a", "b"}, k=10) == 1.0

    def test_min_normalization(self):
        # 5 positives but only 2 slots: finding 1 of them is half credit
        ranking = ["p0", "x"]
        positives = {f"p{i}" for i in range(5)}
        assert recall_at_k(ranking, positives, k=2) == pytest.approx(0.5)

    def test_none_found(self):
        assert recall_at_k(["x", "y"], {"a"}, k=2) == 0.0

    def test_empty_positives(self):
        with pytest.raises(EmptyPositives):
            recall_at_k(["a"], set(), k=1)


class TestRankedRun:
    def test_length_mismatch(self):
        with pytest.raises(SchemaError):
            RankedRun("q", ("a", "b"), (0.5,))

    def test_duplicate_ids(self):
        with pytest.raises(SchemaError):
            RankedRun("q", ("a", "a"), (0.9, 0.8))


def eval_fixture():
    rng = np.random.default_rng(5)
    records = [EmbeddingRecord(id=f"img{i:03d}", vector=normalize(rng.normal(size=4)))
               for i in range(30)]
    corpus = EmbeddingCorpus(records)
    manifest = BenchmarkManifest("", [
        QueryEntry("q1", "two positives", "synthetic",
                   ("img000", "img001"), ("img002",)),
        QueryEntry("q2", "one positive", "synthetic", ("img004",), ()),
        QueryEntry("q3", "misses both", "ood", ("img006", "img007"), ()),
        QueryEntry("q4", "nothing left in test", "ood", (), ()),
    ], [
        FewShotReferenceSet("q1", ("img010", "img011"), ("img012",), (), ()),
    ]).validate_against(corpus)
    return manifest


class TestEvaluateRun:
    def test_hand_computed_fixture(self):
        manifest = eval_fixture()
        runs = [
            RankedRun("q1", ("img000", "img003", "img001"), (0.9, 0.8, 0.7)),
            RankedRun("q2", ("img005", "img004"), (0.9, 0.8)),
            RankedRun("q3", ("img008", "img009"), (0.9, 0.8)),
        ]
        report = evaluate_run(runs, manifest, k=10)
        by_id = {s.query_id: s for s in report.per_query}
        assert by_id["q1"].ap == pytest.approx(5 / 6, abs=1e-9)
        assert by_id["q2"].ap == pytest.approx(0.5)
        assert by_id["q3"].ap == 0.0
        assert report.overall.mean_ap == pytest.approx((5 / 6 + 0.5 + 0.0) / 3)
        assert report.by_sub_dataset["synthetic"].mean_ap == pytest.approx((5 / 6 + 0.5) / 2)
        assert report.by_sub_dataset["ood"].mean_ap == 0.0

    def test_means_recompute_from_per_query(self):
        manifest = eval_fixture()
        runs = [
            RankedRun("q1", ("img001", "img003"), (0.9, 0.8)),
            RankedRun("q3", ("img007",), (0.9,)),
        ]
        report = evaluate_run(runs, manifest, k=5)
        assert report.overall.mean_ap == pytest.approx(
            sum(s.ap for s in report.per_query) / len(report.per_query))
        assert report.overall.mean_recall == pytest.approx(
            sum(s.recall for s in report.per_query) / len(report.per_query))

    def test_fsr_id_in_ranking_is_a_leak(self):
        manifest = eval_fixture()
        runs = [RankedRun("q1", ("img000", "img010"), (0.9, 0.8))]
        with pytest.raises(FsrLeak):
            evaluate_run(runs, manifest, k=10)

    def test_other_querys_fsr_id_also_leaks(self):
        manifest = eval_fixture()
        runs = [RankedRun("q2", ("img012",), (0.9,))]
        with pytest.raises(FsrLeak):
            evaluate_run(runs, manifest, k=10)

    def test_unknown_query(self):
        manifest = eval_fixture()
        with pytest.raises(UnknownQuery):
            evaluate_run([RankedRun("q9", ("img000",), (0.9,))], manifest, k=10)

    def test_zero_positive_query_skipped_not_failed(self):
        manifest = eval_fixture()
        report = evaluate_run([RankedRun("q4", ("img008",), (0.9,))], manifest, k=10)
        assert report.skipped == ["q4"]
        assert report.per_query == []
        assert report.overall.query_count == 0

    def test_duplicate_runs_rejected(self):
        manifest = eval_fixture()
        runs = [RankedRun("q2", ("img004",), (0.9,)),
                RankedRun("q2", ("img005",), (0.9,))]
        with pytest.raises(SchemaError):
            evaluate_run(runs, manifest, k=10)

    def test_report_renders_and_serializes(self):
        manifest = eval_fixture()
        report = evaluate_run([RankedRun("q2", ("img004",), (0.9,))], manifest, k=10)
        text = format_report(report)
        assert "overall" in text and "mAP@10" in text
        doc = report_to_dict(report)
        assert doc["overall"]["mean_ap"] == pytest.approx(1.0)
        assert doc["per_query"][0]["query_id"] == "q2"


class TestRunFiles:
    def test_round_trip(self, tmp_path):
        runs = [RankedRun("q1", ("a", "b"), (0.9, 0.1)),
                RankedRun("q2", ("c",), (0.5,))]
        path = tmp_path / "run.jsonl"
        write_run(runs, path)
        assert read_run(path) == runs

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "run.jsonl"
        path.write_text('{"query_id": "q1", "ranking": ["a"], "scores": [1.0]}\n'
                        "not json\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="2"):
            read_run(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "run.jsonl"
        path.write_text('{"query_id": "q1", "ranking": ["a"]}\n', encoding="utf-8")
        with pytest.raises(SchemaError):
            read_run(path)

    def test_duplicate_query_in_file(self, tmp_path):
        path = tmp_path / "run.jsonl"
        line = '{"query_id": "q1", "ranking": ["a"], "scores": [1.0]}\n'
        path.write_text(line + line, encoding="utf-8")
        with pytest.raises(SchemaError):
            read_run(path)

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "run.jsonl"
        path.write_text('\n{"query_id": "q1", "ranking": ["a"], "scores": [1.0]}\n\n',
                        encoding="utf-8")
        assert len(read_run(path)) == 1
