import json

import numpy as np
import pytest

from fsret.benchmark import (
    BenchmarkManifest,
    FewShotReferenceSet,
    QueryEntry,
    export_review_folders,
    format_stats,
    load_manifest,
    report_stats,
    save_manifest,
    smart_split,
)
from fsret.embeddings import EmbeddingCorpus, EmbeddingRecord, normalize
from fsret.errors import (
    InsufficientExamples,
    MissingImagePath,
    OverlapViolation,
    SchemaError,
    UnknownId,
    UnknownQuery,
)


def corpus_of(n, d=4, seed=0, prefix="img"):
    rng = np.random.default_rng(seed)
    records = [EmbeddingRecord(id=f"{prefix}{i:03d}", vector=normalize(rng.normal(size=d)))
               for i in range(n)]
    return EmbeddingCorpus(records)


def ids(prefix, lo, hi):
    return tuple(f"{prefix}{i:03d}" for i in range(lo, hi))


def write_json(tmp_path, doc, name="m.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


MINIMAL = {
    "corpus": "c.fsem",
    "queries": [{"id": "q1", "text": "a red car", "sub_dataset": "synthetic",
                 "positives": ["img000", "img001"], "hard_negatives": ["img002"]}],
    "fsr": [],
}


class TestManifestLoading:
    def test_minimal_manifest_loads(self, tmp_path):
        corpus = corpus_of(3)
        m = load_manifest(write_json(tmp_path, MINIMAL), corpus)
        assert m.query("q1").positives == ("img000", "img001")
        assert m.corpus_path == "c.fsem"
        assert m.stats.query_count == 1

    def test_unknown_positive_id(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["queries"][0]["positives"] = ["img000", "ghost"]
        with pytest.raises(UnknownId):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_positive_also_hard_negative(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["queries"][0]["hard_negatives"] = ["img000"]
        with pytest.raises(OverlapViolation):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_missing_key(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        del doc["queries"][0]["text"]
        with pytest.raises(SchemaError):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_empty_text_rejected(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["queries"][0]["text"] = "   "
        with pytest.raises(SchemaError):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_unknown_sub_dataset(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["queries"][0]["sub_dataset"] = "bogus"
        with pytest.raises(SchemaError):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_duplicate_query_ids(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["queries"].append(doc["queries"][0])
        with pytest.raises(SchemaError):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_fsr_for_unknown_query(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["fsr"] = [{"query_id": "q9", "positives": [], "hn_near": [],
                       "hn_far": [], "easy_negatives": []}]
        with pytest.raises(SchemaError):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_fsr_id_leaking_into_test_sets(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL))
        doc["fsr"] = [{"query_id": "q1", "positives": ["img000"], "hn_near": [],
                       "hn_far": [], "easy_negatives": []}]
        with pytest.raises(OverlapViolation):
            load_manifest(write_json(tmp_path, doc), corpus_of(3))

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("not json at all {", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_manifest(path, corpus_of(3))

    def test_unknown_query_lookup(self, tmp_path):
        m = load_manifest(write_json(tmp_path, MINIMAL), corpus_of(3))
        with pytest.raises(UnknownQuery):
            m.query("nope")

    def test_save_load_round_trip(self, tmp_path):
        corpus = corpus_of(40)
        m1 = BenchmarkManifest(
            corpus_path="c.fsem",
            queries=[QueryEntry("q1", "blue boat on water", "ood",
                                ids("img", 0, 3), ids("img", 3, 5))],
            fsr=[FewShotReferenceSet("q1", ids("img", 5, 9), ids("img", 9, 11),
                                     ids("img", 11, 12), ids("img", 12, 20))],
        ).validate_against(corpus)
        path = tmp_path / "round.json"
        save_manifest(m1, path)
        m2 = load_manifest(path, corpus)
        assert m2.queries == m1.queries
        assert m2.fsr == m1.fsr
        save_manifest(m2, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


class TestFsrSetRules:
    def test_positive_count_capped(self):
        with pytest.raises(SchemaError):
            FewShotReferenceSet("q", ids("img", 0, 17), (), (), ())

    def test_hn_total_capped(self):
        with pytest.raises(SchemaError):
            FewShotReferenceSet("q", (), ids("img", 0, 13), ids("img", 13, 18), ())

    def test_overlapping_lists_rejected(self):
        with pytest.raises(OverlapViolation):
            FewShotReferenceSet("q", ("img000",), ("img000",), (), ())


def split_fixture(n_corpus=260, seed=0):
    """Two queries over disjoint labeled pools, plenty of unlabeled spares."""
    corpus = corpus_of(n_corpus, d=8, seed=3)
    q1 = QueryEntry("q1", "red circle", "synthetic",
                    ids("img", 0, 20), ids("img", 20, 45))
    q2 = QueryEntry("q2", "blue square", "synthetic",
                    ids("img", 45, 65), ids("img", 65, 90))
    return corpus, [q1, q2]


class TestSmartSplit:
    def test_output_sizes(self):
        corpus, gtqr = split_fixture()
        manifest, fsr_sets = smart_split(gtqr, corpus, seed=11)
        for fs in fsr_sets:
            assert len(fs.positives) == 16
            assert len(fs.hn_near) == 12
            assert len(fs.hn_far) == 4
            assert len(fs.easy_negatives) == 100

    def test_partition_of_positives(self):
        corpus, gtqr = split_fixture()
        manifest, fsr_sets = smart_split(gtqr, corpus, seed=11)
        for original, fs in zip(gtqr, fsr_sets):
            test_q = manifest.query(original.query_id)
            assert set(test_q.positives) | set(fs.positives) == set(original.positives)
            assert set(test_q.positives).isdisjoint(fs.positives)

    def test_test_and_fsr_disjoint(self):
        corpus, gtqr = split_fixture()
        manifest, _ = smart_split(gtqr, corpus, seed=11)
        withheld = manifest.fsr_ids()
        for q in manifest.queries:
            assert withheld.isdisjoint(q.positives)
            assert withheld.isdisjoint(q.hard_negatives)

    def test_near_hns_are_the_closest_to_positive_centroid(self):
        corpus, gtqr = split_fixture()
        _, fsr_sets = smart_split(gtqr, corpus, seed=11)
        for original, fs in zip(gtqr, fsr_sets):
            centroid = normalize(np.stack(
                [corpus.vector(i) for i in fs.positives]).astype(np.float64).mean(axis=0))
            def centroid_cos(i):
                return float(corpus.vector(i).astype(np.float64) @ centroid)
            near_low = min(centroid_cos(i) for i in fs.hn_near)
            rest = set(original.hard_negatives) - set(fs.hn_near)
            rest_high = max(centroid_cos(i) for i in rest)
            assert near_low >= rest_high

    def test_boundary_seventeen_positives(self):
        corpus = corpus_of(200, d=8, seed=5)
        q = QueryEntry("q1", "tiny pool", "synthetic",
                       ids("img", 0, 17), ids("img", 17, 34))
        manifest, fsr_sets = smart_split([q], corpus, seed=1)
        assert len(fsr_sets[0].positives) == 16
        assert len(manifest.query("q1").positives) == 1

    def test_insufficient_positives(self):
        corpus = corpus_of(100, d=8, seed=5)
        q = QueryEntry("q1", "too few", "synthetic",
                       ids("img", 0, 16), ids("img", 20, 40))
        with pytest.raises(InsufficientExamples):
            smart_split([q], corpus, seed=1)

    def test_insufficient_hard_negatives(self):
        corpus = corpus_of(100, d=8, seed=5)
        q = QueryEntry("q1", "too few", "synthetic",
                       ids("img", 0, 20), ids("img", 20, 36))
        with pytest.raises(InsufficientExamples):
            smart_split([q], corpus, seed=1)

    def test_shared_positives_prefer_prior_fsr_allocation(self):
        corpus = corpus_of(300, d=8, seed=7)
        shared = ids("img", 0, 20)
        q1 = QueryEntry("q1", "first of pair", "synthetic",
                        shared, ids("img", 20, 45))
        q2 = QueryEntry("q2", "second of pair", "synthetic",
                        shared, ids("img", 45, 70))
        _, fsr_sets = smart_split([q1, q2], corpus, seed=2)
        assert set(fsr_sets[1].positives) == set(fsr_sets[0].positives)

    def test_easy_negatives_avoid_all_labeled_ids(self):
        corpus, gtqr = split_fixture()
        _, fsr_sets = smart_split(gtqr, corpus, seed=11)
        labeled = set()
        for q in gtqr:
            labeled |= set(q.positives) | set(q.hard_negatives)
        for fs in fsr_sets:
            assert labeled.isdisjoint(fs.easy_negatives)

    def test_small_easy_pool_takes_what_exists(self):
        corpus = corpus_of(40, d=8, seed=9)
        q = QueryEntry("q1", "nearly full", "synthetic",
                       ids("img", 0, 17), ids("img", 17, 34))
        _, fsr_sets = smart_split([q], corpus, seed=0)
        assert len(fsr_sets[0].easy_negatives) == 6

    def test_fixed_seed_reproduces_split(self, tmp_path):
        corpus, gtqr = split_fixture()
        m1, _ = smart_split(gtqr, corpus, seed=21)
        m2, _ = smart_split(gtqr, corpus, seed=21)
        save_manifest(m1, tmp_path / "a.json")
        save_manifest(m2, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestStats:
    def test_hand_counted_two_query_fixture(self):
        corpus = corpus_of(12, d=3, seed=1)
        m = BenchmarkManifest("", [
            QueryEntry("q1", "red car parked", "ood",
                       ("img000", "img001"), ("img002",)),
            QueryEntry("q2", "dog", "synthetic",
                       ("img003", "img004", "img005"), ("img006", "img007")),
        ], []).validate_against(corpus)
        stats = report_stats(m)
        assert stats.image_count == 12
        assert stats.test_image_count == 12
        assert stats.query_count == 2
        assert stats.mean_test_positives == pytest.approx(2.5)
        assert stats.mean_test_hard_negatives == pytest.approx(1.5)
        assert stats.mean_query_tokens == pytest.approx(2.0)

    def test_empty_manifest_reports_zeros(self):
        corpus = corpus_of(5)
        stats = report_stats(BenchmarkManifest("", [], []).validate_against(corpus))
        assert stats.query_count == 0
        assert stats.mean_test_positives == 0.0

    def test_unvalidated_manifest_rejected(self):
        with pytest.raises(SchemaError):
            report_stats(BenchmarkManifest("", [], []))

    def test_format_mentions_every_number(self):
        corpus = corpus_of(12, d=3, seed=1)
        m = BenchmarkManifest("", [
            QueryEntry("q1", "red car parked", "ood",
                       ("img000", "img001"), ("img002",)),
        ], []).validate_against(corpus)
        text = format_stats(report_stats(m))
        assert "12" in text and "queries" in text


class TestReviewFolders:
    def test_false_folder_has_three_per_positive(self, tmp_path):
        corpus = corpus_of(60, d=8, seed=13)
        m = BenchmarkManifest("", [
            QueryEntry("q1", "four positives", "synthetic",
                       ids("img", 0, 4), ()),
        ], []).validate_against(corpus)
        out = export_review_folders(m, corpus, tmp_path / "review")
        false_ids = (out / "q1" / "false" / "manifest.txt").read_text().split()
        true_ids = (out / "q1" / "true" / "manifest.txt").read_text().split()
        assert len(true_ids) == 4
        assert len(false_ids) == 12

    def test_zero_positives_gives_empty_folders(self, tmp_path):
        corpus = corpus_of(10, d=4, seed=17)
        m = BenchmarkManifest("", [
            QueryEntry("q1", "nothing labeled", "synthetic", (), ()),
        ], []).validate_against(corpus)
        out = export_review_folders(m, corpus, tmp_path / "review")
        assert (out / "q1" / "true" / "manifest.txt").read_text() == ""
        assert (out / "q1" / "false" / "manifest.txt").read_text() == ""

    def test_nearest_selection_matches_brute_force(self, tmp_path):
        corpus = corpus_of(50, d=8, seed=19)
        positives = ids("img", 0, 4)
        m = BenchmarkManifest("", [
            QueryEntry("q1", "oracle check", "synthetic", positives, ()),
        ], []).validate_against(corpus)
        out = export_review_folders(m, corpus, tmp_path / "review")
        false_ids = (out / "q1" / "false" / "manifest.txt").read_text().split()

        centroid = normalize(np.stack(
            [corpus.vector(i) for i in positives]).astype(np.float64).mean(axis=0))
        scored = sorted(
            ((-float(corpus.vector(i).astype(np.float64) @ centroid), i)
             for i in corpus.ids if i not in set(positives)))
        assert false_ids == [i for _, i in scored[:12]]

    def test_copy_without_path_fails(self, tmp_path):
        corpus = corpus_of(10, d=4, seed=23)
        m = BenchmarkManifest("", [
            QueryEntry("q1", "copy me", "synthetic", ("img000",), ()),
        ], []).validate_against(corpus)
        with pytest.raises(MissingImagePath):
            export_review_folders(m, corpus, tmp_path / "review", copy_images=True)

    def test_copy_with_paths(self, tmp_path):
        corpus = corpus_of(4, d=4, seed=29)
        files = {}
        for i in corpus.ids:
            p = tmp_path / f"{i}.png"
            p.write_bytes(b"png-bytes")
            files[i] = str(p)
        m = BenchmarkManifest("", [
            QueryEntry("q1", "copy me", "synthetic", ("img000",), ()),
        ], [], image_paths=files).validate_against(corpus)
        out = export_review_folders(m, corpus, tmp_path / "review", copy_images=True)
        assert (out / "q1" / "true" / "img000.png").read_bytes() == b"png-bytes"
