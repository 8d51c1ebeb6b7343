"""Benchmark data model: labeled queries, hard negatives, and the few-shot split.

A manifest binds an embedding corpus to queries with ground-truth labels.
Query entries hold the test-corpus positives and hard negatives; each
query's few-shot reference (FSR) set holds the exemplars withheld from the
test corpus, so test ids and FSR ids never overlap. ``smart_split`` produces
that layout from full ground-truth result sets: 16 FSR positives per query,
12 near hard negatives pinned by cosine to the positive centroid, 4 far
ones sampled uniformly, and 100 easy negatives drawn from unlabeled items.
Items already allocated to an earlier query's FSR are preferred when a
later query allocates, which keeps the withheld-image total small.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingCorpus, normalize
from .errors import (
    InsufficientExamples,
    MissingImagePath,
    OverlapViolation,
    SchemaError,
    UnknownId,
    UnknownQuery,
)

SUB_DATASETS = ("compositional_vg", "compositional_inquire", "ood", "synthetic")

FSR_POSITIVE_COUNT = 16
FSR_NEAR_COUNT = 12
FSR_FAR_COUNT = 4
EASY_NEGATIVE_COUNT = 100
REVIEW_FALSE_RATIO = 3


def _check_unique(ids, what: str) -> None:
    if len(set(ids)) != len(ids):
        raise SchemaError(f"duplicate ids in {what}")


@dataclass(frozen=True)
class QueryEntry:
    """One benchmark query with its labeled result sets."""

    query_id: str
    text: str
    sub_dataset: str
    positives: tuple[str, ...]
    hard_negatives: tuple[str, ...]

    def __post_init__(self):
        if not self.text.strip():
            raise SchemaError(f"query {self.query_id!r} has empty text")
        if self.sub_dataset not in SUB_DATASETS:
            raise SchemaError(
                f"query {self.query_id!r}: unknown sub_dataset {self.sub_dataset!r}")
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "hard_negatives", tuple(self.hard_negatives))
        _check_unique(self.positives, f"positives of {self.query_id!r}")
        _check_unique(self.hard_negatives, f"hard_negatives of {self.query_id!r}")
        shared = set(self.positives) & set(self.hard_negatives)
        if shared:
            raise OverlapViolation(
                f"query {self.query_id!r}: ids in both positives and "
                f"hard_negatives: {sorted(shared)[:5]}")


@dataclass(frozen=True)
class FewShotReferenceSet:
    """Per-query exemplars withheld from the test corpus."""

    query_id: str
    positives: tuple[str, ...]
    hn_near: tuple[str, ...]
    hn_far: tuple[str, ...]
    easy_negatives: tuple[str, ...]

    def __post_init__(self):
        for name in ("positives", "hn_near", "hn_far", "easy_negatives"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.positives) > FSR_POSITIVE_COUNT:
            raise SchemaError(
                f"fsr {self.query_id!r}: {len(self.positives)} positives exceeds "
                f"{FSR_POSITIVE_COUNT}")
        if len(self.hn_near) + len(self.hn_far) > FSR_NEAR_COUNT + FSR_FAR_COUNT:
            raise SchemaError(
                f"fsr {self.query_id!r}: {len(self.hn_near)} near + "
                f"{len(self.hn_far)} far hard negatives exceeds "
                f"{FSR_NEAR_COUNT + FSR_FAR_COUNT}")
        combined = self.positives + self.hn_near + self.hn_far + self.easy_negatives
        if len(set(combined)) != len(combined):
            raise OverlapViolation(f"fsr {self.query_id!r}: overlapping id lists")

    @property
    def all_ids(self) -> frozenset[str]:
        return frozenset(self.positives + self.hn_near + self.hn_far
                         + self.easy_negatives)


@dataclass
class ManifestStats:
    image_count: int
    test_image_count: int
    query_count: int
    mean_test_positives: float
    mean_test_hard_negatives: float
    mean_query_tokens: float


class BenchmarkManifest:
    """Queries plus FSR sets, validated against one corpus."""

    def __init__(self, corpus_path: str, queries: list[QueryEntry],
                 fsr: list[FewShotReferenceSet],
                 image_paths: dict[str, str] | None = None):
        self.corpus_path = corpus_path
        self.queries = list(queries)
        self.fsr = list(fsr)
        self.image_paths = dict(image_paths or {})
        self.stats: ManifestStats | None = None
        self._by_query = {}
        self._fsr_by_query = {}
        for q in self.queries:
            if q.query_id in self._by_query:
                raise SchemaError(f"duplicate query id {q.query_id!r}")
            self._by_query[q.query_id] = q
        for fs in self.fsr:
            if fs.query_id not in self._by_query:
                raise SchemaError(f"fsr references unknown query {fs.query_id!r}")
            if fs.query_id in self._fsr_by_query:
                raise SchemaError(f"duplicate fsr entry for query {fs.query_id!r}")
            self._fsr_by_query[fs.query_id] = fs

    def query(self, query_id: str) -> QueryEntry:
        try:
            return self._by_query[query_id]
        except KeyError:
            raise UnknownQuery(f"no query {query_id!r} in manifest") from None

    def fsr_for(self, query_id: str) -> FewShotReferenceSet | None:
        return self._fsr_by_query.get(query_id)

    def fsr_ids(self) -> frozenset[str]:
        """Union of every FSR set's ids; the test corpus excludes all of them."""
        out: set[str] = set()
        for fs in self.fsr:
            out |= fs.all_ids
        return frozenset(out)

    def test_ids(self, corpus: EmbeddingCorpus) -> list[str]:
        withheld = self.fsr_ids()
        return [i for i in corpus.ids if i not in withheld]

    def validate_against(self, corpus: EmbeddingCorpus) -> "BenchmarkManifest":
        known = set(corpus.ids)
        for q in self.queries:
            for i in q.positives + q.hard_negatives:
                if i not in known:
                    raise UnknownId(f"query {q.query_id!r} references {i!r}, "
                                    "not in corpus")
        for fs in self.fsr:
            for i in fs.all_ids:
                if i not in known:
                    raise UnknownId(f"fsr {fs.query_id!r} references {i!r}, "
                                    "not in corpus")
            q = self._by_query[fs.query_id]
            leaked = fs.all_ids & (set(q.positives) | set(q.hard_negatives))
            if leaked:
                raise OverlapViolation(
                    f"fsr {fs.query_id!r} ids also in the query's test sets: "
                    f"{sorted(leaked)[:5]}")
        self.stats = self._compute_stats(corpus)
        return self

    def _compute_stats(self, corpus: EmbeddingCorpus) -> ManifestStats:
        n_q = len(self.queries)
        if n_q == 0:
            return ManifestStats(len(corpus), len(corpus) - len(self.fsr_ids()),
                                 0, 0.0, 0.0, 0.0)
        return ManifestStats(
            image_count=len(corpus),
            test_image_count=len(corpus) - len(self.fsr_ids()),
            query_count=n_q,
            mean_test_positives=sum(len(q.positives) for q in self.queries) / n_q,
            mean_test_hard_negatives=sum(len(q.hard_negatives)
                                         for q in self.queries) / n_q,
            mean_query_tokens=sum(len(q.text.split()) for q in self.queries) / n_q,
        )


# --- JSON manifest IO --------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing key {key!r}")
    return obj[key]


def load_manifest(path, corpus: EmbeddingCorpus) -> BenchmarkManifest:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: top level must be an object")
    queries = []
    for i, q in enumerate(_require(raw, "queries", str(path))):
        where = f"{path}: queries[{i}]"
        queries.append(QueryEntry(
            query_id=str(_require(q, "id", where)),
            text=str(_require(q, "text", where)),
            sub_dataset=str(_require(q, "sub_dataset", where)),
            positives=tuple(_require(q, "positives", where)),
            hard_negatives=tuple(_require(q, "hard_negatives", where)),
        ))
    fsr = []
    for i, fs in enumerate(raw.get("fsr", [])):
        where = f"{path}: fsr[{i}]"
        fsr.append(FewShotReferenceSet(
            query_id=str(_require(fs, "query_id", where)),
            positives=tuple(_require(fs, "positives", where)),
            hn_near=tuple(_require(fs, "hn_near", where)),
            hn_far=tuple(_require(fs, "hn_far", where)),
            easy_negatives=tuple(_require(fs, "easy_negatives", where)),
        ))
    manifest = BenchmarkManifest(
        corpus_path=str(raw.get("corpus", "")),
        queries=queries,
        fsr=fsr,
        image_paths={str(k): str(v) for k, v in raw.get("image_paths", {}).items()},
    )
    return manifest.validate_against(corpus)


def save_manifest(manifest: BenchmarkManifest, path) -> None:
    doc = {
        "corpus": manifest.corpus_path,
        "queries": [{
            "id": q.query_id,
            "text": q.text,
            "sub_dataset": q.sub_dataset,
            "positives": list(q.positives),
            "hard_negatives": list(q.hard_negatives),
        } for q in manifest.queries],
        "fsr": [{
            "query_id": fs.query_id,
            "positives": list(fs.positives),
            "hn_near": list(fs.hn_near),
            "hn_far": list(fs.hn_far),
            "easy_negatives": list(fs.easy_negatives),
        } for fs in manifest.fsr],
    }
    if manifest.image_paths:
        doc["image_paths"] = dict(sorted(manifest.image_paths.items()))
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# --- smart split ---------------------------------------------------------------

def _prioritized_sample(pool, allocated: set[str], count: int,
                        rng: np.random.Generator) -> list[str]:
    """Take ids already allocated to earlier FSRs first, then sample the rest."""
    prior = sorted(i for i in pool if i in allocated)
    chosen = prior[:count]
    missing = count - len(chosen)
    if missing > 0:
        rest = sorted(i for i in pool if i not in allocated)
        picks = rng.choice(len(rest), size=missing, replace=False)
        chosen += [rest[j] for j in picks]
    return chosen


def _centroid(corpus: EmbeddingCorpus, ids) -> np.ndarray:
    vectors = np.stack([corpus.vector(i) for i in ids]).astype(np.float64)
    return normalize(vectors.mean(axis=0))


def _nearest_by_centroid(corpus: EmbeddingCorpus, centroid: np.ndarray,
                         candidates) -> list[str]:
    """Candidates ordered by descending cosine to the centroid, ids on ties."""
    scored = [(-float(corpus.vector(i).astype(np.float64) @ centroid), i)
              for i in candidates]
    scored.sort()
    return [i for _, i in scored]


def smart_split(gtqr: list[QueryEntry], corpus: EmbeddingCorpus,
                seed: int) -> tuple[BenchmarkManifest, list[FewShotReferenceSet]]:
    """Split full ground-truth result sets into test manifest plus FSR sets."""
    rng = np.random.default_rng(seed)
    need_pos = FSR_POSITIVE_COUNT + 1
    need_hn = FSR_NEAR_COUNT + FSR_FAR_COUNT + 1
    labeled: set[str] = set()
    for q in gtqr:
        labeled |= set(q.positives) | set(q.hard_negatives)
    easy_pool = sorted(set(corpus.ids) - labeled)

    allocated: set[str] = set()
    test_queries: list[QueryEntry] = []
    fsr_sets: list[FewShotReferenceSet] = []
    for q in gtqr:
        if len(q.positives) < need_pos:
            raise InsufficientExamples(
                f"query {q.query_id!r}: {len(q.positives)} positives, "
                f"needs >= {need_pos}")
        if len(q.hard_negatives) < need_hn:
            raise InsufficientExamples(
                f"query {q.query_id!r}: {len(q.hard_negatives)} hard negatives, "
                f"needs >= {need_hn}")
        fsr_pos = _prioritized_sample(q.positives, allocated,
                                      FSR_POSITIVE_COUNT, rng)
        centroid = _centroid(corpus, fsr_pos)
        near = _nearest_by_centroid(corpus, centroid,
                                    q.hard_negatives)[:FSR_NEAR_COUNT]
        far_pool = [i for i in q.hard_negatives if i not in set(near)]
        far = _prioritized_sample(far_pool, allocated, FSR_FAR_COUNT, rng)
        take = min(EASY_NEGATIVE_COUNT, len(easy_pool))
        picks = rng.choice(len(easy_pool), size=take, replace=False)
        easy = [easy_pool[j] for j in picks]
        fsr_sets.append(FewShotReferenceSet(
            query_id=q.query_id, positives=tuple(fsr_pos), hn_near=tuple(near),
            hn_far=tuple(far), easy_negatives=tuple(easy)))
        allocated.update(fsr_pos)
        allocated.update(near)
        allocated.update(far)
        withheld = set(fsr_pos) | set(near) | set(far)
        test_queries.append(QueryEntry(
            query_id=q.query_id, text=q.text, sub_dataset=q.sub_dataset,
            positives=tuple(i for i in q.positives if i not in withheld),
            hard_negatives=tuple(i for i in q.hard_negatives
                                 if i not in withheld)))
    manifest = BenchmarkManifest(corpus_path="", queries=test_queries,
                                 fsr=fsr_sets).validate_against(corpus)
    return manifest, fsr_sets


# --- reporting and review export ------------------------------------------------

def report_stats(manifest: BenchmarkManifest) -> ManifestStats:
    if manifest.stats is None:
        raise SchemaError("manifest not validated against a corpus")
    return manifest.stats


def format_stats(stats: ManifestStats) -> str:
    rows = [
        ("images", f"{stats.image_count}"),
        ("test images", f"{stats.test_image_count}"),
        ("queries", f"{stats.query_count}"),
        ("mean test positives / query", f"{stats.mean_test_positives:.2f}"),
        ("mean test hard negatives / query", f"{stats.mean_test_hard_negatives:.2f}"),
        ("mean query tokens", f"{stats.mean_query_tokens:.2f}"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def export_review_folders(manifest: BenchmarkManifest, corpus: EmbeddingCorpus,
                          out_dir, copy_images: bool = False) -> Path:
    """Lay out per-query true/false review folders with id listings.

    False candidates are the non-positives nearest the positive centroid,
    three per positive. Image files are only copied when asked; that
    requires a path for every listed id in manifest.image_paths.
    """
    out = Path(out_dir)
    for q in manifest.queries:
        true_ids = list(q.positives)
        if true_ids:
            centroid = _centroid(corpus, true_ids)
            candidates = [i for i in corpus.ids if i not in set(true_ids)]
            false_ids = _nearest_by_centroid(corpus, centroid, candidates)
            false_ids = false_ids[: REVIEW_FALSE_RATIO * len(true_ids)]
        else:
            false_ids = []
        for folder, ids in (("true", true_ids), ("false", false_ids)):
            target = out / q.query_id / folder
            target.mkdir(parents=True, exist_ok=True)
            (target / "manifest.txt").write_text(
                "".join(f"{i}\n" for i in ids), encoding="utf-8")
            if copy_images:
                for i in ids:
                    src = manifest.image_paths.get(i)
                    if src is None:
                        raise MissingImagePath(f"no image path for id {i!r}")
                    shutil.copy(src, target / Path(src).name)
    return out
