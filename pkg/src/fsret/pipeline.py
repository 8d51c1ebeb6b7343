"""End-to-end retrieval runners: zero-shot lookup ranking, prompt-refined
ranking, and fusion ranking with stage-1 reference selection.

All runners rank only the test corpus (every FSR id removed) so that
evaluation never sees a withheld exemplar. Query text embeddings come from
lookup in a text corpus whose record ids are the query texts; nothing here
encodes text or images.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .benchmark import BenchmarkManifest, FewShotReferenceSet
from .embeddings import EmbeddingCorpus
from .errors import InsufficientExamples, NoEmbedding
from .fusion import (
    CtrModel,
    CtrTrainConfig,
    TripletDataset,
    encode_query_ctr,
    train_ctr,
)
from .indexing import ExactCosineIndex, build_exact, search
from .metrics import DEFAULT_K, RankedRun
from .prompt_tuning import (
    FewShotBatch,
    FewShotItem,
    TrainConfig,
    ZeroShotAnchor,
    refine_query,
    train_prompt,
)
from .selection import (
    DEFAULT_CANDIDATE_M,
    DEFAULT_MAX_REFS,
    SelectionResult,
    score_individual,
    select_combination,
)

DEFAULT_EASY_COUNT = 16


def anchor_for(query_text: str, text_corpus: EmbeddingCorpus) -> np.ndarray:
    """Zero-shot anchor by text lookup; record ids are the query texts."""
    try:
        return text_corpus.vector(query_text).astype(np.float64)
    except KeyError:
        raise NoEmbedding(f"no text embedding for {query_text!r}") from None


def evaluation_corpus(manifest: BenchmarkManifest,
                      corpus: EmbeddingCorpus) -> EmbeddingCorpus:
    return corpus.subset(manifest.test_ids(corpus))


def _run(query_id: str, index: ExactCosineIndex, h, k: int) -> RankedRun:
    hits = search(index, h, k)
    return RankedRun(query_id=query_id,
                     ranking=tuple(hit_id for hit_id, _ in hits),
                     scores=tuple(score for _, score in hits))


def run_zero_shot(manifest: BenchmarkManifest, image_corpus: EmbeddingCorpus,
                  text_corpus: EmbeddingCorpus,
                  k: int = DEFAULT_K) -> list[RankedRun]:
    index = build_exact(evaluation_corpus(manifest, image_corpus))
    return [_run(q.query_id, index, anchor_for(q.text, text_corpus), k)
            for q in manifest.queries]


def feedback_batch(fsr: FewShotReferenceSet, corpus: EmbeddingCorpus,
                   shots: int = 16,
                   easy_count: int = DEFAULT_EASY_COUNT) -> FewShotBatch:
    """Few-shot training batch: the first `shots` FSR positives, an equal
    count of hard negatives (near before far), plus easy-negative anchors."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    positives = fsr.positives[:shots]
    negatives = (fsr.hn_near + fsr.hn_far)[:shots]
    easy = fsr.easy_negatives[:easy_count]
    if not positives or not negatives:
        raise InsufficientExamples(
            f"fsr {fsr.query_id!r} lacks positives or hard negatives")
    items = [FewShotItem(corpus.vector(i), 1, "HP") for i in positives]
    items += [FewShotItem(corpus.vector(i), 0, "HN") for i in negatives]
    items += [FewShotItem(corpus.vector(i), 0, "EN") for i in easy]
    return FewShotBatch(items)


def run_prompt_refined(manifest: BenchmarkManifest,
                       image_corpus: EmbeddingCorpus,
                       text_corpus: EmbeddingCorpus, shots: int = 16,
                       cfg: TrainConfig | None = None, k: int = DEFAULT_K,
                       easy_count: int = DEFAULT_EASY_COUNT
                       ) -> list[RankedRun]:
    """Per-query prompt tuning on FSR feedback, then test-corpus ranking.

    Each query trains with its own seed offset so results are reproducible
    while queries stay decorrelated.
    """
    base = cfg if cfg is not None else TrainConfig()
    index = build_exact(evaluation_corpus(manifest, image_corpus))
    runs = []
    for ordinal, query in enumerate(manifest.queries):
        fsr = manifest.fsr_for(query.query_id)
        if fsr is None:
            raise InsufficientExamples(
                f"query {query.query_id!r} has no FSR set")
        anchor = anchor_for(query.text, text_corpus)
        batch = feedback_batch(fsr, image_corpus, shots=shots,
                               easy_count=easy_count)
        tokens = anchor.reshape(1, -1)
        trained = train_prompt(tokens, batch, ZeroShotAnchor(anchor),
                               replace(base, seed=base.seed + ordinal))
        refined = refine_query(trained.state, tokens)
        runs.append(_run(query.query_id, index, refined, k))
    return runs


def fsr_alignment_dataset(manifest: BenchmarkManifest,
                          image_corpus: EmbeddingCorpus,
                          text_corpus: EmbeddingCorpus,
                          refs_per_query: int = 4,
                          targets_per_ref: int = 8) -> TripletDataset:
    """Self-supervised fusion triplets from the FSR sets: compose each
    query's text with one FSR positive and pull toward a different one."""
    texts, refs, targets = [], [], []
    for query in manifest.queries:
        fsr = manifest.fsr_for(query.query_id)
        if fsr is None or len(fsr.positives) < 2:
            continue
        anchor = anchor_for(query.text, text_corpus)
        ref_ids = fsr.positives[:refs_per_query]
        target_ids = fsr.positives[refs_per_query:
                                   refs_per_query + targets_per_ref]
        if not target_ids:
            # tiny FSR: split what there is in half
            half = max(1, len(fsr.positives) // 2)
            ref_ids = fsr.positives[:half]
            target_ids = fsr.positives[half:]
        for ref_id in ref_ids:
            ref_vec = image_corpus.vector(ref_id).astype(np.float64)
            for target_id in target_ids:
                texts.append(anchor)
                refs.append(ref_vec)
                targets.append(target_id)
    if not targets:
        raise InsufficientExamples("no FSR pairs available for alignment")
    return TripletDataset(np.stack(texts), np.stack(refs), targets)


def train_benchmark_ctr(manifest: BenchmarkManifest,
                        image_corpus: EmbeddingCorpus,
                        text_corpus: EmbeddingCorpus,
                        cfg: CtrTrainConfig | None = None) -> CtrModel:
    dataset = fsr_alignment_dataset(manifest, image_corpus, text_corpus)
    return train_ctr(dataset, image_corpus,
                     cfg if cfg is not None else CtrTrainConfig())


def select_references_for_benchmark(manifest: BenchmarkManifest,
                                    image_corpus: EmbeddingCorpus,
                                    text_corpus: EmbeddingCorpus,
                                    model: CtrModel,
                                    max_refs: int = DEFAULT_MAX_REFS,
                                    candidate_m: int = DEFAULT_CANDIDATE_M,
                                    exhaustive: bool = False,
                                    k: int = DEFAULT_K
                                    ) -> list[SelectionResult]:
    """Two-stage reference selection per query over its FSR positives,
    validated on the FSR pool alone (test labels never enter)."""
    results = []
    for query in manifest.queries:
        fsr = manifest.fsr_for(query.query_id)
        if fsr is None or not fsr.positives:
            raise InsufficientExamples(
                f"query {query.query_id!r} has no FSR positives")
        anchor = anchor_for(query.text, text_corpus)
        pool = {i: image_corpus.vector(i).astype(np.float64)
                for i in fsr.positives}
        validation = image_corpus.subset(sorted(fsr.all_ids))
        scores = score_individual(anchor, pool, model, validation,
                                  set(fsr.positives), k=k)
        results.append(select_combination(
            scores, anchor, pool, model, validation, set(fsr.positives),
            query_id=query.query_id, max_refs=max_refs,
            candidate_m=candidate_m, exhaustive=exhaustive, k=k))
    return results


def run_ctr_refined(manifest: BenchmarkManifest,
                    image_corpus: EmbeddingCorpus,
                    text_corpus: EmbeddingCorpus, model: CtrModel,
                    k: int = DEFAULT_K, selection_k: int = DEFAULT_K
                    ) -> tuple[list[RankedRun], dict[str, str]]:
    """Stage-1 single-reference selection per query, then test ranking."""
    index = build_exact(evaluation_corpus(manifest, image_corpus))
    runs = []
    chosen: dict[str, str] = {}
    for query in manifest.queries:
        fsr = manifest.fsr_for(query.query_id)
        if fsr is None or not fsr.positives:
            raise InsufficientExamples(
                f"query {query.query_id!r} has no FSR positives")
        anchor = anchor_for(query.text, text_corpus)
        pool = {i: image_corpus.vector(i).astype(np.float64)
                for i in fsr.positives}
        validation = image_corpus.subset(sorted(fsr.all_ids))
        scores = score_individual(anchor, pool, model, validation,
                                  set(fsr.positives), k=selection_k)
        best = min(scores, key=lambda r: (-scores[r], r))
        chosen[query.query_id] = best
        h = encode_query_ctr(model, anchor, [pool[best]])
        runs.append(_run(query.query_id, index, h, k))
    return runs, chosen
