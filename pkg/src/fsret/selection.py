"""Inference-time reference selection over a per-query validation pool.

Stage 1 scores every candidate reference alone: compose the query with just
that reference and measure AP against the query's own few-shot validation
items. Stage 2 runs greedy forward selection over the top individually
scored candidates, adding references only while validation AP strictly
improves. All scores are validation scores; test labels never enter here,
and a validation optimum carries no test-set guarantee.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .embeddings import EmbeddingCorpus
from .errors import EmptyPool, UnknownId
from .fusion import CtrModel, encode_query_ctr
from .indexing import build_exact, search
from .metrics import DEFAULT_K, average_precision_at_k

DEFAULT_MAX_REFS = 4
DEFAULT_CANDIDATE_M = 5


@dataclass(frozen=True)
class SelectionResult:
    query_id: str
    chosen: tuple[str, ...]
    stage1_scores: dict[str, float]
    combination_score: float
    path: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.chosen:
            raise ValueError("a selection must contain at least one reference")
        unknown = [c for c in self.chosen if c not in self.stage1_scores]
        if unknown:
            raise ValueError(f"chosen ids missing stage-1 scores: {unknown}")
        if not self.path or self.path[-1][1] != self.combination_score:
            raise ValueError("path must end at the combination score")
        # greedy only ever accepts improvements, so the final score cannot
        # fall below the seed singleton's
        if self.combination_score + 1e-12 < self.path[0][1]:
            raise ValueError("combination score below the seed reference's AP")


class _ValidationScorer:
    """AP of a composed query against one query's validation items."""

    def __init__(self, validation_corpus: EmbeddingCorpus,
                 positive_ids, k: int):
        self.positives = set(positive_ids)
        missing = [p for p in self.positives
                   if p not in validation_corpus.id_index]
        if missing:
            raise UnknownId(
                f"validation positives missing from corpus: {sorted(missing)}")
        self.index = build_exact(validation_corpus)
        self.size = len(validation_corpus.records)
        self.k = k

    def ap_of(self, h: np.ndarray) -> float:
        ranking = [hit_id for hit_id, _ in search(self.index, h, self.size)]
        return average_precision_at_k(ranking, self.positives, self.k)


def score_individual(query_text_embedding, pool: dict[str, np.ndarray],
                     model: CtrModel, validation_corpus: EmbeddingCorpus,
                     positive_ids, k: int = DEFAULT_K) -> dict[str, float]:
    """Validation AP for each candidate reference used alone."""
    if not pool:
        raise EmptyPool("no candidate references to score")
    scorer = _ValidationScorer(validation_corpus, positive_ids, k)
    text = np.asarray(query_text_embedding, dtype=np.float64)
    scores = {}
    for reference_id in sorted(pool):
        h = encode_query_ctr(model, text, [pool[reference_id]])
        scores[reference_id] = scorer.ap_of(h)
    return scores


def _subset_ap(reference_ids, pool, text, model,
               scorer: _ValidationScorer) -> float:
    refs = [pool[r] for r in reference_ids]
    return scorer.ap_of(encode_query_ctr(model, text, refs))


def select_combination(stage1_scores: dict[str, float], query_text_embedding,
                       pool: dict[str, np.ndarray], model: CtrModel,
                       validation_corpus: EmbeddingCorpus, positive_ids,
                       query_id: str = "", max_refs: int = DEFAULT_MAX_REFS,
                       candidate_m: int = DEFAULT_CANDIDATE_M,
                       exhaustive: bool = False,
                       k: int = DEFAULT_K) -> SelectionResult:
    """Combine top stage-1 candidates while validation AP keeps improving.

    Ties on AP break toward the ascending reference id. The exhaustive
    flag replaces greedy search with full subset enumeration over the same
    top-m candidates (sizes 1..max_refs); ties there prefer the smaller
    set, then ascending ids.
    """
    if not stage1_scores:
        raise EmptyPool("stage-1 scores are empty")
    missing = [r for r in stage1_scores if r not in pool]
    if missing:
        raise UnknownId(f"scored ids missing from pool: {sorted(missing)}")
    if max_refs < 1:
        raise ValueError("max_refs must be >= 1")
    if candidate_m < 1:
        raise ValueError("candidate_m must be >= 1")

    scorer = _ValidationScorer(validation_corpus, positive_ids, k)
    text = np.asarray(query_text_embedding, dtype=np.float64)
    top = sorted(stage1_scores, key=lambda r: (-stage1_scores[r], r))
    top = top[:candidate_m]

    if exhaustive:
        best = None
        for size in range(1, min(max_refs, len(top)) + 1):
            for subset in combinations(sorted(top), size):
                ap = _subset_ap(subset, pool, text, model, scorer)
                key = (-ap, len(subset), subset)
                if best is None or key < best[0]:
                    best = (key, subset, ap)
        _, subset, ap = best
        path = tuple((r, _subset_ap(subset[:i + 1], pool, text, model, scorer))
                     for i, r in enumerate(subset))
        return SelectionResult(query_id=query_id, chosen=subset,
                               stage1_scores=dict(stage1_scores),
                               combination_score=ap,
                               path=path[:-1] + ((subset[-1], ap),))

    seed = top[0]
    chosen = [seed]
    current = _subset_ap(chosen, pool, text, model, scorer)
    path = [(seed, current)]
    remaining = [r for r in top if r != seed]
    while remaining and len(chosen) < max_refs:
        best_candidate = None
        best_ap = None
        for candidate in sorted(remaining):
            ap = _subset_ap(chosen + [candidate], pool, text, model, scorer)
            if best_ap is None or ap > best_ap:
                best_candidate, best_ap = candidate, ap
        if best_ap <= current:
            break
        chosen.append(best_candidate)
        remaining.remove(best_candidate)
        current = best_ap
        path.append((best_candidate, current))
    return SelectionResult(query_id=query_id, chosen=tuple(chosen),
                           stage1_scores=dict(stage1_scores),
                           combination_score=current, path=tuple(path))


def selection_report(result: SelectionResult) -> dict:
    return {
        "query_id": result.query_id,
        "stage1": {r: result.stage1_scores[r]
                   for r in sorted(result.stage1_scores)},
        "greedy_path": [{"reference_id": r, "validation_ap": ap}
                        for r, ap in result.path],
        "chosen": list(result.chosen),
        "combination_ap": result.combination_score,
    }


def save_selection_reports(results, path) -> None:
    payload = [selection_report(r) for r in results]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
