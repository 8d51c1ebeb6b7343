"""Seeded synthetic retrieval benchmark with controllable geometry.

Every query owns a positive prototype direction. Hard negatives cluster
around a second prototype held at cosine 0.8 to the positive one, and the
query's text anchor is deliberately polluted toward that hard-negative
prototype, so zero-shot ranking is mediocre and refinement has headroom.
Background items are isotropic noise and serve as the easy-negative pool.

Everything downstream of the seed is deterministic, including the
smart split baked into the returned manifest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .benchmark import BenchmarkManifest, QueryEntry, save_manifest, smart_split
from .embeddings import EmbeddingCorpus, EmbeddingRecord, write_embeddings

DEFAULT_SEED = 7
DEFAULT_QUERY_COUNT = 30
DEFAULT_DIMENSION = 64
POSITIVES_PER_QUERY = 40
HARD_NEGATIVES_PER_QUERY = 60
BACKGROUND_COUNT = 1500
HN_PROTOTYPE_COSINE = 0.8

# cluster spread around each prototype; cos(member, prototype) ~ 0.95 at d=64
POSITIVE_NOISE = 0.045
HARD_NEGATIVE_NOISE = 0.045
# anchor = pollution mix; weights chosen so hard negatives overtake a fair
# share of positives under the raw anchor ranking
ANCHOR_POSITIVE_WEIGHT = 0.55
ANCHOR_HN_WEIGHT = 0.65
ANCHOR_NOISE = 0.06

IMAGE_FILE = "images.fsem"
TEXT_FILE = "texts.fsem"
MANIFEST_FILE = "manifest.json"


@dataclass
class SyntheticBenchmark:
    image_corpus: EmbeddingCorpus
    text_corpus: EmbeddingCorpus
    manifest: BenchmarkManifest


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _orthonormal_to(rng: np.random.Generator, u: np.ndarray) -> np.ndarray:
    v = rng.normal(size=u.shape[0])
    v -= (v @ u) * u
    return v / np.linalg.norm(v)


def _cluster(rng: np.random.Generator, center: np.ndarray, count: int,
             noise: float) -> np.ndarray:
    rows = center + noise * rng.normal(size=(count, center.shape[0]))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def query_text(ordinal: int) -> str:
    return f"a photo of a synthetic concept {ordinal:02d}"


def generate_benchmark(seed: int = DEFAULT_SEED,
                       query_count: int = DEFAULT_QUERY_COUNT,
                       dimension: int = DEFAULT_DIMENSION,
                       positives_per_query: int = POSITIVES_PER_QUERY,
                       hard_negatives_per_query: int = HARD_NEGATIVES_PER_QUERY,
                       background_count: int = BACKGROUND_COUNT
                       ) -> SyntheticBenchmark:
    if query_count < 1:
        raise ValueError("query_count must be >= 1")
    if dimension < 4:
        raise ValueError("dimension must be >= 4")
    rng = np.random.default_rng(seed)
    image_records: list[EmbeddingRecord] = []
    text_records: list[EmbeddingRecord] = []
    gtqr: list[QueryEntry] = []
    for qi in range(query_count):
        u = _unit(rng, dimension)
        v = _orthonormal_to(rng, u)
        hn_prototype = (HN_PROTOTYPE_COSINE * u
                        + np.sqrt(1.0 - HN_PROTOTYPE_COSINE ** 2) * v)

        positives = _cluster(rng, u, positives_per_query, POSITIVE_NOISE)
        negatives = _cluster(rng, hn_prototype, hard_negatives_per_query,
                             HARD_NEGATIVE_NOISE)
        positive_ids = [f"p{qi:02d}_{j:02d}" for j in range(positives_per_query)]
        negative_ids = [f"h{qi:02d}_{j:02d}"
                        for j in range(hard_negatives_per_query)]
        image_records += [EmbeddingRecord(id=i, vector=vec, modality="image")
                          for i, vec in zip(positive_ids, positives)]
        image_records += [EmbeddingRecord(id=i, vector=vec, modality="image")
                          for i, vec in zip(negative_ids, negatives)]

        anchor = (ANCHOR_POSITIVE_WEIGHT * u
                  + ANCHOR_HN_WEIGHT * hn_prototype
                  + ANCHOR_NOISE * rng.normal(size=dimension))
        anchor /= np.linalg.norm(anchor)
        text = query_text(qi)
        text_records.append(EmbeddingRecord(id=text, vector=anchor,
                                            modality="text"))
        gtqr.append(QueryEntry(query_id=f"q{qi:02d}", text=text,
                               sub_dataset="synthetic",
                               positives=tuple(positive_ids),
                               hard_negatives=tuple(negative_ids)))

    background = _cluster(rng, np.zeros(dimension), background_count, 1.0)
    image_records += [EmbeddingRecord(id=f"bg{j:04d}", vector=background[j],
                                      modality="image")
                      for j in range(background_count)]

    image_corpus = EmbeddingCorpus(image_records)
    text_corpus = EmbeddingCorpus(text_records)
    manifest, _ = smart_split(gtqr, image_corpus, seed)
    manifest.corpus_path = IMAGE_FILE
    manifest.validate_against(image_corpus)
    return SyntheticBenchmark(image_corpus=image_corpus,
                              text_corpus=text_corpus, manifest=manifest)


def save_benchmark(benchmark: SyntheticBenchmark, out_dir) -> dict[str, str]:
    """Write the corpus pair and manifest; byte-stable for a fixed benchmark."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "images": os.path.join(out_dir, IMAGE_FILE),
        "texts": os.path.join(out_dir, TEXT_FILE),
        "manifest": os.path.join(out_dir, MANIFEST_FILE),
    }
    write_embeddings(benchmark.image_corpus, paths["images"])
    write_embeddings(benchmark.text_corpus, paths["texts"])
    save_manifest(benchmark.manifest, paths["manifest"])
    return paths
