"""Mining (query text, reference image, target image) triplets from
image-caption embedding pairs.

Each caption is a potential query whose own image is the retrieval target.
Candidate references are the target's most image-similar neighbours
(self excluded), re-ranked by caption-to-caption similarity; only candidates
whose best caption clears a strict threshold survive. One hub image may
serve as the reference for many targets.

Lower-threshold mining for hard negatives is deliberately absent: it is
too noisy to label reliably.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .embeddings import EmbeddingCorpus
from .errors import DimensionMismatch, DuplicateId, MissingEmbedding, SchemaError
from .validation import as_float_vector, is_unit

DEFAULT_TOP_N = 200
DEFAULT_CAPTION_THRESHOLD = 0.65
DEFAULT_PER_QUERY_CAP = 8

_TRIPLET_KEYS = ("query_text_id", "reference_id", "target_id",
                 "img_sim", "cap_sim")


@dataclass(frozen=True)
class CaptionedItem:
    """One caption of one image; multi-caption images contribute one item
    per caption."""

    image_id: str
    image_embedding: np.ndarray
    caption_id: str
    caption_embedding: np.ndarray

    def __post_init__(self):
        img = as_float_vector(self.image_embedding, dtype=np.float32)
        cap = as_float_vector(self.caption_embedding, dtype=np.float32)
        if not is_unit(img):
            raise SchemaError(
                f"image embedding for {self.image_id!r} is not unit length")
        if not is_unit(cap):
            raise SchemaError(
                f"caption embedding {self.caption_id!r} is not unit length")
        object.__setattr__(self, "image_embedding", img)
        object.__setattr__(self, "caption_embedding", cap)


@dataclass(frozen=True)
class MinedTriplet:
    query_text_id: str
    reference_id: str
    target_id: str
    img_sim: float
    cap_sim: float

    def __post_init__(self):
        if self.reference_id == self.target_id:
            raise SchemaError(
                f"reference and target are both {self.target_id!r}")
        if not (np.isfinite(self.img_sim) and np.isfinite(self.cap_sim)):
            raise SchemaError("non-finite similarity")


def captioned_items_from(image_corpus: EmbeddingCorpus,
                         caption_corpus: EmbeddingCorpus,
                         caption_to_image: dict[str, str]) -> list[CaptionedItem]:
    """Join an image corpus and a caption corpus through a caption->image map."""
    items = []
    for caption_id in sorted(caption_to_image):
        image_id = caption_to_image[caption_id]
        if caption_id not in caption_corpus:
            raise MissingEmbedding(f"no caption embedding for {caption_id!r}")
        if image_id not in image_corpus:
            raise MissingEmbedding(f"no image embedding for {image_id!r}")
        items.append(CaptionedItem(
            image_id=image_id,
            image_embedding=image_corpus.vector(image_id),
            caption_id=caption_id,
            caption_embedding=caption_corpus.vector(caption_id)))
    return items


def _image_table(items: list[CaptionedItem]):
    """Unique images in id order, with exact-equality consistency checks."""
    by_id: dict[str, np.ndarray] = {}
    captions: dict[str, list[CaptionedItem]] = {}
    seen_captions: set[str] = set()
    caption_dims = {item.caption_embedding.shape[0] for item in items}
    if len(caption_dims) > 1:
        raise DimensionMismatch(
            f"captions mix dimensions {sorted(caption_dims)}")
    image_dims = {item.image_embedding.shape[0] for item in items}
    if len(image_dims) > 1:
        raise DimensionMismatch(
            f"images mix dimensions {sorted(image_dims)}")
    for item in items:
        if item.caption_id in seen_captions:
            raise DuplicateId(item.caption_id)
        seen_captions.add(item.caption_id)
        previous = by_id.get(item.image_id)
        if previous is None:
            by_id[item.image_id] = item.image_embedding
        elif not np.array_equal(previous, item.image_embedding):
            raise SchemaError(
                f"image {item.image_id!r} appears with two embeddings")
        captions.setdefault(item.image_id, []).append(item)
    image_ids = sorted(by_id)
    matrix = np.stack([by_id[i] for i in image_ids]).astype(np.float64)
    ordinal = {image_id: i for i, image_id in enumerate(image_ids)}
    return image_ids, matrix, ordinal, captions


def mine_triplets(items: list[CaptionedItem], top_n: int = DEFAULT_TOP_N,
                  threshold: float = DEFAULT_CAPTION_THRESHOLD,
                  per_query_cap: int = DEFAULT_PER_QUERY_CAP,
                  sample_fraction: float = 1.0,
                  seed: int = 0) -> list[MinedTriplet]:
    """Triplets for every sampled query caption, in caption-id order.

    Per query: the top_n most image-similar images to the target (self
    excluded, ties by ascending id) are scored by the best cosine between
    the query caption and each candidate's captions; scores strictly above
    threshold survive, ranked by (descending caption score, ascending id),
    capped at per_query_cap.
    """
    if len(items) < 2:
        raise ValueError("mining needs at least two captioned items")
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if per_query_cap < 1:
        raise ValueError("per_query_cap must be >= 1")
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction must be in (0, 1]")

    image_ids, matrix, ordinal, captions = _image_table(items)
    id_rank = {image_id: i for i, image_id in enumerate(image_ids)}

    queries = sorted(items, key=lambda it: it.caption_id)
    if sample_fraction < 1.0:
        rng = np.random.default_rng(seed)
        count = int(round(sample_fraction * len(queries)))
        picked = rng.choice(len(queries), size=count, replace=False)
        queries = [queries[i] for i in sorted(picked)]

    ranks = np.arange(len(image_ids))
    triplets: list[MinedTriplet] = []
    for query in queries:
        target_ordinal = ordinal[query.image_id]
        sims = np.clip(matrix @ matrix[target_ordinal], -1.0, 1.0)
        order = np.lexsort((ranks, -sims))
        candidates = [o for o in order if o != target_ordinal][:top_n]

        scored = []
        query_caption = query.caption_embedding.astype(np.float64)
        for candidate in candidates:
            candidate_id = image_ids[candidate]
            best = max(
                float(np.clip(
                    query_caption @ item.caption_embedding.astype(np.float64),
                    -1.0, 1.0))
                for item in captions[candidate_id])
            if best > threshold:
                scored.append((-best, id_rank[candidate_id], candidate_id,
                               float(sims[candidate])))
        scored.sort()
        for neg_cap, _, candidate_id, img_sim in scored[:per_query_cap]:
            triplets.append(MinedTriplet(
                query_text_id=query.caption_id,
                reference_id=candidate_id,
                target_id=query.image_id,
                img_sim=img_sim,
                cap_sim=-neg_cap))
    return triplets


def export_triplets(triplets, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triplets:
            f.write(json.dumps(asdict(t)) + "\n")


def iter_triplets(path) -> Iterator[MinedTriplet]:
    """Stream triplets one line at a time; memory stays flat on large files."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {e.msg}") \
                    from None
            if not isinstance(row, dict):
                raise SchemaError(f"{path}:{lineno}: expected an object")
            missing = [k for k in _TRIPLET_KEYS if k not in row]
            if missing:
                raise SchemaError(
                    f"{path}:{lineno}: missing keys {missing}")
            try:
                yield MinedTriplet(
                    query_text_id=str(row["query_text_id"]),
                    reference_id=str(row["reference_id"]),
                    target_id=str(row["target_id"]),
                    img_sim=float(row["img_sim"]),
                    cap_sim=float(row["cap_sim"]))
            except (SchemaError, TypeError, ValueError) as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from None


def load_triplets(path) -> list[MinedTriplet]:
    return list(iter_triplets(path))
