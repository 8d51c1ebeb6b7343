"""Exact and approximate top-k cosine retrieval over an embedding corpus.

The approximate index is a spherical k-means inverted file: each record is
stored in the posting lists of its ``assign_count`` nearest centroids, and a
search scans only the ``probe_count`` closest lists. Replicated assignment
trades memory for recall at a fixed probe budget, which unstructured corpora
need. Full probing degenerates to exact search over the same tie-breaking
rule, so both paths are testable against one oracle.

Ties at equal similarity break by ascending id, which keeps rankings
deterministic and dataset-independent. Indices are immutable after build;
rebuild instead of inserting.
"""

from __future__ import annotations

import struct

import numpy as np
from sklearn.base import BaseEstimator

from .embeddings import EmbeddingCorpus
from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyCorpus,
    InvalidClusterCount,
    SchemaError,
    TruncatedFile,
    VersionUnsupported,
)

FSIX_MAGIC = b"FSIX"
FSIX_VERSION = 1
KIND_EXACT = 0
KIND_CLUSTERED = 1

KMEANS_MAX_ITER = 25
DEFAULT_ASSIGN_COUNT = 3


def _rank_candidates(sims: np.ndarray, ordinals: np.ndarray,
                     id_rank: np.ndarray, k: int) -> np.ndarray:
    """Order candidate ordinals by descending similarity, id-ascending ties."""
    order = np.lexsort((id_rank[ordinals], -sims))
    return ordinals[order[:k]]


class ExactCosineIndex(BaseEstimator):
    """Brute-force exact top-k cosine search over a normalized corpus."""

    def fit(self, corpus: EmbeddingCorpus) -> "ExactCosineIndex":
        if len(corpus) == 0:
            raise EmptyCorpus("cannot index an empty corpus")
        self.corpus_ = corpus
        self.ids_ = corpus.ids
        # precomputed rank of each ordinal's id in sorted-id order, for tie-breaks
        self.id_rank_ = np.argsort(np.argsort(np.asarray(self.ids_, dtype=object)))
        return self

    def search(self, q, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        qa = np.asarray(q, dtype=np.float32)
        if qa.shape != (self.corpus_.dimension,):
            raise DimensionMismatch(
                f"query {qa.shape} vs corpus dimension {self.corpus_.dimension}")
        sims = self.corpus_.matrix.astype(np.float64) @ qa.astype(np.float64)
        np.clip(sims, -1.0, 1.0, out=sims)
        ordinals = np.arange(len(self.ids_))
        top = _rank_candidates(sims, ordinals, self.id_rank_, k)
        return [(self.ids_[i], float(sims[i])) for i in top]


class SphericalKMeans(BaseEstimator):
    """K-means on the unit sphere: cosine assignment, renormalized centroids.

    Seeding is k-means++ style on cosine distance, driven entirely by
    ``seed``, so a fixed seed reproduces the exact same clustering. Empty
    clusters are repaired by stealing the farthest point from the largest
    cluster. Iteration count is capped at ``max_iter``.
    """

    def __init__(self, n_clusters: int = 8, seed: int = 0, max_iter: int = KMEANS_MAX_ITER):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X) -> "SphericalKMeans":
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        if n == 0:
            raise EmptyCorpus("cannot cluster zero points")
        if not 1 <= self.n_clusters <= n:
            raise InvalidClusterCount(f"n_clusters={self.n_clusters} with {n} points")
        rng = np.random.default_rng(self.seed)
        centers = self._plusplus_init(X, rng)
        labels = None
        for _ in range(self.max_iter):
            sims = X @ centers.T
            new_labels = self._repair_empty(sims, np.argmax(sims, axis=1))
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for c in range(self.n_clusters):
                mean = X[labels == c].mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 1e-12:
                    centers[c] = mean / norm
        self.cluster_centers_ = centers
        self.labels_ = labels
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.argmax(X @ self.cluster_centers_.T, axis=1)

    def _plusplus_init(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = X.shape[0]
        centers = np.empty((self.n_clusters, X.shape[1]), dtype=np.float64)
        first = int(rng.integers(n))
        centers[0] = X[first]
        best_sim = X @ centers[0]
        for c in range(1, self.n_clusters):
            dist = np.maximum(0.0, 1.0 - best_sim)
            weights = dist * dist
            total = weights.sum()
            if total <= 1e-18:
                idx = int(rng.integers(n))
            else:
                idx = int(rng.choice(n, p=weights / total))
            centers[c] = X[idx]
            best_sim = np.maximum(best_sim, X @ centers[c])
        return centers

    def _repair_empty(self, sims: np.ndarray, labels: np.ndarray) -> np.ndarray:
        labels = labels.copy()
        counts = np.bincount(labels, minlength=self.n_clusters)
        for c in np.flatnonzero(counts == 0):
            donor = int(np.argmax(counts))
            members = np.flatnonzero(labels == donor)
            # farthest = lowest cosine to its current centroid
            victim = members[int(np.argmin(sims[members, donor]))]
            labels[victim] = c
            counts[donor] -= 1
            counts[c] += 1
        return labels


class ClusteredCosineIndex(BaseEstimator):
    """Inverted-file approximate index over spherical k-means clusters.

    Each record lands in the posting lists of its ``assign_count`` nearest
    centroids plus its (possibly repair-adjusted) k-means cluster, so no
    posting list is ever empty."""

    def __init__(self, n_clusters: int = 16, probe_count: int | None = None,
                 seed: int = 0, assign_count: int = DEFAULT_ASSIGN_COUNT):
        self.n_clusters = n_clusters
        self.probe_count = probe_count
        self.seed = seed
        self.assign_count = assign_count

    def fit(self, corpus: EmbeddingCorpus) -> "ClusteredCosineIndex":
        if len(corpus) == 0:
            raise EmptyCorpus("cannot index an empty corpus")
        if not 1 <= self.n_clusters <= len(corpus):
            raise InvalidClusterCount(
                f"n_clusters={self.n_clusters} with {len(corpus)} records")
        if self.assign_count < 1:
            raise InvalidClusterCount(
                f"assign_count={self.assign_count} must be >= 1")
        self.corpus_ = corpus
        self.ids_ = corpus.ids
        self.id_rank_ = np.argsort(np.argsort(np.asarray(self.ids_, dtype=object)))
        km = SphericalKMeans(n_clusters=self.n_clusters, seed=self.seed)
        matrix = corpus.matrix.astype(np.float64)
        km.fit(matrix)
        self.centroids_ = km.cluster_centers_.astype(np.float32)
        self.assign_count_ = min(self.assign_count, self.n_clusters)
        near = np.argsort(-(matrix @ km.cluster_centers_.T), axis=1,
                          kind="stable")[:, : self.assign_count_]
        members: list[list[int]] = [[] for _ in range(self.n_clusters)]
        for ordinal, (label, row) in enumerate(zip(km.labels_, near)):
            for c in sorted({int(label), *map(int, row)}):
                members[c].append(ordinal)
        self.postings_ = [np.asarray(m, dtype=np.uint32) for m in members]
        self.probe_count_ = self._effective_probe_count()
        return self

    def _effective_probe_count(self) -> int:
        if self.probe_count is None:
            return max(1, self.n_clusters // 4)
        if not 1 <= self.probe_count <= self.n_clusters:
            raise InvalidClusterCount(
                f"probe_count={self.probe_count} outside [1, {self.n_clusters}]")
        return self.probe_count

    def search(self, q, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        qa = np.asarray(q, dtype=np.float32)
        if qa.shape != (self.corpus_.dimension,):
            raise DimensionMismatch(
                f"query {qa.shape} vs corpus dimension {self.corpus_.dimension}")
        q64 = qa.astype(np.float64)
        centroid_sims = self.centroids_.astype(np.float64) @ q64
        probe = np.argsort(-centroid_sims, kind="stable")[: self.probe_count_]
        ordinals = np.concatenate([self.postings_[c] for c in probe]) if len(probe) else \
            np.zeros(0, dtype=np.uint32)
        if ordinals.size == 0:
            return []
        # replicated assignment puts one record in several probed lists
        ordinals = np.unique(ordinals.astype(np.int64))
        sims = self.corpus_.matrix[ordinals].astype(np.float64) @ q64
        np.clip(sims, -1.0, 1.0, out=sims)
        top = _rank_candidates(sims, np.arange(len(ordinals)), self.id_rank_[ordinals], k)
        return [(self.ids_[int(ordinals[i])], float(sims[i])) for i in top]


# --- module-level operation surface -----------------------------------------

def build_exact(corpus: EmbeddingCorpus) -> ExactCosineIndex:
    return ExactCosineIndex().fit(corpus)


def build_clustered(corpus: EmbeddingCorpus, n_clusters: int, seed: int,
                    probe_count: int | None = None,
                    assign_count: int = DEFAULT_ASSIGN_COUNT) -> ClusteredCosineIndex:
    return ClusteredCosineIndex(n_clusters=n_clusters, probe_count=probe_count,
                                seed=seed, assign_count=assign_count).fit(corpus)


def search(index, q, k: int) -> list[tuple[str, float]]:
    return index.search(q, k)


# --- FSIX persistence ---------------------------------------------------------
#
# Little-endian: magic "FSIX" | u32 version=1 | u8 kind. Exact payload:
# u32 dimension | u64 record count. Clustered payload adds u32 n_clusters |
# u32 probe_count | centroids (n_clusters * d float32) | per cluster
# u64 length + length * u32 ordinals. The corpus itself lives in its FSEM
# file; loading an index re-binds it to the corpus and validates shape.

_FSIX_HEADER = struct.Struct("<4sIB")


def save_index(index, path) -> None:
    with open(path, "wb") as f:
        if isinstance(index, ExactCosineIndex):
            f.write(_FSIX_HEADER.pack(FSIX_MAGIC, FSIX_VERSION, KIND_EXACT))
            f.write(struct.pack("<IQ", index.corpus_.dimension, len(index.ids_)))
        elif isinstance(index, ClusteredCosineIndex):
            f.write(_FSIX_HEADER.pack(FSIX_MAGIC, FSIX_VERSION, KIND_CLUSTERED))
            f.write(struct.pack("<IQ", index.corpus_.dimension, len(index.ids_)))
            f.write(struct.pack("<II", index.n_clusters, index.probe_count_))
            f.write(index.centroids_.astype("<f4", copy=False).tobytes())
            for posting in index.postings_:
                f.write(struct.pack("<Q", len(posting)))
                f.write(posting.astype("<u4", copy=False).tobytes())
        else:
            raise SchemaError(f"cannot persist index of type {type(index).__name__}")


def _read_exact_bytes(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"file ended inside {what}")
    return data


def load_index(path, corpus: EmbeddingCorpus):
    """Load an FSIX file and bind it to the corpus it was built from."""
    with open(path, "rb") as f:
        head = _read_exact_bytes(f, _FSIX_HEADER.size, "header")
        magic, version, kind = _FSIX_HEADER.unpack(head)
        if magic != FSIX_MAGIC:
            raise BadMagic(f"expected magic {FSIX_MAGIC!r}, got {magic!r}")
        if version != FSIX_VERSION:
            raise VersionUnsupported(f"FSIX version {version}")
        dimension, count = struct.unpack("<IQ", _read_exact_bytes(f, 12, "shape"))
        if dimension != corpus.dimension or count != len(corpus):
            raise SchemaError(
                f"index built over {count} x {dimension}, corpus is "
                f"{len(corpus)} x {corpus.dimension}")
        if kind == KIND_EXACT:
            return build_exact(corpus)
        if kind != KIND_CLUSTERED:
            raise SchemaError(f"unknown index kind {kind}")
        n_clusters, probe_count = struct.unpack("<II", _read_exact_bytes(f, 8, "cluster header"))
        centroid_bytes = _read_exact_bytes(f, 4 * n_clusters * dimension, "centroids")
        centroids = np.frombuffer(centroid_bytes, dtype="<f4").reshape(n_clusters, dimension)
        postings = []
        for c in range(n_clusters):
            (length,) = struct.unpack("<Q", _read_exact_bytes(f, 8, f"posting {c} length"))
            data = _read_exact_bytes(f, 4 * length, f"posting {c}")
            postings.append(np.frombuffer(data, dtype="<u4").copy())
        index = ClusteredCosineIndex(n_clusters=n_clusters, probe_count=probe_count,
                                     seed=0)
        index.corpus_ = corpus
        index.ids_ = corpus.ids
        index.id_rank_ = np.argsort(np.argsort(np.asarray(index.ids_, dtype=object)))
        index.centroids_ = centroids.copy()
        index.postings_ = postings
        index.probe_count_ = probe_count
        return index
