"""Composed text+reference queries aligned to a frozen image-embedding space.

A gated linear composer fuses one text embedding with the mean of zero or
more reference-image embeddings, then projects the fused vector into the
external corpus's embedding space:

    h = normalize(P @ (alpha * W_t @ text + (1 - alpha) * W_r @ mean(refs)))

With no references the text path is used alone, unscaled. Training pulls h
toward its target image under a temperature-scaled InfoNCE loss whose
negatives are the other rows of the batch; the external corpus itself is
never touched. The schedule has two stages: projections first with the
gate frozen, then the gate unfrozen.

All scores are handled in log space; exp(cos/tau) at tau = 0.02 is ~5e21,
which float64 holds, but sums of such terms are not trusted to rounding.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .embeddings import EmbeddingCorpus, cosine
from .errors import (
    BadMagic,
    DimensionMismatch,
    MissingEmbedding,
    NonFiniteLoss,
    SchemaError,
    TruncatedFile,
    UnknownTargetId,
    VersionUnsupported,
    ZeroVector,
)
from .optim import Adam

DEFAULT_TAU = 0.02
DEFAULT_BATCH_SIZE = 32

FCTR_MAGIC = b"FCTR"
FCTR_VERSION = 1


class DuplicateTargets(UserWarning):
    """A batch row's negative shared the positive's id and was excluded."""


@dataclass(frozen=True)
class ComposedQuery:
    text_embedding: np.ndarray
    reference_embeddings: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        text = np.asarray(self.text_embedding, dtype=np.float64)
        refs = tuple(np.asarray(r, dtype=np.float64)
                     for r in self.reference_embeddings)
        dims = {r.shape[0] for r in refs}
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed reference dimensions {sorted(dims)}")
        object.__setattr__(self, "text_embedding", text)
        object.__setattr__(self, "reference_embeddings", refs)


@dataclass
class CtrModel:
    w_text: np.ndarray      # (d_out, d_text)
    w_ref: np.ndarray       # (d_out, d_ref)
    output_proj: np.ndarray  # (d_ext, d_out)
    alpha: float = 0.5
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.w_text = np.asarray(self.w_text, dtype=np.float64)
        self.w_ref = np.asarray(self.w_ref, dtype=np.float64)
        self.output_proj = np.asarray(self.output_proj, dtype=np.float64)
        if self.w_text.shape[0] != self.w_ref.shape[0]:
            raise DimensionMismatch("w_text and w_ref output dimensions differ")
        if self.output_proj.shape[1] != self.w_text.shape[0]:
            raise DimensionMismatch("output_proj input dimension mismatch")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def dimensions(self) -> dict[str, int]:
        return {"d_text": self.w_text.shape[1], "d_ref": self.w_ref.shape[1],
                "d_out": self.w_text.shape[0], "d_ext": self.output_proj.shape[0]}


def identity_padded(rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols), dtype=np.float64)
    k = min(rows, cols)
    out[:k, :k] = np.eye(k)
    return out


def init_model(d_text: int, d_ref: int, d_out: int, d_ext: int,
               alpha: float = 0.5, tau: float = DEFAULT_TAU) -> CtrModel:
    """Identity-padded projections: compose starts as a plain interpolation."""
    return CtrModel(w_text=identity_padded(d_out, d_text),
                    w_ref=identity_padded(d_out, d_ref),
                    output_proj=identity_padded(d_ext, d_out),
                    alpha=alpha, tau=tau)


def compose(model: CtrModel, query: ComposedQuery) -> np.ndarray:
    text = query.text_embedding
    if text.shape[0] != model.w_text.shape[1]:
        raise DimensionMismatch(
            f"text dimension {text.shape[0]} vs model {model.w_text.shape[1]}")
    if query.reference_embeddings:
        ref_mean = np.stack(query.reference_embeddings).mean(axis=0)
        if ref_mean.shape[0] != model.w_ref.shape[1]:
            raise DimensionMismatch(
                f"reference dimension {ref_mean.shape[0]} vs model "
                f"{model.w_ref.shape[1]}")
        fused = (model.alpha * (model.w_text @ text)
                 + (1.0 - model.alpha) * (model.w_ref @ ref_mean))
    else:
        fused = model.w_text @ text
    out = model.output_proj @ fused
    # float64 normalization here: the training gradients assume it, and the
    # float32 storage path would cost ~1e-7 of norm accuracy
    norm = float(np.linalg.norm(out))
    if norm < 1e-12:
        raise ZeroVector("composed query has no direction")
    return out / norm


def encode_query_ctr(model: CtrModel, text_embedding,
                     reference_embeddings=()) -> np.ndarray:
    """Composed search embedding, directly usable against the external index."""
    return compose(model, ComposedQuery(
        text_embedding=np.asarray(text_embedding, dtype=np.float64),
        reference_embeddings=tuple(np.asarray(r, dtype=np.float64)
                                   for r in reference_embeddings)))


def log_matching_score(h, v, tau: float) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(cosine(np.asarray(h, dtype=np.float32),
                        np.asarray(v, dtype=np.float32))) / tau


def matching_score(h, v, tau: float) -> float:
    return float(np.exp(log_matching_score(h, v, tau)))


def _logsumexp(values: np.ndarray) -> float:
    m = float(values.max())
    return m + float(np.log(np.exp(values - m).sum()))


def infonce_row_losses(h_matrix, target_matrix, target_ids,
                       tau: float) -> np.ndarray:
    """Per-row InfoNCE with other rows' targets as negatives.

    Negatives sharing the row's target id are excluded (duplicate-target
    warning); a single-row batch therefore has loss exactly 0.
    """
    h = np.asarray(h_matrix, dtype=np.float64)
    targets = np.asarray(target_matrix, dtype=np.float64)
    ids = list(target_ids)
    scores = np.clip(h @ targets.T, -1.0, 1.0) / tau
    rows = h.shape[0]
    losses = np.zeros(rows)
    for i in range(rows):
        keep = [i]
        for j in range(rows):
            if j == i:
                continue
            if ids[j] == ids[i]:
                warnings.warn(
                    f"negative target {ids[j]!r} duplicates row {i}'s positive; "
                    "excluded", DuplicateTargets, stacklevel=2)
                continue
            keep.append(j)
        losses[i] = -scores[i, i] + _logsumexp(scores[i, keep])
    return losses


class TripletBatch:
    """Composed queries with their positive targets from the frozen corpus."""

    def __init__(self, queries: list[ComposedQuery], target_ids: list[str],
                 target_matrix):
        if len(queries) != len(target_ids):
            raise DimensionMismatch("one target id per query required")
        if len(queries) == 0:
            raise ValueError("empty batch")
        self.queries = list(queries)
        self.target_ids = list(target_ids)
        self.target_matrix = np.asarray(target_matrix, dtype=np.float64)
        if self.target_matrix.shape[0] != len(queries):
            raise DimensionMismatch("one target vector per query required")

    def __len__(self):
        return len(self.queries)


def infonce_loss(batch: TripletBatch, model: CtrModel) -> float:
    h = np.stack([compose(model, q) for q in batch.queries])
    losses = infonce_row_losses(h, batch.target_matrix, batch.target_ids,
                                model.tau)
    return float(losses.mean())


# --- gradients -------------------------------------------------------------------

def _flatten(model: CtrModel) -> np.ndarray:
    return np.concatenate([model.w_text.ravel(), model.w_ref.ravel(),
                           model.output_proj.ravel(), [model.alpha]])


def _unflatten(params: np.ndarray, dims: dict[str, int],
               tau: float) -> CtrModel:
    d_text, d_ref = dims["d_text"], dims["d_ref"]
    d_out, d_ext = dims["d_out"], dims["d_ext"]
    n_t = d_out * d_text
    n_r = d_out * d_ref
    n_p = d_ext * d_out
    return CtrModel(
        w_text=params[:n_t].reshape(d_out, d_text),
        w_ref=params[n_t:n_t + n_r].reshape(d_out, d_ref),
        output_proj=params[n_t + n_r:n_t + n_r + n_p].reshape(d_ext, d_out),
        alpha=float(np.clip(params[-1], 0.0, 1.0)),
        tau=tau)


def ctr_loss_and_gradients(model: CtrModel,
                           batch: TripletBatch) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over the batch and its analytic gradient, flattened as
    [w_text, w_ref, output_proj, alpha]."""
    B = len(batch)
    tau = model.tau
    targets = batch.target_matrix
    ids = batch.target_ids

    text_proj = []
    ref_proj = []
    ref_means = []
    fused = []
    for q in batch.queries:
        t = model.w_text @ q.text_embedding
        if q.reference_embeddings:
            r_mean = np.stack(q.reference_embeddings).mean(axis=0)
            r = model.w_ref @ r_mean
            z = model.alpha * t + (1.0 - model.alpha) * r
        else:
            r_mean = None
            r = None
            z = t
        text_proj.append(t)
        ref_proj.append(r)
        ref_means.append(r_mean)
        fused.append(z)

    outputs = [model.output_proj @ z for z in fused]
    norms = [float(np.linalg.norm(o)) for o in outputs]
    if min(norms) < 1e-12:
        raise NonFiniteLoss("composed query collapsed to the zero vector")
    h = np.stack([o / n for o, n in zip(outputs, norms)])

    scores = np.clip(h @ targets.T, -1.0, 1.0) / tau
    g_wt = np.zeros_like(model.w_text)
    g_wr = np.zeros_like(model.w_ref)
    g_p = np.zeros_like(model.output_proj)
    g_alpha = 0.0
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DuplicateTargets)
        row_losses = infonce_row_losses(h, targets, ids, tau)
    for i in range(B):
        keep = [i] + [j for j in range(B) if j != i and ids[j] != ids[i]]
        row_scores = scores[i, keep]
        soft = np.exp(row_scores - _logsumexp(row_scores))
        d_scores = soft.copy()
        d_scores[0] -= 1.0  # positive sits at keep[0]
        dh = (targets[keep].T @ d_scores) / (tau * B)
        d_out_vec = (dh - h[i] * float(h[i] @ dh)) / norms[i]
        g_p += np.outer(d_out_vec, fused[i])
        dz = model.output_proj.T @ d_out_vec
        q = batch.queries[i]
        if q.reference_embeddings:
            g_wt += model.alpha * np.outer(dz, q.text_embedding)
            g_wr += (1.0 - model.alpha) * np.outer(dz, ref_means[i])
            g_alpha += float(dz @ (text_proj[i] - ref_proj[i]))
        else:
            g_wt += np.outer(dz, q.text_embedding)
        total += row_losses[i]
    grad = np.concatenate([g_wt.ravel(), g_wr.ravel(), g_p.ravel(), [g_alpha]])
    return total / B, grad


# --- training ------------------------------------------------------------------

class TripletDataset:
    """Training rows: one text embedding, one reference embedding, one target id."""

    def __init__(self, text_matrix, ref_matrix, target_ids: list[str]):
        self.text_matrix = np.asarray(text_matrix, dtype=np.float64)
        self.ref_matrix = np.asarray(ref_matrix, dtype=np.float64)
        self.target_ids = list(target_ids)
        n = len(self.target_ids)
        if self.text_matrix.shape[0] != n or self.ref_matrix.shape[0] != n:
            raise DimensionMismatch("row counts of texts, refs, targets differ")
        if n == 0:
            raise ValueError("empty triplet dataset")

    def __len__(self):
        return len(self.target_ids)

    @classmethod
    def from_mined(cls, triplets, text_corpus: EmbeddingCorpus,
                   image_corpus: EmbeddingCorpus) -> "TripletDataset":
        texts, refs, targets = [], [], []
        for t in triplets:
            try:
                texts.append(text_corpus.vector(t.query_text_id))
            except KeyError:
                raise MissingEmbedding(
                    f"no text embedding for {t.query_text_id!r}") from None
            try:
                refs.append(image_corpus.vector(t.reference_id))
            except KeyError:
                raise MissingEmbedding(
                    f"no image embedding for {t.reference_id!r}") from None
            targets.append(t.target_id)
        return cls(np.stack(texts), np.stack(refs), targets)


@dataclass(frozen=True)
class CtrTrainConfig:
    learning_rate: float = 0.01
    stage_a_epochs: int = 20
    stage_b_epochs: int = 10
    batch_size: int = DEFAULT_BATCH_SIZE
    d_out: int | None = None
    alpha: float = 0.5
    tau: float = DEFAULT_TAU
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.stage_a_epochs < 0 or self.stage_b_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train_ctr(dataset: TripletDataset, external_corpus: EmbeddingCorpus,
              cfg: CtrTrainConfig) -> CtrModel:
    for target_id in dataset.target_ids:
        if target_id not in external_corpus.id_index:
            raise UnknownTargetId(f"target {target_id!r} not in external corpus")
    d_text = dataset.text_matrix.shape[1]
    d_ref = dataset.ref_matrix.shape[1]
    d_ext = external_corpus.dimension
    d_out = cfg.d_out if cfg.d_out is not None else d_ext
    model = init_model(d_text, d_ref, d_out, d_ext, alpha=cfg.alpha, tau=cfg.tau)
    dims = model.dimensions

    target_vectors = {i: external_corpus.vector(i).astype(np.float64)
                      for i in set(dataset.target_ids)}
    rng = np.random.default_rng(cfg.seed)
    params = _flatten(model)
    adam = Adam(size=params.size, learning_rate=cfg.learning_rate)
    n = len(dataset)
    total_epochs = cfg.stage_a_epochs + cfg.stage_b_epochs
    for epoch in range(total_epochs):
        update_alpha = epoch >= cfg.stage_a_epochs
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            batch = TripletBatch(
                queries=[ComposedQuery(
                    text_embedding=dataset.text_matrix[r],
                    reference_embeddings=(dataset.ref_matrix[r],))
                    for r in rows],
                target_ids=[dataset.target_ids[r] for r in rows],
                target_matrix=np.stack([target_vectors[dataset.target_ids[r]]
                                        for r in rows]))
            current = _unflatten(params, dims, cfg.tau)
            # overflow here surfaces as NonFiniteLoss below, not as a warning
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = ctr_loss_and_gradients(current, batch)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: loss {loss}")
            if not update_alpha:
                grad[-1] = 0.0
            params = adam.step(params, grad)
            params[-1] = np.clip(params[-1], 0.0, 1.0)
    return _unflatten(params, dims, cfg.tau)


# --- persistence ---------------------------------------------------------------
#
# FCTR little-endian layout: magic "FCTR" | u32 version=1 | u32 d_text |
# u32 d_ref | u32 d_out | u32 d_ext | f64 alpha | f64 tau | then row-major
# float64 payloads for w_text, w_ref, output_proj. A JSON sidecar at
# <path>.json mirrors the scalar header for human inspection.

_FCTR_HEADER = struct.Struct("<4sIIIIIdd")


def save_ctr_model(model: CtrModel, path) -> None:
    dims = model.dimensions
    with open(path, "wb") as f:
        f.write(_FCTR_HEADER.pack(FCTR_MAGIC, FCTR_VERSION, dims["d_text"],
                                  dims["d_ref"], dims["d_out"], dims["d_ext"],
                                  model.alpha, model.tau))
        f.write(model.w_text.astype("<f8", copy=False).tobytes())
        f.write(model.w_ref.astype("<f8", copy=False).tobytes())
        f.write(model.output_proj.astype("<f8", copy=False).tobytes())
    sidecar = {"format": "FCTR", "version": FCTR_VERSION, **dims,
               "alpha": model.alpha, "tau": model.tau}
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"file ended inside {what}")
    return data


def load_ctr_model(path) -> CtrModel:
    with open(path, "rb") as f:
        head = _read_exact(f, _FCTR_HEADER.size, "header")
        magic, version, d_text, d_ref, d_out, d_ext, alpha, tau = \
            _FCTR_HEADER.unpack(head)
        if magic != FCTR_MAGIC:
            raise BadMagic(f"expected magic {FCTR_MAGIC!r}, got {magic!r}")
        if version != FCTR_VERSION:
            raise VersionUnsupported(f"FCTR version {version}")
        def matrix(rows, cols, name):
            data = _read_exact(f, 8 * rows * cols, name)
            return np.frombuffer(data, dtype="<f8").reshape(rows, cols).copy()
        w_text = matrix(d_out, d_text, "w_text")
        w_ref = matrix(d_out, d_ref, "w_ref")
        output_proj = matrix(d_ext, d_out, "output_proj")
        trailing = f.read(1)
        if trailing:
            raise SchemaError("trailing bytes after model payload")
    return CtrModel(w_text=w_text, w_ref=w_ref, output_proj=output_proj,
                    alpha=alpha, tau=tau)


class FusionComposer(BaseEstimator):
    """Estimator facade over ``train_ctr`` with sklearn-style params."""

    def __init__(self, learning_rate=0.01, stage_a_epochs=20, stage_b_epochs=10,
                 batch_size=DEFAULT_BATCH_SIZE, d_out=None, alpha=0.5,
                 tau=DEFAULT_TAU, seed=0):
        self.learning_rate = learning_rate
        self.stage_a_epochs = stage_a_epochs
        self.stage_b_epochs = stage_b_epochs
        self.batch_size = batch_size
        self.d_out = d_out
        self.alpha = alpha
        self.tau = tau
        self.seed = seed

    def fit(self, dataset: TripletDataset, external_corpus: EmbeddingCorpus):
        cfg = CtrTrainConfig(
            learning_rate=self.learning_rate,
            stage_a_epochs=self.stage_a_epochs,
            stage_b_epochs=self.stage_b_epochs,
            batch_size=self.batch_size, d_out=self.d_out,
            alpha=self.alpha, tau=self.tau, seed=self.seed)
        self.model_ = train_ctr(dataset, external_corpus, cfg)
        return self

    def encode(self, text_embedding, reference_embeddings=()) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ValueError("fit must run before encode")
        return encode_query_ctr(self.model_, text_embedding,
                                reference_embeddings)
