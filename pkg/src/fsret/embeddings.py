"""Vector primitives, similarity kernels, and the FSEM embedding file format.

Every other module trades in :class:`EmbeddingCorpus` objects: id-tagged,
fixed-dimension float32 vectors. Dot products accumulate in float64 so that
cosine scores are reproducible across platforms at 1e-6 tolerance, and every
similarity is clamped to [-1, 1] to protect downstream sigmoid consumers
from rounding overshoot.

Similarities are plain floats. Ids are opaque UTF-8 strings so external
datasets' filenames can be used directly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    DuplicateId,
    SchemaError,
    TruncatedFile,
    VersionUnsupported,
)
from .validation import as_float_vector, check_nonzero

FSEM_MAGIC = b"FSEM"
FSEM_VERSION = 1

MODALITY_CODES = {"text": 0, "image": 1}
CODE_MODALITIES = {0: "text", 1: "image"}
MIXED_CODE = 2


def normalize(v) -> np.ndarray:
    """Scale a raw vector to unit L2 norm, preserving direction.

    Raises ZeroVector when every component is below 1e-12 in magnitude.
    The result is float32 with its norm within 1e-6 of 1.
    """
    arr = as_float_vector(v, dtype=np.float32)
    check_nonzero(arr)
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    return (arr.astype(np.float64) / norm).astype(np.float32)


def cosine(u, v) -> float:
    """Cosine similarity of two unit vectors: their dot product, clamped.

    Both inputs must already be unit-normalized and share one dimension.
    Accumulates in float64 and clamps to [-1, 1].
    """
    ua = np.asarray(u, dtype=np.float32)
    va = np.asarray(v, dtype=np.float32)
    if ua.shape != va.shape:
        raise DimensionMismatch(f"{ua.shape} vs {va.shape}")
    value = float(np.dot(ua.astype(np.float64), va.astype(np.float64)))
    return min(1.0, max(-1.0, value))


@dataclass
class EmbeddingRecord:
    """One id-tagged embedding. ``modality`` is ``"text"`` or ``"image"``."""

    id: str
    vector: np.ndarray
    modality: str = "image"

    def __post_init__(self):
        self.vector = as_float_vector(self.vector, dtype=np.float32)
        if len(self.vector) < 2:
            raise DimensionMismatch("embedding dimension must be >= 2")
        if self.modality not in MODALITY_CODES:
            raise SchemaError(f"unknown modality {self.modality!r}")

    def normalized(self) -> "EmbeddingRecord":
        return EmbeddingRecord(self.id, normalize(self.vector), self.modality)


class EmbeddingCorpus:
    """Ordered, immutable collection of same-dimension embedding records.

    Ids are unique; ``id_index`` maps id to ordinal. The stacked float32
    ``matrix`` view is built lazily and shared by the search kernels.
    Corpora never mutate after construction, so unlimited concurrent
    readers are safe.
    """

    def __init__(self, records: Sequence[EmbeddingRecord]):
        records = list(records)
        self.records = records
        if records:
            dims = {len(r.vector) for r in records}
            if len(dims) != 1:
                raise DimensionMismatch(f"records mix dimensions {sorted(dims)}")
            self.dimension = dims.pop()
        else:
            self.dimension = 0
        self.id_index: dict[str, int] = {}
        for i, rec in enumerate(records):
            if rec.id in self.id_index:
                raise DuplicateId(rec.id)
            self.id_index[rec.id] = i
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EmbeddingRecord]:
        return iter(self.records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.id_index

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def matrix(self) -> np.ndarray:
        """(n, d) float32 view of all record vectors, row order = corpus order."""
        if self._matrix is None:
            if self.records:
                self._matrix = np.stack([r.vector for r in self.records])
            else:
                self._matrix = np.zeros((0, self.dimension), dtype=np.float32)
            self._matrix.setflags(write=False)
        return self._matrix

    def get(self, record_id: str) -> EmbeddingRecord:
        try:
            return self.records[self.id_index[record_id]]
        except KeyError:
            raise KeyError(record_id) from None

    def vector(self, record_id: str) -> np.ndarray:
        return self.get(record_id).vector

    def normalized(self) -> "EmbeddingCorpus":
        """Copy of the corpus with every record unit-normalized."""
        return EmbeddingCorpus([r.normalized() for r in self.records])

    def is_normalized(self, tol: float = 1e-3) -> bool:
        if not self.records:
            return True
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= tol))

    def subset(self, ids: Iterable[str]) -> "EmbeddingCorpus":
        """New corpus holding the given ids, in this corpus's order."""
        wanted = set(ids)
        return EmbeddingCorpus([r for r in self.records if r.id in wanted])

    def content_hash(self) -> str:
        """SHA-256 over ids and raw float payloads; order-sensitive."""
        import hashlib

        h = hashlib.sha256()
        for rec in self.records:
            h.update(rec.id.encode("utf-8"))
            h.update(rec.vector.tobytes())
        return h.hexdigest()


def batch_similarity(q, corpus: EmbeddingCorpus) -> list[tuple[str, float]]:
    """Cosine of a unit query against every record, in corpus order.

    Matches a scalar ``cosine`` loop to within 1e-6 per element: the matrix
    product runs in float64, exactly like the scalar path.
    """
    if len(corpus) == 0:
        return []
    qa = np.asarray(q, dtype=np.float32)
    if qa.shape != (corpus.dimension,):
        raise DimensionMismatch(f"query {qa.shape} vs corpus dimension {corpus.dimension}")
    sims = corpus.matrix.astype(np.float64) @ qa.astype(np.float64)
    np.clip(sims, -1.0, 1.0, out=sims)
    return list(zip(corpus.ids, sims.tolist()))


def similarity_vector(q, corpus: EmbeddingCorpus) -> np.ndarray:
    """Array form of :func:`batch_similarity`, used by the search kernels."""
    if len(corpus) == 0:
        return np.zeros(0, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float32)
    if qa.shape != (corpus.dimension,):
        raise DimensionMismatch(f"query {qa.shape} vs corpus dimension {corpus.dimension}")
    sims = corpus.matrix.astype(np.float64) @ qa.astype(np.float64)
    np.clip(sims, -1.0, 1.0, out=sims)
    return sims


# --- FSEM binary format -------------------------------------------------------
#
# Little-endian layout:
#   magic "FSEM" | u32 version=1 | u32 dimension | u8 modality code
#   (0=text, 1=image, 2=mixed) | u64 record count | records
# Each record: u16 id byte-length | id UTF-8 bytes | d * IEEE-754 binary32.
# No padding. A "mixed" file cannot carry per-record modality; on read those
# records default to "image". Text and image embeddings normally ship in
# separate files, so round-trips are exact in practice.

_HEADER = struct.Struct("<4sIIBQ")
_ID_LEN = struct.Struct("<H")


def _corpus_modality_code(corpus: EmbeddingCorpus) -> int:
    modalities = {r.modality for r in corpus.records}
    if modalities == {"text"}:
        return MODALITY_CODES["text"]
    if modalities == {"image"} or not modalities:
        return MODALITY_CODES["image"]
    return MIXED_CODE


def write_embeddings(corpus: EmbeddingCorpus, path, format: str = "fsem") -> None:
    """Serialize a corpus. ``format`` is ``"fsem"`` (binary) or ``"text"``."""
    if format == "text":
        _write_text(corpus, path)
        return
    if format != "fsem":
        raise SchemaError(f"unknown embedding format {format!r}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FSEM_MAGIC, FSEM_VERSION, corpus.dimension,
                             _corpus_modality_code(corpus), len(corpus)))
        for rec in corpus.records:
            id_bytes = rec.id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise SchemaError(f"id longer than 65535 bytes: {rec.id[:40]!r}...")
            f.write(_ID_LEN.pack(len(id_bytes)))
            f.write(id_bytes)
            f.write(rec.vector.astype("<f4", copy=False).tobytes())


def _write_text(corpus: EmbeddingCorpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in corpus.records:
            floats = ",".join(repr(float(x)) for x in rec.vector)
            f.write(f"{rec.id}\t{floats}\t{rec.modality}\n")


def _read_exact(f: io.BufferedReader, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"file ended inside {what} ({len(data)}/{n} bytes)")
    return data


def read_embeddings(path) -> EmbeddingCorpus:
    """Load an FSEM file, or the plain-text sidecar format (sniffed by magic).

    Sidecar lines are ``id<TAB>comma-separated floats[<TAB>modality]``,
    intended for hand-written fixtures. A non-FSEM file that is not UTF-8
    text raises BadMagic.
    """
    with open(path, "rb") as f:
        head = f.read(4)
        if head != FSEM_MAGIC:
            f.seek(0)
            try:
                text = f.read().decode("utf-8")
            except UnicodeDecodeError:
                raise BadMagic(f"expected magic {FSEM_MAGIC!r}, got {head!r}") from None
            lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
            if not lines or any("\t" not in ln for ln in lines):
                raise BadMagic(f"expected magic {FSEM_MAGIC!r}, got {head!r}")
            return _read_text(path)
        rest = _read_exact(f, _HEADER.size - 4, "header")
        version, dimension, modality_code, count = struct.unpack("<IIBQ", rest)
        if version != FSEM_VERSION:
            raise VersionUnsupported(f"FSEM version {version} (supported: {FSEM_VERSION})")
        if modality_code not in (0, 1, 2):
            raise SchemaError(f"unknown modality code {modality_code}")
        modality = CODE_MODALITIES.get(modality_code, "image")
        records = []
        vec_bytes = 4 * dimension
        for i in range(count):
            (id_len,) = _ID_LEN.unpack(_read_exact(f, _ID_LEN.size, f"record {i} id length"))
            rec_id = _read_exact(f, id_len, f"record {i} id").decode("utf-8")
            payload = _read_exact(f, vec_bytes, f"record {i} vector")
            vector = np.frombuffer(payload, dtype="<f4").copy()
            records.append(EmbeddingRecord(rec_id, vector, modality))
        return EmbeddingCorpus(records)


def _read_text(path) -> EmbeddingCorpus:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise SchemaError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            rec_id, floats = parts[0], parts[1]
            modality = parts[2] if len(parts) == 3 else "image"
            try:
                vector = np.array([float(x) for x in floats.split(",")], dtype=np.float32)
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: bad float ({exc})") from None
            records.append(EmbeddingRecord(rec_id, vector, modality))
    return EmbeddingCorpus(records)
