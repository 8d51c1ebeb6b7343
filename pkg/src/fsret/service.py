"""HTTP facade over the retrieval pipeline: corpus loading, ranked search,
per-query feedback sessions, background refinement, and batch evaluation.

Sessions are plain JSON files under a state directory so a restarted service
picks up where it left off. The corpus and its index are shared read-only;
each session serializes its own mutations through a per-session lock.

Query texts are embedded by lookup only: they must appear as record ids in
the loaded text corpus. By convention those ids carry the "a photo of a"
prefix; the service documents that but does not enforce it.
"""

from __future__ import annotations

import datetime
import json
import os
import tempfile
import threading
import uuid
from dataclasses import fields, replace
from typing import Any

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .benchmark import BenchmarkManifest, QueryEntry, load_manifest
from .embeddings import EmbeddingCorpus, read_embeddings
from .errors import FsretError, InsufficientExamples, NoEmbedding
from .fusion import (
    CtrModel,
    CtrTrainConfig,
    TripletDataset,
    encode_query_ctr,
    load_ctr_model,
    save_ctr_model,
    train_ctr,
)
from .indexing import build_exact, search
from .metrics import DEFAULT_K, average_precision_at_k, evaluate_run, report_to_dict
from .pipeline import (
    anchor_for,
    evaluation_corpus,
    run_ctr_refined,
    run_prompt_refined,
    run_zero_shot,
    train_benchmark_ctr,
)
from .prompt_tuning import (
    FewShotBatch,
    FewShotItem,
    TrainConfig,
    ZeroShotAnchor,
    refine_query,
    train_prompt,
)
from .selection import score_individual, select_combination

FEEDBACK_LABELS = ("positive", "hard_negative", "cleared")
SEARCH_METHODS = ("zero_shot", "pl", "ctr")
SESSION_DIR = "sessions"
MODEL_DIR = "models"


class ApiError(Exception):
    """Carries an HTTP status plus a stable machine-readable code."""

    def __init__(self, status: int, code: str, detail: str):
        super().__init__(detail)
        self.status = status
        self.code = code
        self.detail = detail


def _problem(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={
        "type": "about:blank",
        "title": code.replace("_", " ").lower(),
        "status": status,
        "code": code,
        "detail": detail,
    })


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# --- request bodies --------------------------------------------------------------

class CorpusRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    image_path: str
    text_path: str
    manifest_path: str


class SessionRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    query_text: str


class SearchRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    query_text: str | None = None
    session_id: str | None = None
    k: int = DEFAULT_K
    method: str = "zero_shot"


class FeedbackRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    item_id: str
    label: str


class RefineRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    method: str = "pl"
    config: dict[str, Any] = {}


class EvaluateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    method: str = "zero_shot"
    k: int = DEFAULT_K
    shots: int = 16
    config: dict[str, Any] = {}


# --- session ----------------------------------------------------------------------

class Session:
    """One query's feedback and refinement state.

    `feedback` maps item id to "positive" or "hard_negative"; clearing
    removes the entry. `refined` holds per-method results: the refined
    embedding for prompt tuning, the selected reference ids for fusion.
    """

    def __init__(self, session_id: str, query_text: str):
        self.session_id = session_id
        self.query_text = query_text
        self.feedback: dict[str, str] = {}
        self.refined: dict[str, dict] = {}
        self.history: list[dict] = []
        self.status: dict = {"state": "idle", "method": None, "error": None}
        self.lock = threading.Lock()

    def to_doc(self) -> dict:
        return {
            "session_id": self.session_id,
            "query_text": self.query_text,
            "feedback": dict(self.feedback),
            "refined": self.refined,
            "history": self.history,
            "status": dict(self.status),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Session":
        session = cls(doc["session_id"], doc["query_text"])
        session.feedback = dict(doc.get("feedback", {}))
        session.refined = dict(doc.get("refined", {}))
        session.history = list(doc.get("history", []))
        session.status = dict(doc.get("status", session.status))
        if session.status.get("state") == "running":
            # a job never survives a restart
            session.status = {"state": "failed",
                              "method": session.status.get("method"),
                              "error": "interrupted by service restart"}
        return session

    def view(self) -> dict:
        return {
            "session_id": self.session_id,
            "query_text": self.query_text,
            "feedback": dict(self.feedback),
            "refinements": sorted(self.refined),
            "state": self.status["state"],
            "method": self.status["method"],
            "error": self.status["error"],
        }


class _CorpusBundle:
    """Everything derived from one /corpus load, swapped atomically."""

    def __init__(self, image_corpus: EmbeddingCorpus,
                 text_corpus: EmbeddingCorpus, manifest: BenchmarkManifest):
        self.image_corpus = image_corpus
        self.text_corpus = text_corpus
        self.manifest = manifest
        self.eval_corpus = evaluation_corpus(manifest, image_corpus)
        self.index = build_exact(self.eval_corpus)
        self.content_hash = image_corpus.content_hash()

    def query_by_text(self, text: str) -> QueryEntry | None:
        for query in self.manifest.queries:
            if query.text == text:
                return query
        return None


class ServiceState:
    def __init__(self, state_dir: str):
        self.state_dir = state_dir
        self.bundle: _CorpusBundle | None = None
        self.sessions: dict[str, Session] = {}
        self.ctr_models: dict[str, CtrModel] = {}
        self.lock = threading.Lock()
        os.makedirs(os.path.join(state_dir, SESSION_DIR), exist_ok=True)
        os.makedirs(os.path.join(state_dir, MODEL_DIR), exist_ok=True)
        self._load_sessions()

    def _session_path(self, session_id: str) -> str:
        return os.path.join(self.state_dir, SESSION_DIR, f"{session_id}.json")

    def _model_path(self, session_id: str) -> str:
        return os.path.join(self.state_dir, MODEL_DIR, f"{session_id}.fctr")

    def _load_sessions(self) -> None:
        directory = os.path.join(self.state_dir, SESSION_DIR)
        for name in sorted(os.listdir(directory)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(directory, name), encoding="utf-8") as f:
                session = Session.from_doc(json.load(f))
            self.sessions[session.session_id] = session

    def persist(self, session: Session) -> None:
        path = self._session_path(session.session_id)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(session.to_doc(), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    def require_bundle(self) -> _CorpusBundle:
        bundle = self.bundle
        if bundle is None:
            raise ApiError(409, "NO_CORPUS", "no corpus loaded; POST /corpus first")
        return bundle

    def require_session(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise ApiError(404, "UNKNOWN_SESSION", f"no session {session_id!r}")
        return session

    def ctr_model_for(self, session: Session) -> CtrModel:
        model = self.ctr_models.get(session.session_id)
        if model is None:
            model = load_ctr_model(self._model_path(session.session_id))
            self.ctr_models[session.session_id] = model
        return model


# --- config handling --------------------------------------------------------------

def _build_config(cls, overrides: dict[str, Any], skip: tuple[str, ...] = ()):
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = set(overrides) - known
    if unknown:
        raise ApiError(422, "BAD_CONFIG",
                       f"unknown config keys {sorted(unknown)}; "
                       f"valid: {sorted(known)}")
    try:
        return replace(cls(), **overrides)
    except (TypeError, ValueError) as exc:
        raise ApiError(422, "BAD_CONFIG", str(exc)) from None


# --- refinement jobs ---------------------------------------------------------------

def _session_anchor(bundle: _CorpusBundle, session: Session) -> np.ndarray:
    return anchor_for(session.query_text, bundle.text_corpus)


def _train_session_pl(bundle: _CorpusBundle, session_snapshot: dict,
                      anchor: np.ndarray, overrides: dict) -> dict:
    cfg = _build_config(TrainConfig, overrides)
    corpus = bundle.image_corpus
    items = [FewShotItem(corpus.vector(i), 1, "HP")
             for i, label in sorted(session_snapshot.items())
             if label == "positive"]
    items += [FewShotItem(corpus.vector(i), 0, "HN")
              for i, label in sorted(session_snapshot.items())
              if label == "hard_negative"]
    batch = FewShotBatch(items)
    tokens = anchor.reshape(1, -1)
    trained = train_prompt(tokens, batch, ZeroShotAnchor(anchor), cfg)
    refined = refine_query(trained.state, tokens)
    return {"embedding": [float(x) for x in refined],
            "config": overrides, "trained_at": _now()}


def _train_session_ctr(bundle: _CorpusBundle, session_snapshot: dict,
                       anchor: np.ndarray, overrides: dict
                       ) -> tuple[dict, CtrModel]:
    cfg = _build_config(CtrTrainConfig, overrides)
    positives = sorted(i for i, label in session_snapshot.items()
                       if label == "positive")
    if len(positives) < 2:
        raise InsufficientExamples(
            "fusion refinement needs at least two positive marks")
    corpus = bundle.image_corpus
    vectors = {i: corpus.vector(i).astype(np.float64) for i in positives}
    texts, refs, targets = [], [], []
    for ref_id in positives:
        for target_id in positives:
            if target_id == ref_id:
                continue
            texts.append(anchor)
            refs.append(vectors[ref_id])
            targets.append(target_id)
    dataset = TripletDataset(np.stack(texts), np.stack(refs), targets)
    model = train_ctr(dataset, corpus, cfg)

    marked = set(session_snapshot)
    validation = corpus.subset([i for i in corpus.ids if i in marked])
    scores = score_individual(anchor, vectors, model, validation,
                              set(positives), k=len(validation))
    result = select_combination(scores, anchor, vectors, model, validation,
                                set(positives), k=len(validation))
    return ({"reference_ids": list(result.chosen), "config": overrides,
             "selection_score": result.combination_score,
             "trained_at": _now()}, model)


def _refined_embedding(state: ServiceState, bundle: _CorpusBundle,
                       session: Session, method: str) -> np.ndarray:
    record = session.refined.get(method)
    if record is None:
        raise ApiError(409, "REFINEMENT_MISSING",
                       f"session {session.session_id!r} has no completed "
                       f"{method!r} refinement")
    if method == "pl":
        return np.asarray(record["embedding"], dtype=np.float64)
    anchor = _session_anchor(bundle, session)
    model = state.ctr_model_for(session)
    refs = [bundle.image_corpus.vector(i).astype(np.float64)
            for i in record["reference_ids"]]
    return encode_query_ctr(model, anchor, refs)


def _run_refine_job(state: ServiceState, session: Session, method: str,
                    snapshot: dict, anchor: np.ndarray,
                    overrides: dict) -> None:
    try:
        bundle = state.require_bundle()
        if method == "pl":
            record = _train_session_pl(bundle, snapshot, anchor, overrides)
        else:
            record, model = _train_session_ctr(bundle, snapshot, anchor,
                                               overrides)
            save_ctr_model(model, state._model_path(session.session_id))
            state.ctr_models[session.session_id] = model
        with session.lock:
            session.refined[method] = record
            session.history.append({"method": method, "completed_at": _now(),
                                    "config": overrides})
            session.status = {"state": "done", "method": method, "error": None}
            state.persist(session)
    except Exception as exc:  # surface every failure through the status route
        with session.lock:
            session.status = {"state": "failed", "method": method,
                              "error": str(exc)}
            state.persist(session)


# --- app factory -------------------------------------------------------------------

def create_app(state_dir: str | None = None) -> FastAPI:
    if state_dir is None:
        state_dir = tempfile.mkdtemp(prefix="fsret-service-")
    state = ServiceState(str(state_dir))
    app = FastAPI(title="fsret", docs_url=None, redoc_url=None)
    app.state.fsret = state
    # the operator console may be served from a different origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return _problem(exc.status, exc.code, exc.detail)

    @app.exception_handler(NoEmbedding)
    async def _no_embedding(request: Request, exc: NoEmbedding):
        return _problem(422, "NO_EMBEDDING", str(exc))

    @app.exception_handler(InsufficientExamples)
    async def _insufficient(request: Request, exc: InsufficientExamples):
        return _problem(409, "INSUFFICIENT_EXAMPLES", str(exc))

    @app.exception_handler(FsretError)
    async def _domain_error(request: Request, exc: FsretError):
        return _problem(422, "DOMAIN_ERROR", str(exc))

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first.get("loc", ()))
        return _problem(422, "BAD_REQUEST", f"{where}: {first.get('msg')}")

    @app.get("/health")
    def health():
        return {"status": "ok",
                "corpus_loaded": state.bundle is not None,
                "session_count": len(state.sessions)}

    @app.post("/corpus")
    def load_corpus(body: CorpusRequest):
        for path in (body.image_path, body.text_path, body.manifest_path):
            if not os.path.exists(path):
                raise ApiError(422, "MISSING_FILE", f"no such file: {path}")
        image_corpus = read_embeddings(body.image_path)
        text_corpus = read_embeddings(body.text_path)
        manifest = load_manifest(body.manifest_path, image_corpus)
        bundle = _CorpusBundle(image_corpus, text_corpus, manifest)
        with state.lock:
            state.bundle = bundle
        return {"image_count": len(image_corpus),
                "text_count": len(text_corpus),
                "test_image_count": len(bundle.eval_corpus),
                "query_count": len(manifest.queries),
                "dimension": image_corpus.dimension,
                "content_hash": bundle.content_hash}

    @app.post("/sessions", status_code=201)
    def create_session(body: SessionRequest):
        bundle = state.require_bundle()
        anchor_for(body.query_text, bundle.text_corpus)  # reject unknown text now
        session = Session(uuid.uuid4().hex[:12], body.query_text)
        with state.lock:
            state.sessions[session.session_id] = session
        state.persist(session)
        return session.view()

    @app.post("/search")
    def run_search(body: SearchRequest):
        bundle = state.require_bundle()
        if body.method not in SEARCH_METHODS:
            raise ApiError(422, "BAD_METHOD",
                           f"method must be one of {list(SEARCH_METHODS)}")
        if body.k < 1:
            raise ApiError(422, "BAD_REQUEST", "k must be >= 1")
        if (body.query_text is None) == (body.session_id is None):
            raise ApiError(422, "BAD_REQUEST",
                           "exactly one of query_text or session_id")
        if body.session_id is not None:
            session = state.require_session(body.session_id)
            if body.method == "zero_shot":
                h = _session_anchor(bundle, session)
            else:
                h = _refined_embedding(state, bundle, session, body.method)
        else:
            if body.method != "zero_shot":
                raise ApiError(422, "BAD_REQUEST",
                               f"method {body.method!r} needs a session_id")
            h = anchor_for(body.query_text, bundle.text_corpus)
        hits = search(bundle.index, h, body.k)
        return {"results": [{"id": i, "score": s} for i, s in hits],
                "method": body.method,
                "refined": body.method != "zero_shot",
                "k": body.k,
                "session_id": body.session_id}

    @app.post("/sessions/{session_id}/feedback")
    def record_feedback(session_id: str, body: FeedbackRequest):
        bundle = state.require_bundle()
        session = state.require_session(session_id)
        if body.label not in FEEDBACK_LABELS:
            raise ApiError(422, "BAD_LABEL",
                           f"label must be one of {list(FEEDBACK_LABELS)}")
        if body.label != "cleared" and body.item_id not in bundle.image_corpus:
            raise ApiError(422, "UNKNOWN_ID",
                           f"item {body.item_id!r} not in the corpus")
        with session.lock:
            if body.label == "cleared":
                session.feedback.pop(body.item_id, None)
            else:
                session.feedback[body.item_id] = body.label
            state.persist(session)
            return {"session_id": session_id,
                    "feedback": dict(session.feedback)}

    @app.post("/sessions/{session_id}/refine", status_code=202)
    def refine(session_id: str, body: RefineRequest):
        bundle = state.require_bundle()
        session = state.require_session(session_id)
        if body.method not in ("pl", "ctr"):
            raise ApiError(422, "BAD_METHOD", "method must be 'pl' or 'ctr'")
        # reject bad config now, not inside the background job
        _build_config(TrainConfig if body.method == "pl" else CtrTrainConfig,
                      body.config)
        anchor = _session_anchor(bundle, session)
        with session.lock:
            if session.status["state"] == "running":
                raise ApiError(409, "REFINE_IN_PROGRESS",
                               "a refinement job is already running")
            positives = [i for i, label in session.feedback.items()
                         if label == "positive"]
            if not positives:
                raise ApiError(409, "INSUFFICIENT_EXAMPLES",
                               "refinement needs at least one positive mark")
            if (body.method == "pl"
                    and not any(label == "hard_negative"
                                for label in session.feedback.values())):
                raise ApiError(409, "INSUFFICIENT_EXAMPLES",
                               "prompt refinement needs at least one "
                               "hard-negative mark")
            if body.method == "ctr" and len(positives) < 2:
                raise ApiError(409, "INSUFFICIENT_EXAMPLES",
                               "fusion refinement needs at least two "
                               "positive marks")
            snapshot = dict(session.feedback)
            session.status = {"state": "running", "method": body.method,
                              "error": None}
            state.persist(session)
        thread = threading.Thread(target=_run_refine_job,
                                  args=(state, session, body.method, snapshot,
                                        anchor, dict(body.config)),
                                  daemon=True)
        thread.start()
        return {"session_id": session_id, "state": "running",
                "method": body.method}

    @app.get("/sessions/{session_id}/status")
    def session_status(session_id: str):
        session = state.require_session(session_id)
        with session.lock:
            return session.view()

    @app.get("/sessions/{session_id}/compare")
    def compare(session_id: str, method: str | None = None,
                k: int = DEFAULT_K):
        bundle = state.require_bundle()
        session = state.require_session(session_id)
        with session.lock:
            completed = sorted(session.refined)
            if method is None:
                if not completed:
                    raise ApiError(409, "REFINEMENT_MISSING",
                                   "no completed refinement to compare")
                method = (session.history[-1]["method"] if session.history
                          else completed[0])
            refined = _refined_embedding(state, bundle, session, method)
        query = bundle.query_by_text(session.query_text)
        if query is None:
            raise ApiError(404, "NO_LABELS",
                           f"no manifest labels for {session.query_text!r}")
        anchor = _session_anchor(bundle, session)
        positives = set(query.positives)
        zero_ranking = [i for i, _ in search(bundle.index, anchor, k)]
        refined_ranking = [i for i, _ in search(bundle.index, refined, k)]
        zero_ap = average_precision_at_k(zero_ranking, positives, k)
        refined_ap = average_precision_at_k(refined_ranking, positives, k)
        return {"session_id": session_id, "query_id": query.query_id,
                "method": method, "k": k,
                "zero_shot_ap": zero_ap, "refined_ap": refined_ap,
                "delta": refined_ap - zero_ap}

    @app.post("/evaluate")
    def evaluate(body: EvaluateRequest):
        bundle = state.require_bundle()
        if body.method not in SEARCH_METHODS:
            raise ApiError(422, "BAD_METHOD",
                           f"method must be one of {list(SEARCH_METHODS)}")
        if body.k < 1 or body.shots < 1:
            raise ApiError(422, "BAD_REQUEST", "k and shots must be >= 1")
        if body.method == "zero_shot":
            runs = run_zero_shot(bundle.manifest, bundle.image_corpus,
                                 bundle.text_corpus, k=body.k)
        elif body.method == "pl":
            cfg = _build_config(TrainConfig, body.config)
            runs = run_prompt_refined(bundle.manifest, bundle.image_corpus,
                                      bundle.text_corpus, shots=body.shots,
                                      cfg=cfg, k=body.k)
        else:
            cfg = _build_config(CtrTrainConfig, body.config)
            model = train_benchmark_ctr(bundle.manifest, bundle.image_corpus,
                                        bundle.text_corpus, cfg=cfg)
            runs, _ = run_ctr_refined(bundle.manifest, bundle.image_corpus,
                                      bundle.text_corpus, model, k=body.k)
        report = evaluate_run(runs, bundle.manifest, k=body.k)
        return {"method": body.method, "k": body.k,
                "report": report_to_dict(report)}

    return app
