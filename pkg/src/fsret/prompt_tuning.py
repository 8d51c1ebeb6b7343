"""Per-query prompt refinement from a handful of marked examples.

Learnable state is a small context matrix plus two calibration scalars
(a, b) that stretch raw cosine scores into probabilities via a sigmoid.
Training minimizes class-weighted binary cross-entropy over the marked
positives and negatives while a KL term pulls the score distribution back
toward the frozen zero-shot anchor's ranking. The two objectives are
combined by gradient surgery: in projection mode the anchor-conflicting
component of the BCE gradient is removed; in gate mode the KL gradient is
added scaled by the cosine agreement between the two, clipped at zero.

All training math runs in float64 with analytic gradients; the loss path
computes BCE from logits so gradients stay smooth through the probability
clamp used by the standalone loss function.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .errors import (
    DimensionMismatch,
    DistributionInvalid,
    InsufficientExamples,
    NonFiniteLoss,
    SchemaError,
)
from .optim import Adam
from .validation import as_float_matrix, as_float_vector, is_unit

WEIGHT_CLASSES = ("HP", "HN", "EN")
COMPOSERS = ("mean_pool", "direct")
PROGRAD_MODES = ("projection", "gate")

PROBABILITY_FLOOR = 1e-7
MIN_CALIBRATION_SLOPE = 1e-3
INIT_NOISE_SCALE = 0.02


def _sigmoid(u: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(u, -60.0, 60.0)))


def _softmax(u: np.ndarray) -> np.ndarray:
    shifted = u - u.max()
    e = np.exp(shifted)
    return e / e.sum()


def calibrated_probability(x, a: float, b: float):
    """Map a cosine score to a probability through sigmoid(a*x + b)."""
    if a <= 0:
        raise ValueError("calibration slope a must be positive")
    u = a * np.asarray(x, dtype=np.float64) + b
    p = _sigmoid(u)
    return float(p) if np.isscalar(x) or np.ndim(x) == 0 else p


def bce_loss(p: float, y: int) -> float:
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    p = min(max(float(p), PROBABILITY_FLOOR), 1.0 - PROBABILITY_FLOOR)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


def kl_loss(p_zs, p) -> float:
    """KL(p_zs || p) over matched batch items."""
    p_zs = np.asarray(p_zs, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p_zs.shape != p.shape or p_zs.ndim != 1:
        raise DistributionInvalid(
            f"distributions must be 1-D and matched, got {p_zs.shape} vs {p.shape}")
    for name, dist in (("p_zs", p_zs), ("p", p)):
        if (dist <= 0).any():
            raise DistributionInvalid(f"{name} has a mass component <= 0")
        if abs(dist.sum() - 1.0) > 1e-6:
            raise DistributionInvalid(f"{name} sums to {dist.sum()}, not 1")
    return float(np.sum(p_zs * np.log(p_zs / p)))


def prograd_combine(g_bce, g_kl, mode: str = "projection",
                    kl_coefficient: float = 1.0) -> np.ndarray:
    if mode not in PROGRAD_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    g_bce = np.asarray(g_bce, dtype=np.float64)
    g_kl = np.asarray(g_kl, dtype=np.float64)
    if g_bce.shape != g_kl.shape:
        raise DimensionMismatch(f"{g_bce.shape} vs {g_kl.shape}")
    kl_sq = float(g_kl @ g_kl)
    if kl_sq < 1e-30:
        return g_bce.copy()
    dot = float(g_bce @ g_kl)
    if mode == "projection":
        if dot >= 0:
            return g_bce.copy()
        return g_bce - (dot / kl_sq) * g_kl
    bce_norm = float(np.linalg.norm(g_bce))
    if bce_norm < 1e-30:
        return g_bce.copy()
    agreement = max(0.0, dot / (bce_norm * np.sqrt(kl_sq)))
    return g_bce + agreement * kl_coefficient * g_kl


# --- domain types ------------------------------------------------------------

@dataclass
class PromptState:
    context: np.ndarray
    calibration_a: float
    calibration_b: float
    composer: str = "mean_pool"

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        if self.context.ndim != 2 or self.context.shape[0] < 1:
            raise ValueError("context must be an M x d matrix, M >= 1")
        if self.composer not in COMPOSERS:
            raise ValueError(f"unknown composer {self.composer!r}")
        if self.calibration_a <= 0:
            raise ValueError("calibration slope must stay positive")


@dataclass(frozen=True)
class ZeroShotAnchor:
    embedding: np.ndarray

    def __post_init__(self):
        vec = as_float_vector(self.embedding, dtype=np.float64)
        if not is_unit(vec):
            raise ValueError("anchor embedding must be unit-normalized")
        object.__setattr__(self, "embedding", vec)


@dataclass(frozen=True)
class FewShotItem:
    embedding: np.ndarray
    label: int
    weight_class: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label!r}")
        if self.weight_class not in WEIGHT_CLASSES:
            raise SchemaError(f"unknown weight class {self.weight_class!r}")
        object.__setattr__(self, "embedding",
                           as_float_vector(self.embedding, dtype=np.float64))


class FewShotBatch:
    """Marked examples for one query; needs at least one of each side."""

    def __init__(self, items: list[FewShotItem]):
        if not items:
            raise InsufficientExamples("empty feedback batch")
        labels = [item.label for item in items]
        if 1 not in labels or 0 not in labels:
            raise InsufficientExamples(
                "feedback batch needs at least one positive and one negative")
        dims = {item.embedding.shape[0] for item in items}
        if len(dims) != 1:
            raise DimensionMismatch(f"mixed embedding dimensions {sorted(dims)}")
        self.items = list(items)
        self.matrix = np.stack([item.embedding for item in items])
        self.labels = np.asarray(labels, dtype=np.float64)

    def __len__(self):
        return len(self.items)

    def weights(self, w_hp: float, w_hn: float, w_en: float) -> np.ndarray:
        table = {"HP": w_hp, "HN": w_hn, "EN": w_en}
        return np.asarray([table[item.weight_class] for item in self.items],
                          dtype=np.float64)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    iterations: int = 300
    m: int = 16
    w_hp: float = 1.0
    w_hn: float = 1.0
    w_en: float = 0.25
    kl_coefficient: float = 1.0
    prograd_mode: str = "projection"
    composer: str = "mean_pool"
    seed: int = 0
    init_a: float = 10.0
    init_b: float = -3.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.prograd_mode not in PROGRAD_MODES:
            raise ValueError(f"unknown prograd_mode {self.prograd_mode!r}")
        if self.composer not in COMPOSERS:
            raise ValueError(f"unknown composer {self.composer!r}")


@dataclass
class TrainedPrompt:
    state: PromptState
    loss_trajectory: list[float]
    config: TrainConfig


# --- forward/backward ---------------------------------------------------------

def compose_prompt(context, query_tokens, composer: str = "mean_pool") -> np.ndarray:
    e, _ = _compose_with_norm(np.asarray(context, dtype=np.float64),
                              as_float_matrix(query_tokens, dtype=np.float64),
                              composer)
    return e


def _compose_with_norm(context, query_tokens, composer):
    if composer == "mean_pool":
        s = context.sum(axis=0) + query_tokens.sum(axis=0)
    elif composer == "direct":
        s = context[0]
    else:
        raise ValueError(f"unknown composer {composer!r}")
    norm = float(np.linalg.norm(s))
    if norm < 1e-12:
        raise NonFiniteLoss("composed prompt collapsed to the zero vector")
    return s / norm, norm


@dataclass
class LossBundle:
    bce: float
    kl: float
    grad_bce: np.ndarray
    grad_kl: np.ndarray


def loss_and_gradients(context, a, b, query_tokens, batch_matrix, labels,
                       weights, target_distribution, composer) -> LossBundle:
    """Both loss terms and their analytic gradients over [context, a, b]."""
    context = np.asarray(context, dtype=np.float64)
    batch_matrix = np.asarray(batch_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    target = np.asarray(target_distribution, dtype=np.float64)

    e, norm = _compose_with_norm(context, query_tokens, composer)
    x = batch_matrix @ e
    u = a * x + b
    p = _sigmoid(u)

    total_weight = float(weights.sum())
    # logit-form BCE: softplus(u) - y*u, smooth everywhere
    bce = float((weights * (np.logaddexp(0.0, u) - labels * u)).sum() / total_weight)
    dbce_du = weights * (p - labels) / total_weight

    shifted = u - u.max()
    log_q = shifted - np.log(np.exp(shifted).sum())
    q = np.exp(log_q)
    kl = float(np.sum(target * (np.log(target) - log_q)))
    dkl_du = q - target

    def chain(du: np.ndarray) -> np.ndarray:
        ga = float(du @ x)
        gb = float(du.sum())
        de = a * (batch_matrix.T @ du)
        # back through the normalization: project out the radial component
        d_s = (de - e * float(e @ de)) / norm
        if composer == "mean_pool":
            g_ctx = np.tile(d_s, (context.shape[0], 1))
        else:
            g_ctx = np.zeros_like(context)
            g_ctx[0] = d_s
        return np.concatenate([g_ctx.ravel(), [ga, gb]])

    return LossBundle(bce=bce, kl=kl, grad_bce=chain(dbce_du),
                      grad_kl=chain(dkl_du))


def zero_shot_distribution(anchor: ZeroShotAnchor, batch_matrix,
                           init_a: float, init_b: float) -> np.ndarray:
    """Frozen target: softmax over the anchor's calibrated scores."""
    x = np.asarray(batch_matrix, dtype=np.float64) @ anchor.embedding
    return _softmax(init_a * x + init_b)


def train_prompt(query_tokens, batch: FewShotBatch, anchor: ZeroShotAnchor,
                 cfg: TrainConfig) -> TrainedPrompt:
    tokens = as_float_matrix(query_tokens, dtype=np.float64)
    d = anchor.embedding.shape[0]
    if tokens.shape[1] != d or batch.matrix.shape[1] != d:
        raise DimensionMismatch(
            f"anchor d={d}, tokens d={tokens.shape[1]}, batch d={batch.matrix.shape[1]}")
    rows = cfg.m if cfg.composer == "mean_pool" else 1
    rng = np.random.default_rng(cfg.seed)
    context = anchor.embedding + INIT_NOISE_SCALE * rng.normal(size=(rows, d))
    a, b = float(cfg.init_a), float(cfg.init_b)
    weights = batch.weights(cfg.w_hp, cfg.w_hn, cfg.w_en)
    target = zero_shot_distribution(anchor, batch.matrix, cfg.init_a, cfg.init_b)

    params = np.concatenate([context.ravel(), [a, b]])
    adam = Adam(size=params.size, learning_rate=cfg.learning_rate)
    trajectory: list[float] = []
    for iteration in range(cfg.iterations):
        context = params[:-2].reshape(rows, d)
        a, b = float(params[-2]), float(params[-1])
        # overflow here surfaces as NonFiniteLoss below, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            bundle = loss_and_gradients(context, a, b, tokens, batch.matrix,
                                        batch.labels, weights, target,
                                        cfg.composer)
        total = bundle.bce + cfg.kl_coefficient * bundle.kl
        if not np.isfinite(total):
            raise NonFiniteLoss(
                f"iteration {iteration}: bce={bundle.bce}, kl={bundle.kl}, "
                f"a={a}, b={b}")
        trajectory.append(total)
        grad = prograd_combine(bundle.grad_bce, bundle.grad_kl,
                               cfg.prograd_mode, cfg.kl_coefficient)
        params = adam.step(params, grad)
        params[-2] = max(params[-2], MIN_CALIBRATION_SLOPE)
    state = PromptState(context=params[:-2].reshape(rows, d),
                        calibration_a=float(params[-2]),
                        calibration_b=float(params[-1]),
                        composer=cfg.composer)
    return TrainedPrompt(state=state, loss_trajectory=trajectory, config=cfg)


def refine_query(state: PromptState, query_tokens) -> np.ndarray:
    """The refined search embedding; feed it straight to index search."""
    return compose_prompt(state.context, query_tokens, state.composer)


# --- persistence ---------------------------------------------------------------

def save_prompt(trained: TrainedPrompt, query_id: str, path) -> None:
    doc = {
        "query_id": query_id,
        "M": int(trained.state.context.shape[0]),
        "context": trained.state.context.tolist(),
        "a": trained.state.calibration_a,
        "b": trained.state.calibration_b,
        "config": asdict(trained.config),
        "loss_trajectory": [float(v) for v in trained.loss_trajectory],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_prompt(path) -> tuple[str, TrainedPrompt]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    for key in ("query_id", "M", "context", "a", "b", "config", "loss_trajectory"):
        if key not in doc:
            raise SchemaError(f"{path}: missing key {key!r}")
    cfg = TrainConfig(**doc["config"])
    context = np.asarray(doc["context"], dtype=np.float64)
    if context.shape[0] != doc["M"]:
        raise SchemaError(f"{path}: M={doc['M']} but context has "
                          f"{context.shape[0]} rows")
    state = PromptState(context=context, calibration_a=float(doc["a"]),
                        calibration_b=float(doc["b"]), composer=cfg.composer)
    return str(doc["query_id"]), TrainedPrompt(
        state=state, loss_trajectory=[float(v) for v in doc["loss_trajectory"]],
        config=cfg)


# --- estimator facade ------------------------------------------------------------

class PromptRefiner(BaseEstimator):
    """Fits a refined query embedding from marked feedback examples.

    X rows are unit embeddings of the marked items, y their 0/1 labels.
    The anchor is the zero-shot query embedding the refinement must stay
    close to; weight classes default to HP for positives, HN for negatives.
    """

    def __init__(self, m=16, composer="mean_pool", learning_rate=0.05,
                 iterations=300, w_hp=1.0, w_hn=1.0, w_en=0.25,
                 kl_coefficient=1.0, prograd_mode="projection", seed=0,
                 init_a=10.0, init_b=-3.0):
        self.m = m
        self.composer = composer
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.w_hp = w_hp
        self.w_hn = w_hn
        self.w_en = w_en
        self.kl_coefficient = kl_coefficient
        self.prograd_mode = prograd_mode
        self.seed = seed
        self.init_a = init_a
        self.init_b = init_b

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, iterations=self.iterations,
            m=self.m, w_hp=self.w_hp, w_hn=self.w_hn, w_en=self.w_en,
            kl_coefficient=self.kl_coefficient, prograd_mode=self.prograd_mode,
            composer=self.composer, seed=self.seed, init_a=self.init_a,
            init_b=self.init_b)

    def fit(self, X, y, anchor=None, weight_classes=None, query_tokens=None):
        if anchor is None:
            raise ValueError("fit requires the zero-shot anchor embedding")
        if not isinstance(anchor, ZeroShotAnchor):
            anchor = ZeroShotAnchor(embedding=anchor)
        X = as_float_matrix(X, dtype=np.float64)
        y = np.asarray(y)
        if weight_classes is None:
            weight_classes = ["HP" if label == 1 else "HN" for label in y]
        items = [FewShotItem(embedding=row, label=int(label), weight_class=cls)
                 for row, label, cls in zip(X, y, weight_classes)]
        if query_tokens is None:
            query_tokens = anchor.embedding.reshape(1, -1)
        self.prompt_ = train_prompt(query_tokens, FewShotBatch(items), anchor,
                                    self._config())
        self.query_embedding_ = refine_query(self.prompt_.state, query_tokens)
        return self

    def decision_function(self, X):
        X = as_float_matrix(X, dtype=np.float64)
        state = self.prompt_.state
        return state.calibration_a * (X @ self.query_embedding_) + state.calibration_b

    def predict_proba(self, X):
        return _sigmoid(self.decision_function(X))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(int)
