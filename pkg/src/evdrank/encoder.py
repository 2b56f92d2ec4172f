"""Dual-encoder retriever over hashed bag-of-n-gram features.

Texts and items share one signed-hashing featurizer and differ only in their
projection matrices.  An embedding is the L2-normalised projection of the
feature vector; a projection that is exactly zero maps to the unit vector
``e_1`` so that normalisation never produces NaN.

Training minimises the symmetric InfoNCE objective

    L = L_i2t + L_t2i,
    L_i2t = -(1/N) sum_i log softmax_j(<f_i, g_j> / tau)[i]

(``f`` item embeddings, ``g`` text embeddings, ``L_t2i`` the same over
columns) with gradients derived by hand through the normalisation and the
projections.  The temperature is held fixed during training.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import _kernels
from ._hashing import bucket_and_sign, tokenize
from .errors import CheckpointError, IoFailure, NonFiniteLoss, StaleIndex
from .kb import atomic_write

ENCODER_FORMAT = "evdrank-encoder"
ENCODER_SCHEMA_VERSION = 1
MIN_D_FEAT = 16


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusItem:
    id: str
    caption: str
    attributes: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.attributes:
            raise ValueError(f"item {self.id!r} has no attributes")


def load_corpus(path: str | os.PathLike) -> list[CorpusItem]:
    items = []
    seen = set()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read corpus {path}: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            item = CorpusItem(str(rec["id"]), rec["caption"], tuple(rec["attributes"]), rec.get("split", "train"))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{line_no}: bad corpus record ({exc})") from None
        if item.id in seen:
            raise ValueError(f"{path}:{line_no}: duplicate item id {item.id!r}")
        seen.add(item.id)
        items.append(item)
    return items


def dumps_corpus(items: Iterable[CorpusItem]) -> str:
    out = []
    for it in items:
        out.append(json.dumps({"id": it.id, "caption": it.caption, "attributes": list(it.attributes),
                               "split": it.split}, ensure_ascii=False))
    return "".join(line + "\n" for line in out)


def save_corpus(items: Iterable[CorpusItem], path: str | os.PathLike) -> None:
    atomic_write(path, dumps_corpus(items).encode("utf-8"))


# --------------------------------------------------------------------------
# featurization


class SparseVec(NamedTuple):
    indices: np.ndarray  # int64, sorted, unique
    values: np.ndarray  # float64

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        out[self.indices] = self.values
        return out


def _grams(text: str) -> list[str]:
    toks = tokenize(text)
    return toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]


def _hash_counts(grams: Iterable[str], d_feat: int, hash_seed: int) -> SparseVec:
    acc: dict[int, float] = {}
    for g in grams:
        b, s = bucket_and_sign(g, hash_seed, d_feat)
        acc[b] = acc.get(b, 0.0) + s
    keys = sorted(k for k, v in acc.items() if v != 0.0)
    return SparseVec(np.asarray(keys, dtype=np.int64), np.asarray([acc[k] for k in keys], dtype=np.float64))


def featurize(text_or_attributes: str | Sequence[str], d_feat: int, hash_seed: int) -> SparseVec:
    """Signed hashed counts of word unigrams and bigrams.

    A string is treated as one text.  A sequence of strings is an attribute
    bag: each attribute contributes its own unigrams and within-attribute
    bigrams, so an attribute bag equal to ``[text]`` featurizes like ``text``.
    """
    if d_feat < MIN_D_FEAT:
        raise ValueError(f"d_feat must be >= {MIN_D_FEAT}")
    if isinstance(text_or_attributes, str):
        grams = _grams(text_or_attributes)
    else:
        grams = [g for attr in text_or_attributes for g in _grams(attr)]
    return _hash_counts(grams, d_feat, hash_seed)


def feature_matrix(rows: Sequence[str | Sequence[str]], d_feat: int, hash_seed: int) -> np.ndarray:
    vecs = [featurize(r, d_feat, hash_seed) for r in rows]
    indptr = np.zeros(len(vecs) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(v.indices) for v in vecs])
    if vecs:
        indices = np.concatenate([v.indices for v in vecs]).astype(np.int64)
        values = np.concatenate([v.values for v in vecs]).astype(np.float64)
    else:
        indices = np.zeros(0, dtype=np.int64)
        values = np.zeros(0)
    return _kernels.densify(indptr, indices, values, d_feat)


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True, eq=False)
class EncoderParams:
    W_text: np.ndarray
    W_item: np.ndarray
    tau: float = 0.07
    hash_seed: int = 0

    def __post_init__(self):
        wt = np.array(self.W_text, dtype=np.float64)
        wi = np.array(self.W_item, dtype=np.float64)
        if wt.ndim != 2 or wt.shape != wi.shape:
            raise ValueError("W_text and W_item must be matrices of equal shape")
        if wt.shape[0] < MIN_D_FEAT:
            raise ValueError(f"d_feat must be >= {MIN_D_FEAT}")
        if not (np.all(np.isfinite(wt)) and np.all(np.isfinite(wi))):
            raise ValueError("non-finite projection weights")
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ValueError("tau must be a positive finite number")
        wt.flags.writeable = False
        wi.flags.writeable = False
        object.__setattr__(self, "W_text", wt)
        object.__setattr__(self, "W_item", wi)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def d_feat(self) -> int:
        return self.W_text.shape[0]

    @property
    def d_emb(self) -> int:
        return self.W_text.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.d_feat, self.d_emb, self.tau, self.hash_seed)).encode())
        h.update(self.W_text.astype("<f8").tobytes())
        h.update(self.W_item.astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, EncoderParams):
            return NotImplemented
        return (self.tau == other.tau and self.hash_seed == other.hash_seed
                and np.array_equal(self.W_text, other.W_text) and np.array_equal(self.W_item, other.W_item))

    __hash__ = None


def init_params(d_feat: int = 4096, d_emb: int = 64, tau: float = 0.07, hash_seed: int = 0,
                seed: int = 0, tied: bool = True) -> EncoderParams:
    """Random Gaussian projections.

    With ``tied=True`` both modalities start from the same matrix, so a token
    shared by a text and an item's attributes lands in the same embedding
    direction before any training.
    """
    rng = np.random.default_rng(seed)
    wt = rng.normal(0.0, 1.0 / np.sqrt(d_emb), size=(d_feat, d_emb))
    wi = wt.copy() if tied else rng.normal(0.0, 1.0 / np.sqrt(d_emb), size=(d_feat, d_emb))
    return EncoderParams(wt, wi, tau, hash_seed)


# --------------------------------------------------------------------------
# encoding


def _normalize_rows(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    F = np.zeros_like(Z)
    ok = norms > 0
    F[ok] = Z[ok] / norms[ok, None]
    F[~ok, 0] = 1.0
    return F, norms


def encode_features(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _normalize_rows(X @ W)[0]


def encode_texts(params: EncoderParams, texts: Sequence[str]) -> np.ndarray:
    return encode_features(params.W_text, feature_matrix(texts, params.d_feat, params.hash_seed))


def encode_items(params: EncoderParams, items: Sequence[CorpusItem]) -> np.ndarray:
    X = feature_matrix([it.attributes for it in items], params.d_feat, params.hash_seed)
    return encode_features(params.W_item, X)


def encode_text(params: EncoderParams, text: str) -> np.ndarray:
    return encode_texts(params, [text])[0]


def encode_item(params: EncoderParams, item: CorpusItem) -> np.ndarray:
    return encode_items(params, [item])[0]


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


# --------------------------------------------------------------------------
# contrastive objective


@dataclass(frozen=True)
class ContrastiveBatch:
    items: tuple[CorpusItem, ...]
    texts: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "texts", tuple(self.texts))
        if not self.items or len(self.items) != len(self.texts):
            raise ValueError("a batch needs N >= 1 items and exactly N texts")

    @classmethod
    def from_items(cls, items: Sequence[CorpusItem]) -> "ContrastiveBatch":
        return cls(tuple(items), tuple(it.caption for it in items))


@dataclass(frozen=True)
class Gradients:
    W_text: np.ndarray
    W_item: np.ndarray
    tau: float

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(self.W_text + other.W_text, self.W_item + other.W_item, self.tau + other.tau)


@dataclass(frozen=True)
class ContrastiveResult:
    loss_i2t: float
    loss_t2i: float
    grad_i2t: Gradients
    grad_t2i: Gradients

    @property
    def loss_total(self) -> float:
        return self.loss_i2t + self.loss_t2i

    @property
    def grad(self) -> Gradients:
        return self.grad_i2t + self.grad_t2i

    def __iter__(self):
        # (L_i2t, L_t2i, L_total, gradients) unpacking
        return iter((self.loss_i2t, self.loss_t2i, self.loss_total, self.grad))


def _norm_backward(dF: np.ndarray, F: np.ndarray, norms: np.ndarray) -> np.ndarray:
    dZ = np.zeros_like(dF)
    ok = norms > 0
    proj = np.einsum("ij,ij->i", F[ok], dF[ok])
    dZ[ok] = (dF[ok] - F[ok] * proj[:, None]) / norms[ok, None]
    return dZ


def contrastive_from_features(params: EncoderParams, X_text: np.ndarray, X_item: np.ndarray) -> ContrastiveResult:
    Fv, nv = _normalize_rows(X_item @ params.W_item)
    Ft, nt = _normalize_rows(X_text @ params.W_text)
    tau = params.tau
    sims = Fv @ Ft.T
    logits = sims / tau
    l_i2t, l_t2i, dS_i2t, dS_t2i = _kernels.contrastive_core(logits)
    if not (np.isfinite(l_i2t) and np.isfinite(l_t2i)):
        raise NonFiniteLoss(f"non-finite contrastive loss ({l_i2t}, {l_t2i})")

    def backward(dS):
        dFv = dS @ Ft / tau
        dFt = dS.T @ Fv / tau
        g_item = X_item.T @ _norm_backward(dFv, Fv, nv)
        g_text = X_text.T @ _norm_backward(dFt, Ft, nt)
        g_tau = float(-np.sum(dS * sims) / tau**2)
        return Gradients(g_text, g_item, g_tau)

    return ContrastiveResult(l_i2t, l_t2i, backward(dS_i2t), backward(dS_t2i))


def contrastive_loss(params: EncoderParams, batch: ContrastiveBatch) -> ContrastiveResult:
    """Symmetric InfoNCE losses and their analytic gradients.

    Unpacks as ``(L_i2t, L_t2i, L_total, grad)`` where ``grad`` is the
    gradient of ``L_total``; directional gradients are on the result object.
    """
    X_text = feature_matrix(batch.texts, params.d_feat, params.hash_seed)
    X_item = feature_matrix([it.attributes for it in batch.items], params.d_feat, params.hash_seed)
    return contrastive_from_features(params, X_text, X_item)


def _apply(params: EncoderParams, step_text: np.ndarray, step_item: np.ndarray) -> EncoderParams:
    return EncoderParams(params.W_text - step_text, params.W_item - step_item, params.tau, params.hash_seed)


def train_step(params: EncoderParams, batch: ContrastiveBatch, learning_rate: float) -> EncoderParams:
    """One plain gradient-descent step on ``L_total``; tau stays fixed."""
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    g = contrastive_loss(params, batch).grad
    return _apply(params, learning_rate * g.W_text, learning_rate * g.W_item)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def fit(params: EncoderParams, items: Sequence[CorpusItem], *, epochs: int, learning_rate: float,
        batch_size: int = 32, momentum: float = 0.0, seed: int = 0,
        text_for: Callable[[int, int], str] | None = None,
        log: TrainLog | None = None) -> EncoderParams:
    """Minibatch gradient descent (optionally with heavy-ball momentum).

    ``text_for(epoch, index)`` chooses the training text for item ``index``;
    the default is the item's own caption.  It is called for every item in
    index order at the start of each epoch and never touches the shuffling
    RNG.  Item features are
    computed once, text features once per distinct text.
    """
    if not items:
        return params
    rng = np.random.default_rng(seed)
    n = len(items)
    X_item_all = feature_matrix([it.attributes for it in items], params.d_feat, params.hash_seed)
    text_cache: dict[str, np.ndarray] = {}

    def text_features(texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in text_cache]
        if missing:
            X = feature_matrix(missing, params.d_feat, params.hash_seed)
            for t, row in zip(missing, X):
                text_cache[t] = row
        return np.stack([text_cache[t] for t in texts])

    vel_t = np.zeros_like(params.W_text)
    vel_i = np.zeros_like(params.W_item)
    for epoch in range(epochs):
        texts = [text_for(epoch, i) if text_for else items[i].caption for i in range(n)]
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            res = contrastive_from_features(params, text_features([texts[i] for i in idx]), X_item_all[idx])
            if log is not None:
                log.losses.append(res.loss_total)
            g = res.grad
            vel_t = momentum * vel_t + g.W_text
            vel_i = momentum * vel_i + g.W_item
            params = _apply(params, learning_rate * vel_t, learning_rate * vel_i)
    return params


# --------------------------------------------------------------------------
# retrieval


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    item_ids: tuple[str, ...]
    item_embeddings: np.ndarray
    params_version: str

    def __post_init__(self):
        emb = np.array(self.item_embeddings, dtype=np.float64)
        emb.flags.writeable = False
        object.__setattr__(self, "item_embeddings", emb)
        object.__setattr__(self, "item_ids", tuple(self.item_ids))


def build_index(params: EncoderParams, corpus: Sequence[CorpusItem]) -> RetrievalIndex:
    if not corpus:
        raise ValueError("cannot index an empty corpus")
    return RetrievalIndex(tuple(it.id for it in corpus), encode_items(params, corpus), params.fingerprint())


def rank_order(scores: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Column order for each row of ``scores``: descending score, ties by ascending id."""
    scores = np.atleast_2d(scores)
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return np.stack([np.lexsort((id_rank, -row)) for row in scores])


def top_k(index: RetrievalIndex, query_embedding: np.ndarray, k: int,
          params: EncoderParams | None = None) -> list[tuple[str, float]]:
    """Exact top-k by dot product.

    Passing the ``params`` the query was encoded with enables the staleness
    check against the parameters the index was built from.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if params is not None and params.fingerprint() != index.params_version:
        raise StaleIndex(f"index built for params {index.params_version}, query uses {params.fingerprint()}")
    scores = index.item_embeddings @ np.asarray(query_embedding, dtype=np.float64)
    order = rank_order(scores, index.item_ids)[0][:k]
    return [(index.item_ids[j], float(scores[j])) for j in order]


def recall_at_h(rankings: Sequence[Sequence[str]], truths: Sequence[Iterable[str]], h: int) -> float:
    if len(rankings) != len(truths):
        raise ValueError("rankings and truths must have equal length")
    if h < 1:
        raise ValueError("h must be >= 1")
    if not rankings:
        return 0.0
    hits = sum(1 for ranked, truth in zip(rankings, truths) if set(ranked[:h]) & set(truth))
    return hits / len(rankings)


# --------------------------------------------------------------------------
# checkpoints


def dumps_params(params: EncoderParams) -> bytes:
    header = {
        "format": ENCODER_FORMAT,
        "schema_version": ENCODER_SCHEMA_VERSION,
        "d_feat": params.d_feat,
        "d_emb": params.d_emb,
        "tau": params.tau,
        "hash_seed": params.hash_seed,
    }
    return (json.dumps(header).encode("utf-8") + b"\n"
            + params.W_text.astype("<f8").tobytes(order="C")
            + params.W_item.astype("<f8").tobytes(order="C"))


def loads_params(blob: bytes) -> EncoderParams:
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise CheckpointError("missing checkpoint header")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if header.get("format") != ENCODER_FORMAT or header.get("schema_version") != ENCODER_SCHEMA_VERSION:
        raise CheckpointError("not an evdrank-encoder checkpoint")
    d_feat, d_emb = int(header["d_feat"]), int(header["d_emb"])
    size = d_feat * d_emb
    if len(body) != 2 * size * 8:
        raise CheckpointError(f"expected {2 * size * 8} payload bytes, found {len(body)}")
    mats = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return EncoderParams(mats[:size].reshape(d_feat, d_emb), mats[size:].reshape(d_feat, d_emb),
                         float(header["tau"]), int(header["hash_seed"]))


def save_params(params: EncoderParams, path: str | os.PathLike) -> None:
    atomic_write(path, dumps_params(params))


def load_params(path: str | os.PathLike) -> EncoderParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return loads_params(blob)
