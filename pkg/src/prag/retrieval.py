"""Inference-time evidence selection and cross-retriever agreement."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus, related_reviews
from .encoder import EmbeddingStore, cosine_topk
from .retriever.model import (LatentQuery, NoEvidenceError, RetrieverModel, build_batch, forward,
                              forward_query)
from .rng import substream

_logger = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_BATCH = 32


@dataclass
class MarginalizeConfig:
    enabled: bool = True
    axis: str | None = None   # None -> "item" if the model ties Q to items, else "user"
    size: int = DEFAULT_BATCH
    seed: int = 0

    def resolve_axis(self, model: RetrieverModel) -> str:
        axis = self.axis or model.config.tie_axis
        if axis not in ("user", "item"):
            raise ValueError(f"marginalization axis must be 'user' or 'item', got {axis!r}")
        return axis


@dataclass
class RetrievalResult:
    query_user: str
    query_item: str
    evidence: list[tuple[int, float]]
    marginalized: bool
    batch_size: int = 0
    axis: str | None = None
    scope: str = "item"
    warnings: list[str] = field(default_factory=list)

    @property
    def review_ids(self) -> list[int]:
        return [rid for rid, _ in self.evidence]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evidence"] = [{"review_id": rid, "cosine": score} for rid, score in self.evidence]
        return d


def marginalize(Q, batch: Sequence) -> np.ndarray:
    """Subtract the mean latent query of ``batch`` from ``Q``."""
    if len(batch) == 0:
        raise ValueError("marginalization batch is empty")
    q = np.asarray(Q.values if isinstance(Q, LatentQuery) else Q, dtype=np.float64)
    rows = np.stack([np.asarray(b.values if isinstance(b, LatentQuery) else b, dtype=np.float64)
                     for b in batch])
    if rows.shape[1] != q.shape[0]:
        raise ValueError("batch queries and Q differ in length")
    return q - rows.mean(axis=0)


def batch_queries(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore,
                  pairs: Sequence[tuple[str, str]]) -> list[LatentQuery]:
    """Latent queries for many pairs in one padded forward pass."""
    if not pairs:
        return []
    examples = [(u, i, *related_reviews(corpus, u, i, None, model.config.max_history))
                for u, i in pairs]
    Q, _, _, _ = forward(model, build_batch(model, store, examples), keep_cache=False)
    return [LatentQuery(Q[n], u, i) for n, (u, i) in enumerate(pairs)]


def _has_evidence(corpus: Corpus, user_id: str, item_id: str) -> bool:
    return bool(corpus.train_user_index.get(user_id) or corpus.train_item_index.get(item_id))


def sample_marginalization_batch(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore,
                                 anchor: tuple[str, str], axis: str, size: int = DEFAULT_BATCH,
                                 seed: int = 0) -> list[LatentQuery]:
    """Latent queries for other users of the anchor item (axis="user") or other
    items of the anchor user (axis="item"), sampled uniformly with a fixed seed."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    user, item = anchor
    if axis == "user":
        pool = [u for u in corpus.train_users if u != user and _has_evidence(corpus, u, item)]
        make = lambda e: (e, item)
    elif axis == "item":
        pool = [i for i in corpus.train_items if i != item and _has_evidence(corpus, user, i)]
        make = lambda e: (user, e)
    else:
        raise ValueError(f"axis must be 'user' or 'item', got {axis!r}")
    if not pool:
        raise NoEvidenceError(*anchor)
    rng = substream(seed, "sampling")
    picks = rng.choice(len(pool), size=size, replace=len(pool) < size)
    return batch_queries(model, corpus, store, [make(pool[p]) for p in picks])


def candidate_scope(corpus: Corpus, item_id: str, scope: str) -> tuple[int, ...]:
    if scope == "item":
        return corpus.train_item_index.get(item_id, ())
    if scope == "global":
        return corpus.train_ids
    raise ValueError(f"scope must be 'item' or 'global', got {scope!r}")


def retrieve(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore, user_id: str,
             item_id: str, k: int = DEFAULT_K, scope: str = "item",
             marginalize_cfg: MarginalizeConfig | None = None,
             query: np.ndarray | None = None) -> RetrievalResult:
    """Rank train reviews in ``scope`` by cosine with the (marginalized) latent query."""
    cfg = marginalize_cfg or MarginalizeConfig()
    q = forward_query(model, corpus, store, user_id, item_id).values if query is None \
        else np.asarray(query)
    q = np.asarray(q, dtype=np.float64)
    axis, used = None, 0
    if cfg.enabled:
        axis = cfg.resolve_axis(model)
        batch = sample_marginalization_batch(model, corpus, store, (user_id, item_id), axis,
                                             cfg.size, cfg.seed)
        q = marginalize(q, batch)
        used = len(batch)
    cands = candidate_scope(corpus, item_id, scope)
    result = RetrievalResult(user_id, item_id, [], cfg.enabled, used, axis, scope)
    if not cands:
        result.warnings.append("empty candidate scope")
        return result
    result.evidence = cosine_topk(store, q, cands, k)
    return result


@dataclass
class AgreementReport:
    mean: float
    random_baseline: float
    n_pairs: int
    skipped: int
    k: int = DEFAULT_K

    def to_dict(self) -> dict:
        return asdict(self)


def agreement_at_k(model_a: RetrieverModel, model_b: RetrieverModel, corpus: Corpus,
                   store: EmbeddingStore, pairs: Sequence[tuple[str, str]], k: int = DEFAULT_K,
                   seed: int = 0, scope: str = "item",
                   marginalize_a: MarginalizeConfig | None = None,
                   marginalize_b: MarginalizeConfig | None = None) -> AgreementReport:
    """Mean |top-k(a) ∩ top-k(b)| over pairs, with a seeded random-subset baseline."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    if model_a.dim != model_b.dim:
        raise ValueError("models disagree on embedding dimension")
    ma = marginalize_a or MarginalizeConfig(seed=seed)
    mb = marginalize_b or MarginalizeConfig(seed=seed)
    rng = substream(seed, "agreement")
    overlaps, randoms = [], []
    skipped = 0
    for user, item in pairs:
        try:
            ra = retrieve(model_a, corpus, store, user, item, k, scope, ma)
            rb = retrieve(model_b, corpus, store, user, item, k, scope, mb)
        except NoEvidenceError:
            skipped += 1
            continue
        cands = candidate_scope(corpus, item, scope)
        if not cands:
            skipped += 1
            continue
        overlaps.append(len(set(ra.review_ids) & set(rb.review_ids)))
        kk = min(k, len(cands))
        s1 = set(rng.choice(len(cands), size=kk, replace=False).tolist())
        s2 = set(rng.choice(len(cands), size=kk, replace=False).tolist())
        randoms.append(len(s1 & s2))
    if skipped:
        _logger.info("agreement: skipped %d pairs without evidence", skipped)
    n = len(overlaps)
    return AgreementReport(float(np.mean(overlaps)) if n else 0.0,
                           float(np.mean(randoms)) if n else 0.0, n, skipped, k)
