"""Embedding-to-keyword estimation."""
from __future__ import annotations

import json
import logging
import os
import urllib.request
from typing import Sequence

import numpy as np

from .. import _kernels
from ..corpus import Corpus, CorpusStats, top_k_tfidf
from ..encoder import EmbeddingStore

_logger = logging.getLogger(__name__)

DEFAULT_KEYWORDS = 5


class EstimatorError(RuntimeError):
    pass


def build_keyword_training_pairs(corpus: Corpus, store: EmbeddingStore, stats: CorpusStats,
                                 k: int = DEFAULT_KEYWORDS):
    """``(review_ids, embeddings, keyword_sets, dropped)`` for every train review.

    Reviews whose text yields no tf-idf keyword (e.g. only stopwords) are
    dropped and counted.
    """
    ids, keywords = [], []
    dropped = 0
    for rec in corpus.records:
        if rec.split != "train":
            continue
        kw = top_k_tfidf(rec.text, stats, k)
        if not kw:
            dropped += 1
            continue
        ids.append(rec.review_id)
        keywords.append(kw)
    vectors = store.rows(ids) if ids else np.zeros((0, store.dim), dtype=np.float32)
    return ids, vectors, keywords, dropped


def _clean(keywords: Sequence[str], k: int) -> list[str]:
    out: list[str] = []
    for w in keywords:
        w = str(w).strip().lower()
        if w and w not in out:
            out.append(w)
    return out[:k]


class KeywordEstimator:
    """Maps a vector in review-embedding space to at most ``k`` keywords."""

    name = "estimator"

    def __init__(self, k: int = DEFAULT_KEYWORDS):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k

    def predict(self, vector: np.ndarray) -> list[str]:
        return _clean(self._predict(np.asarray(vector, dtype=np.float64)), self.k)

    def _predict(self, vector: np.ndarray) -> list[str]:
        raise NotImplementedError


class NearestReviewEstimator(KeywordEstimator):
    """Keywords of the train review whose embedding is closest by cosine.

    Equal cosines resolve to the lower review id.
    """

    name = "nearest-review"

    def __init__(self, corpus: Corpus, store: EmbeddingStore, stats: CorpusStats,
                 k: int = DEFAULT_KEYWORDS):
        super().__init__(k)
        self.ids, self.vectors, self.keywords, self.dropped = \
            build_keyword_training_pairs(corpus, store, stats, k)
        if not self.ids:
            raise EstimatorError("no train review has any tf-idf keyword")

    def nearest(self, vector: np.ndarray) -> int:
        scores = _kernels.cosine_scores(self.vectors, np.asarray(vector, dtype=np.float64))
        # ids ascend, so argmax keeps the lowest id among exact ties
        return int(np.argmax(scores))

    def _predict(self, vector):
        return self.keywords[self.nearest(vector)]


class HTTPKeywordEstimator(KeywordEstimator):
    """Remote estimator: POST ``{"vector": [...], "k": k}`` -> ``{"keywords": [...]}``."""

    def __init__(self, url: str | None = None, k: int = DEFAULT_KEYWORDS,
                 name: str = "http-estimator", timeout: float = 30.0):
        super().__init__(k)
        self.url = url or os.environ.get("PRAG_ESTIMATOR_URL")
        if not self.url:
            raise EstimatorError("no estimator URL configured (set PRAG_ESTIMATOR_URL)")
        self.name = name
        self.timeout = timeout

    def _predict(self, vector):
        body = json.dumps({"vector": vector.tolist(), "k": self.k}).encode("utf-8")
        req = urllib.request.Request(self.url, body, {"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            return list(payload["keywords"])
        except Exception as exc:
            raise EstimatorError(f"estimator request failed: {exc}") from exc


def estimator_input(query_vector: np.ndarray, evidence_ids: Sequence[int],
                    store: EmbeddingStore, query_only: bool = False) -> np.ndarray:
    """Mean of the query and the retrieved review vectors (or the query alone)."""
    q = np.asarray(query_vector, dtype=np.float64)
    if query_only:
        return q
    if not evidence_ids:
        raise ValueError("no retrieved evidence; use query-only mode")
    rows = store.rows(list(evidence_ids)).astype(np.float64)
    return np.vstack([q[None, :], rows]).mean(axis=0)


def estimate_keywords(estimator: KeywordEstimator, query_vector: np.ndarray,
                      evidence_ids: Sequence[int], store: EmbeddingStore,
                      query_only: bool = False, fallback: KeywordEstimator | None = None,
                      warnings: list[str] | None = None) -> list[str]:
    vec = estimator_input(query_vector, evidence_ids, store, query_only)
    try:
        return estimator.predict(vec)
    except Exception as exc:
        if fallback is None or fallback is estimator:
            raise
        msg = f"keyword estimator {estimator.name} failed ({exc}); used {fallback.name}"
        _logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return fallback.predict(vec)
