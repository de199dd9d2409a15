"""End-to-end explanation for one (user, item) pair."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import TextIO

from ..corpus import Corpus, CorpusStats
from ..encoder import EmbeddingStore
from ..retrieval import MarginalizeConfig, retrieve
from ..retriever.model import NoEvidenceError, RetrieverModel, forward_query, predict_rating
from ..rng import substream
from .decode import (DEFAULT_BEAM, DEFAULT_CONTEXT_TOKENS, build_context, constrained_decode,
                     extractive_select)
from .keywords import (DEFAULT_KEYWORDS, HTTPKeywordEstimator, KeywordEstimator,
                       NearestReviewEstimator, estimate_keywords)
from .reader import ReaderModel, StubCopyReader, select_prompt

_logger = logging.getLogger(__name__)

READERS = ("stub", "extractive", "http")
ESTIMATORS = ("nearest", "http")


@dataclass
class ExplainConfig:
    k: int = 5                        # evidence reviews
    scope: str = "item"
    marginalize: bool = True
    axis: str | None = None
    batch_size: int = 32
    keywords: int = DEFAULT_KEYWORDS
    query_only: bool = False
    estimator: str = "nearest"
    estimator_url: str | None = None
    reader: str = "stub"
    reader_url: str | None = None
    reader_vocabulary: list[str] | None = None
    beam_width: int = DEFAULT_BEAM
    context_tokens: int = DEFAULT_CONTEXT_TOKENS
    seed: int = 0

    def __post_init__(self):
        if self.reader not in READERS:
            raise ValueError(f"reader must be one of {READERS}, got {self.reader!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.k < 1 or self.keywords < 1 or self.beam_width < 1 or self.context_tokens < 1:
            raise ValueError("k, keywords, beam_width and context_tokens must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExplainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown explain config keys: {sorted(unknown)}")
        return cls(**data)

    def marginalize_config(self) -> MarginalizeConfig:
        return MarginalizeConfig(self.marginalize, self.axis, self.batch_size, self.seed)


@dataclass
class Explanation:
    user_id: str
    item_id: str
    text: str
    polarity: str
    prompt: str
    keywords: list[str]
    evidence: list[int]
    predicted_rating: float
    adjustment: float
    reader: str
    # None, "extractive" (keyword hit) or "extractive-no-hit"
    fallback: str | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def make_reader(cfg: ExplainConfig) -> ReaderModel | None:
    if cfg.reader == "stub":
        return StubCopyReader()
    if cfg.reader == "http":
        from .reader import HTTPReader
        return HTTPReader(cfg.reader_vocabulary or [], cfg.reader_url)
    return None


class Explainer:
    """Holds the pieces shared across many pairs (estimator, reader)."""

    def __init__(self, model: RetrieverModel, corpus: Corpus, store: EmbeddingStore,
                 stats: CorpusStats, config: ExplainConfig | None = None,
                 estimator: KeywordEstimator | None = None,
                 reader: ReaderModel | None = None):
        self.model, self.corpus, self.store, self.stats = model, corpus, store, stats
        self.config = config or ExplainConfig()
        self.baseline = NearestReviewEstimator(corpus, store, stats, self.config.keywords)
        if estimator is None and self.config.estimator == "http":
            estimator = HTTPKeywordEstimator(self.config.estimator_url, self.config.keywords)
        self.estimator = estimator or self.baseline
        self.reader = reader if reader is not None else make_reader(self.config)

    def __call__(self, user_id: str, item_id: str) -> Explanation:
        cfg = self.config
        q = forward_query(self.model, self.corpus, self.store, user_id, item_id)
        r_hat, adj = predict_rating(q, user_id, item_id, self.model)
        result = retrieve(self.model, self.corpus, self.store, user_id, item_id, cfg.k,
                          cfg.scope, cfg.marginalize_config(), query=q.values)
        if not result.evidence:
            raise NoEvidenceError(user_id, item_id)
        warnings = list(result.warnings)
        ids = result.review_ids
        keywords = estimate_keywords(self.estimator, q.values, ids, self.store, cfg.query_only,
                                     fallback=self.baseline, warnings=warnings)
        prompt = select_prompt(adj)
        polarity = "negative" if adj < 0 else "positive"
        texts = [self.corpus.record(r).text for r in ids]
        text, fallback, reader_name = None, None, "extractive"
        if self.reader is not None and keywords:
            try:
                text = constrained_decode(self.reader, prompt, build_context(texts,
                                          cfg.context_tokens), keywords, cfg.beam_width)
                reader_name = self.reader.name
            except Exception as exc:
                msg = f"constrained decoding failed ({exc}); used extractive reader"
                _logger.info(msg)
                warnings.append(msg)
        if not text:
            text, hit = extractive_select(texts, keywords)
            if not hit:
                fallback = "extractive-no-hit"
            elif self.reader is not None:
                fallback = "extractive"
        return Explanation(user_id, item_id, text, polarity, prompt, keywords, ids,
                           float(r_hat), float(adj), reader_name, fallback, warnings)


def explain(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore, stats: CorpusStats,
            user_id: str, item_id: str, config: ExplainConfig | None = None) -> Explanation:
    return Explainer(model, corpus, store, stats, config)(user_id, item_id)


def sample_test_pairs(corpus: Corpus, n: int, seed: int) -> list[tuple[str, str]]:
    pairs = sorted({(r.user_id, r.item_id) for r in corpus.split_records("test")})
    if n >= len(pairs):
        return pairs
    picks = substream(seed, "export").choice(len(pairs), size=n, replace=False)
    return [pairs[p] for p in sorted(picks)]


def export_finetune_set(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore,
                        stats: CorpusStats, n_samples: int, seed: int, stream: TextIO,
                        config: ExplainConfig | None = None) -> tuple[int, int]:
    """Write rows for human rephrasing; returns ``(written, skipped)``.

    Each row is ``{question, context, keywords, constrained_output,
    rephrased: null}``; annotators fill ``rephrased`` offline.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = config or ExplainConfig(seed=seed)
    explainer = Explainer(model, corpus, store, stats, cfg)
    written = skipped = 0
    for user, item in sample_test_pairs(corpus, n_samples, seed):
        try:
            ex = explainer(user, item)
        except Exception as exc:
            _logger.info("export: skipping (%s, %s): %s", user, item, exc)
            skipped += 1
            continue
        if ex.fallback == "extractive-no-hit":
            skipped += 1
            continue
        context = build_context([corpus.record(r).text for r in ex.evidence], cfg.context_tokens)
        row = {"question": ex.prompt, "context": context, "keywords": ex.keywords,
               "constrained_output": ex.text, "rephrased": None}
        stream.write(json.dumps(row, sort_keys=True) + "\n")
        written += 1
    return written, skipped
