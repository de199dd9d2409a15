"""Review corpus: ingestion, splits, tf-idf statistics and review histories."""
from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .rng import substream
from .text import content_tokens

_logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_MAX_HISTORY = 20
REQUIRED_KEYS = ("user", "item", "rating", "text")


class CorpusError(ValueError):
    """Raised for malformed input or a violated corpus invariant."""


@dataclass(frozen=True)
class ReviewRecord:
    review_id: int
    user_id: str
    item_id: str
    rating: float
    text: str
    split: str = "train"


@dataclass(frozen=True)
class CorpusStats:
    vocab: dict[str, int]
    n_docs: int
    idf: dict[str, float]
    stopwords: frozenset[str] | None = None

    def idf_of(self, token: str) -> float:
        v = self.idf.get(token)
        if v is None:
            return math.log(1.0 + self.n_docs) + 1.0
        return v


class Corpus:
    """Immutable ordered collection of reviews with user and item indices."""

    def __init__(self, records: Iterable[ReviewRecord], rating_range: tuple[float, float],
                 meta: dict | None = None):
        self.records: tuple[ReviewRecord, ...] = tuple(records)
        self.rating_range = (float(rating_range[0]), float(rating_range[1]))
        self.meta = dict(meta or {})
        user_index: dict[str, list[int]] = {}
        item_index: dict[str, list[int]] = {}
        seen_ids: set[int] = set()
        seen_pairs: set[tuple[str, str, str]] = set()
        lo, hi = self.rating_range
        for pos, r in enumerate(self.records):
            if r.review_id in seen_ids:
                raise CorpusError(f"duplicate review_id {r.review_id}")
            seen_ids.add(r.review_id)
            if r.split not in SPLITS:
                raise CorpusError(f"record {r.review_id}: unknown split {r.split!r}")
            if not lo <= r.rating <= hi:
                raise CorpusError(
                    f"record {r.review_id}: rating {r.rating} outside range [{lo}, {hi}]")
            key = (r.user_id, r.item_id, r.split)
            if key in seen_pairs:
                raise CorpusError(
                    f"duplicate user-item pair in split: ({r.user_id}, {r.item_id}) in {r.split}")
            seen_pairs.add(key)
            user_index.setdefault(r.user_id, []).append(r.review_id)
            item_index.setdefault(r.item_id, []).append(r.review_id)
        self.user_index = {k: tuple(v) for k, v in user_index.items()}
        self.item_index = {k: tuple(v) for k, v in item_index.items()}
        self._by_id = {r.review_id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.records == other.records and self.rating_range == other.rating_range

    def __repr__(self) -> str:
        counts = Counter(r.split for r in self.records)
        return (f"Corpus(n={len(self)}, train={counts['train']}, val={counts['val']}, "
                f"test={counts['test']})")

    def record(self, review_id: int) -> ReviewRecord:
        return self._by_id[review_id]

    def split_records(self, split: str) -> list[ReviewRecord]:
        return [r for r in self.records if r.split == split]

    @cached_property
    def train_user_index(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, list[int]] = {}
        for r in self.records:
            if r.split == "train":
                out.setdefault(r.user_id, []).append(r.review_id)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def train_item_index(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, list[int]] = {}
        for r in self.records:
            if r.split == "train":
                out.setdefault(r.item_id, []).append(r.review_id)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def train_users(self) -> list[str]:
        return sorted(self.train_user_index)

    @cached_property
    def train_items(self) -> list[str]:
        return sorted(self.train_item_index)

    @cached_property
    def train_ids(self) -> tuple[int, ...]:
        return tuple(r.review_id for r in self.records if r.split == "train")

    def train_mean_rating(self) -> float:
        ratings = [r.rating for r in self.records if r.split == "train"]
        if not ratings:
            raise CorpusError("empty train split")
        return math.fsum(ratings) / len(ratings)

    def check_test_items(self) -> None:
        train_items = self.train_item_index
        for r in self.records:
            if r.split != "train" and r.item_id not in train_items:
                raise CorpusError(
                    f"record {r.review_id}: {r.split} item {r.item_id!r} has no train record")


def _parse_line(lineno: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise CorpusError(f"line {lineno}: missing keys {', '.join(missing)}")
    return obj


def ingest_jsonl(stream: Iterable[str], rating_range: tuple[float, float] = (1.0, 5.0)) -> Corpus:
    """Build a corpus from JSON Lines with keys user, item, rating, text and optional split.

    Review ids are assigned 0..n-1 in input order.  Records with blank text are
    skipped and counted in ``corpus.meta["skipped_empty"]``.
    """
    lo, hi = float(rating_range[0]), float(rating_range[1])
    records: list[ReviewRecord] = []
    skipped = 0
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        obj = _parse_line(lineno, line)
        text = str(obj["text"])
        if not text.strip():
            skipped += 1
            continue
        try:
            rating = float(obj["rating"])
        except (TypeError, ValueError):
            raise CorpusError(f"line {lineno}: rating is not a number") from None
        user, item = str(obj["user"]), str(obj["item"])
        if not (lo <= rating <= hi) or not math.isfinite(rating):
            raise CorpusError(
                f"line {lineno}: record ({user}, {item}) rating {rating} outside [{lo}, {hi}]")
        split = obj.get("split") or "train"
        if split not in SPLITS:
            raise CorpusError(f"line {lineno}: unknown split {split!r}")
        records.append(ReviewRecord(len(records), user, item, rating, text, split))
    if skipped:
        _logger.warning("skipped %d records with empty text", skipped)
    corpus = Corpus(records, (lo, hi), meta={"skipped_empty": skipped})
    corpus.check_test_items()
    return corpus


def write_jsonl(corpus: Corpus, stream: TextIO) -> None:
    for r in corpus.records:
        stream.write(json.dumps({"user": r.user_id, "item": r.item_id, "rating": r.rating,
                                 "text": r.text, "split": r.split}, ensure_ascii=False))
        stream.write("\n")


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "records.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        write_jsonl(corpus, fh)
    meta = {"rating_range": list(corpus.rating_range), "n_records": len(corpus),
            **{k: v for k, v in sorted(corpus.meta.items())}}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", "utf-8")
    return d


def load_corpus(directory: str | os.PathLike) -> Corpus:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text("utf-8"))
    with open(d / "records.jsonl", encoding="utf-8") as fh:
        corpus = ingest_jsonl(fh, tuple(meta["rating_range"]))
    extra = {k: v for k, v in meta.items() if k not in ("rating_range", "n_records")}
    return Corpus(corpus.records, corpus.rating_range, meta={**extra, **corpus.meta})


def split_corpus(corpus: Corpus, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 seed: int = 0) -> Corpus:
    """Randomly relabel splits; val/test records whose item would lose all train
    records are forced back to train (counted in ``meta["forced_train"]``)."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0,
                                                                          abs_tol=1e-9):
        raise CorpusError(f"split ratios must be three non-negative numbers summing to 1: {ratios}")
    n = len(corpus)
    rng = substream(seed, "split")
    order = rng.permutation(n)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = max(n - n_val - n_test, 0)
    labels = ["train"] * n
    for rank, pos in enumerate(order):
        if rank >= n_train + n_val:
            labels[pos] = "test"
        elif rank >= n_train:
            labels[pos] = "val"
    train_items = Counter(corpus.records[p].item_id for p in range(n) if labels[p] == "train")
    forced = 0
    for pos in order:
        item = corpus.records[pos].item_id
        if labels[pos] != "train" and train_items[item] == 0:
            labels[pos] = "train"
            train_items[item] += 1
            forced += 1
    records = [ReviewRecord(r.review_id, r.user_id, r.item_id, r.rating, r.text, lab)
               for r, lab in zip(corpus.records, labels)]
    meta = {**corpus.meta, "forced_train": forced, "split_seed": seed,
            "split_ratios": list(ratios)}
    return Corpus(records, corpus.rating_range, meta=meta)


def compute_tfidf_stats(corpus: Corpus, stopwords: frozenset[str] | None = None) -> CorpusStats:
    df: Counter[str] = Counter()
    n_docs = 0
    for r in corpus.records:
        if r.split != "train":
            continue
        n_docs += 1
        df.update(set(content_tokens(r.text, stopwords)))
    if n_docs == 0:
        raise CorpusError("cannot compute tf-idf: empty train split")
    vocab = dict(sorted(df.items()))
    idf = {t: math.log((1.0 + n_docs) / (1.0 + c)) + 1.0 for t, c in vocab.items()}
    return CorpusStats(vocab=vocab, n_docs=n_docs, idf=idf, stopwords=stopwords)


def tfidf_scores(text: str, stats: CorpusStats) -> dict[str, float]:
    tf = Counter(content_tokens(text, stats.stopwords))
    return {t: c * stats.idf_of(t) for t, c in tf.items()}


def top_k_tfidf(text: str, stats: CorpusStats, k: int = 5) -> list[str]:
    """Return up to ``k`` tokens of ``text`` by descending tf-idf, ties lexicographic."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = tfidf_scores(text, stats)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:k]]


def related_reviews(corpus: Corpus, user_id: str, item_id: str,
                    exclude_review: int | None = None,
                    max_history: int = DEFAULT_MAX_HISTORY) -> tuple[list[int], list[int]]:
    """Train-split review ids written by the user and about the item.

    Each list keeps the ``max_history`` highest review ids, ascending.
    """
    def pick(ids: tuple[int, ...]) -> list[int]:
        kept = [i for i in ids if i != exclude_review]
        return kept[-max_history:] if max_history > 0 else []

    return (pick(corpus.train_user_index.get(user_id, ())),
            pick(corpus.train_item_index.get(item_id, ())))
