"""Keyword-constrained decoding and the extractive fallback reader."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..text import contains_phrase, split_sentences, tokenize
from .reader import EOS, ReaderError, ReaderModel

DEFAULT_BEAM = 4
DEFAULT_CONTEXT_TOKENS = 256


class ConstraintError(ReaderError):
    """No keyword can be produced by the reader; callers fall back to extraction."""


@dataclass(frozen=True)
class _Hyp:
    tokens: tuple[str, ...]
    total: float
    n_scored: int
    covered: frozenset[int]
    pending: tuple[str, ...] = ()

    @property
    def mean(self) -> float:
        return self.total / max(self.n_scored, 1)


def build_context(evidence_texts: Sequence[str], budget: int = DEFAULT_CONTEXT_TOKENS) -> str:
    """Concatenate evidence in rank order, keeping whole reviews within ``budget`` tokens.

    The first review is always kept, however long.
    """
    kept, used = [], 0
    for text in evidence_texts:
        n = len(tokenize(text))
        if kept and used + n > budget:
            break
        kept.append(text.strip())
        used += n
    return " ".join(kept)


def _usable_phrases(reader: ReaderModel, context: str, keywords: Sequence[str]):
    vocab = set(reader.vocabulary_for(context))
    phrases = []
    for kw in keywords:
        toks = tuple(tokenize(kw))
        if toks and all(t in vocab for t in toks):
            phrases.append(toks)
    return phrases


def _extend(h: _Hyp, token: str, score: float, phrases, pending=()) -> _Hyp:
    tokens = h.tokens + (token,)
    covered = frozenset(j for j, p in enumerate(phrases) if contains_phrase(list(tokens), list(p)))
    return _Hyp(tokens, h.total + score, h.n_scored + 1, covered, pending)


def constrained_decode(reader: ReaderModel, question: str, context: str,
                       keywords: Sequence[str], beam_width: int = DEFAULT_BEAM,
                       max_length: int | None = None) -> str:
    """Grid beam search whose output contains at least one keyword.

    Hypotheses live in banks keyed by how many keywords they already contain;
    each bank keeps ``beam_width`` entries per step.  A hypothesis may extend
    with the reader's best tokens or start an uncovered keyword, which is then
    emitted to completion.  Among finished hypotheses the one covering more
    keywords wins, then the higher mean token score.
    """
    if not keywords:
        raise ValueError("keywords must be non-empty")
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    phrases = _usable_phrases(reader, context, keywords)
    if not phrases:
        raise ConstraintError(f"no keyword of {list(keywords)} is in the reader vocabulary")
    vocab = reader.vocabulary_for(context)
    index = {t: j for j, t in enumerate(vocab)}
    eos = index[EOS]
    limit = max_length or reader.max_length

    live = [_Hyp((), 0.0, 0, frozenset())]
    finished: list[_Hyp] = []
    for _ in range(limit):
        cands: dict[tuple[str, ...], _Hyp] = {}

        def offer(h: _Hyp) -> None:
            old = cands.get(h.tokens)
            if old is None or h.total > old.total:
                cands[h.tokens] = h

        for h in live:
            scores = np.asarray(reader.score_next(context, question, list(h.tokens)), dtype=float)
            if scores.shape != (len(vocab),) or not np.all(np.isfinite(scores)):
                raise ReaderError(f"reader {reader.name} returned invalid scores")
            if h.pending:
                tok = h.pending[0]
                offer(_extend(h, tok, scores[index[tok]], phrases, h.pending[1:]))
                continue
            if h.covered and h.tokens:
                finished.append(_Hyp(h.tokens, h.total + scores[eos], h.n_scored + 1, h.covered))
            order = np.lexsort((np.arange(len(vocab)), -scores))
            taken = 0
            for j in order:
                if j == eos:
                    continue
                offer(_extend(h, vocab[j], scores[j], phrases))
                taken += 1
                if taken == beam_width:
                    break
            for p, phrase in enumerate(phrases):
                if p not in h.covered:
                    offer(_extend(h, phrase[0], scores[index[phrase[0]]], phrases, phrase[1:]))
        banks: dict[int, list[_Hyp]] = {}
        for h in cands.values():
            banks.setdefault(len(h.covered), []).append(h)
        live = []
        for c in sorted(banks):
            live.extend(sorted(banks[c], key=lambda h: (-h.total, h.tokens))[:beam_width])
        if not live:
            break
    finished.extend(h for h in live if h.covered and not h.pending)
    if not finished:
        raise ConstraintError("no hypothesis contained a keyword within the length limit")
    best = min(finished, key=lambda h: (-len(h.covered), -h.mean, h.tokens))
    return " ".join(best.tokens)


def extractive_select(evidence_texts: Sequence[str], keywords: Sequence[str]) -> tuple[str, bool]:
    """Best evidence sentence and whether it contains any keyword.

    Sentences rank by distinct keywords contained, then evidence rank, then
    position inside the review.  With no keyword hit anywhere the first
    sentence of the top-ranked evidence is returned.
    """
    if not evidence_texts:
        raise ValueError("extractive reading needs at least one evidence text")
    kw = {tuple(tokenize(k)) for k in keywords}
    kw.discard(())
    best, best_key = None, None
    for rank, text in enumerate(evidence_texts):
        for n, sent in enumerate(split_sentences(text)):
            toks = tokenize(sent)
            hits = sum(contains_phrase(toks, list(p)) for p in kw)
            key = (hits, -rank, -n)
            if best_key is None or key > best_key:
                best, best_key = sent, key
    if best is None or best_key[0] == 0:
        first = split_sentences(evidence_texts[0])
        return (first[0] if first else evidence_texts[0].strip()), False
    return best, True


def extractive_read(evidence_texts: Sequence[str], keywords: Sequence[str],
                    polarity: str | None = None) -> str:
    """Verbatim evidence sentence chosen by keyword coverage.

    ``polarity`` is accepted for interface parity with generative readers;
    the sentence score does not depend on it.
    """
    return extractive_select(evidence_texts, keywords)[0]
