"""Reader models score the next answer token given evidence, question and prefix."""
from __future__ import annotations

import json
import os
import urllib.request
from typing import Sequence

import numpy as np

from ..text import split_sentences, tokenize

EOS = "</s>"
POSITIVE_PROMPT = "what was great?"
NEGATIVE_PROMPT = "what was not good?"


def select_prompt(adjustment: float) -> str:
    """Question for the reader; a zero adjustment counts as positive."""
    return NEGATIVE_PROMPT if adjustment < 0 else POSITIVE_PROMPT


class ReaderError(RuntimeError):
    pass


class ReaderModel:
    """Interface: finite, deterministic next-token scores over a vocabulary.

    ``score_next`` returns one score per entry of ``vocabulary_for(context)``,
    in that order.  ``EOS`` must be part of the vocabulary.
    """

    name = "reader"
    max_length = 32
    concurrency_safe = True

    def vocabulary_for(self, context: str) -> tuple[str, ...]:
        raise NotImplementedError

    def score_next(self, context: str, question: str, prefix: Sequence[str]) -> np.ndarray:
        raise NotImplementedError


class StubCopyReader(ReaderModel):
    """Deterministic reader that prefers copying runs of the evidence.

    The vocabulary is the evidence's own tokens plus ``EOS``.  Stopping where
    a context sentence stops scores highest, continuing a run seen in the
    context comes next, and everything else is penalized by how late it first
    appears.
    """

    name = "stub-copy"

    def __init__(self, max_length: int = 24):
        self.max_length = max_length

    def vocabulary_for(self, context):
        return tuple(sorted(set(tokenize(context)))) + (EOS,)

    def _layout(self, context):
        toks, ends = [], set()
        for sent in split_sentences(context):
            toks.extend(tokenize(sent))
            if toks:
                ends.add(len(toks) - 1)
        return toks, ends

    def score_next(self, context, question, prefix):
        vocab = self.vocabulary_for(context)
        pos = {t: j for j, t in enumerate(vocab)}
        toks, ends = self._layout(context)
        first = {}
        for n, t in enumerate(toks):
            first.setdefault(t, n)
        scores = np.array([-4.0 - 0.01 * first.get(t, 0) for t in vocab])
        scores[pos[EOS]] = -3.0 if prefix else -50.0
        if not prefix:
            if toks:
                scores[pos[toks[0]]] = -0.5
            return scores
        last = prefix[-1]
        for n, t in enumerate(toks):
            if t != last:
                continue
            if n in ends:
                scores[pos[EOS]] = max(scores[pos[EOS]], 0.0)
            if n + 1 < len(toks):
                nxt = pos[toks[n + 1]]
                scores[nxt] = max(scores[nxt], -0.1 - 0.001 * n)
        return scores


class HTTPReader(ReaderModel):
    """Remote reader: POST ``{"context", "question", "prefix"}`` and receive
    ``{"scores": {token: score}}`` covering the configured vocabulary."""

    concurrency_safe = False

    def __init__(self, vocabulary: Sequence[str], url: str | None = None,
                 name: str = "http-reader", max_length: int = 32, timeout: float = 30.0):
        self.url = url or os.environ.get("PRAG_READER_URL")
        if not self.url:
            raise ReaderError("no reader URL configured (set PRAG_READER_URL)")
        vocab = tuple(dict.fromkeys(vocabulary))
        self.vocab = vocab if EOS in vocab else vocab + (EOS,)
        self.name, self.max_length, self.timeout = name, max_length, timeout

    def vocabulary_for(self, context):
        return self.vocab

    def score_next(self, context, question, prefix):
        body = json.dumps({"context": context, "question": question,
                           "prefix": list(prefix)}).encode("utf-8")
        req = urllib.request.Request(self.url, body, {"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                scores = json.loads(resp.read().decode("utf-8"))["scores"]
            out = np.array([float(scores[t]) for t in self.vocab])
        except Exception as exc:
            raise ReaderError(f"reader request failed: {exc}") from exc
        if not np.all(np.isfinite(out)):
            raise ReaderError("reader returned non-finite scores")
        return out
