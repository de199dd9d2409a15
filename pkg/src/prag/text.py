"""Tokenization and sentence segmentation shared by every module."""
from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_SENT_RE = re.compile(r"(?<=[.!?])\s+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    data = resources.files("prag").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(w.strip() for w in data.splitlines() if w.strip())


def load_stopwords(path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip())


def content_tokens(text: str, stopwords: frozenset[str] | None = None) -> list[str]:
    """Tokens used for tf-idf: stopwords and 1-character tokens removed."""
    stop = default_stopwords() if stopwords is None else stopwords
    return [t for t in tokenize(text) if len(t) >= 2 and t not in stop]


def split_sentences(text: str) -> list[str]:
    """Split on ``.``, ``!`` or ``?`` followed by whitespace.

    Returned pieces are exact substrings of ``text`` (after stripping), so
    callers can rely on verbatim grounding.
    """
    return [s.strip() for s in _SENT_RE.split(text.strip()) if s.strip()]


def contains_phrase(tokens: list[str], phrase: list[str]) -> bool:
    """True if ``phrase`` occurs as a contiguous run inside ``tokens``."""
    n = len(phrase)
    if n == 0:
        return False
    return any(tokens[i:i + n] == phrase for i in range(len(tokens) - n + 1))
