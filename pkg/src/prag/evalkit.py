"""Automatic evaluation: factuality by entailment, diversity metrics, RMSE."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import urllib.request
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .corpus import Corpus
from .text import content_tokens, tokenize

_logger = logging.getLogger(__name__)

DEFAULT_ORDERS = (1, 2, 3)
PREMISES = ("explanation", "review")


def _ngrams(tokens: list[str], n: int):
    return [tuple(tokens[j:j + n]) for j in range(len(tokens) - n + 1)]


def distinct_n(texts: Sequence[str], n: int) -> float:
    """Distinct n-grams over total n-grams, pooled across ``texts``."""
    if not texts:
        raise ValueError("texts must be non-empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    grams: Counter = Counter()
    for t in texts:
        grams.update(_ngrams(tokenize(t), n))
    total = sum(grams.values())
    return len(grams) / total if total else 0.0


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def usr(texts: Sequence[str]) -> float:
    """Share of unique texts after lowercasing and collapsing whitespace."""
    if not texts:
        raise ValueError("texts must be non-empty")
    return len({_normalize(t) for t in texts}) / len(texts)


def _entropy(counts: Iterable[int]) -> float:
    # fsum is correctly rounded, so the value does not depend on count order
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    return -math.fsum(c / total * math.log2(c / total) for c in counts) if total else 0.0


def entr(texts: Sequence[str], n_orders: Iterable[int] = DEFAULT_ORDERS) -> float:
    """Geometric mean over orders of the base-2 n-gram entropy.

    Orders without any n-gram are skipped; a zero entropy at an included
    order makes the whole value zero.
    """
    if not texts:
        raise ValueError("texts must be non-empty")
    token_lists = [tokenize(t) for t in texts]
    values = []
    for n in sorted(set(n_orders)):
        if n < 1:
            raise ValueError("n-gram orders must be >= 1")
        grams: Counter = Counter()
        for toks in token_lists:
            grams.update(_ngrams(toks, n))
        if grams:
            values.append(_entropy(grams.values()))
    if not values or min(values) == 0.0:
        return 0.0
    return math.prod(values) ** (1.0 / len(values))


def rmse(predictions: Sequence[float], golds: Sequence[float]) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(golds)} golds")
    if not predictions:
        raise ValueError("rmse needs at least one value")
    return math.sqrt(sum((float(p) - float(g)) ** 2 for p, g in zip(predictions, golds))
                     / len(predictions))


class ScorerError(RuntimeError):
    pass


class NLIScorer:
    """Interface: entailment probability of ``hypothesis`` given ``premise``."""

    name = "nli"
    concurrency_safe = True

    def __init__(self, threshold: float = 0.5):
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        self.threshold = threshold

    def score(self, premise: str, hypothesis: str) -> float:
        raise NotImplementedError


class OverlapNLIScorer(NLIScorer):
    """Test stand-in: content-token recall of the hypothesis inside the premise,
    rounded up to 1 when it reaches ``saturation``.  Not an entailment model."""

    name = "overlap-proxy"

    def __init__(self, threshold: float = 0.5, saturation: float = 0.8):
        super().__init__(threshold)
        self.saturation = saturation

    def score(self, premise, hypothesis):
        hyp = set(content_tokens(hypothesis))
        if not hyp:
            return 0.0
        recall = len(hyp & set(content_tokens(premise))) / len(hyp)
        return 1.0 if recall >= self.saturation else recall


class HTTPNLIScorer(NLIScorer):
    """POST ``{"premise", "hypothesis"}`` -> ``{"probability": p}``."""

    concurrency_safe = False

    def __init__(self, url: str | None = None, threshold: float = 0.5, name: str = "http-nli",
                 timeout: float = 30.0):
        super().__init__(threshold)
        self.url = url or os.environ.get("PRAG_NLI_URL")
        if not self.url:
            raise ScorerError("no NLI scorer URL configured (set PRAG_NLI_URL)")
        self.name, self.timeout = name, timeout

    def score(self, premise, hypothesis):
        body = json.dumps({"premise": premise, "hypothesis": hypothesis}).encode("utf-8")
        req = urllib.request.Request(self.url, body, {"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                p = float(json.loads(resp.read().decode("utf-8"))["probability"])
        except Exception as exc:
            raise ScorerError(f"NLI request failed: {exc}") from exc
        if not 0.0 <= p <= 1.0:
            raise ScorerError(f"NLI probability {p} outside [0, 1]")
        return p


@dataclass
class EntailResult:
    percentage: float
    factual: int
    evaluated: int
    unevaluated: int


def entail_ratio(explanations: Sequence[tuple[str, str]], corpus: Corpus, scorer: NLIScorer,
                 premise: str = "explanation", threshold: float | None = None) -> EntailResult:
    """Percentage of explanations entailing (or entailed by) some train review of their item.

    ``premise="explanation"`` scores P(review | explanation); ``"review"``
    swaps the direction.  Scorer failures exclude that explanation from the
    denominator.
    """
    if premise not in PREMISES:
        raise ValueError(f"premise must be one of {PREMISES}")
    cut = scorer.threshold if threshold is None else threshold
    factual = evaluated = failed = 0
    for item_id, text in explanations:
        ids = corpus.train_item_index.get(item_id)
        if not ids:
            raise ValueError(f"item {item_id!r} has no train review")
        try:
            best = 0.0
            for rid in ids:
                review = corpus.record(rid).text
                p = scorer.score(text, review) if premise == "explanation" \
                    else scorer.score(review, text)
                best = max(best, p)
                if best >= cut:
                    break
        except Exception as exc:
            _logger.warning("scorer %s failed on item %s: %s", scorer.name, item_id, exc)
            failed += 1
            continue
        evaluated += 1
        factual += best >= cut
    pct = 100.0 * factual / evaluated if evaluated else 0.0
    return EntailResult(pct, factual, evaluated, failed)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    premise: str = "explanation"
    n_orders: tuple[int, ...] = DEFAULT_ORDERS
    generic_usr: float = 0.5     # USR at or below this flags a generic run

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        data = dict(data)
        if "n_orders" in data:
            data["n_orders"] = tuple(data["n_orders"])
        return cls(**data)


@dataclass
class EvalReport:
    n_samples: int
    entail_pct: float | None = None
    d1: float | None = None
    d2: float | None = None
    entr: float | None = None
    usr: float | None = None
    rmse: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate_run(explanations: Sequence[dict], predictions: Sequence[tuple[str, str, float]],
                 corpus: Corpus, scorer: NLIScorer | None,
                 config: EvalConfig | None = None) -> EvalReport:
    """Metrics for a run.  ``explanations`` hold ``user``, ``item`` and ``text``;
    ``predictions`` are ``(user, item, r_hat)`` scored against test ratings."""
    cfg = config or EvalConfig()
    meta: dict = {"warnings": []}
    report = EvalReport(n_samples=len(explanations), metadata=meta)
    if explanations:
        texts = [e["text"] for e in explanations]
        try:
            report.d1 = distinct_n(texts, 1)
            report.d2 = distinct_n(texts, 2)
            report.entr = entr(texts, cfg.n_orders)
            report.usr = usr(texts)
        except ValueError as exc:
            raise ValueError(f"diversity metrics: {exc}") from exc
        if len(texts) > 1 and report.usr <= cfg.generic_usr:
            meta["warnings"].append("generic output")
        if scorer is not None:
            try:
                res = entail_ratio([(e["item"], e["text"]) for e in explanations], corpus,
                                   scorer, cfg.premise, cfg.threshold)
            except ValueError as exc:
                raise ValueError(f"entail: {exc}") from exc
            report.entail_pct = res.percentage
            meta.update(scorer=scorer.name, threshold=cfg.threshold, premise=cfg.premise,
                        unevaluated=res.unevaluated)
    if predictions:
        gold = {(r.user_id, r.item_id): r.rating for r in corpus.split_records("test")}
        missing = [(u, i) for u, i, _ in predictions if (u, i) not in gold]
        if missing:
            raise ValueError(f"rmse: {len(missing)} predictions have no test rating, "
                             f"first {missing[0]}")
        report.rmse = rmse([p for _, _, p in predictions], [gold[(u, i)] for u, i, _ in predictions])
    meta["mauve"] = None
    return report


def load_explanations(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            for key in ("user", "item", "text"):
                if key not in row:
                    raise ValueError(f"{path}:{n}: missing key {key!r}")
            rows.append(row)
    return rows


def write_predictions(path, predictions: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "r_hat"])
        for u, i, r in predictions:
            w.writerow([u, i, repr(float(r))])


def load_predictions(path) -> list[tuple[str, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(row["user"], row["item"], float(row["r_hat"])) for row in csv.DictReader(fh)]
