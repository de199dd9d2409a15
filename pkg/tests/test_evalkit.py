from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prag.corpus import Corpus, ReviewRecord
from prag.evalkit import (EvalConfig, NLIScorer, OverlapNLIScorer, distinct_n, entail_ratio,
                          entr, evaluate_run, load_explanations, load_predictions, rmse, usr,
                          write_predictions)

# twenty hand-built corpora: degenerate, repetitive, short, punctuated, mixed case
CORPORA = [
    ["a a a"],
    ["a b"],
    ["a b a b"],
    ["a b c d"],
    ["x", "x", "y"],
    ["the pool was great", "the pool was great"],
    ["The Pool", "the pool", "THE  POOL "],
    ["a", "b", "c", "d", "e"],
    ["one two three four five six"],
    ["spa spa spa", "spa"],
    ["good room", "bad room", "good view", "bad view"],
    ["hello, world! hello again.", "world again"],
    ["a b c", "c b a", "b c a"],
    ["z"],
    ["lorem ipsum dolor", "ipsum dolor sit", "dolor sit amet"],
    ["1 2 3 1 2 3", "3 2 1"],
    ["staff staff", "staff staff", "staff"],
    ["bed was comfy.", "Bed was comfy.", "bed was comfy"],
    ["quick brown fox", "lazy dog", "quick dog", "brown fox jumps"],
    ["ab ab ab ab ab ba"],
]


def brute_tokens(text):
    out, cur = [], ""
    for ch in text.lower():
        if ch.isalnum():
            cur += ch
        else:
            if cur:
                out.append(cur)
            cur = ""
    if cur:
        out.append(cur)
    return out


def brute_grams(texts, n):
    grams = []
    for t in texts:
        toks = brute_tokens(t)
        for j in range(len(toks) - n + 1):
            grams.append(tuple(toks[j:j + n]))
    return grams


def brute_distinct(texts, n):
    grams = brute_grams(texts, n)
    unique = []
    for g in grams:
        if g not in unique:
            unique.append(g)
    return len(unique) / len(grams) if grams else 0.0


def brute_usr(texts):
    seen = []
    for t in texts:
        norm = " ".join(t.lower().split())
        if norm not in seen:
            seen.append(norm)
    return len(seen) / len(texts)


def brute_entr(texts, orders=(1, 2, 3)):
    ents = []
    for n in sorted(orders):
        grams = brute_grams(texts, n)
        if not grams:
            continue
        unique = sorted(set(grams))
        terms = [grams.count(g) / len(grams) * math.log2(grams.count(g) / len(grams))
                 for g in unique]
        ents.append(-math.fsum(terms))
    if not ents or 0.0 in ents:
        return 0.0
    prod = 1.0
    for e in ents:
        prod *= e
    return prod ** (1.0 / len(ents))


def brute_rmse(p, g):
    acc = 0.0
    for a, b in zip(p, g):
        acc += (float(a) - float(b)) ** 2
    return math.sqrt(acc / len(p))


class TestWorkedValues:
    def test_distinct(self):
        assert distinct_n(["a a a"], 1) == 1 / 3
        assert distinct_n(["a b a b"], 2) == 2 / 3
        assert distinct_n(["a b c"], 1) == 1.0
        assert distinct_n(["a"], 2) == 0.0

    def test_usr(self):
        assert usr(["x", "x", "y"]) == 2 / 3
        assert usr(["x"] * 4) == 1 / 4
        assert usr(["x", "y"]) == 1.0

    def test_entr(self):
        assert entr(["a a a a"]) == 0.0
        assert entr(["a b"], n_orders={1}) == 1.0
        assert entr(["a b c d"], n_orders={1}) == 2.0
        assert entr(["a"], n_orders={2, 3}) == 0.0

    def test_rmse(self):
        assert rmse([1, 2], [1, 4]) == math.sqrt(2)
        assert rmse([3.5, 1.0], [3.5, 1.0]) == 0.0
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])

    def test_empty_inputs(self):
        for fn in (lambda: distinct_n([], 1), lambda: usr([]), lambda: entr([])):
            with pytest.raises(ValueError):
                fn()


class TestBruteForceOracles:
    @pytest.mark.parametrize("texts", CORPORA)
    def test_exact_agreement(self, texts):
        for n in (1, 2, 3):
            assert distinct_n(texts, n) == brute_distinct(texts, n)
        assert usr(texts) == brute_usr(texts)
        assert entr(texts) == brute_entr(texts)
        assert entr(texts, {1}) == brute_entr(texts, (1,))
        lens = [float(len(t)) for t in texts]
        words = [float(len(t.split())) for t in texts]
        assert rmse(lens, words) == brute_rmse(lens, words)

    def test_twenty_corpora(self):
        assert len(CORPORA) == 20


text_lists = st.lists(st.text(alphabet="ab c.", min_size=0, max_size=12), min_size=1, max_size=8)


class TestProperties:
    @settings(max_examples=80, deadline=None)
    @given(text_lists, st.randoms())
    def test_ranges_and_permutation_invariance(self, texts, rnd):
        shuffled = list(texts)
        rnd.shuffle(shuffled)
        for n in (1, 2):
            d = distinct_n(texts, n)
            assert 0.0 <= d <= 1.0 and d == distinct_n(shuffled, n)
        assert 0.0 < usr(texts) <= 1.0 and usr(texts) == usr(shuffled)
        assert entr(texts) >= 0.0 and entr(texts) == entr(shuffled)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=10))
    def test_rmse_non_negative(self, xs):
        assert rmse(xs, xs[::-1]) >= 0.0 and rmse(xs, xs) == 0.0


def _corpus():
    recs = [ReviewRecord(0, "u0", "i0", 4.0, "The pool was heated and clean.", "train"),
            ReviewRecord(1, "u1", "i0", 2.0, "Breakfast was cold.", "train"),
            ReviewRecord(2, "u2", "i1", 5.0, "Staff were lovely.", "train"),
            ReviewRecord(3, "u3", "i0", 3.0, "Fine overall.", "test"),
            ReviewRecord(4, "u3", "i1", 4.5, "Great staff.", "test")]
    return Corpus(recs, (1, 5))


class TestOverlapScorer:
    def test_identity_entails(self):
        s = OverlapNLIScorer()
        assert s.score("the pool was heated", "the pool was heated") == 1.0

    def test_recall_below_saturation(self):
        assert OverlapNLIScorer().score("pool", "pool spa sauna") == pytest.approx(1 / 3)

    def test_no_content_tokens(self):
        assert OverlapNLIScorer().score("pool", "the and") == 0.0


class TestEntailRatio:
    def test_verbatim_review_is_factual(self):
        res = entail_ratio([("i0", "The pool was heated and clean.")], _corpus(),
                           OverlapNLIScorer())
        assert res.percentage == 100.0

    def test_unrelated_text_is_not(self):
        res = entail_ratio([("i0", "Parking garage valet")], _corpus(), OverlapNLIScorer())
        assert res.percentage == 0.0

    def test_direction_flag(self):
        c = _corpus()
        # "pool" is contained in the review but not vice versa
        assert entail_ratio([("i0", "pool")], c, OverlapNLIScorer(),
                            premise="review").percentage == 100.0
        assert entail_ratio([("i0", "pool")], c, OverlapNLIScorer(),
                            premise="explanation").percentage == 0.0

    def test_scorer_failure_excluded(self):
        class Flaky(NLIScorer):
            name = "flaky"

            def score(self, premise, hypothesis):
                if "boom" in premise + hypothesis:
                    raise RuntimeError("down")
                return 1.0

        res = entail_ratio([("i0", "boom"), ("i1", "fine")], _corpus(), Flaky())
        assert (res.percentage, res.evaluated, res.unevaluated) == (100.0, 1, 1)

    def test_item_without_train_review(self):
        with pytest.raises(ValueError):
            entail_ratio([("i9", "x")], _corpus(), OverlapNLIScorer())

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_threshold(self, a, b):
        lo, hi = sorted((a, b))
        ex = [("i0", "pool heated"), ("i0", "pool sauna spa"), ("i1", "staff lovely view")]
        s = OverlapNLIScorer()
        assert entail_ratio(ex, _corpus(), s, threshold=hi).percentage <= \
            entail_ratio(ex, _corpus(), s, threshold=lo).percentage


class TestEvaluateRun:
    def test_generic_output_flagged(self):
        ex = [{"user": "u3", "item": i, "text": "good"} for i in ("i0", "i1", "i0")]
        rep = evaluate_run(ex, [], _corpus(), OverlapNLIScorer())
        assert rep.usr == 1 / 3 and "generic output" in rep.metadata["warnings"]
        assert rep.rmse is None

    def test_rmse_only(self):
        rep = evaluate_run([], [("u3", "i0", 3.0), ("u3", "i1", 4.0)], _corpus(), None)
        assert rep.rmse == pytest.approx(math.sqrt(0.125)) and rep.d1 is None

    def test_report_bytes_deterministic(self):
        ex = [{"user": "u3", "item": "i0", "text": "pool heated"},
              {"user": "u3", "item": "i1", "text": "staff lovely"}]
        a = evaluate_run(ex, [("u3", "i0", 3.2)], _corpus(), OverlapNLIScorer()).to_json()
        b = evaluate_run(ex, [("u3", "i0", 3.2)], _corpus(), OverlapNLIScorer()).to_json()
        assert a == b
        d = json.loads(a)
        assert 0 <= d["d1"] <= 1 and d["entr"] >= 0 and d["metadata"]["mauve"] is None

    def test_unknown_prediction_pair(self):
        with pytest.raises(ValueError, match="rmse"):
            evaluate_run([], [("u0", "i0", 3.0)], _corpus(), None)

    def test_config_from_dict(self):
        assert EvalConfig.from_dict({"n_orders": [1, 2]}).n_orders == (1, 2)


class TestFiles:
    def test_predictions_round_trip(self, tmp_path):
        rows = [("u1", "i1", 3.25), ("u2", "i9", 1.0 / 3)]
        write_predictions(tmp_path / "p.csv", rows)
        assert load_predictions(tmp_path / "p.csv") == rows

    def test_explanations_missing_key(self, tmp_path):
        (tmp_path / "e.jsonl").write_text('{"user": "u", "item": "i"}\n')
        with pytest.raises(ValueError, match="text"):
            load_explanations(tmp_path / "e.jsonl")
