from __future__ import annotations

import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prag.corpus import Corpus, ReviewRecord, compute_tfidf_stats
from prag.encoder import EmbeddingStore
from prag.explain import (EOS, ConstraintError, ExplainConfig, Explainer, KeywordEstimator,
                          NearestReviewEstimator, StubCopyReader, build_context,
                          build_keyword_training_pairs, constrained_decode, estimate_keywords,
                          explain, export_finetune_set, extractive_read, extractive_select,
                          select_prompt)
from prag.text import split_sentences, tokenize

WORDS = ["pool", "spa", "bed", "staff", "great", "was", "the", "clean", "small", "room",
         "coffee", "noisy", "view", "and"]


def random_context(rng, n_sent=None):
    sents = []
    for _ in range(n_sent or rng.integers(1, 5)):
        words = rng.choice(WORDS, size=rng.integers(2, 7))
        sents.append(" ".join(words).capitalize() + rng.choice([".", "!", "?"]))
    return " ".join(sents)


def greedy_forced(reader, question, context, keyword, max_length):
    """Beam-1 oracle for a single one-token keyword.

    Track the best prefix without the keyword and the best prefix with it.  The
    former extends by the reader's top token (moving to the keyword state if
    that token is the keyword) or by forcing the keyword; the latter extends by
    its top token and may stop.
    """
    vocab = reader.vocabulary_for(context)
    idx = {t: j for j, t in enumerate(vocab)}

    def top(scores):
        return next(j for j in np.lexsort((np.arange(len(vocab)), -scores)) if vocab[j] != EOS)

    without, with_kw, finished = ((), 0.0), None, []
    for _ in range(max_length):
        options = {}
        if with_kw is not None:
            toks, total = with_kw
            s = reader.score_next(context, question, list(toks))
            finished.append((toks, total + s[idx[EOS]], len(toks) + 1))
            j = top(s)
            options[toks + (vocab[j],)] = total + s[j]
        nxt = None
        if without is not None:
            toks, total = without
            s = reader.score_next(context, question, list(toks))
            j = top(s)
            if vocab[j] != keyword:
                nxt = (toks + (vocab[j],), total + s[j])
            forced = toks + (keyword,)
            options[forced] = max(options.get(forced, -np.inf), total + s[idx[keyword]])
        without = nxt
        with_kw = min(options.items(), key=lambda kv: (-kv[1], kv[0]))
    finished.append((with_kw[0], with_kw[1], len(with_kw[0])))
    best = min(finished, key=lambda f: (-(f[1] / f[2]), f[0]))
    return " ".join(best[0])


class TestSelectPrompt:
    @pytest.mark.parametrize("adj,prompt", [(1.3, "what was great?"), (-0.2, "what was not good?"),
                                            (0.0, "what was great?"), (-0.0, "what was great?"),
                                            (1e-300, "what was great?"),
                                            (-1e-300, "what was not good?")])
    def test_sign_rule(self, adj, prompt):
        assert select_prompt(adj) == prompt

    @given(st.floats(allow_nan=False))
    def test_two_strings_only(self, adj):
        assert select_prompt(adj) in ("what was great?", "what was not good?")


class TestConstrainedDecode:
    def test_stub_contract(self):
        out = constrained_decode(StubCopyReader(), "what was great?", "the pool was heated",
                                 ["pool"])
        assert "pool" in tokenize(out)

    def test_unknown_keyword_signals_fallback(self):
        with pytest.raises(ConstraintError):
            constrained_decode(StubCopyReader(), "q", "the pool was heated", ["zzzz"])

    def test_needs_keywords(self):
        with pytest.raises(ValueError):
            constrained_decode(StubCopyReader(), "q", "the pool", [])

    def test_deterministic(self):
        ctx = "Room was small. The pool was heated and clean."
        a = constrained_decode(StubCopyReader(), "q", ctx, ["clean", "pool"], 3)
        assert a == constrained_decode(StubCopyReader(), "q", ctx, ["clean", "pool"], 3)

    def test_prefers_more_keywords(self):
        ctx = "Room was small. The pool was heated and clean."
        out = tokenize(constrained_decode(StubCopyReader(), "q", ctx, ["pool", "clean"], 4))
        assert "pool" in out and "clean" in out

    def test_invalid_reader_scores(self):
        class Broken(StubCopyReader):
            def score_next(self, context, question, prefix):
                return np.full(3, np.nan)
        with pytest.raises(Exception):
            constrained_decode(Broken(), "q", "the pool", ["pool"])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_beam_one_matches_greedy_oracle(self, seed):
        rng = np.random.default_rng(seed)
        ctx = random_context(rng)
        kw = str(rng.choice(tokenize(ctx)))
        reader = StubCopyReader(max_length=10)
        got = constrained_decode(reader, "q", ctx, [kw], beam_width=1)
        assert got == greedy_forced(reader, "q", ctx, kw, 10)

    def test_hundred_random_cases_contain_keyword(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            ctx = random_context(rng)
            toks = tokenize(ctx)
            kws = list(rng.choice(toks, size=rng.integers(1, 4))) + ["zzzz"]
            out = tokenize(constrained_decode(StubCopyReader(), "q", ctx, kws,
                                              int(rng.integers(1, 5))))
            assert set(out) & set(kws)


class TestExtractive:
    def test_keyword_count(self):
        ev = ["room was small. pool was heated and clean."]
        assert extractive_read(ev, ["pool", "clean"]) == "pool was heated and clean."

    def test_no_hit_falls_back_to_first_sentence(self):
        text, hit = extractive_select(["Room was small. Bed was big.", "Pool."], ["zzz"])
        assert text == "Room was small." and not hit

    def test_tie_goes_to_better_rank(self):
        assert extractive_read(["The spa was warm.", "The pool was cold."], ["spa", "pool"]) \
            == "The spa was warm."

    def test_tie_within_review_goes_to_earlier_sentence(self):
        assert extractive_read(["A pool. B pool."], ["pool"]) == "A pool."

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_verbatim_substring(self, seed):
        rng = np.random.default_rng(seed)
        ev = [random_context(rng) for _ in range(rng.integers(1, 4))]
        kws = list(rng.choice(WORDS, size=rng.integers(0, 4)))
        out = extractive_read(ev, kws, "positive")
        assert any(out in e for e in ev)
        assert out in {s for e in ev for s in split_sentences(e)}

    def test_build_context_budget(self):
        ev = ["a b c.", "d e f.", "g h i."]
        assert build_context(ev, 6) == "a b c. d e f."
        assert build_context(ev, 1) == "a b c."


@pytest.fixture()
def tiny_corpus():
    texts = ["The pool was heated.", "the and of", "Breakfast was great, coffee strong.",
             "Pool and spa were lovely."]
    recs = [ReviewRecord(n, f"u{n}", "i0", 4.0, t, "train") for n, t in enumerate(texts)]
    corpus = Corpus(recs, (1, 5))
    vecs = np.eye(4, dtype=np.float32)
    return corpus, EmbeddingStore(range(4), vecs, "eye"), compute_tfidf_stats(corpus)


class TestKeywords:
    def test_training_pairs(self, tiny_corpus):
        corpus, store, stats = tiny_corpus
        ids, vecs, kws, dropped = build_keyword_training_pairs(corpus, store, stats)
        assert ids == [0, 2, 3] and dropped == 1 and vecs.shape == (3, 4)
        for rid, kw in zip(ids, kws):
            assert set(kw) <= set(tokenize(corpus.record(rid).text))

    def test_nearest_is_self(self, tiny_corpus):
        corpus, store, stats = tiny_corpus
        est = NearestReviewEstimator(corpus, store, stats)
        from prag.corpus import top_k_tfidf
        kw = estimate_keywords(est, store.vector(2), [], store, query_only=True)
        assert kw == top_k_tfidf(corpus.record(2).text, stats, 5)
        assert estimate_keywords(est, store.vector(2), [2], store) == kw

    def test_tie_goes_to_lower_id(self, tiny_corpus):
        corpus, store, stats = tiny_corpus
        est = NearestReviewEstimator(corpus, store, stats)
        q = store.vector(0) + store.vector(3)
        assert est.predict(q) == est.keywords[0]

    def test_failing_estimator_falls_back(self, tiny_corpus):
        corpus, store, stats = tiny_corpus

        class Boom(KeywordEstimator):
            name = "boom"

            def _predict(self, vector):
                raise RuntimeError("down")

        warnings = []
        base = NearestReviewEstimator(corpus, store, stats)
        kw = estimate_keywords(Boom(), store.vector(0), [0], store, fallback=base,
                               warnings=warnings)
        assert kw == base.predict(store.vector(0)) and "boom" in warnings[0]

    def test_estimator_output_is_clean(self):
        class Messy(KeywordEstimator):
            def _predict(self, vector):
                return ["Pool", "pool", " ", "SPA", "a", "b", "c", "d"]
        assert Messy(k=3).predict(np.zeros(2)) == ["pool", "spa", "a"]


class TestPipeline:
    def test_explanation_is_populated(self, small_fixture, small_model, small_stats):
        fx = small_fixture
        rec = fx.corpus.split_records("test")[0]
        ex = explain(small_model, fx.corpus, fx.store, small_stats, rec.user_id, rec.item_id)
        assert ex.text and ex.evidence and ex.keywords
        assert ex.polarity == ("negative" if ex.adjustment < 0 else "positive")
        assert ex.prompt == select_prompt(ex.adjustment)
        assert set(tokenize(ex.text)) & set(ex.keywords) or ex.fallback == "extractive-no-hit"
        assert json.loads(ex.to_json())["user_id"] == rec.user_id

    def test_unreachable_http_estimator_falls_back(self, small_fixture, small_model,
                                                   small_stats):
        fx = small_fixture
        rec = fx.corpus.split_records("test")[0]
        cfg = ExplainConfig(estimator="http", estimator_url="http://127.0.0.1:9/")
        ex = Explainer(small_model, fx.corpus, fx.store, small_stats, cfg)(rec.user_id,
                                                                           rec.item_id)
        assert ex.keywords and any("estimator" in w for w in ex.warnings)

    def test_unknown_estimator_rejected(self):
        with pytest.raises(ValueError):
            ExplainConfig(estimator="oracle")

    def test_extractive_reader_is_verbatim(self, small_fixture, small_model, small_stats):
        fx = small_fixture
        cfg = ExplainConfig(reader="extractive")
        explainer = Explainer(small_model, fx.corpus, fx.store, small_stats, cfg)
        for rec in fx.corpus.split_records("test"):
            ex = explainer(rec.user_id, rec.item_id)
            assert any(ex.text in fx.corpus.record(r).text for r in ex.evidence)
            assert ex.reader == "extractive"

    def test_negative_adjustment_prompt(self, small_fixture, small_model, small_stats):
        fx = small_fixture
        m = small_model.copy()
        m.rparams["gamma"][:] = 0.0
        m.rparams["gamma"][:, 0] = 1.0
        m.rparams["factor.w"][:] = 0.0
        m.rparams["factor.b"][:] = 0.0
        m.rparams["factor.b"][0] = -1.0
        rec = fx.corpus.split_records("test")[0]
        ex = explain(m, fx.corpus, fx.store, small_stats, rec.user_id, rec.item_id)
        assert ex.adjustment == -1.0
        assert (ex.polarity, ex.prompt) == ("negative", "what was not good?")

    def test_deterministic(self, small_fixture, small_model, small_stats):
        fx = small_fixture
        rec = fx.corpus.split_records("test")[2]
        a = explain(small_model, fx.corpus, fx.store, small_stats, rec.user_id, rec.item_id)
        b = explain(small_model, fx.corpus, fx.store, small_stats, rec.user_id, rec.item_id)
        assert a == b

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ExplainConfig(reader="gpt")
        with pytest.raises(ValueError):
            ExplainConfig.from_dict({"beam": 3})


class TestExport:
    def test_rows_and_determinism(self, small_fixture, small_model, small_stats):
        fx = small_fixture
        outs = []
        for _ in range(2):
            buf = io.StringIO()
            written, skipped = export_finetune_set(small_model, fx.corpus, fx.store,
                                                   small_stats, 100, 4, buf)
            outs.append(buf.getvalue())
        assert outs[0] == outs[1]
        rows = [json.loads(x) for x in outs[0].splitlines()]
        assert written == len(rows) <= 100
        for row in rows:
            assert set(row) == {"question", "context", "keywords", "constrained_output",
                                "rephrased"}
            assert row["rephrased"] is None
            assert set(tokenize(row["constrained_output"])) & set(row["keywords"])

    def test_sample_size(self, small_fixture, small_model, small_stats):
        fx = small_fixture
        buf = io.StringIO()
        written, skipped = export_finetune_set(small_model, fx.corpus, fx.store, small_stats,
                                               2, 0, buf)
        assert written + skipped == 2

    def test_needs_samples(self, small_fixture, small_model, small_stats):
        with pytest.raises(ValueError):
            export_finetune_set(small_model, small_fixture.corpus, small_fixture.store,
                                small_stats, 0, 0, io.StringIO())
