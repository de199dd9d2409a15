from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prag.corpus import Corpus, ReviewRecord
from prag.encoder import (EmbeddingStore, EncoderError, HTTPEncoder, StoreError, ToyHashEncoder,
                          cosine_topk, embed_corpus, toy_hash_encode)


def _store(vectors, ids=None):
    vectors = np.asarray(vectors, dtype=np.float32)
    return EmbeddingStore(range(len(vectors)) if ids is None else ids, vectors, "test")


class TestToyHash:
    def test_unit_norm_and_deterministic(self):
        a = toy_hash_encode("The pool was heated", 32, seed=1)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert np.array_equal(a, toy_hash_encode("the POOL was heated!", 32, seed=1))

    def test_seed_changes_vector(self):
        assert not np.array_equal(toy_hash_encode("pool", 32, 0), toy_hash_encode("pool", 32, 1))

    def test_no_tokens_maps_to_basis(self):
        v = toy_hash_encode("!!!", 8)
        assert v[0] == 1.0 and np.count_nonzero(v) == 1

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            ToyHashEncoder(8).encode("   ")

    def test_embed_corpus(self, small_fixture):
        store = embed_corpus(small_fixture.corpus, ToyHashEncoder(16, 0))
        assert len(store) == len(small_fixture.corpus) and store.dim == 16
        assert store.backend_name == "toy-hash-d16-s0"


class _Handler(BaseHTTPRequestHandler):
    calls = 0

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).calls += 1
        vecs = [toy_hash_encode(t, 8).tolist() for t in body["texts"]]
        out = json.dumps({"vectors": vecs}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


class TestHTTPEncoder:
    def test_round_trip_and_cache(self):
        server = HTTPServer(("127.0.0.1", 0), _Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            enc = HTTPEncoder(8, url=f"http://127.0.0.1:{server.server_port}/")
            v = enc.encode_batch(["pool spa", "bed"])
            assert np.allclose(v[0], toy_hash_encode("pool spa", 8))
            calls = _Handler.calls
            enc.encode("pool spa")
            assert _Handler.calls == calls
        finally:
            server.shutdown()

    def test_unreachable_is_retryable(self):
        enc = HTTPEncoder(8, url="http://127.0.0.1:9/", timeout=0.5)
        with pytest.raises(EncoderError) as info:
            enc.encode("x")
        assert info.value.retryable

    def test_failure_names_review(self):
        recs = [ReviewRecord(0, "u", "i", 3, "pool", "train")]
        with pytest.raises(EncoderError) as info:
            embed_corpus(Corpus(recs, (1, 5)), HTTPEncoder(8, url="http://127.0.0.1:9/",
                                                          timeout=0.5))
        assert info.value.review_id == 0


class TestStore:
    def test_binary_round_trip(self, tmp_path):
        s = _store(np.random.default_rng(0).normal(size=(5, 4)), ids=[3, 1, 9, 4, 7])
        s.save(tmp_path / "s.bin")
        assert EmbeddingStore.load(tmp_path / "s.bin") == s

    def test_truncated_rejected(self):
        data = _store(np.eye(3)).to_bytes()
        with pytest.raises(StoreError):
            EmbeddingStore.from_bytes(data[:-2])
        with pytest.raises(StoreError):
            EmbeddingStore.from_bytes(b"XXXX" + data[4:])

    def test_duplicate_ids(self):
        with pytest.raises(StoreError):
            _store(np.eye(2), ids=[1, 1])

    def test_unknown_id(self):
        with pytest.raises(StoreError):
            _store(np.eye(2)).vector(5)


class TestCosineTopk:
    def test_self_retrieval(self):
        v = np.random.default_rng(1).normal(size=(6, 4))
        s = _store(v)
        top = cosine_topk(s, s.vector(2), range(6), 1)
        assert top[0][0] == 2 and top[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_ties_to_lower_id(self):
        s = _store([[1, 0], [1, 0], [0, 1]], ids=[5, 2, 9])
        assert [r for r, _ in cosine_topk(s, np.array([1.0, 0.0]), [5, 2, 9], 2)] == [2, 5]

    def test_wrong_dim(self):
        with pytest.raises(StoreError):
            cosine_topk(_store(np.eye(3)), np.ones(2), [0], 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_positive_scaling_keeps_ranking(self, seed, scale):
        rng = np.random.default_rng(seed)
        s = _store(rng.normal(size=(12, 5)))
        q = rng.normal(size=5)
        a = [r for r, _ in cosine_topk(s, q, range(12), 12)]
        b = [r for r, _ in cosine_topk(s, q * scale, range(12), 12)]
        assert a == b
