"""Sentence-embedding backends and the persistent review embedding store."""
from __future__ import annotations

import hashlib
import json
import os
import struct
import urllib.error
import urllib.request
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .text import tokenize

STORE_MAGIC = b"PRGE"
STORE_VERSION = 1
ENCODER_URL_ENV = "PRAG_ENCODER_URL"


class EncoderError(RuntimeError):
    """Backend failure (e.g. unreachable remote encoder); safe to retry."""

    retryable = True

    def __init__(self, message: str, review_id: int | None = None):
        super().__init__(message)
        self.review_id = review_id


class StoreError(ValueError):
    pass


class EncoderBackend:
    """Maps text to a fixed-length vector.  Subclasses implement ``_encode_batch``."""

    name: str = "base"
    dim: int = 0

    def encode(self, text: str) -> np.ndarray:
        return self.encode_batch([text])[0]

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise ValueError("cannot encode empty text")
        out = np.asarray(self._encode_batch(list(texts)), dtype=np.float64)
        if out.shape != (len(texts), self.dim) or not np.all(np.isfinite(out)):
            raise EncoderError(f"backend {self.name} returned malformed vectors")
        return out

    def _encode_batch(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


def toy_hash_encode(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of the token stream, L2-normalized.

    Text with no tokens maps to the unit basis vector e0.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    vec = np.zeros(dim, dtype=np.float64)
    key = int(seed).to_bytes(8, "little", signed=True)
    for tok in tokenize(text):
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8, key=key).digest(),
                           "little")
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.sqrt(vec @ vec)
    if norm == 0.0:
        vec[:] = 0.0
        vec[0] = 1.0
        return vec
    return vec / norm


class ToyHashEncoder(EncoderBackend):
    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = int(dim)
        self.seed = int(seed)
        self.name = f"toy-hash-d{self.dim}-s{self.seed}"

    def _encode_batch(self, texts):
        return np.stack([toy_hash_encode(t, self.dim, self.seed) for t in texts])


class HTTPEncoder(EncoderBackend):
    """Client for an external encoder speaking ``{"texts": [...]}`` -> ``{"vectors": [...]}``.

    Results are cached by (backend name, text hash) so repeated calls stay pure.
    """

    def __init__(self, dim: int, name: str = "http", url: str | None = None,
                 timeout: float = 30.0, batch_size: int = 64):
        self.dim = int(dim)
        self.name = name
        self.url = url or os.environ.get(ENCODER_URL_ENV)
        self.timeout = timeout
        self.batch_size = batch_size
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def _key(self, text: str) -> tuple[str, str]:
        return self.name, hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _request(self, texts: list[str]) -> list[list[float]]:
        if not self.url:
            raise EncoderError(f"no encoder endpoint configured (set {ENCODER_URL_ENV})")
        body = json.dumps({"texts": texts}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise EncoderError(f"encoder request failed: {exc}") from exc
        vectors = payload.get("vectors") if isinstance(payload, dict) else None
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise EncoderError("encoder response missing 'vectors' of matching length")
        return vectors

    def _encode_batch(self, texts):
        missing = [t for t in dict.fromkeys(texts) if self._key(t) not in self._cache]
        for start in range(0, len(missing), self.batch_size):
            chunk = missing[start:start + self.batch_size]
            for t, v in zip(chunk, self._request(chunk)):
                self._cache[self._key(t)] = np.asarray(v, dtype=np.float64)
        return np.stack([self._cache[self._key(t)] for t in texts])


class EmbeddingStore:
    """Review id -> float32 vector table with exact cosine search."""

    def __init__(self, ids: Iterable[int], vectors: np.ndarray, backend_name: str):
        self.ids = np.asarray(list(ids), dtype=np.uint64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.ids.shape[0]:
            raise StoreError("ids and vectors disagree in length")
        if not np.all(np.isfinite(self.vectors)):
            raise StoreError("store contains non-finite values")
        self.dim = int(self.vectors.shape[1])
        self.backend_name = backend_name
        self._row = {int(r): i for i, r in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise StoreError("duplicate review ids in store")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, review_id) -> bool:
        return int(review_id) in self._row

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (self.backend_name == other.backend_name and np.array_equal(self.ids, other.ids)
                and self.vectors.tobytes() == other.vectors.tobytes())

    def rows(self, review_ids: Sequence[int]) -> np.ndarray:
        try:
            idx = [self._row[int(r)] for r in review_ids]
        except KeyError as exc:
            raise StoreError(f"review {exc.args[0]} not in embedding store") from None
        return self.vectors[idx]

    def vector(self, review_id: int) -> np.ndarray:
        return self.rows([review_id])[0]

    def to_bytes(self) -> bytes:
        name = self.backend_name.encode("utf-8")
        header = STORE_MAGIC + struct.pack("<IIQI", STORE_VERSION, self.dim, len(self), len(name))
        rec = np.empty(len(self), dtype=_row_dtype(self.dim))
        rec["id"] = self.ids
        rec["vec"] = self.vectors
        return header + name + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        fixed = 4 + struct.calcsize("<IIQI")
        if len(data) < fixed or data[:4] != STORE_MAGIC:
            raise StoreError("not an embedding store (bad magic)")
        version, dim, count, name_len = struct.unpack("<IIQI", data[4:fixed])
        if version != STORE_VERSION:
            raise StoreError(f"unsupported store version {version}")
        name_end = fixed + name_len
        dt = _row_dtype(dim)
        if len(data) != name_end + count * dt.itemsize:
            raise StoreError("embedding store is truncated or corrupt")
        name = data[fixed:name_end].decode("utf-8")
        rec = np.frombuffer(data, dtype=dt, count=count, offset=name_end)
        return cls(rec["id"].astype(np.uint64), rec["vec"].copy(), name)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmbeddingStore":
        return cls.from_bytes(Path(path).read_bytes())


def _row_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])


def encode(backend: EncoderBackend, text: str) -> np.ndarray:
    return backend.encode(text)


def embed_corpus(corpus, backend: EncoderBackend, batch_size: int = 256) -> EmbeddingStore:
    """Embed every record of ``corpus`` (all splits)."""
    if len(corpus) == 0:
        raise ValueError("cannot embed an empty corpus")
    records = corpus.records
    chunks = []
    for start in range(0, len(records), batch_size):
        batch = records[start:start + batch_size]
        try:
            chunks.append(backend.encode_batch([r.text for r in batch]))
        except (EncoderError, ValueError):
            # locate the failing record
            for r in batch:
                try:
                    backend.encode(r.text)
                except (EncoderError, ValueError) as exc:
                    raise EncoderError(f"encoding review {r.review_id} failed: {exc}",
                                       review_id=r.review_id) from exc
            raise
    return EmbeddingStore([r.review_id for r in records], np.concatenate(chunks), backend.name)


def cosine_topk(store: EmbeddingStore, query: np.ndarray, candidates: Iterable[int],
                k: int) -> list[tuple[int, float]]:
    """Top-k candidates by cosine with ``query``; ties go to the lower review id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query)
    if query.shape != (store.dim,):
        raise StoreError(f"query has shape {query.shape}, store dim is {store.dim}")
    cand = np.array(sorted({int(c) for c in candidates}), dtype=np.int64)
    if cand.size == 0:
        return []
    scores = _kernels.cosine_scores(store.rows(cand), query)
    order = np.lexsort((cand, -scores))[:k]
    return [(int(cand[i]), float(scores[i])) for i in order]
