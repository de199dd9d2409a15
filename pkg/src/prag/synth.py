"""Seeded synthetic review corpus with known topic structure.

Each user and item carries a topic.  A review's topic is the user-item
interaction ``(topic_user + topic_item) mod n_topics`` (or the user's topic
with ``topic_rule="user"``), its embedding is that topic's unit centroid plus
Gaussian noise, and its text mentions the topic's signature keywords.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, ReviewRecord, save_corpus, split_corpus
from .encoder import EmbeddingStore
from .rng import substream

TOPIC_WORDS = [
    ["pool", "spa", "sauna", "towels", "jacuzzi"],
    ["breakfast", "coffee", "pastries", "buffet", "omelette"],
    ["staff", "concierge", "reception", "manager", "doorman"],
    ["bed", "pillows", "mattress", "blanket", "linens"],
    ["location", "downtown", "subway", "neighborhood", "waterfront"],
    ["price", "value", "discount", "bargain", "deal"],
    ["decor", "architecture", "lobby", "artwork", "furniture"],
    ["parking", "garage", "valet", "shuttle", "airport"],
]
POSITIVE = ["great", "lovely", "excellent", "wonderful", "superb"]
NEGATIVE = ["disappointing", "mediocre", "awful", "poor", "terrible"]
TEMPLATES = [
    "The {w1} was {adj}. We also noticed the {w2} and the {w3}.",
    "Honestly the {w1} and {w2} were {adj}! Would mention the {w3} too.",
    "Our stay: {w1} {adj}, {w2} fine. The {w3} stood out.",
    "I thought the {w1} was {adj}. The {w2} matched the {w3}.",
]


def topic_words(topic: int) -> list[str]:
    if topic < len(TOPIC_WORDS):
        return TOPIC_WORDS[topic]
    return [f"aspect{topic}w{j}" for j in range(5)]


@dataclass
class SyntheticFixture:
    corpus: Corpus
    store: EmbeddingStore
    centroids: np.ndarray           # (n_topics, dim)
    review_topics: dict[int, int]
    user_topics: dict[str, int]
    item_topics: dict[str, int]

    def labels(self) -> dict:
        return {
            "review_topics": {str(k): v for k, v in sorted(self.review_topics.items())},
            "user_topics": dict(sorted(self.user_topics.items())),
            "item_topics": dict(sorted(self.item_topics.items())),
            "centroids": self.centroids.tolist(),
        }

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        save_corpus(self.corpus, d / "corpus")
        self.store.save(d / "store.bin")
        (d / "labels.json").write_text(json.dumps(self.labels(), sort_keys=True) + "\n", "utf-8")
        return d


def generate_synthetic_fixture(n_users: int = 40, n_items: int = 20, n_topics: int = 4,
                               noise: float = 0.1, seed: int = 0, dim: int = 32,
                               density: float = 1.0, affinity: float = 0.5,
                               rating_noise: float = 0.1, bias_scale: float = 0.3,
                               mu: float = 3.0, rating_range: tuple[float, float] = (1.0, 5.0),
                               split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                               topic_rule: str = "interaction") -> SyntheticFixture:
    if n_topics < 2:
        raise ValueError("n_topics must be >= 2")
    if n_topics > dim:
        raise ValueError("n_topics cannot exceed dim (centroids are orthonormal)")
    if topic_rule not in ("interaction", "user"):
        raise ValueError(f"unknown topic_rule {topic_rule!r}")
    rng = substream(seed, "synth")
    basis, _ = np.linalg.qr(rng.normal(size=(dim, n_topics)))
    centroids = basis.T.copy()
    users = [f"u{n:03d}" for n in range(n_users)]
    items = [f"i{n:03d}" for n in range(n_items)]
    user_topics = {u: n % n_topics for n, u in enumerate(users)}
    item_topics = {it: n % n_topics for n, it in enumerate(items)}
    b_user = rng.normal(0.0, bias_scale, size=n_users)
    b_item = rng.normal(0.0, bias_scale, size=n_items)

    records, vectors, review_topics = [], [], {}
    lo, hi = rating_range
    for ui, u in enumerate(users):
        visited = [j for j in range(n_items) if rng.random() < density] or \
            [int(rng.integers(n_items))]
        for ij in visited:
            it = items[ij]
            if topic_rule == "interaction":
                t = (user_topics[u] + item_topics[it]) % n_topics
            else:
                t = user_topics[u]
            rating = mu + b_user[ui] + b_item[ij] \
                + affinity * (user_topics[u] == item_topics[it]) \
                + rng.normal(0.0, rating_noise)
            rating = float(np.clip(rating, lo, hi))
            words = rng.permutation(topic_words(t))[:3]
            adj = rng.choice(POSITIVE if rating >= mu else NEGATIVE)
            tmpl = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
            text = tmpl.format(w1=words[0], w2=words[1], w3=words[2], adj=adj)
            v = centroids[t] + rng.normal(0.0, noise, size=dim) if noise > 0 else centroids[t].copy()
            vectors.append(v / np.linalg.norm(v))
            rid = len(records)
            review_topics[rid] = t
            records.append(ReviewRecord(rid, u, it, rating, text, "train"))
    corpus = Corpus(records, rating_range, meta={"synthetic_seed": seed})
    corpus = split_corpus(corpus, split_ratios, seed)
    store = EmbeddingStore(range(len(records)), np.stack(vectors), f"synthetic-d{dim}")
    return SyntheticFixture(corpus, store, centroids, review_topics, user_topics, item_topics)
