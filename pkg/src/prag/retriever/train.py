"""Joint training of the retriever and rating head."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..corpus import Corpus
from ..encoder import EmbeddingStore
from ..rng import substream
from .config import TrainConfig
from .model import (FROZEN, Batch, RetrieverModel, build_batch, history_example, init_model,
                    loss_and_grads)

_logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                step = step + self.weight_decay * params[name]
            params[name] -= (self.lr * step).astype(g.dtype)


@dataclass
class TrainResult:
    model: RetrieverModel
    history: list[dict] = field(default_factory=list)
    skipped: int = 0

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "l_retrieve", "l_rating", "total"])
            for row in self.history:
                w.writerow([row["epoch"], repr(row["l_retrieve"]), repr(row["l_rating"]),
                            repr(row["total"])])


def training_examples(corpus: Corpus, max_history: int, leave_one_out: bool = True):
    """One example per train review whose pair still has evidence after exclusion."""
    examples, target_ids, ratings = [], [], []
    skipped = 0
    for rec in corpus.records:
        if rec.split != "train":
            continue
        ex = history_example(corpus, rec.user_id, rec.item_id, max_history,
                             rec.review_id if leave_one_out else None)
        if not ex[2] and not ex[3]:
            skipped += 1
            continue
        examples.append(ex)
        target_ids.append(rec.review_id)
        ratings.append(rec.rating)
    return examples, target_ids, np.asarray(ratings), skipped


def validation_batch(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore) -> Batch | None:
    """Val-split pairs with train histories, or None when there are none."""
    examples, target_ids, ratings = [], [], []
    for rec in corpus.split_records("val"):
        ex = history_example(corpus, rec.user_id, rec.item_id, model.config.max_history)
        if ex[2] or ex[3]:
            examples.append(ex)
            target_ids.append(rec.review_id)
            ratings.append(rec.rating)
    if not examples:
        return None
    return build_batch(model, store, examples, store.rows(target_ids), np.asarray(ratings))


def _take(batch: Batch, idx: np.ndarray) -> Batch:
    L = int(batch.mask[idx].sum(axis=1).max())
    return Batch(batch.E[idx, :L], batch.side[idx, :L], batch.mask[idx, :L], batch.rids[idx, :L],
                 batch.u_v[idx], batch.i_v[idx], batch.u_b[idx], batch.i_b[idx], batch.ent[idx],
                 batch.target[idx], batch.rating[idx])


def train(corpus: Corpus, store: EmbeddingStore, config: TrainConfig,
          model: RetrieverModel | None = None, zero_query_head: bool = False) -> TrainResult:
    """Minimize the mean joint loss with Adam; deterministic for a fixed seed."""
    if model is None:
        model = init_model(corpus.train_users, corpus.train_items, store.dim,
                           corpus.train_mean_rating(), config, store.backend_name,
                           zero_query_head=zero_query_head)
    cfg = model.config
    examples, target_ids, ratings, skipped = training_examples(corpus, cfg.max_history,
                                                               cfg.leave_one_out)
    if not examples:
        raise TrainingError("no training example has any evidence")
    if skipped:
        _logger.info("skipped %d train reviews without evidence", skipped)
    full = build_batch(model, store, examples, store.rows(target_ids), ratings)
    n = len(examples)
    n_user, n_item = len(model.users), len(model.items)
    shuffle = substream(cfg.seed, "shuffle")
    cold = substream(cfg.seed, "cold")
    opt = Adam(cfg.learning_rate, weight_decay=cfg.weight_decay)
    # views onto the model's arrays; Adam updates them in place
    learnable = {**model.params,
                 **{k: v for k, v in model.rparams.items() if k not in FROZEN}}
    val = validation_batch(model, corpus, store)
    if cfg.select_best and val is None:
        _logger.warning("select_best requested but the corpus has no usable val pairs")
    best, best_loss = None, math.inf
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        sums = np.zeros(3)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = _take(full, idx)
            if cfg.cold_rate > 0:
                drop = cold.random((2, len(idx))) < cfg.cold_rate
                batch = replace(batch, u_v=np.where(drop[0], n_user, batch.u_v),
                                i_v=np.where(drop[1], n_item, batch.i_v))
            stats, gp, gr = loss_and_grads(model, batch)
            if not math.isfinite(stats["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {stats}")
            opt.step(learnable, {**gp, **gr})
            sums += len(idx) * np.array([stats["l_retrieve"], stats["l_rating"], stats["total"]])
        mean = sums / n
        history.append(dict(epoch=epoch, l_retrieve=float(mean[0]), l_rating=float(mean[1]),
                            total=float(mean[2])))
        if val is not None:
            l_val = loss_and_grads(model, val, with_grads=False)[0]["total"]
            history[-1]["l_val"] = l_val
            if cfg.select_best and l_val < best_loss:
                best, best_loss = {k: v.copy() for k, v in learnable.items()}, l_val
        _logger.debug("epoch %d: %s", epoch, history[-1])
    if best is not None:
        for k, v in best.items():
            learnable[k][...] = v
        _logger.info("kept epoch %d (val loss %.5g)",
                     min(history, key=lambda h: h["l_val"])["epoch"], best_loss)
    return TrainResult(model, history, skipped)
