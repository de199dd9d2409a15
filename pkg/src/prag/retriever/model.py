"""Personalized retriever: reviews-as-tokens transformer, personalized attention
pooling, latent query head and the HFT-style rating head.

All tensors live in plain dicts of numpy arrays so that the optimizer, the
checkpoint writer and the gradient checker can treat them uniformly.  The
forward pass works on padded batches; backward is written out by hand.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import _kernels as K
from ..corpus import Corpus, related_reviews
from ..encoder import EmbeddingStore
from ..rng import substream
from .config import TrainConfig

N_BLOCKS = 2


class NoEvidenceError(ValueError):
    """Neither the user nor the item has any usable review history."""

    def __init__(self, user_id=None, item_id=None):
        super().__init__(f"no evidence for pair ({user_id}, {item_id})")
        self.user_id = user_id
        self.item_id = item_id


@dataclass
class LatentQuery:
    values: np.ndarray
    user_id: str
    item_id: str


@dataclass
class Batch:
    E: np.ndarray          # (B, L, d) review embeddings, zero padded
    side: np.ndarray       # (B, L) 0 = user history, 1 = item history
    mask: np.ndarray       # (B, L) valid tokens
    rids: np.ndarray       # (B, L) review ids, -1 for padding
    u_v: np.ndarray        # (B,) row into v_user (last row = cold)
    i_v: np.ndarray
    u_b: np.ndarray        # (B,) row into beta_user, -1 unknown
    i_b: np.ndarray
    ent: np.ndarray        # (B,) row into gamma, -1 unknown
    target: np.ndarray | None = None
    rating: np.ndarray | None = None

    def __len__(self):
        return self.E.shape[0]


class RetrieverModel:
    """Learned state plus the id maps needed to look entities up."""

    def __init__(self, params: dict[str, np.ndarray], rparams: dict[str, np.ndarray],
                 users: Sequence[str], items: Sequence[str], config: TrainConfig,
                 backend_name: str = ""):
        self.params = params
        self.rparams = rparams
        self.users = list(users)
        self.items = list(items)
        self.config = config
        self.backend_name = backend_name
        self.user_pos = {u: i for i, u in enumerate(self.users)}
        self.item_pos = {it: i for i, it in enumerate(self.items)}
        self.dim = int(params["c_user_side"].shape[0])

    @property
    def dtype(self):
        return self.params["c_user_side"].dtype

    @property
    def mu(self) -> float:
        return float(self.rparams["mu"][0])

    def astype(self, dtype) -> "RetrieverModel":
        cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}
        cfg = TrainConfig(**{**self.config.to_dict(), "dtype": np.dtype(dtype).name})
        return RetrieverModel(cast(self.params), cast(self.rparams), self.users, self.items,
                              cfg, self.backend_name)

    def copy(self) -> "RetrieverModel":
        return self.astype(self.dtype)

    def entity_row(self, user_id: str, item_id: str) -> int:
        if self.config.tie_axis == "item":
            return self.item_pos.get(item_id, -1)
        return self.user_pos.get(user_id, -1)


def init_model(users: Sequence[str], items: Sequence[str], dim: int, mu: float,
               config: TrainConfig, backend_name: str = "",
               zero_query_head: bool = False) -> RetrieverModel:
    """Initialize embeddings ~ N(0, 0.02^2), affine weights Xavier-uniform, biases 0."""
    cfg = config.resolved(dim)
    dtype = np.dtype(cfg.dtype)
    rng = substream(cfg.seed, "init")
    d, dh, f, kappa = dim, cfg.d_h, cfg.ffn, cfg.kappa
    n_ent = len(items) if cfg.tie_axis == "item" else len(users)

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    def xavier(fan_in, fan_out, shape=None):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))

    p: dict[str, np.ndarray] = {
        "v_user": normal(len(users) + 1, d),
        "v_item": normal(len(items) + 1, d),
        "c_user_side": normal(d),
        "c_item_side": normal(d),
    }
    for b in range(N_BLOCKS):
        pre = f"block{b}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for m in ("q", "k", "v", "o"):
            p[pre + f"attn.w{m}"] = xavier(d, d)
            if m != "k":  # a key bias shifts every logit of a query equally: no effect
                p[pre + f"attn.b{m}"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = xavier(d, f)
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = xavier(f, d)
        p[pre + "ffn.b2"] = np.zeros(d)
    if cfg.final_norm:
        p["ln_f.g"] = np.ones(d)
        p["ln_f.b"] = np.zeros(d)
    p["attn_scorer.w"] = xavier(3 * d, 1, (3 * d,))
    p["attn_scorer.b"] = np.zeros(1)
    p["query_head.w1"] = xavier(d, dh)
    p["query_head.b1"] = np.zeros(dh)
    p["query_head.w2"] = np.zeros((dh, d)) if zero_query_head else xavier(dh, d)
    p["query_head.b2"] = np.zeros(d)

    r: dict[str, np.ndarray] = {
        "gamma": normal(n_ent, kappa),
        "beta_user": np.zeros(len(users)),
        "beta_item": np.zeros(len(items)),
        "factor.w": xavier(d, kappa),
        "factor.b": np.zeros(kappa),
        "wide.w": xavier(d, 1, (d,)),
        "wide.b": np.zeros(1),
        "mu": np.array([mu]),
    }
    p = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()}
    r = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in r.items()}
    return RetrieverModel(p, r, users, items, cfg, backend_name)


FROZEN = frozenset({"mu"})


# ------------------------------------------------------------------ batching

def build_batch(model: RetrieverModel, store: EmbeddingStore,
                examples: Sequence[tuple[str, str, Sequence[int], Sequence[int]]],
                targets: np.ndarray | None = None, ratings: np.ndarray | None = None,
                cold_user: np.ndarray | None = None,
                cold_item: np.ndarray | None = None) -> Batch:
    """Pad a list of ``(user, item, user_history_ids, item_history_ids)``.

    Tokens of each example are ordered by (review_id, side) so that the order
    in which histories are supplied never reaches the arithmetic.
    """
    if store.dim != model.dim:
        raise ValueError(f"store dim {store.dim} does not match model dim {model.dim}")
    rows = []
    for user, item, uh, ih in examples:
        toks = sorted({(int(r), 0) for r in uh} | {(int(r), 1) for r in ih})
        if not toks:
            raise NoEvidenceError(user, item)
        rows.append(toks)
    B = len(examples)
    L = max(len(t) for t in rows)
    dtype = model.dtype
    E = np.zeros((B, L, model.dim), dtype=dtype)
    side = np.zeros((B, L), dtype=np.int8)
    mask = np.zeros((B, L), dtype=np.bool_)
    rids = np.full((B, L), -1, dtype=np.int64)
    for b, toks in enumerate(rows):
        n = len(toks)
        ids = [t[0] for t in toks]
        E[b, :n] = store.rows(ids)
        side[b, :n] = [t[1] for t in toks]
        mask[b, :n] = True
        rids[b, :n] = ids
    n_u, n_i = len(model.users), len(model.items)
    u_b = np.array([model.user_pos.get(ex[0], -1) for ex in examples], dtype=np.int64)
    i_b = np.array([model.item_pos.get(ex[1], -1) for ex in examples], dtype=np.int64)
    u_v = np.where(u_b >= 0, u_b, n_u)
    i_v = np.where(i_b >= 0, i_b, n_i)
    if cold_user is not None:
        u_v = np.where(cold_user, n_u, u_v)
    if cold_item is not None:
        i_v = np.where(cold_item, n_i, i_v)
    ent = np.array([model.entity_row(ex[0], ex[1]) for ex in examples], dtype=np.int64)
    return Batch(E, side, mask, rids, u_v, i_v, u_b, i_b, ent,
                 None if targets is None else np.asarray(targets, dtype=dtype),
                 None if ratings is None else np.asarray(ratings, dtype=dtype))


# ------------------------------------------------------------------ forward

def _split_heads(t, B, L, h):
    return t.reshape(B, L, h, -1).transpose(0, 2, 1, 3)


def _merge_heads(t, B, L):
    return t.transpose(0, 2, 1, 3).reshape(B * L, -1)


def _block_fwd(p, pre, X, mask, heads):
    B, L, d = X.shape
    scale = np.asarray(1.0 / np.sqrt(d // heads), dtype=X.dtype)
    x = X.reshape(B * L, d)
    A, a_hat, a_rstd = K.layer_norm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    qh = _split_heads(A @ p[pre + "attn.wq"] + p[pre + "attn.bq"], B, L, heads)
    kh = _split_heads(A @ p[pre + "attn.wk"], B, L, heads)
    vh = _split_heads(A @ p[pre + "attn.wv"] + p[pre + "attn.bv"], B, L, heads)
    P = K.masked_softmax_fwd((qh @ kh.transpose(0, 1, 3, 2)) * scale, mask)
    o = _merge_heads(P @ vh, B, L)
    X1 = x + (o @ p[pre + "attn.wo"] + p[pre + "attn.bo"])
    Bn, b_hat, b_rstd = K.layer_norm_fwd(X1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    Z = Bn @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
    R = np.maximum(Z, 0)
    X2 = X1 + (R @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"])
    cache = dict(A=A, a_hat=a_hat, a_rstd=a_rstd, qh=qh, kh=kh, vh=vh, P=P, o=o,
                 Bn=Bn, b_hat=b_hat, b_rstd=b_rstd, Z=Z, R=R, scale=scale)
    return X2.reshape(B, L, d), cache


def _block_bwd(p, g, pre, dX2, c, heads):
    B, L, d = dX2.shape
    dX2 = dX2.reshape(B * L, d)
    g[pre + "ffn.w2"] += c["R"].T @ dX2
    g[pre + "ffn.b2"] += dX2.sum(0)
    dZ = (dX2 @ p[pre + "ffn.w2"].T) * (c["Z"] > 0)
    g[pre + "ffn.w1"] += c["Bn"].T @ dZ
    g[pre + "ffn.b1"] += dZ.sum(0)
    dx, dg, db = K.layer_norm_bwd(dZ @ p[pre + "ffn.w1"].T, c["b_hat"], c["b_rstd"],
                                  p[pre + "ln2.g"])
    g[pre + "ln2.g"] += dg
    g[pre + "ln2.b"] += db
    dX1 = dX2 + dx
    g[pre + "attn.wo"] += c["o"].T @ dX1
    g[pre + "attn.bo"] += dX1.sum(0)
    do = _split_heads(dX1 @ p[pre + "attn.wo"].T, B, L, heads)
    P = c["P"]
    dvh = P.transpose(0, 1, 3, 2) @ do
    dS = K.softmax_bwd(do @ c["vh"].transpose(0, 1, 3, 2), P) * c["scale"]
    dqh = dS @ c["kh"]
    dkh = dS.transpose(0, 1, 3, 2) @ c["qh"]
    dA = np.zeros_like(dX1)
    A = c["A"]
    for m, dh in (("q", dqh), ("k", dkh), ("v", dvh)):
        dm = _merge_heads(dh, B, L)
        g[pre + f"attn.w{m}"] += A.T @ dm
        if m != "k":
            g[pre + f"attn.b{m}"] += dm.sum(0)
        dA += dm @ p[pre + f"attn.w{m}"].T
    dx, dg, db = K.layer_norm_bwd(dA, c["a_hat"], c["a_rstd"], p[pre + "ln1.g"])
    g[pre + "ln1.g"] += dg
    g[pre + "ln1.b"] += db
    return (dX1 + dx).reshape(B, L, d)


def assemble_input(p: dict, batch: Batch) -> np.ndarray:
    """Token matrix: review embedding + v_user + v_item + role embedding (no positions)."""
    C = np.stack([p["c_user_side"], p["c_item_side"]])
    X0 = batch.E + p["v_user"][batch.u_v][:, None, :] + p["v_item"][batch.i_v][:, None, :] \
        + C[batch.side]
    return X0 * batch.mask[:, :, None]


def attention_scores(p: dict, T: np.ndarray, vu: np.ndarray, vi: np.ndarray) -> np.ndarray:
    """Raw personalized scores: affine map of concat(token, v_user, v_item)."""
    d = T.shape[-1]
    a = p["attn_scorer.w"]
    return T @ a[:d] + (vu @ a[d:2 * d])[:, None] + (vi @ a[2 * d:])[:, None] \
        + p["attn_scorer.b"][0]


def forward(model: RetrieverModel, batch: Batch, keep_cache: bool = True):
    """Return ``(Q, r_hat, adjustment, cache)`` for a padded batch."""
    p, r, cfg = model.params, model.rparams, model.config
    X = assemble_input(p, batch)
    blocks = []
    for b in range(N_BLOCKS):
        X, c = _block_fwd(p, f"block{b}.", X, batch.mask, cfg.heads)
        blocks.append(c)
    B, L, d = X.shape
    t_hat = t_rstd = None
    if "ln_f.g" in p:
        T, t_hat, t_rstd = K.layer_norm_fwd(X.reshape(B * L, d), p["ln_f.g"], p["ln_f.b"])
        T = T.reshape(B, L, d)
    else:
        T = X
    vu = p["v_user"][batch.u_v]
    vi = p["v_item"][batch.i_v]
    raw = attention_scores(p, T, vu, vi)
    w, tot, uniform = K.relu_pool_fwd(raw, batch.mask)
    pooled = (w[:, None, :] @ T)[:, 0, :]
    h1 = pooled @ p["query_head.w1"] + p["query_head.b1"]
    r1 = np.maximum(h1, 0)
    Q = r1 @ p["query_head.w2"] + p["query_head.b2"]

    fq, adj, r_hat = _rating_fwd(r, Q, batch)
    cache = None
    if keep_cache:
        cache = dict(mask=batch.mask, blocks=blocks, T=T, t_hat=t_hat, t_rstd=t_rstd, vu=vu, vi=vi, raw=raw, w=w, tot=tot, uniform=uniform,
                     pooled=pooled, h1=h1, r1=r1, fq=fq)
    return Q, r_hat, adj, cache


def _gamma_rows(r, ent):
    gam = np.zeros((len(ent), r["gamma"].shape[1]), dtype=r["gamma"].dtype)
    ok = ent >= 0
    gam[ok] = r["gamma"][ent[ok]]
    return gam


def _bias(vec, idx):
    out = np.zeros(len(idx), dtype=vec.dtype)
    ok = idx >= 0
    out[ok] = vec[idx[ok]]
    return out


def _rating_fwd(r, Q, batch):
    fq = Q @ r["factor.w"] + r["factor.b"]
    adj = (fq * _gamma_rows(r, batch.ent)).sum(axis=1)
    wide = Q @ r["wide.w"] + r["wide.b"][0]
    r_hat = adj + wide + _bias(r["beta_user"], batch.u_b) + _bias(r["beta_item"], batch.i_b) \
        + r["mu"][0]
    return fq, adj, r_hat


def activation_pattern(cache) -> bytes:
    """Signature of every ReLU/fallback branch taken; used to spot kinks."""
    valid = cache["mask"].reshape(-1)
    parts = [np.packbits(c["Z"][valid] > 0).tobytes() for c in cache["blocks"]]
    parts.append(np.packbits(cache["raw"][cache["mask"]] > 0).tobytes())
    parts.append(np.packbits(cache["uniform"]).tobytes())
    parts.append(np.packbits(cache["h1"] > 0).tobytes())
    return b"|".join(parts)


# ------------------------------------------------------------------ loss

def joint_loss(Q, target, r_hat, r, weights=(1.0, 1.0)):
    """Per-example ``(total, l_retrieve, l_rating)``: squared L2 plus squared rating error."""
    Q = np.asarray(Q, dtype=np.float64)
    diff = Q - np.asarray(target, dtype=np.float64)
    l_ret = (diff * diff).sum(axis=-1)
    l_rat = (np.asarray(r_hat, dtype=np.float64) - np.asarray(r, dtype=np.float64)) ** 2
    return weights[0] * l_ret + weights[1] * l_rat, l_ret, l_rat


def loss_and_grads(model: RetrieverModel, batch: Batch, with_grads: bool = True):
    """Mean joint loss over the batch and, optionally, gradients of every learned tensor."""
    cfg = model.config
    Q, r_hat, adj, cache = forward(model, batch, keep_cache=with_grads)
    total, l_ret, l_rat = joint_loss(Q, batch.target, r_hat, batch.rating,
                                     (cfg.w_retrieve, cfg.w_rating))
    stats = dict(total=float(total.mean()), l_retrieve=float(l_ret.mean()),
                 l_rating=float(l_rat.mean()))
    if not with_grads:
        return stats, None, None
    B = len(batch)
    dt = model.dtype
    dQ = ((2.0 * cfg.w_retrieve / B) * (Q - batch.target)).astype(dt)
    e = ((2.0 * cfg.w_rating / B) * (r_hat - batch.rating)).astype(dt)
    gp, gr = backward(model, batch, cache, Q, dQ, e)
    return stats, gp, gr


def backward(model: RetrieverModel, batch: Batch, cache, Q, dQ, e):
    """Backprop ``dL/dQ`` and ``dL/dr_hat`` through the whole network."""
    p, r, cfg = model.params, model.rparams, model.config
    d = model.dim
    gp = {k: np.zeros_like(v) for k, v in p.items()}
    gr = {k: np.zeros_like(v) for k, v in r.items() if k not in FROZEN}

    # rating head
    gam = _gamma_rows(r, batch.ent)
    ok = batch.ent >= 0
    np.add.at(gr["gamma"], batch.ent[ok], e[ok, None] * cache["fq"][ok])
    dfq = e[:, None] * gam
    gr["factor.w"] += Q.T @ dfq
    gr["factor.b"] += dfq.sum(0)
    gr["wide.w"] += e @ Q
    gr["wide.b"] += e.sum()
    okb = batch.u_b >= 0
    np.add.at(gr["beta_user"], batch.u_b[okb], e[okb])
    okb = batch.i_b >= 0
    np.add.at(gr["beta_item"], batch.i_b[okb], e[okb])
    dQ = dQ + dfq @ r["factor.w"].T + e[:, None] * r["wide.w"]

    # query head
    gp["query_head.w2"] += cache["r1"].T @ dQ
    gp["query_head.b2"] += dQ.sum(0)
    dh1 = (dQ @ p["query_head.w2"].T) * (cache["h1"] > 0)
    gp["query_head.w1"] += cache["pooled"].T @ dh1
    gp["query_head.b1"] += dh1.sum(0)
    dpooled = dh1 @ p["query_head.w1"].T

    # personalized attention pooling
    T, w = cache["T"], cache["w"]
    dw = (T @ dpooled[:, :, None])[:, :, 0]
    dT = w[:, :, None] * dpooled[:, None, :]
    dr = K.relu_pool_bwd(dw, w, cache["raw"], batch.mask, cache["tot"], cache["uniform"])
    a = p["attn_scorer.w"]
    dT += dr[:, :, None] * a[:d]
    rs = dr.sum(axis=1)
    ga = gp["attn_scorer.w"]
    ga[:d] += np.einsum("bl,bld->d", dr, T)
    ga[d:2 * d] += rs @ cache["vu"]
    ga[2 * d:] += rs @ cache["vi"]
    gp["attn_scorer.b"] += rs.sum()
    dvu = rs[:, None] * a[d:2 * d]
    dvi = rs[:, None] * a[2 * d:]

    # final norm and transformer blocks
    B, L, _ = dT.shape
    dX = dT
    if "ln_f.g" in p:
        dX, dg, db = K.layer_norm_bwd(dT.reshape(B * L, d), cache["t_hat"], cache["t_rstd"],
                                      p["ln_f.g"])
        gp["ln_f.g"] += dg
        gp["ln_f.b"] += db
        dX = dX.reshape(B, L, d)
    for b in reversed(range(N_BLOCKS)):
        dX = _block_bwd(p, gp, f"block{b}.", dX, cache["blocks"][b], cfg.heads)

    # input assembly
    dX = dX * batch.mask[:, :, None]
    tok_sum = dX.sum(axis=1)
    np.add.at(gp["v_user"], batch.u_v, tok_sum + dvu)
    np.add.at(gp["v_item"], batch.i_v, tok_sum + dvi)
    user_side = batch.mask & (batch.side == 0)
    item_side = batch.mask & (batch.side == 1)
    gp["c_user_side"] += dX[user_side].sum(axis=0)
    gp["c_item_side"] += dX[item_side].sum(axis=0)
    return gp, gr


# ------------------------------------------------------------------ inference

def history_example(corpus: Corpus, user_id: str, item_id: str, max_history: int,
                    exclude_review: int | None = None):
    uh, ih = related_reviews(corpus, user_id, item_id, exclude_review, max_history)
    return user_id, item_id, uh, ih


def query_from_histories(model: RetrieverModel, store: EmbeddingStore, user_id: str,
                         item_id: str, user_hist: Sequence[int],
                         item_hist: Sequence[int]) -> LatentQuery:
    batch = build_batch(model, store, [(user_id, item_id, user_hist, item_hist)])
    Q, _, _, _ = forward(model, batch, keep_cache=False)
    return LatentQuery(Q[0], user_id, item_id)


def forward_query(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore,
                  user_id: str, item_id: str,
                  exclude_review: int | None = None) -> LatentQuery:
    _, _, uh, ih = history_example(corpus, user_id, item_id, model.config.max_history,
                                   exclude_review)
    return query_from_histories(model, store, user_id, item_id, uh, ih)


def forward_queries(model: RetrieverModel, corpus: Corpus, store: EmbeddingStore,
                    pairs: Sequence[tuple[str, str]]) -> list[LatentQuery]:
    """Single-pair forward for each pair (bitwise equal to :func:`forward_query`)."""
    return [forward_query(model, corpus, store, u, i) for u, i in pairs]


def predict_rating(Q, user_id: str, item_id: str, model: RetrieverModel) -> tuple[float, float]:
    """``(r_hat, adjustment)``; adjustment is dot(factor_mlp(Q), gamma[entity])."""
    values = Q.values if isinstance(Q, LatentQuery) else np.asarray(Q)
    r = model.rparams
    values = values.astype(model.dtype)
    fq = values @ r["factor.w"] + r["factor.b"]
    ent = model.entity_row(user_id, item_id)
    gamma = r["gamma"][ent] if ent >= 0 else np.zeros_like(fq)
    adj = float(fq @ gamma)
    wide = float(values @ r["wide.w"] + r["wide.b"][0])
    bu = float(r["beta_user"][model.user_pos[user_id]]) if user_id in model.user_pos else 0.0
    bi = float(r["beta_item"][model.item_pos[item_id]]) if item_id in model.item_pos else 0.0
    return adj + wide + bu + bi + model.mu, adj
