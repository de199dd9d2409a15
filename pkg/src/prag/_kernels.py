"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``PRAG_NUMBA`` ("0" disables numba)
and can be switched at runtime with :func:`set_backend`.  Both paths accept
float32 and float64 arrays and return arrays of the input dtype.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

LN_EPS = 1e-5


# ---------------------------------------------------------------- numpy path

def _np_layer_norm_fwd(x, g, b):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd[..., 0]


def _np_layer_norm_bwd(dy, xhat, rstd, g):
    d = xhat.shape[-1]
    dxhat = dy * g
    dx = (rstd[:, None] / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                                 - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _np_masked_softmax_fwd(s, mask):
    # s: (B, H, L, L); mask: (B, L) over keys
    neg = np.where(mask[:, None, None, :], s, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_bwd(dp, p):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def _np_relu_pool_fwd(raw, mask):
    s = np.where(mask, np.maximum(raw, 0.0), 0.0).astype(raw.dtype)
    tot = s.sum(axis=1)
    uniform = tot <= 0.0
    cnt = mask.sum(axis=1)
    w = np.where(uniform[:, None], mask / np.maximum(cnt, 1)[:, None],
                 s / np.where(uniform, 1.0, tot)[:, None]).astype(raw.dtype)
    return w, tot, uniform


def _np_relu_pool_bwd(dw, w, raw, mask, tot, uniform):
    inner = (dw * w).sum(axis=1, keepdims=True)
    ds = (dw - inner) / np.where(uniform, 1.0, tot)[:, None]
    ds = np.where(uniform[:, None], 0.0, ds)
    return np.where(mask & (raw > 0.0), ds, 0.0).astype(raw.dtype)


def _np_cosine_scores(matrix, query):
    q = query.astype(np.float64)
    m = matrix.astype(np.float64)
    qn = np.sqrt(q @ q)
    mn = np.sqrt(np.einsum("ij,ij->i", m, m))
    dots = m @ q
    denom = mn * qn
    out = np.zeros(m.shape[0], dtype=np.float64)
    ok = denom > 0.0
    out[ok] = dots[ok] / denom[ok]
    return out


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _nb_layer_norm_fwd(x, g, b):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / np.sqrt(var + LN_EPS)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                y[i, j] = h * g[j] + b[j]
        return y, xhat, rstd

    @njit(cache=True)
    def _nb_layer_norm_bwd(dy, xhat, rstd, g):
        n, d = dy.shape
        dx = np.empty_like(dy)
        dg = np.zeros(d, dtype=dy.dtype)
        db = np.zeros(d, dtype=dy.dtype)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                dh = dy[i, j] * g[j]
                s1 += dh
                s2 += dh * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            r = rstd[i] / d
            for j in range(d):
                dh = dy[i, j] * g[j]
                dx[i, j] = r * (d * dh - s1 - xhat[i, j] * s2)
        return dx, dg, db

    @njit(cache=True)
    def _nb_masked_softmax_fwd(s, mask):
        B, H, L, _ = s.shape
        p = np.zeros_like(s)
        for b in range(B):
            for h in range(H):
                for i in range(L):
                    m = -np.inf
                    for j in range(L):
                        if mask[b, j] and s[b, h, i, j] > m:
                            m = s[b, h, i, j]
                    tot = 0.0
                    for j in range(L):
                        if mask[b, j]:
                            e = np.exp(s[b, h, i, j] - m)
                            p[b, h, i, j] = e
                            tot += e
                    for j in range(L):
                        p[b, h, i, j] /= tot
        return p

    @njit(cache=True)
    def _nb_softmax_bwd(dp, p):
        B, H, L, _ = p.shape
        ds = np.empty_like(p)
        for b in range(B):
            for h in range(H):
                for i in range(L):
                    inner = 0.0
                    for j in range(L):
                        inner += dp[b, h, i, j] * p[b, h, i, j]
                    for j in range(L):
                        ds[b, h, i, j] = p[b, h, i, j] * (dp[b, h, i, j] - inner)
        return ds

    @njit(cache=True)
    def _nb_relu_pool_fwd(raw, mask):
        B, L = raw.shape
        w = np.zeros_like(raw)
        tot = np.zeros(B, dtype=raw.dtype)
        uniform = np.zeros(B, dtype=np.bool_)
        for b in range(B):
            t = 0.0
            cnt = 0
            for j in range(L):
                if mask[b, j]:
                    cnt += 1
                    if raw[b, j] > 0.0:
                        t += raw[b, j]
            tot[b] = t
            if t <= 0.0:
                uniform[b] = True
                for j in range(L):
                    if mask[b, j]:
                        w[b, j] = 1.0 / cnt
            else:
                for j in range(L):
                    if mask[b, j] and raw[b, j] > 0.0:
                        w[b, j] = raw[b, j] / t
        return w, tot, uniform

    @njit(cache=True)
    def _nb_relu_pool_bwd(dw, w, raw, mask, tot, uniform):
        B, L = raw.shape
        dr = np.zeros_like(raw)
        for b in range(B):
            if uniform[b]:
                continue
            inner = 0.0
            for j in range(L):
                inner += dw[b, j] * w[b, j]
            for j in range(L):
                if mask[b, j] and raw[b, j] > 0.0:
                    dr[b, j] = (dw[b, j] - inner) / tot[b]
        return dr

    @njit(cache=True)
    def _nb_cosine_scores(matrix, query):
        n, d = matrix.shape
        qn = 0.0
        for j in range(d):
            qn += np.float64(query[j]) * np.float64(query[j])
        qn = np.sqrt(qn)
        out = np.zeros(n, dtype=np.float64)
        for i in range(n):
            dot = 0.0
            mn = 0.0
            for j in range(d):
                v = np.float64(matrix[i, j])
                dot += v * np.float64(query[j])
                mn += v * v
            denom = np.sqrt(mn) * qn
            if denom > 0.0:
                out[i] = dot / denom
        return out


_NUMPY = {
    "layer_norm_fwd": _np_layer_norm_fwd,
    "layer_norm_bwd": _np_layer_norm_bwd,
    "masked_softmax_fwd": _np_masked_softmax_fwd,
    "softmax_bwd": _np_softmax_bwd,
    "relu_pool_fwd": _np_relu_pool_fwd,
    "relu_pool_bwd": _np_relu_pool_bwd,
    "cosine_scores": _np_cosine_scores,
}
_NUMBA = {
    "layer_norm_fwd": _nb_layer_norm_fwd,
    "layer_norm_bwd": _nb_layer_norm_bwd,
    "masked_softmax_fwd": _nb_masked_softmax_fwd,
    "softmax_bwd": _nb_softmax_bwd,
    "relu_pool_fwd": _nb_relu_pool_fwd,
    "relu_pool_bwd": _nb_relu_pool_bwd,
    "cosine_scores": _nb_cosine_scores,
} if HAS_NUMBA else {}

_active: dict = {}


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels."""
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        _active.update(_NUMBA)
    elif name == "numpy":
        _active.update(_NUMPY)
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    _active["name"] = name


def backend() -> str:
    return _active["name"]


set_backend("numba" if HAS_NUMBA and os.environ.get("PRAG_NUMBA", "1") != "0" else "numpy")


def layer_norm_fwd(x, g, b):
    """Row-wise layer norm over the last axis of a 2-D array -> (y, xhat, rstd)."""
    return _active["layer_norm_fwd"](np.ascontiguousarray(x), g, b)


def layer_norm_bwd(dy, xhat, rstd, g):
    return _active["layer_norm_bwd"](np.ascontiguousarray(dy), xhat, rstd, g)


def masked_softmax_fwd(s, mask):
    """Softmax over keys (last axis) of (B, H, L, L) scores; masked keys get 0."""
    return _active["masked_softmax_fwd"](np.ascontiguousarray(s), mask)


def softmax_bwd(dp, p):
    return _active["softmax_bwd"](np.ascontiguousarray(dp), p)


def relu_pool_fwd(raw, mask):
    """ReLU scores normalized by their sum; all-zero rows fall back to uniform.

    Returns ``(weights, totals, uniform_flags)``.
    """
    return _active["relu_pool_fwd"](np.ascontiguousarray(raw), mask)


def relu_pool_bwd(dw, w, raw, mask, tot, uniform):
    return _active["relu_pool_bwd"](np.ascontiguousarray(dw), w, raw, mask, tot, uniform)


def cosine_scores(matrix, query):
    """Float64 cosine of each row of ``matrix`` with ``query``; zero norms give 0."""
    return _active["cosine_scores"](np.ascontiguousarray(matrix), np.ascontiguousarray(query))
