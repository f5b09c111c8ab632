"""Hot numeric kernels with numba and pure-numpy implementations.

Each kernel exists twice: ``*_np`` (vectorised numpy) and ``*_jit``
(explicit loops compiled by numba). The unsuffixed public names point at
one of the two depending on :data:`lana._jit.USE_JIT`. All kernels work on
2-D row-major float64 blocks; callers reshape.
"""

import math

import numpy as np

from ._jit import USE_JIT, njit

MASK_FILL = -1e9


# ---------------------------------------------------------------- softmax

def softmax_fwd_np(x, mask):
    z = np.where(mask, x, MASK_FILL)
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


@njit
def _shift_rows_jit(x, mask):
    rows, n = x.shape
    z = np.empty_like(x)
    for r in range(rows):
        mx = -np.inf
        for c in range(n):
            v = x[r, c] if mask[r, c] else MASK_FILL
            z[r, c] = v
            mx = max(mx, v)
        for c in range(n):
            z[r, c] -= mx
    return z


@njit
def _normalize_rows_jit(e):
    rows, n = e.shape
    for r in range(rows):
        s = 0.0
        for c in range(n):
            s += e[r, c]
        inv = 1.0 / s
        for c in range(n):
            e[r, c] *= inv


def softmax_fwd_jit(x, mask):
    # numba has no vectorised exp without SVML; numpy's is several times faster
    z = _shift_rows_jit(x, mask)
    np.exp(z, out=z)
    _normalize_rows_jit(z)
    return z


@njit
def softmax_bwd_jit(y, g):
    rows, n = y.shape
    out = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(n):
            dot += g[r, c] * y[r, c]
        for c in range(n):
            out[r, c] = y[r, c] * (g[r, c] - dot)
    return out


# ------------------------------------------------------------- layer norm

def layer_norm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd_np(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


@njit
def layer_norm_fwd_jit(x, gamma, beta, eps):
    rows, n = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for c in range(n):
            mu += x[r, c]
        mu /= n
        var = 0.0
        for c in range(n):
            d = x[r, c] - mu
            var += d * d
        var /= n
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for c in range(n):
            h = (x[r, c] - mu) * rs
            xhat[r, c] = h
            y[r, c] = h * gamma[c] + beta[c]
    return y, xhat, rstd


@njit
def layer_norm_bwd_jit(g, xhat, rstd, gamma):
    rows, n = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(n)
    dbeta = np.zeros(n)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(n):
            dh = g[r, c] * gamma[c]
            m1 += dh
            m2 += dh * xhat[r, c]
            dgamma[c] += g[r, c] * xhat[r, c]
            dbeta[c] += g[r, c]
        m1 /= n
        m2 /= n
        for c in range(n):
            dx[r, c] = rstd[r] * (g[r, c] * gamma[c] - m1 - xhat[r, c] * m2)
    return dx, dgamma, dbeta


# -------------------------------------------------------- embedding scatter

def embedding_bwd_np(idx, g, vocab):
    out = np.zeros((vocab, g.shape[1]))
    np.add.at(out, idx, g)
    return out


@njit
def embedding_bwd_jit(idx, g, vocab):
    out = np.zeros((vocab, g.shape[1]))
    for r in range(idx.shape[0]):
        row = idx[r]
        for c in range(g.shape[1]):
            out[row, c] += g[r, c]
    return out


# ------------------------------------------------------------------ AdamW

def adamw_np(p, g, m, v, lr, b1, b2, eps, wd, step):
    """In-place AdamW update on flat arrays."""
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    p *= 1.0 - lr * wd
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@njit
def adamw_jit(p, g, m, v, lr, b1, b2, eps, wd, step):
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    decay = 1.0 - lr * wd
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay - lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


# ------------------------------------------------------------ pivot mixing
# Z holds x @ W2 with columns grouped (d_out, d_feat); mixing contracts the
# d_feat axis against the per-row feature vector p.

def pivot_mix_np(z, p, d_out):
    n, d_feat = p.shape
    return np.einsum("nok,nk->no", z.reshape(n, d_out, d_feat), p)


def pivot_mix_bwd_np(g, z, p, d_out):
    n, d_feat = p.shape
    gz = (g[:, :, None] * p[:, None, :]).reshape(n, d_out * d_feat)
    gp = np.einsum("no,nok->nk", g, z.reshape(n, d_out, d_feat))
    return gz, gp


@njit
def pivot_mix_jit(z, p, d_out):
    n, d_feat = p.shape
    y = np.empty((n, d_out))
    for r in range(n):
        for o in range(d_out):
            acc = 0.0
            base = o * d_feat
            for k in range(d_feat):
                acc += z[r, base + k] * p[r, k]
            y[r, o] = acc
    return y


@njit
def pivot_mix_bwd_jit(g, z, p, d_out):
    n, d_feat = p.shape
    gz = np.empty((n, d_out * d_feat))
    gp = np.zeros((n, d_feat))
    for r in range(n):
        for o in range(d_out):
            go = g[r, o]
            base = o * d_feat
            for k in range(d_feat):
                gz[r, base + k] = go * p[r, k]
                gp[r, k] += go * z[r, base + k]
    return gz, gp


# ------------------------------------------------------------- decay bias
# rate: (B, H, nq) per-query rates; dis: (B, nq, nk) distances shared by heads.

def decay_bias_np(rate, dis, cap):
    return -np.minimum(rate[:, :, :, None] * dis[:, None], cap)


def decay_bias_bwd_np(g, rate, dis, cap):
    d4 = dis[:, None]
    live = rate[:, :, :, None] * d4 < cap
    return -(g * d4 * live).sum(axis=3)


@njit
def decay_bias_jit(rate, dis, cap):
    b, h, nq = rate.shape
    nk = dis.shape[2]
    out = np.empty((b, h, nq, nk))
    for bi in range(b):
        for hi in range(h):
            for i in range(nq):
                rt = rate[bi, hi, i]
                for j in range(nk):
                    out[bi, hi, i, j] = -min(rt * dis[bi, i, j], cap)
    return out


@njit
def decay_bias_bwd_jit(g, rate, dis, cap):
    b, h, nq = rate.shape
    nk = dis.shape[2]
    out = np.zeros((b, h, nq))
    for bi in range(b):
        for hi in range(h):
            for i in range(nq):
                rt = rate[bi, hi, i]
                acc = 0.0
                for j in range(nk):
                    d = dis[bi, i, j]
                    if rt * d < cap:
                        acc -= g[bi, hi, i, j] * d
                out[bi, hi, i] = acc
    return out

if USE_JIT:
    softmax_fwd = softmax_fwd_jit
    softmax_bwd = softmax_bwd_jit
    layer_norm_fwd = layer_norm_fwd_jit
    layer_norm_bwd = layer_norm_bwd_jit
    embedding_bwd = embedding_bwd_jit
    adamw = adamw_jit
    pivot_mix = pivot_mix_jit
    pivot_mix_bwd = pivot_mix_bwd_jit
    decay_bias = decay_bias_jit
    decay_bias_bwd = decay_bias_bwd_jit
else:
    softmax_fwd = softmax_fwd_np
    softmax_bwd = softmax_bwd_np
    layer_norm_fwd = layer_norm_fwd_np
    layer_norm_bwd = layer_norm_bwd_np
    embedding_bwd = embedding_bwd_np
    adamw = adamw_np
    pivot_mix = pivot_mix_np
    pivot_mix_bwd = pivot_mix_bwd_np
    decay_bias = decay_bias_np
    decay_bias_bwd = decay_bias_bwd_np
