"""Student-conditioned operators: PivotLinear, pivot memory attention, PC-FFN."""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation

DECAY_CAP = 30.0


@dataclass
class PivotWeights:
    """``w`` has shape (d_out, d_in, d_feat); ``b`` has shape (d_out,)."""

    w: T.Tensor
    b: T.Tensor

    @property
    def dims(self):
        return self.w.shape


def pivot_linear(x, p, weights, route="fused"):
    """y = (W p) x + b at every leading position.

    Three evaluation routes give the same values up to rounding:
    ``"fused"`` (one primitive, default), ``"outer"`` (outer product of x
    and p against the flattened W) and ``"contract"`` (materialises the
    per-position matrix W p, the literal form).
    """
    x, p = T.as_tensor(x), T.as_tensor(p)
    d_out, d_in, d_feat = weights.w.shape
    if weights.b.shape != (d_out,):
        raise ContractViolation(f"pivot_linear: bias shape {weights.b.shape} != ({d_out},)")
    if x.shape[-1] != d_in or p.shape[-1] != d_feat or x.shape[:-1] != p.shape[:-1]:
        raise ContractViolation(
            f"pivot_linear: x {x.shape} / p {p.shape} do not match weights {weights.w.shape}"
        )
    if x.ndim == 1:
        y = pivot_linear(T.reshape(x, (1, d_in)), T.reshape(p, (1, d_feat)), weights, route)
        return T.reshape(y, (d_out,))
    lead = x.shape[:-1]
    if route == "fused":
        return T.pivot_linear(x, p, weights.w, weights.b)
    if route == "contract":
        wp = T.contract3(weights.w, p)
        y = T.reshape(T.bmm(wp, T.reshape(x, lead + (d_in, 1))), lead + (d_out,))
    elif route == "outer":
        outer = T.mul(T.reshape(x, lead + (d_in, 1)), T.reshape(p, lead + (1, d_feat)))
        flat = T.reshape(outer, lead + (d_in * d_feat,))
        w2 = T.transpose(T.reshape(weights.w, (d_out, d_in * d_feat)), (1, 0))
        y = T.bmm(flat, w2)
    else:
        raise ContractViolation(f"pivot_linear: unknown route {route!r}")
    return T.add(y, weights.b)


def pc_ffn(x, p, inner, outer, rectify=True):
    """x + PivotLinear(act(PivotLinear(x, p)), p); ``rectify=False`` drops the ReLU."""
    h = pivot_linear(x, p, inner)
    if rectify:
        h = T.relu(h)
    y = pivot_linear(h, p, outer)
    if y.shape != T.as_tensor(x).shape:
        raise ContractViolation(f"pc_ffn: output {y.shape} does not match input {x.shape}")
    return T.add(x, y)


def _check_rows(mask, shape, query_valid):
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, shape)
    except ValueError:
        raise ContractViolation(f"attention: mask shape {mask.shape} does not broadcast to {shape}") from None
    empty = ~mask.any(axis=-1)
    if query_valid is not None:
        qv = np.asarray(query_valid, dtype=bool)
        qv = qv.reshape(qv.shape[:-1] + (1,) * (empty.ndim - qv.ndim) + qv.shape[-1:])
        empty = empty & qv
    if empty.any():
        raise ContractViolation("attention: a valid query has every key masked")


def scaled_scores(q, k):
    d_head = q.shape[-1]
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return T.bmm(T.scale(q, 1.0 / math.sqrt(d_head)), kt)


def attention(q, k, v, mask, query_valid=None):
    """Plain masked scaled dot-product attention. Returns (context, weights)."""
    scores = scaled_scores(q, k)
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    _check_rows(mask, scores.shape, query_valid)
    alpha = T.softmax(scores, mask)
    return T.bmm(alpha, v), alpha


def pma_attention(q, k, v, dis, m, theta, mask, query_valid=None, renormalize=True, cap=DECAY_CAP):
    """Attention whose weights decay with elapsed minutes at a per-query rate.

    Shapes: q (B, H, nq, dh); k, v (B, H, nk, dh); dis (B, nq, nk) or
    (nq, nk), non-negative where the mask allows; m (B, H, nq); theta a
    one-element tensor. The rate is ``softplus(theta + m)`` and the decay
    exponent is capped at ``cap``.

    With ``renormalize`` the decayed weights are normalised over the valid
    keys. Without it, the plain softmax is multiplied by the decay factor
    and rows no longer sum to one.
    """
    q, k, v, m, theta = (T.as_tensor(t) for t in (q, k, v, m, theta))
    dis = np.asarray(dis, dtype=np.float64)
    if q.ndim != 4 or k.shape != v.shape or k.ndim != 4:
        raise ContractViolation(f"pma_attention: q {q.shape}, k {k.shape}, v {v.shape} must be rank 4")
    b, h, nq, _ = q.shape
    nk = k.shape[2]
    if dis.shape[-2:] != (nq, nk):
        raise ContractViolation(f"pma_attention: dis shape {dis.shape} != (..., {nq}, {nk})")
    if m.shape != (b, h, nq):
        raise ContractViolation(f"pma_attention: m shape {m.shape} != {(b, h, nq)}")
    if theta.size != 1:
        raise ContractViolation("pma_attention: theta must hold one value")
    if mask is None:
        mask = np.ones((b, h, nq, nk), dtype=bool)
    if (dis < 0).any():
        dis4 = dis[None, None] if dis.ndim == 2 else dis[:, None]
        if np.any(np.asarray(mask, dtype=bool) & (dis4 < 0)):
            raise ContractViolation("pma_attention: negative distance at an allowed key")
    scores = scaled_scores(q, k)
    _check_rows(mask, scores.shape, query_valid)
    rate = T.softplus(T.add(T.reshape(theta, ()), m))
    bias = T.decay_bias(rate, dis, cap)
    if renormalize:
        alpha = T.softmax(T.add(scores, bias), mask)
    else:
        alpha = T.mul(T.softmax(scores, mask), T.exp(bias))
    return T.bmm(alpha, v), alpha
