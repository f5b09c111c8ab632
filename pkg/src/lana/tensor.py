"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an array. Applying a primitive to tensors that
require gradients appends a record to the thread's active :class:`Tape`;
:func:`backward` walks that tape in reverse and accumulates adjoints into
the ``grad`` slot of every leaf.

Primitives are registered by name and applied with :func:`apply_primitive`.
The functional wrappers at the bottom of the module (``matmul``, ``softmax``
and so on) are what model code calls.
"""

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ContractViolation, NumericDomainError

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractViolation("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return bmm(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ------------------------------------------------------------------- tape

class Record(NamedTuple):
    kind: str
    inputs: tuple
    attrs: dict
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered log of primitive applications on one thread."""

    def __init__(self):
        self.records = []
        self._prev = None

    def record(self, kind, inputs, attrs, output, vjp):
        self.records.append(Record(kind, tuple(inputs), attrs, output, vjp))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)

    def replay(self):
        """Recompute every recorded output from the current leaf values.

        Returns ``{node_id: array}`` for every recorded output.
        """
        values = {}
        for rec in self.records:
            args = [values.get(t.node_id, t.data) for t in rec.inputs]
            out, _ = _REGISTRY[rec.kind](*args, **rec.attrs)
            values[rec.output.node_id] = out
        return values

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False


def current_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------- primitive core

_REGISTRY = {}


def primitive(kind):
    def deco(fn):
        _REGISTRY[kind] = fn
        return fn

    return deco


def primitive_kinds():
    return sorted(_REGISTRY)


def apply_primitive(kind, inputs, **attrs):
    """Apply primitive ``kind`` to a list of tensors.

    Non-tensor arguments (masks, indices, axes) travel in ``attrs`` and are
    treated as constants.
    """
    fn = _REGISTRY.get(kind)
    if fn is None:
        raise ContractViolation(f"unknown primitive {kind!r}")
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    out, vjp = fn(*[t.data for t in inputs], **attrs)
    if getattr(_local, "grad_enabled", True) and any(t.requires_grad for t in inputs):
        result = Tensor(out, requires_grad=True)
        current_tape().record(kind, inputs, attrs, result, vjp)
        return result
    return Tensor(out)


def backward(loss, tape=None, retain=False):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns the leaf gradients keyed by ``node_id``. The tape is cleared
    afterwards unless ``retain`` is set.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("backward: loss does not depend on any tensor requiring grad")
    tape = tape or current_tape()
    grads = {loss.node_id: np.ones_like(loss.data)}
    owners = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            nid = t.node_id
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
                owners[nid] = t
    table = {}
    for nid, g in grads.items():
        t = owners.get(nid)
        if t is None:
            continue
        t.grad = np.array(g) if t.grad is None else t.grad + g
        table[nid] = t.grad
    if not retain:
        tape.clear()
    return table


def zero_grad(params):
    for p in params:
        p.grad = None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _elementwise(kind, op, a, b):
    try:
        return op(a, b)
    except ValueError:
        raise ContractViolation(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ------------------------------------------------------------- primitives

@primitive("matmul")
def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a @ b

    def vjp(g):
        return g @ b.T, a.T @ g

    return out, vjp


@primitive("bmm")
def _bmm(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"bmm: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ContractViolation(f"bmm: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        if b.ndim == 2:
            # shared weight matrix: fold batch axes into rows
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return out, vjp


@primitive("add")
def _add(a, b):

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _elementwise("add", np.add, a, b), vjp


@primitive("sub")
def _sub(a, b):

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _elementwise("sub", np.subtract, a, b), vjp


@primitive("mul")
def _mul(a, b):

    def vjp(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return _elementwise("mul", np.multiply, a, b), vjp


@primitive("scale")
def _scale(x, c):
    c = float(c)

    def vjp(g):
        return (g * c,)

    return x * c, vjp


@primitive("exp")
def _exp(x):
    out = np.exp(x)

    def vjp(g):
        return (g * out,)

    return out, vjp


@primitive("log")
def _log(x):
    if np.any(~(x > 0)):
        raise NumericDomainError("log: input must be strictly positive")
    out = np.log(x)

    def vjp(g):
        return (g / x,)

    return out, vjp


@primitive("sigmoid")
def _sigmoid(x):
    out = expit(x)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return out, vjp


@primitive("relu")
def _relu(x):
    pos = x > 0

    def vjp(g):
        return (g * pos,)

    return np.where(pos, x, 0.0), vjp


@primitive("softplus")
def _softplus(x):
    def vjp(g):
        return (g * expit(x),)

    return np.logaddexp(0.0, x), vjp


@primitive("clip")
def _clip(x, lo, hi):
    inside = (x >= lo) & (x <= hi)

    def vjp(g):
        return (g * inside,)

    return np.clip(x, lo, hi), vjp


@primitive("softmax")
def _softmax(x, mask=None):
    if x.ndim < 1:
        raise ContractViolation("softmax: input must have at least one axis")
    n = x.shape[-1]
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        try:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        except ValueError:
            raise ContractViolation(
                f"softmax: mask shape {np.shape(mask)} does not broadcast to {x.shape}"
            ) from None
    x2 = np.ascontiguousarray(x).reshape(-1, n)
    m2 = np.ascontiguousarray(mask).reshape(-1, n)
    if not np.isfinite(x2).all() and not np.isfinite(x2[m2]).all():
        raise NumericDomainError("softmax: non-finite score at an unmasked entry")
    y2 = kernels.softmax_fwd(x2, m2)

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        return (kernels.softmax_bwd(y2, g2).reshape(x.shape),)

    return y2.reshape(x.shape), vjp


@primitive("concat")
def _concat(*xs, axis=-1):
    if not xs:
        raise ContractViolation("concat: no inputs")
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ContractViolation(f"concat: shapes {[x.shape for x in xs]} disagree off axis {axis}")
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))

    return np.concatenate(xs, axis=ax), vjp


@primitive("slice")
def _slice(x, key):
    out = x[key]
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None):
            raise ContractViolation("slice: only basic indexing is supported")

    def vjp(g):
        full = np.zeros(x.shape)
        full[key] = g
        return (full,)

    return out, vjp


@primitive("reshape")
def _reshape(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return out, vjp


@primitive("transpose")
def _transpose(x, axes):
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ContractViolation(f"transpose: axes {axes} invalid for shape {x.shape}")

    def vjp(g):
        return (g.transpose(np.argsort([a % x.ndim for a in axes])),)

    return x.transpose(axes), vjp


@primitive("embedding")
def _embedding(weight, idx):
    idx = np.asarray(idx)
    if weight.ndim != 2:
        raise ContractViolation(f"embedding: weight must be 2-D, got {weight.shape}")
    if idx.dtype.kind not in "iu":
        raise ContractViolation("embedding: indices must be integers")
    vocab = weight.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ContractViolation(
            f"embedding: index out of range [0, {vocab}) (min {idx.min()}, max {idx.max()})"
        )
    flat = np.ascontiguousarray(idx.reshape(-1), dtype=np.int64)

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(-1, weight.shape[1])
        return (kernels.embedding_bwd(flat, g2, vocab),)

    return weight[idx], vjp


@primitive("sum")
def _sum(x, axis=None, keepdims=False):
    out = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return out, vjp


@primitive("mean")
def _mean(x, axis=None, keepdims=False):
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return out, vjp


@primitive("contract3")
def _contract3(w, p):
    """Contract a (Dy, Dx, Dp) tensor with p (..., Dp) over Dp -> (..., Dy, Dx)."""
    if w.ndim != 3 or p.ndim < 1 or w.shape[2] != p.shape[-1]:
        raise ContractViolation(f"contract3: shapes {w.shape} and {p.shape} do not conform")
    dy, dx, dp = w.shape
    wf = w.reshape(dy * dx, dp)
    pf = p.reshape(-1, dp)
    out = (pf @ wf.T).reshape(p.shape[:-1] + (dy, dx))

    def vjp(g):
        gf = g.reshape(-1, dy * dx)
        return (gf.T @ pf).reshape(w.shape), (gf @ wf).reshape(p.shape)

    return out, vjp


@primitive("layer_norm")
def _layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractViolation(
            f"layer_norm: gain {gamma.shape} / bias {beta.shape} do not match width {d}"
        )
    x2 = np.ascontiguousarray(x).reshape(-1, d)
    y2, xhat, rstd = kernels.layer_norm_fwd(x2, gamma, beta, eps)

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        dx, dgamma, dbeta = kernels.layer_norm_bwd(g2, xhat, rstd, gamma)
        return dx.reshape(x.shape), dgamma, dbeta

    return y2.reshape(x.shape), vjp


@primitive("decay_bias")
def _decay_bias(rate, dis, cap=30.0):
    """-min(rate * dis, cap) for rate (B, H, nq) and constant dis (B, nq, nk).

    Returns (B, H, nq, nk); every head shares the distance matrix.
    """
    dis = np.asarray(dis, dtype=np.float64)
    if dis.ndim == 2:
        dis = dis[None]
    if rate.ndim != 3 or dis.ndim != 3 or dis.shape[1] != rate.shape[2] or dis.shape[0] not in (1, rate.shape[0]):
        raise ContractViolation(f"decay_bias: rate {rate.shape} and dis {dis.shape} do not conform")
    dis = np.ascontiguousarray(np.broadcast_to(dis, (rate.shape[0],) + dis.shape[1:]))
    rate_c = np.ascontiguousarray(rate)
    cap = float(cap)

    def vjp(g):
        return (kernels.decay_bias_bwd(np.ascontiguousarray(g), rate_c, dis, cap),)

    return kernels.decay_bias(rate_c, dis, cap), vjp


@primitive("pivot_linear")
def _pivot_linear(x, p, w, b):
    """y[n, o] = sum_{i,k} w[o, i, k] x[n, i] p[n, k] + b[o] over leading axes."""
    if w.ndim != 3 or x.shape[-1] != w.shape[1] or p.shape[-1] != w.shape[2] or x.shape[:-1] != p.shape[:-1]:
        raise ContractViolation(f"pivot_linear: x {x.shape}, p {p.shape}, w {w.shape} do not conform")
    d_out, d_in, d_feat = w.shape
    if b.shape != (d_out,):
        raise ContractViolation(f"pivot_linear: bias {b.shape} != ({d_out},)")
    lead = x.shape[:-1]
    xf = np.ascontiguousarray(x).reshape(-1, d_in)
    pf = np.ascontiguousarray(p).reshape(-1, d_feat)
    # w2[i, o * d_feat + k] = w[o, i, k]
    w2 = np.ascontiguousarray(w.transpose(1, 0, 2)).reshape(d_in, d_out * d_feat)
    z = xf @ w2
    y = kernels.pivot_mix(z, pf, d_out) + b

    def vjp(g):
        gf = np.ascontiguousarray(g).reshape(-1, d_out)
        gz, gp = kernels.pivot_mix_bwd(gf, z, pf, d_out)
        gx = gz @ w2.T
        gw = (xf.T @ gz).reshape(d_in, d_out, d_feat).transpose(1, 0, 2)
        return gx.reshape(x.shape), gp.reshape(p.shape), gw, gf.sum(axis=0)

    return y.reshape(lead + (d_out,)), vjp


# --------------------------------------------------------- functional API

def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def bmm(a, b):
    return apply_primitive("bmm", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(x, c):
    return apply_primitive("scale", [x], c=c)


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def relu(x):
    return apply_primitive("relu", [x])


def softplus(x):
    return apply_primitive("softplus", [x])


def clip(x, lo, hi):
    return apply_primitive("clip", [x], lo=lo, hi=hi)


def softmax(x, mask=None):
    return apply_primitive("softmax", [x], mask=mask)


def concat(xs, axis=-1):
    return apply_primitive("concat", list(xs), axis=axis)


def slice_(x, key):
    return apply_primitive("slice", [x], key=key)


def reshape(x, shape):
    return apply_primitive("reshape", [x], shape=tuple(shape))


def transpose(x, axes):
    return apply_primitive("transpose", [x], axes=tuple(axes))


def embedding(weight, idx):
    return apply_primitive("embedding", [weight], idx=idx)


def sum_(x, axis=None, keepdims=False):
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def contract3(w, p):
    return apply_primitive("contract3", [w, p])


def layer_norm(x, gamma, beta, eps=1e-5):
    return apply_primitive("layer_norm", [x, gamma, beta], eps=eps)


def decay_bias(rate, dis, cap=30.0):
    return apply_primitive("decay_bias", [rate], dis=dis, cap=cap)


def pivot_linear(x, p, w, b):
    return apply_primitive("pivot_linear", [x, p, w, b])


# ------------------------------------------------------ verification oracle

def finite_diff_check(builder, point, eps=1e-6):
    """Largest relative gap between analytic and central-difference gradients.

    ``builder`` maps a list of tensors to a scalar tensor and must be
    deterministic. The error at each coordinate is
    ``|analytic - numeric| / max(|analytic|, 1e-8)``.
    """
    if not (0 < eps <= 1e-3):
        raise ContractViolation(f"finite_diff_check: eps must lie in (0, 1e-3], got {eps}")
    base = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in point]
    leaves = [Tensor(b.copy(), requires_grad=True) for b in base]
    with Tape() as tape:
        loss = builder(leaves)
        if not np.all(np.isfinite(loss.data)):
            raise NumericDomainError("finite_diff_check: non-finite loss at the base point")
        backward(loss, tape=tape)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def evaluate(arrays):
        with no_grad():
            val = builder([Tensor(a) for a in arrays]).data
        if not np.all(np.isfinite(val)):
            raise NumericDomainError("finite_diff_check: non-finite loss under perturbation")
        return float(val.reshape(-1)[0])

    worst = 0.0
    for i, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = evaluate(base)
            flat[j] = orig - eps
            fm = evaluate(base)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[i].reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(abs(a), 1e-8))
    return worst
