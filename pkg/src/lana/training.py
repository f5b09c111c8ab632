"""Loss, metrics, AdamW, train/eval loops and checkpoint persistence."""

import io
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import dataio, kernels
from . import tensor as T
from .errors import CheckpointError, ContractViolation, UndefinedMetricError
from .model import Flags, LanaHyper, LanaParams, init_params, model_forward

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
CKPT_MAGIC = b"LANA"
CKPT_VERSION = 1


# ------------------------------------------------------------------ loss

def bce_loss(probs, targets, valid_mask, window_weights=None):
    """Mean binary cross-entropy over valid positions.

    ``window_weights`` (one per row) scales each window's terms; the
    denominator stays the number of valid positions.
    """
    probs = T.as_tensor(probs)
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ContractViolation("bce_loss: no valid positions")
    weight = mask
    if window_weights is not None:
        w = np.asarray(window_weights, dtype=np.float64)
        weight = mask * w.reshape((-1,) + (1,) * (mask.ndim - 1))
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.add(T.mul(T.log(p), targets), T.mul(T.log(T.sub(1.0, p)), 1.0 - targets))
    return T.scale(T.sum_(T.mul(ll, weight)), -1.0 / count)


def weighted_loss(base_loss, membership):
    """Scale a window's loss by its layer-membership probability."""
    if not 0.0 <= membership <= 1.0:
        raise ContractViolation(f"weighted_loss: membership must lie in [0, 1], got {membership}")
    if isinstance(base_loss, T.Tensor):
        return T.scale(base_loss, membership)
    return membership * base_loss


# ---------------------------------------------------------------- metric

def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractViolation("auc: scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc: need at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ------------------------------------------------------------- optimiser

@dataclass
class OptimState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(named_params, state):
    """One AdamW update over ``(name, tensor)`` pairs carrying ``grad``.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite.
    """
    named_params = [(k, p) for k, p in named_params if p.grad is not None]
    for name, p in named_params:
        if not np.all(np.isfinite(p.grad)):
            warnings.warn(f"non-finite gradient in {name!r}; step skipped", RuntimeWarning, stacklevel=2)
            return False
    state.step += 1
    for name, p in named_params:
        if name not in state.m:
            state.m[name] = np.zeros(p.size)
            state.v[name] = np.zeros(p.size)
        flat = p.data.reshape(-1)
        kernels.adamw(
            flat, np.ascontiguousarray(p.grad, dtype=np.float64).reshape(-1),
            state.m[name], state.v[name],
            state.lr, state.beta1, state.beta2, state.eps, state.weight_decay, state.step,
        )
    return True


def clip_grad_norm(tensors, max_norm):
    grads = [t.grad for t in tensors if t.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * f
    return total


# ----------------------------------------------------------- batch utils

def _batches(windows, batch_size, order=None):
    idx = np.arange(len(windows)) if order is None else order
    for i in range(0, len(idx), batch_size):
        sel = idx[i:i + batch_size]
        yield sel, dataio.stack_windows([windows[j] for j in sel])


def predict_windows(params, windows, batch_size=64):
    """Per-position probabilities for every window, shape (N, n)."""
    out = []
    with T.no_grad():
        for _, batch in _batches(windows, batch_size):
            out.append(model_forward(params, batch).data)
    return np.concatenate(out) if out else np.zeros((0, 0))


def collect_valid(preds, windows):
    """Flatten predictions and labels at valid positions, in window order."""
    mask = np.stack([w.valid_mask for w in windows])
    labels = np.stack([w.target for w in windows])
    return preds[mask], labels[mask]


# ------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0


def train(params, windows, config=TrainConfig(), window_weights=None, valid_windows=None,
          trainable=None, state=None, on_epoch=None):
    """Mini-batch AdamW training; returns the per-epoch history.

    ``window_weights`` scales each window's loss; windows of weight 0 are
    dropped before batching so they contribute nothing. ``trainable``
    restricts updates to parameter-name prefixes.
    """
    if not windows:
        raise ContractViolation("train: no training windows")
    weights = None
    if window_weights is not None:
        weights = np.asarray(window_weights, dtype=np.float64)
        if weights.shape != (len(windows),):
            raise ContractViolation("train: one weight per window required")
        keep = np.flatnonzero(weights > 0)
        windows = [windows[i] for i in keep]
        weights = weights[keep]
        if not windows:
            raise ContractViolation("train: every window has zero weight")
    named = [(k, p) for k, p in params.items()
             if trainable is None or k.startswith(tuple(trainable))]
    tensors = [p for _, p in named]
    if state is None:
        state = OptimState(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(windows))
        total, count = 0.0, 0.0
        for sel, batch in _batches(windows, config.batch_size, order):
            T.zero_grad(params)
            w = None if weights is None else weights[sel]
            with T.Tape() as tape:
                probs = model_forward(params, batch)
                loss = bce_loss(probs, batch["target"], batch["valid_mask"], w)
                T.backward(loss, tape)
            clip_grad_norm(tensors, config.clip_norm)
            optimizer_step(named, state)
            n_valid = float(batch["valid_mask"].sum())
            total += loss.item() * n_valid
            count += n_valid
        row = {"epoch": epoch, "train_loss": total / count, "valid_auc": float("nan")}
        if valid_windows:
            row["valid_auc"] = evaluate(params, valid_windows)[0]
        history.append(row)
        log.info("epoch %d train_loss %.5f valid_auc %.5f", epoch, row["train_loss"], row["valid_auc"])
        if on_epoch is not None:
            on_epoch(row)
    T.zero_grad(params)
    return history


def evaluate(model, windows, k=None, fit=None, batch_size=64):
    """AUC over valid positions and the flattened predictions.

    ``model`` is a :class:`LanaParams` or a leveled ensemble; ensembles route
    through membership-weighted top-k fusion.
    """
    if not windows:
        raise ContractViolation("evaluate: no windows")
    if isinstance(model, LanaParams):
        preds = predict_windows(model, windows, batch_size)
    else:
        from .leveled import ensemble_predict

        preds = ensemble_predict(model, windows, k=k, batch_size=batch_size)
    scores, labels = collect_valid(preds, windows)
    return auc(scores, labels), scores


def write_history(history, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_auc\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['valid_auc']!r}\n")


# ----------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    version: int
    meta: dict
    params: LanaParams


def save_checkpoint(params, meta, path):
    """Binary layout: magic, u32 version, u64-prefixed JSON metadata, tensors."""
    record = dict(meta or {})
    record["hyper"] = params.hyper.as_dict()
    record["flags"] = params.flags.names()
    text = json.dumps(record, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<Q", len(text)))
    buf.write(text)
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, field_name):
        if self.pos + n > len(self.data):
            raise CheckpointError(field_name, "file truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, field_name):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field_name))

    def done(self):
        return self.pos >= len(self.data)


def load_checkpoint(path):
    r = _Reader(Path(path).read_bytes())
    if r.data[:4] != CKPT_MAGIC:
        raise CheckpointError("magic", "not a LANA checkpoint")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise CheckpointError("version", f"unsupported version {version} (expected {CKPT_VERSION})")
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("metadata", f"undecodable ({exc})") from None
    try:
        hyper = LanaHyper.from_dict(meta["hyper"])
        flags = Flags.from_names(meta["flags"])
    except (KeyError, TypeError, ContractViolation) as exc:
        raise CheckpointError("metadata", f"bad hyperparameter record ({exc})") from None
    template = init_params(hyper, flags, seed=0)
    tensors = {}
    while not r.done():
        (name_len,) = r.unpack("<I", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        if name not in template:
            raise CheckpointError(f"tensor {name!r}", "unknown tensor name")
        (rank,) = r.unpack("<I", f"tensor {name!r} rank")
        dims = r.unpack(f"<{rank}Q", f"tensor {name!r} dims")
        if tuple(dims) != template[name].shape:
            raise CheckpointError(f"tensor {name!r}", f"shape {tuple(dims)} != {template[name].shape}")
        count = int(np.prod(dims)) if rank else 1
        raw = r.take(8 * count, f"tensor {name!r} payload")
        tensors[name] = T.parameter(np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64), name=name)
    missing = [n for n in template.names() if n not in tensors]
    if missing:
        raise CheckpointError(f"tensor {missing[0]!r}", "missing from file (truncated?)")
    params = LanaParams(hyper, flags, ((n, tensors[n]) for n in template.names()))
    return Checkpoint(version, meta, params)

