"""Rasch abilities, Gaussian ability layers, per-layer fine-tuning and top-k fusion."""

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from . import tensor as T
from .errors import ContractViolation
from .model import ENCODER_SIDE, LanaParams
from .training import TrainConfig, load_checkpoint, predict_windows, save_checkpoint, train

log = logging.getLogger(__name__)

MEMBERSHIP_THRESHOLD = 0.01


# ------------------------------------------------------------------ Rasch

@dataclass
class RaschFit:
    abilities: dict
    difficulties: dict
    log_likelihood: float
    history: list = field(default_factory=list)

    @property
    def mean_ability(self):
        return float(np.mean(list(self.abilities.values())))

    @property
    def ability_variance(self):
        return float(np.var(list(self.abilities.values())))


def _rasch_objective(a, d, s_idx, q_idx, y, l2):
    z = a[s_idx] - d[q_idx]
    return float(log_expit(np.where(y > 0, z, -z)).sum() - l2 * (a @ a + d @ d))


def fit_rasch(records, iterations=200, l2_reg=0.01, step=1.0, pinned=None):
    """Penalised Rasch fit by alternating block ascent.

    Each block step is ``step * grad / (n_obs / 4 + 2 * l2_reg)``: the
    denominator bounds the block's curvature, so ``step <= 1`` never lowers
    the objective. ``pinned`` maps question ids to fixed difficulties; without
    pins the difficulties are re-centred to mean 0 (abilities shift along).
    """
    if not records:
        raise ContractViolation("fit_rasch: no interactions")
    if iterations < 0 or l2_reg < 0 or not 0 < step <= 1:
        raise ContractViolation("fit_rasch: need iterations >= 0, l2_reg >= 0, step in (0, 1]")
    sids = sorted({r.student_id for r in records})
    qids = sorted({r.question_id for r in records})
    s_pos = {s: i for i, s in enumerate(sids)}
    q_pos = {q: i for i, q in enumerate(qids)}
    s_idx = np.fromiter((s_pos[r.student_id] for r in records), np.int64, len(records))
    q_idx = np.fromiter((q_pos[r.question_id] for r in records), np.int64, len(records))
    y = np.fromiter((r.correct for r in records), np.float64, len(records))
    n_s = np.bincount(s_idx, minlength=len(sids)).astype(np.float64)
    n_q = np.bincount(q_idx, minlength=len(qids)).astype(np.float64)

    a = np.zeros(len(sids))
    d = np.zeros(len(qids))
    free = np.ones(len(qids), dtype=bool)
    for q, v in (pinned or {}).items():
        if q in q_pos:
            d[q_pos[q]] = float(v)
            free[q_pos[q]] = False

    history = [_rasch_objective(a, d, s_idx, q_idx, y, l2_reg)]
    for _ in range(iterations):
        resid = y - expit(a[s_idx] - d[q_idx])
        grad_a = np.bincount(s_idx, resid, len(sids)) - 2 * l2_reg * a
        a += step * grad_a / (n_s / 4 + 2 * l2_reg)
        resid = y - expit(a[s_idx] - d[q_idx])
        grad_d = -np.bincount(q_idx, resid, len(qids)) - 2 * l2_reg * d
        d += np.where(free, step * grad_d / (n_q / 4 + 2 * l2_reg), 0.0)
        history.append(_rasch_objective(a, d, s_idx, q_idx, y, l2_reg))
    if not pinned:
        shift = d.mean()
        d -= shift
        a -= shift
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(d))):
        raise ContractViolation("fit_rasch: diverged")
    return RaschFit(
        abilities={s: float(a[i]) for s, i in s_pos.items()},
        difficulties={q: float(d[i]) for q, i in q_pos.items()},
        log_likelihood=_rasch_objective(a, d, s_idx, q_idx, y, l2_reg),
        history=history,
    )


def cold_start_ability(fit, student_id):
    """Fitted ability, or the population mean for students the fit never saw."""
    if not fit.abilities:
        raise ContractViolation("cold_start_ability: empty fit")
    got = fit.abilities.get(student_id)
    return fit.mean_ability if got is None else got


def write_abilities(fit, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("student_id,ability\n")
        for sid in sorted(fit.abilities):
            fh.write(f"{sid},{fit.abilities[sid]!r}\n")


def write_difficulties(fit, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("question_id,difficulty\n")
        for qid in sorted(fit.difficulties):
            fh.write(f"{qid},{fit.difficulties[qid]!r}\n")


def _read_table(path, header):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != header:
        raise ContractViolation(f"{path}: expected header {header!r}")
    out = {}
    for line in lines[1:]:
        if line.strip():
            key, value = line.split(",")
            out[int(key)] = float(value)
    return out


def read_fit(abilities_path, difficulties_path=None):
    abilities = _read_table(abilities_path, "student_id,ability")
    difficulties = {}
    if difficulties_path is not None and Path(difficulties_path).exists():
        difficulties = _read_table(difficulties_path, "question_id,difficulty")
    return RaschFit(abilities, difficulties, float("nan"))


# ----------------------------------------------------------------- layers

@dataclass(frozen=True)
class LayerSpec:
    L: int
    tau: float
    mu_a: float
    var_a: float
    means: tuple
    variances: tuple


def layer_gaussians(mu_a, var_a, L, tau):
    """Equally spaced layer means centred on ``mu_a``; variance split evenly."""
    if int(L) != L or L < 1:
        raise ContractViolation(f"layer_gaussians: L must be a positive integer, got {L}")
    if not var_a > 0:
        raise ContractViolation(f"layer_gaussians: variance must be positive, got {var_a}")
    if tau < 0:
        raise ContractViolation(f"layer_gaussians: tau must be >= 0, got {tau}")
    L = int(L)
    means = tuple(mu_a - (L - 1) / 2 * tau + i * tau for i in range(L))
    return LayerSpec(L, float(tau), float(mu_a), float(var_a), means, (var_a / L,) * L)


def membership_matrix(abilities, spec):
    """Gaussian posterior layer memberships, one row per ability."""
    a = np.asarray(abilities, dtype=np.float64).reshape(-1, 1)
    mu = np.asarray(spec.means)
    var = np.asarray(spec.variances)
    logphi = -0.5 * (a - mu) ** 2 / var - 0.5 * np.log(var)
    return np.exp(logphi - logsumexp(logphi, axis=1, keepdims=True))


def membership_probs(a, spec):
    if not np.isfinite(a):
        raise ContractViolation("membership_probs: ability must be finite")
    return membership_matrix([a], spec)[0]


# ----------------------------------------------------------------- fusion

def fusion_weights(p, k, sigmoid=False):
    """Per-layer fusion weights; zero outside the top-k memberships.

    ``p`` is (L,) or (B, L). Ties keep the lower layer index. With
    ``sigmoid`` the literal sigmoid(p_i) weights are used instead of the
    renormalised memberships; those are not a convex combination.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    L = p2.shape[1]
    if int(k) != k or not 1 <= k <= L:
        raise ContractViolation(f"topk_fuse: k must lie in [1, {L}], got {k}")
    order = np.argsort(-p2, axis=1, kind="stable")[:, : int(k)]
    rows = np.arange(p2.shape[0])[:, None]
    w = np.zeros_like(p2)
    if sigmoid:
        w[rows, order] = expit(p2[rows, order])
    else:
        top = p2[rows, order]
        w[rows, order] = top / top.sum(axis=1, keepdims=True)
    return w[0] if single else w


def topk_fuse(preds, p, k, sigmoid=False):
    """Fuse L stacked predictions with top-k membership weights.

    ``preds`` is (L, ...). ``p`` is (L,) shared by every row, or (B, L) with
    ``preds`` shaped (L, B, ...).
    """
    preds = np.asarray(preds, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if preds.shape[0] != p.shape[-1]:
        raise ContractViolation(f"topk_fuse: {preds.shape[0]} predictions but {p.shape[-1]} memberships")
    w = fusion_weights(p, k, sigmoid)
    if w.ndim == 1:
        w = w.reshape((-1,) + (1,) * (preds.ndim - 1))
        terms = [w[i] * preds[i] for i in range(len(w)) if w[i].item() != 0.0]
    else:
        if preds.shape[1] != w.shape[0]:
            raise ContractViolation("topk_fuse: batch axis of preds and memberships differ")
        w = w.T.reshape(w.shape[1], w.shape[0], *(1,) * (preds.ndim - 2))
        terms = [w[i] * preds[i] for i in range(w.shape[0])]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# --------------------------------------------------------------- ensemble

@dataclass
class LayerEnsemble:
    spec: LayerSpec
    models: list
    fit: RaschFit
    histories: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.models) != self.spec.L:
            raise ContractViolation(f"ensemble: {len(self.models)} models for L={self.spec.L}")
        hypers = {m.hyper for m in self.models}
        flags = {m.flags for m in self.models}
        if len(hypers) > 1 or len(flags) > 1:
            raise ContractViolation("ensemble: layer models disagree on hyperparameters")

    def abilities_for(self, student_ids):
        return np.array([cold_start_ability(self.fit, s) for s in student_ids])

    def memberships(self, student_ids):
        return membership_matrix(self.abilities_for(student_ids), self.spec)


def spec_from_fit(fit, L, tau):
    return layer_gaussians(fit.mean_ability, fit.ability_variance, L, tau)


def ensemble_predict(ensemble, windows, k=None, sigmoid=False, batch_size=64):
    """Fused per-position probabilities, shape (N, n)."""
    k = ensemble.spec.L if k is None else k
    p = ensemble.memberships([w.student_id for w in windows])
    preds = np.stack([predict_windows(m, windows, batch_size) for m in ensemble.models])
    return topk_fuse(preds, p, k, sigmoid)


def _finetune_one(args):
    index, arrays, hyper, flags, windows, weights, config, trainable = args
    params = LanaParams(hyper, flags, ((n, T.parameter(a.copy(), name=n)) for n, a in arrays))
    history = train(params, windows, config, window_weights=weights, trainable=trainable)
    return index, [(n, t.data) for n, t in params.items()], history


def finetune_layers(pretrained, fit, spec, windows, config=TrainConfig(), threshold=MEMBERSHIP_THRESHOLD,
                    encoder_only=False, workers=1):
    """Clone ``pretrained`` once per layer and fine-tune each clone.

    Clone i sees the windows whose student has membership p_i >= threshold,
    each weighted by p_i. A layer with no qualifying windows keeps the
    pretrained weights and emits a warning.
    """
    p = membership_matrix([cold_start_ability(fit, w.student_id) for w in windows], spec)
    trainable = ENCODER_SIDE if encoder_only else None
    models = [pretrained.clone() for _ in range(spec.L)]
    histories = [[] for _ in range(spec.L)]
    jobs = []
    for i in range(spec.L):
        keep = np.flatnonzero(p[:, i] >= threshold)
        if keep.size == 0:
            warnings.warn(f"layer {i} has no qualifying windows; keeping pretrained weights",
                          RuntimeWarning, stacklevel=2)
            continue
        arrays = [(n, t.data) for n, t in pretrained.items()]
        jobs.append((i, arrays, pretrained.hyper, pretrained.flags,
                     [windows[j] for j in keep], p[keep, i], config, trainable))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_finetune_one, jobs))
    else:
        results = [_finetune_one(job) for job in jobs]
    for i, arrays, history in results:
        models[i] = LanaParams(pretrained.hyper, pretrained.flags,
                               ((n, T.parameter(a, name=n)) for n, a in arrays))
        histories[i] = history
        log.info("layer %d fine-tuned", i)
    return LayerEnsemble(spec, models, fit, histories)


# ------------------------------------------------------------ persistence

def save_ensemble(ensemble, out_dir):
    """Write per-layer checkpoints, the ability table and a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, model in enumerate(ensemble.models):
        name = f"layer{i}.ckpt"
        save_checkpoint(model, {"layer": i, "mu": ensemble.spec.means[i],
                                "sigma2": ensemble.spec.variances[i]}, out / name)
        paths.append(name)
    write_abilities(ensemble.fit, out / "abilities.csv")
    write_difficulties(ensemble.fit, out / "difficulties.csv")
    manifest = {
        "L": ensemble.spec.L,
        "tau": ensemble.spec.tau,
        "mu_a": ensemble.spec.mu_a,
        "sigma2_a": ensemble.spec.var_a,
        "mu": list(ensemble.spec.means),
        "sigma2": list(ensemble.spec.variances),
        "checkpoints": paths,
        "abilities": "abilities.csv",
        "difficulties": "difficulties.csv",
    }
    path = out / "ensemble.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_ensemble(manifest_path):
    path = Path(manifest_path)
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
        spec = LayerSpec(int(m["L"]), float(m["tau"]), float(m["mu_a"]), float(m["sigma2_a"]),
                         tuple(m["mu"]), tuple(m["sigma2"]))
        ckpts = m["checkpoints"]
        ab, diff = m["abilities"], m.get("difficulties")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ContractViolation(f"{path}: bad ensemble manifest ({exc})") from None
    fit = read_fit(path.parent / ab, None if diff is None else path.parent / diff)
    models = [load_checkpoint(path.parent / c).params for c in ckpts]
    return LayerEnsemble(spec, models, fit)
