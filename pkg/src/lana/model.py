"""The LANA network: embeddings, encoder, the two feature extractors, pivot decoder."""

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import dataio
from . import tensor as T
from .errors import ContractViolation
from .pivot import PivotWeights, attention, pc_ffn, pma_attention

LANE_VOCAB_FIELDS = {
    "question": "question_vocab",
    "part": "part_vocab",
    "response": "response_vocab",
    "elapsed": "elapsed_vocab",
    "interval": "interval_vocab",
    "viewed": "viewed_vocab",
}

# Parameter-name prefixes owned by the exercise side (encoder + extractors).
ENCODER_SIDE = ("emb.question", "emb.part", "enc", "msrfe", "psrfe")


@dataclass(frozen=True)
class LanaHyper:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    seq_len: int = 100
    d_piv: int = 8
    d_ff: int = 64
    question_vocab: int = 801
    part_vocab: int = dataio.PART_VOCAB
    response_vocab: int = dataio.RESPONSE_VOCAB
    elapsed_vocab: int = dataio.ELAPSED_VOCAB
    interval_vocab: int = dataio.INTERVAL_VOCAB
    viewed_vocab: int = dataio.VIEWED_VOCAB
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ContractViolation(f"d_model {self.d_model} must be a positive multiple of n_heads {self.n_heads}")
        if self.d_piv < 1:
            raise ContractViolation("d_piv must be >= 1")
        if self.seq_len < 2:
            raise ContractViolation("seq_len must be >= 2")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0 or self.d_ff < 1:
            raise ContractViolation("layer counts must be >= 0 and d_ff >= 1")
        if self.dropout != 0.0:
            raise ContractViolation("only dropout 0 is supported")
        for lane, f in LANE_VOCAB_FIELDS.items():
            if getattr(self, f) < 2:
                raise ContractViolation(f"vocabulary of lane {lane!r} must be >= 2")

    def vocab(self, lane):
        return getattr(self, LANE_VOCAB_FIELDS[lane])

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class Flags:
    """Ablation switches. All False is the full architecture."""

    no_bm: bool = False
    no_pma: bool = False
    no_pcffn: bool = False

    @classmethod
    def from_names(cls, names):
        names = set(names)
        bad = names - {"no_bm", "no_pma", "no_pcffn"}
        if bad:
            raise ContractViolation(f"unknown ablation flag(s): {sorted(bad)}")
        return cls(**{n: True for n in names})

    def names(self):
        return [k for k, v in asdict(self).items() if v]


class LanaParams:
    """Named parameter tensors of one model instance plus its configuration."""

    def __init__(self, hyper, flags, tensors):
        self.hyper = hyper
        self.flags = flags
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def clone(self):
        return LanaParams(
            self.hyper,
            self.flags,
            ((k, T.parameter(v.data.copy(), name=k)) for k, v in self.tensors.items()),
        )

    def n_values(self):
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------- init

def init_params(hyper, flags=Flags(), seed=0):
    """Uniform +-1/sqrt(fan_in) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, h = hyper.d_model, hyper.n_heads
    out = OrderedDict()

    def uni(name, shape, fan_in, factor=1.0):
        bound = factor / math.sqrt(fan_in)
        out[name] = T.parameter(rng.uniform(-bound, bound, size=shape), name=name)

    def zeros(name, shape):
        out[name] = T.parameter(np.zeros(shape), name=name)

    def linear(name, d_in, d_out):
        uni(name + ".w", (d_in, d_out), d_in)
        zeros(name + ".b", (d_out,))

    def norm(name):
        out[name + ".g"] = T.parameter(np.ones(d), name=name + ".g")
        zeros(name + ".b", (d,))

    def attn(name):
        for part in ("q", "k", "v", "o"):
            linear(f"{name}.{part}", d, d)
        # a key bias adds the same q.b to every score of a row and cancels
        # in the softmax, so keys are projected without one
        del out[name + ".k.b"]
        if not flags.no_bm:
            uni(name + ".pos.w", (d, d), d)

    def ffn(name):
        linear(name + ".l1", d, hyper.d_ff)
        linear(name + ".l2", hyper.d_ff, d)

    for lane in dataio.LANES:
        uni("emb." + lane, (hyper.vocab(lane), d), 1)
    uni("pos_emb", (hyper.seq_len, d), 1)
    if not flags.no_bm:
        linear("enc_in", d * len(dataio.EXERCISE_LANES), d)
        linear("dec_in", d * len(dataio.RESPONSE_LANES), d)
    for i in range(hyper.n_encoder_layers):
        attn(f"enc{i}.self")
        norm(f"enc{i}.ln1")
        ffn(f"enc{i}.ffn")
        norm(f"enc{i}.ln2")
    if not flags.no_pma:
        attn("msrfe.attn")
        linear("msrfe.l1", d, d)
        linear("msrfe.l2", d, h)
    if not flags.no_pcffn:
        attn("psrfe.attn")
        linear("psrfe.l1", d, d)
        linear("psrfe.l2", d, hyper.d_piv)
    for i in range(hyper.n_decoder_layers):
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln1")
        attn(f"dec{i}.cross")
        if not flags.no_pma:
            # initial decay rate softplus(-5) ~ 0.0067 per minute
            out[f"dec{i}.theta"] = T.parameter(np.array([-5.0]), name=f"dec{i}.theta")
        norm(f"dec{i}.ln2")
        if flags.no_pcffn:
            ffn(f"dec{i}.ffn")
        else:
            uni(f"dec{i}.pcffn.in.w", (hyper.d_ff, d, hyper.d_piv), d * hyper.d_piv, 0.1)
            zeros(f"dec{i}.pcffn.in.b", (hyper.d_ff,))
            uni(f"dec{i}.pcffn.out.w", (d, hyper.d_ff, hyper.d_piv), hyper.d_ff * hyper.d_piv, 0.1)
            zeros(f"dec{i}.pcffn.out.b", (d,))
        norm(f"dec{i}.ln3")
    linear("head", d, 1)
    return LanaParams(hyper, flags, out)


# -------------------------------------------------------------- blocks

def _linear(params, name, x):
    return T.add(T.bmm(x, params[name + ".w"]), params[name + ".b"])


def _norm(params, name, x):
    return T.layer_norm(x, params[name + ".g"], params[name + ".b"])


def _ffn(params, name, x):
    return _linear(params, name + ".l2", T.relu(_linear(params, name + ".l1", x)))


def _split_heads(x, h):
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head(params, name, xq, xkv, mask, valid, decay=None, trace=None):
    """Multi-head attention module ``name``.

    With base modifications on, the shared positional embedding is passed
    through the module's private projection and added to queries and keys.
    ``decay`` = (dis, m, theta) switches to pivot memory attention.
    """
    h = params.hyper.n_heads
    q = _linear(params, name + ".q", xq)
    k = T.bmm(xkv, params[name + ".k.w"])
    v = _linear(params, name + ".v", xkv)
    if name + ".pos.w" in params:
        n = xq.shape[1]
        pp = T.matmul(T.slice_(params["pos_emb"], (slice(0, n),)), params[name + ".pos.w"])
        q = T.add(q, pp)
        k = T.add(k, pp)
    q, k, v = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    if decay is None:
        ctx, alpha = attention(q, k, v, mask, query_valid=valid)
    else:
        dis, m, theta = decay
        ctx, alpha = pma_attention(q, k, v, dis, m, theta, mask, query_valid=valid)
    if trace is not None:
        trace[name] = alpha.data
    return _linear(params, name + ".o", _merge_heads(ctx))


def build_mask(valid):
    """Causal mask combined with the pad mask, shape (B, 1, n, n).

    A pad query may always attend to itself so that no row is empty; valid
    queries never see pads.
    """
    valid = np.asarray(valid, dtype=bool)
    n = valid.shape[1]
    causal = np.tril(np.ones((n, n), dtype=bool))
    allowed = causal[None] & (valid[:, None, :] | np.eye(n, dtype=bool)[None])
    return allowed[:, None]


def embed_and_project(params, batch, lanes, proj=None):
    """Per-lane embeddings concatenated and projected (base modifications),
    or summed with the positional embedding (``proj=None``, SAINT+ style)."""
    embs = []
    for lane in lanes:
        idx = np.asarray(batch[lane])
        vocab = params.hyper.vocab(lane)
        if idx.size and (idx.min() < 0 or idx.max() >= vocab):
            raise ContractViolation(f"lane {lane!r}: token out of vocabulary [0, {vocab})")
        embs.append(T.embedding(params["emb." + lane], idx))
    if proj is not None:
        return _linear(params, proj, T.concat(embs, axis=-1))
    x = embs[0]
    for e in embs[1:]:
        x = T.add(x, e)
    n = x.shape[1]
    return T.add(x, T.slice_(params["pos_emb"], (slice(0, n),)))


def encoder_forward(params, x, mask, valid, trace=None):
    for i in range(params.hyper.n_encoder_layers):
        x = _norm(params, f"enc{i}.ln1", T.add(x, multi_head(params, f"enc{i}.self", x, x, mask, valid, trace=trace)))
        x = _norm(params, f"enc{i}.ln2", T.add(x, _ffn(params, f"enc{i}.ffn", x)))
    return x


def _srfe(params, name, enc, mask, valid):
    a = multi_head(params, name + ".attn", enc, enc, mask, valid)
    return _linear(params, name + ".l2", T.relu(_linear(params, name + ".l1", a)))


def memory_srfe(params, enc, mask, valid):
    """Memory features m of shape (B, n_heads, n)."""
    return T.transpose(_srfe(params, "msrfe", enc, mask, valid), (0, 2, 1))


def performance_srfe(params, enc, mask, valid):
    """Performance features p of shape (B, n, d_piv)."""
    return _srfe(params, "psrfe", enc, mask, valid)


def decoder_forward(params, y, enc, m, p, dis, mask, valid, capture=None, trace=None):
    """Decoder stack and output head; returns probabilities (B, n)."""
    hp = params.hyper
    for i in range(hp.n_decoder_layers):
        y = _norm(params, f"dec{i}.ln1", T.add(y, multi_head(params, f"dec{i}.self", y, y, mask, valid, trace=trace)))
        decay = None if m is None else (dis, m, params[f"dec{i}.theta"])
        cross = multi_head(params, f"dec{i}.cross", y, enc, mask, valid, decay=decay, trace=trace)
        y = _norm(params, f"dec{i}.ln2", T.add(y, cross))
        if capture is not None and i == hp.n_decoder_layers - 1:
            capture["pcffn_input"] = y.data
        if p is None:
            y = _norm(params, f"dec{i}.ln3", T.add(y, _ffn(params, f"dec{i}.ffn", y)))
        else:
            inner = PivotWeights(params[f"dec{i}.pcffn.in.w"], params[f"dec{i}.pcffn.in.b"])
            outer = PivotWeights(params[f"dec{i}.pcffn.out.w"], params[f"dec{i}.pcffn.out.b"])
            y = _norm(params, f"dec{i}.ln3", pc_ffn(y, p, inner, outer))
    if capture is not None and hp.n_decoder_layers == 0:
        capture["pcffn_input"] = y.data
    logits = _linear(params, "head", y)
    b, n, _ = logits.shape
    return T.sigmoid(T.reshape(logits, (b, n)))


def model_forward(params, batch, capture=None, trace=None):
    """Probability of a correct response at every position, shape (B, n)."""
    flags = params.flags
    valid = np.asarray(batch["valid_mask"], dtype=bool)
    mask = build_mask(valid)
    bm = not flags.no_bm
    x = embed_and_project(params, batch, dataio.EXERCISE_LANES, "enc_in" if bm else None)
    y = embed_and_project(params, batch, dataio.RESPONSE_LANES, "dec_in" if bm else None)
    enc = encoder_forward(params, x, mask, valid, trace=trace)
    m = None if flags.no_pma else memory_srfe(params, enc, mask, valid)
    p = None if flags.no_pcffn else performance_srfe(params, enc, mask, valid)
    return decoder_forward(params, y, enc, m, p, batch["dis"], mask, valid, capture=capture, trace=trace)


def predict(params, batch):
    with T.no_grad():
        return model_forward(params, batch).data
