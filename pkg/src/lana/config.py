"""Flat ``key = value`` run configuration shared by all CLI subcommands."""

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ContractViolation, ParseError
from .model import Flags, LanaHyper
from .simgen import SimConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # paths
    data: str = ""
    out: str = "lana_out"
    # model
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    seq_len: int = 100
    d_piv: int = 8
    d_ff: int = 64
    question_vocab: int = 801
    dropout: float = 0.0
    # optimiser / loop
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 64
    epochs: int = 5
    finetune_epochs: int = 2
    valid_fraction: float = 0.2
    # leveled learning
    L: int = 4
    tau: float = 1.0
    k: int = 2
    membership_threshold: float = 0.01
    encoder_only: bool = False
    sigmoid_fusion: bool = False
    rasch_iterations: int = 200
    rasch_l2: float = 0.01
    rasch_step: float = 1.0
    # ablation
    no_bm: bool = False
    no_pma: bool = False
    no_pcffn: bool = False
    no_ll: bool = False
    # simulator
    sim_students: int = 2000
    sim_questions: int = 800
    sim_interactions: int = 200
    sim_jitter: int = 50
    sim_boost: float = 1.0
    sim_drift: float = 0.3
    sim_guess: float = 0.1
    seed: int = 0
    workers: int = 1

    def hyper(self):
        return LanaHyper(
            d_model=self.d_model, n_heads=self.n_heads, n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers, seq_len=self.seq_len, d_piv=self.d_piv,
            d_ff=self.d_ff, question_vocab=self.question_vocab, dropout=self.dropout,
        )

    def flags(self):
        return Flags(self.no_bm, self.no_pma, self.no_pcffn)

    def train_config(self, epochs=None):
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay,
            clip_norm=self.clip_norm, seed=self.seed,
        )

    def sim_config(self):
        return SimConfig(
            n_students=self.sim_students, n_questions=self.sim_questions,
            interactions_mean=self.sim_interactions, interactions_jitter=self.sim_jitter,
            boost=self.sim_boost, drift=self.sim_drift, guess=self.sim_guess, seed=self.seed,
        )

    def as_dict(self):
        return asdict(self)


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key, text, line=None):
    if key not in _TYPES:
        raise ParseError(f"unknown config key {key!r}", line)
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ParseError(f"bad value {text!r} for {key} (expected {kind.__name__})", line) from None


def parse_config_text(text):
    values = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", no)
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, value, no)
    return values


def load_config(path=None, overrides=None):
    """Defaults, then the file (if any), then explicit overrides."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ContractViolation(f"unknown config key {key!r}")
        values[key] = value
    return replace(RunConfig(), **values)


def write_config(cfg, path):
    lines = [f"{k} = {v}" for k, v in cfg.as_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
