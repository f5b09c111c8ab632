"""Synthetic students with Rasch abilities, ability drift and part-level forgetting.

Latent draws come from per-student child seeds of one master seed, so the
output does not depend on generation order or worker count. Every random
number a student consumes is drawn before any response is simulated; the
responses therefore couple monotonically across configs that differ only in
abilities (common random numbers).
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataio import N_PARTS, Interaction
from .errors import ContractViolation

MS_PER_MIN = 60_000
EPOCH_START_MS = 1_600_000_000_000


@dataclass(frozen=True)
class SimConfig:
    n_students: int = 2000
    n_questions: int = 800
    interactions_mean: int = 200
    interactions_jitter: int = 50
    ability_mean: float = 0.0
    ability_sd: float = 1.0
    drift: float = 0.3
    difficulty_sd: float = 1.0
    n_parts: int = N_PARTS
    boost: float = 1.0
    decay_log_mean: float = math.log(0.05)
    decay_log_sd: float = 0.5
    boost_window_min: float = 1440.0
    guess: float = 0.1
    gap_mean_min: float = 2.0
    break_prob: float = 0.1
    break_min: float = 120.0
    break_max: float = 2880.0
    elapsed_log_mean_ms: float = math.log(20_000.0)
    elapsed_log_sd: float = 0.6
    viewed_prob: float = 0.3
    seed: int = 0
    student_ids: tuple = None

    def __post_init__(self):
        if self.n_students < 1 or self.n_questions < 1 or self.interactions_mean < 1:
            raise ContractViolation("simgen: counts must be positive")
        if not 0 <= self.interactions_jitter < self.interactions_mean:
            raise ContractViolation("simgen: need 0 <= jitter < mean interactions")
        if self.boost < 0:
            raise ContractViolation("simgen: boost must be >= 0")
        if not 0 <= self.guess < 0.5:
            raise ContractViolation("simgen: guess floor must lie in [0, 0.5)")
        if not 1 <= self.n_parts <= N_PARTS:
            raise ContractViolation(f"simgen: n_parts must lie in [1, {N_PARTS}]")
        if not 0 <= self.break_prob <= 1 or self.gap_mean_min <= 0 or self.break_min > self.break_max:
            raise ContractViolation("simgen: bad inter-arrival parameters")
        if self.student_ids is not None:
            ids = tuple(int(s) for s in self.student_ids)
            if len(ids) != self.n_students or len(set(ids)) != len(ids) or min(ids) < 0:
                raise ContractViolation("simgen: student_ids must be n_students distinct non-negative ids")
            object.__setattr__(self, "student_ids", ids)

    def ids(self):
        return self.student_ids if self.student_ids is not None else tuple(range(self.n_students))


def _seeds(config):
    root = np.random.SeedSequence(config.seed)
    items, students = root.spawn(2)
    return items, students.spawn(config.n_students)


def _question_latents(config, seq):
    rng = np.random.default_rng(seq)
    difficulty = rng.normal(0.0, config.difficulty_sd, config.n_questions)
    parts = rng.integers(1, config.n_parts + 1, config.n_questions)
    return difficulty, parts


def _student_latents(config, seq):
    rng = np.random.default_rng(seq)
    ability = config.ability_mean + config.ability_sd * rng.standard_normal()
    decay = math.exp(config.decay_log_mean + config.decay_log_sd * rng.standard_normal())
    return rng, ability, decay


def _simulate(config, index, seq, difficulty, parts):
    rng, ability, decay = _student_latents(config, seq)
    j = config.interactions_jitter
    count = int(rng.integers(config.interactions_mean - j, config.interactions_mean + j + 1))
    questions = rng.integers(0, config.n_questions, count)
    gaps = rng.exponential(config.gap_mean_min, count)
    breaks = rng.random(count) < config.break_prob
    gaps = np.where(breaks, rng.uniform(config.break_min, config.break_max, count), gaps)
    gap_ms = np.maximum(np.rint(gaps * MS_PER_MIN).astype(np.int64), 1)
    gap_ms[0] = int(rng.integers(0, 30 * 1440 * MS_PER_MIN))
    stamps = EPOCH_START_MS + np.cumsum(gap_ms)
    elapsed = np.rint(rng.lognormal(config.elapsed_log_mean_ms, config.elapsed_log_sd, count)).astype(np.int64)
    viewed = (rng.random(count) < config.viewed_prob).astype(np.int64)
    u = rng.random(count)

    sid = config.ids()[index]
    last_right = {}
    out = []
    for t in range(count):
        q = int(questions[t])
        part = int(parts[q])
        now = stamps[t] / MS_PER_MIN
        boost = 0.0
        prev = last_right.get(part)
        if prev is not None and now - prev <= config.boost_window_min:
            boost = config.boost * math.exp(-decay * (now - prev))
        logit = ability + config.drift * (t // 100) - difficulty[q] + boost
        p = config.guess + (1 - config.guess) / (1 + math.exp(-logit))
        right = int(u[t] < p)
        if right:
            last_right[part] = now
        out.append(Interaction(sid, q, part, int(stamps[t]), int(elapsed[t]), right, int(viewed[t])))
    return out


def _simulate_block(args):
    config, start, stop = args
    items, students = _seeds(config)
    difficulty, parts = _question_latents(config, items)
    return [r for i in range(start, stop) for r in _simulate(config, i, students[i], difficulty, parts)]


def generate(config, workers=1):
    """Interaction records sorted by (student_id, timestamp_ms)."""
    n = config.n_students
    if workers > 1 and n > 1:
        step = -(-n // workers)
        blocks = [(config, s, min(s + step, n)) for s in range(0, n, step)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [r for part in pool.map(_simulate_block, blocks) for r in part]
    else:
        records = _simulate_block((config, 0, n))
    records.sort(key=lambda r: (r.student_id, r.timestamp_ms))
    return records


@dataclass(frozen=True)
class GroundTruth:
    """One row per student ``(id, ability, decay)`` and per question ``(id, difficulty)``."""

    students: tuple
    questions: tuple

    def __len__(self):
        return len(self.students) + len(self.questions)

    def rows(self):
        """Long ``(kind, id, value)`` form used by the CSV export."""
        out = [("ability", s, a) for s, a, _ in self.students]
        out += [("decay", s, r) for s, _, r in self.students]
        out += [("difficulty", q, d) for q, d in self.questions]
        return out

    def ability(self):
        return {s: a for s, a, _ in self.students}

    def decay(self):
        return {s: r for s, _, r in self.students}

    def difficulty(self):
        return dict(self.questions)


def describe(config):
    """The latent parameters behind :func:`generate` for the same config."""
    items, students = _seeds(config)
    difficulty, _ = _question_latents(config, items)
    ids = config.ids()
    lat = [_student_latents(config, s)[1:] for s in students]
    return GroundTruth(
        tuple((ids[i], float(a), float(r)) for i, (a, r) in enumerate(lat)),
        tuple((q, float(d)) for q, d in enumerate(difficulty)),
    )


def write_ground_truth(truth, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("kind,id,value\n")
        for kind, key, value in truth.rows():
            fh.write(f"{kind},{key},{value!r}\n")


def with_overrides(config, **changes):
    return replace(config, **changes)
