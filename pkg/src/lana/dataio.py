"""Interaction logs: CSV parsing, fixed-length windows, student-level splits."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ParseError

COLUMNS = (
    "student_id",
    "question_id",
    "part",
    "timestamp_ms",
    "elapsed_ms",
    "correct",
    "prior_answer_viewed",
)

N_PARTS = 7
MAX_INTERVAL_MIN = 1440
MAX_ELAPSED_S = 300

# Token layout of the embedded lanes. Index 0 is always the pad token.
RESPONSE_START, RESPONSE_WRONG, RESPONSE_RIGHT = 1, 2, 3
RESPONSE_VOCAB = 4
PART_VOCAB = N_PARTS + 1
INTERVAL_VOCAB = MAX_INTERVAL_MIN + 2
ELAPSED_VOCAB = MAX_ELAPSED_S + 2
VIEWED_VOCAB = 3

EXERCISE_LANES = ("question", "part")
RESPONSE_LANES = ("response", "elapsed", "interval", "viewed")
LANES = EXERCISE_LANES + RESPONSE_LANES


@dataclass(frozen=True, slots=True)
class Interaction:
    student_id: int
    question_id: int
    part: int
    timestamp_ms: int
    elapsed_ms: int
    correct: int
    prior_answer_viewed: int

    def as_row(self):
        return tuple(getattr(self, c) for c in COLUMNS)


@dataclass(frozen=True)
class Window:
    """One fixed-length model input for a single student.

    Lanes are int64 token arrays of length ``n`` with 0 marking padding,
    except ``time_min`` (minutes since the first real interaction, float)
    and ``target`` (correctness at each position, 0 on pads).
    """

    student_id: int
    window_index: int
    question: np.ndarray
    part: np.ndarray
    response: np.ndarray
    elapsed: np.ndarray
    interval: np.ndarray
    viewed: np.ndarray
    time_min: np.ndarray
    target: np.ndarray
    valid_mask: np.ndarray
    pad_count: int
    interactions: tuple

    @property
    def n(self):
        return self.valid_mask.shape[0]


def _parse_int(text, column, line):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"column {column!r}: {text!r} is not an integer", line) from None


def parse_interactions(path):
    """Read and validate an interaction CSV.

    Returns interactions sorted by ``(student_id, timestamp_ms)``; ties keep
    file order.
    """
    path = Path(path)
    rows = []
    last_ts = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", 1)
        header = [h.strip() for h in header]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing column(s): {', '.join(missing)}", 1)
        if tuple(header) != COLUMNS:
            raise ParseError(f"header must be exactly {','.join(COLUMNS)}", 1)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(COLUMNS):
                raise ParseError(f"expected {len(COLUMNS)} fields, found {len(row)}", line)
            vals = [_parse_int(t.strip(), c, line) for t, c in zip(row, COLUMNS)]
            rec = Interaction(*vals)
            _validate(rec, line)
            prev = last_ts.get(rec.student_id)
            if prev is not None and rec.timestamp_ms < prev:
                raise ParseError(
                    f"timestamp regression for student {rec.student_id}: {rec.timestamp_ms} < {prev}",
                    line,
                )
            last_ts[rec.student_id] = rec.timestamp_ms
            rows.append(rec)
    rows.sort(key=lambda r: (r.student_id, r.timestamp_ms))
    return rows


def _validate(rec, line):
    if rec.student_id < 0:
        raise ParseError("student_id must be non-negative", line)
    if rec.question_id < 0:
        raise ParseError("question_id must be non-negative", line)
    if not 1 <= rec.part <= N_PARTS:
        raise ParseError(f"part must lie in [1, {N_PARTS}], got {rec.part}", line)
    if rec.timestamp_ms < 0:
        raise ParseError("timestamp_ms must be non-negative", line)
    if rec.elapsed_ms < 0:
        raise ParseError("elapsed_ms must be non-negative", line)
    if rec.correct not in (0, 1):
        raise ParseError(f"correct must be 0 or 1, got {rec.correct}", line)
    if rec.prior_answer_viewed not in (0, 1):
        raise ParseError(f"prior_answer_viewed must be 0 or 1, got {rec.prior_answer_viewed}", line)


def write_interactions(records, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(str(v) for v in r.as_row()) + "\n")


def group_by_student(records):
    """``{student_id: [records...]}`` preserving the input order per student."""
    out = {}
    for r in records:
        out.setdefault(r.student_id, []).append(r)
    return out


def _make_window(chunk, n, window_index):
    pad = n - len(chunk)
    ts = np.array([r.timestamp_ms for r in chunk], dtype=np.float64)
    minutes = (ts - ts[0]) / 60000.0
    gaps = np.diff(minutes, prepend=minutes[0])
    interval = np.floor(np.clip(gaps, 0, MAX_INTERVAL_MIN)).astype(np.int64) + 1
    elapsed_s = np.array([r.elapsed_ms for r in chunk], dtype=np.float64) / 1000.0
    elapsed = np.floor(np.clip(elapsed_s, 0, MAX_ELAPSED_S)).astype(np.int64) + 1
    correct = np.array([r.correct for r in chunk], dtype=np.int64)
    response = np.empty(len(chunk), dtype=np.int64)
    response[0] = RESPONSE_START
    response[1:] = np.where(correct[:-1] == 1, RESPONSE_RIGHT, RESPONSE_WRONG)

    def lane(values, dtype=np.int64):
        out = np.zeros(n, dtype=dtype)
        out[pad:] = values
        return out

    return Window(
        student_id=chunk[0].student_id,
        window_index=window_index,
        question=lane([r.question_id + 1 for r in chunk]),
        part=lane([r.part for r in chunk]),
        response=lane(response),
        elapsed=lane(elapsed),
        interval=lane(interval),
        viewed=lane([r.prior_answer_viewed + 1 for r in chunk]),
        time_min=lane(minutes, np.float64),
        target=lane(correct),
        valid_mask=lane(np.ones(len(chunk), dtype=bool), bool),
        pad_count=pad,
        interactions=tuple(chunk),
    )


def window_student(history, n):
    """Split one student's time-ordered history into windows of length ``n``."""
    if not history:
        raise ContractViolation("window_student: empty history")
    if n < 2:
        raise ContractViolation(f"window_student: window length must be >= 2, got {n}")
    return [_make_window(history[i:i + n], n, k) for k, i in enumerate(range(0, len(history), n))]


def windows_from_records(records, n):
    windows = []
    for _, hist in sorted(group_by_student(records).items()):
        windows.extend(window_student(hist, n))
    return windows


def split_by_student(records, valid_fraction, seed):
    """Partition records so that every student lands on exactly one side."""
    if not 0 < valid_fraction < 1:
        raise ContractViolation(f"split_by_student: valid_fraction must lie in (0, 1), got {valid_fraction}")
    students = sorted({r.student_id for r in records})
    if len(students) < 2:
        raise ContractViolation("split_by_student: need at least 2 distinct students")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(students))
    n_valid = int(round(valid_fraction * len(students)))
    n_valid = min(max(n_valid, 1), len(students) - 1)
    valid_ids = {students[i] for i in order[:n_valid]}
    train = [r for r in records if r.student_id not in valid_ids]
    valid = [r for r in records if r.student_id in valid_ids]
    return train, valid


def stack_windows(windows):
    """Stack windows into a batch dict of ``(B, n)`` arrays plus the distance tensor."""
    batch = {name: np.stack([getattr(w, name) for w in windows]) for name in LANES}
    batch["valid_mask"] = np.stack([w.valid_mask for w in windows])
    batch["target"] = np.stack([w.target for w in windows]).astype(np.float64)
    t = np.stack([w.time_min for w in windows])
    # dis[b, j, k] = minutes from interaction k to interaction j; zero above
    # the diagonal and wherever a pad is involved
    dis = t[:, :, None] - t[:, None, :]
    real = batch["valid_mask"][:, :, None] & batch["valid_mask"][:, None, :]
    batch["dis"] = np.where((dis > 0) & real, dis, 0.0)
    batch["student_id"] = np.array([w.student_id for w in windows], dtype=np.int64)
    return batch


def iter_chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]

