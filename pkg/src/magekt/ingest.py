"""Dataset parsing, filtering, student-level splits and windowing."""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from typing import IO, Iterable, Sequence

from .core import Interaction, InteractionLog

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    """Input file does not match the configured column mapping."""


@dataclass(frozen=True)
class ColumnMapping:
    student: str = "user_id"
    question: str = "problem_id"
    kc: str = "skill_id"
    correct: str = "correct"
    timestamp: str | None = "timestamp"
    kc_delimiter: str = ";"
    delimiter: str = ","


@dataclass(frozen=True)
class ParseResult:
    log: InteractionLog
    dropped: int
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if any(r <= 0 for r in ratios):
            raise ValueError(f"split ratios must be positive, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(ratios)!r}")


@dataclass(frozen=True)
class Window:
    student_id: str
    items: tuple[tuple[str, tuple[str, ...], int], ...]

    def __len__(self) -> int:
        return len(self.items)


def _parse_timestamp(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        return datetime.fromisoformat(raw.strip()).timestamp()


def _parse_correct(raw: str) -> int:
    value = float(raw)
    if value not in (0.0, 1.0):
        raise ValueError(f"correctness {raw!r} is not binary")
    return int(value)


def parse_interaction_csv(source: IO | bytes | str, schema: ColumnMapping = ColumnMapping()) -> ParseResult:
    """Parse a delimited interaction file with a header row.

    Rows with any missing mapped field are dropped and counted. Without a
    timestamp column the row number serves as the timestamp. Records come back
    stable-sorted by timestamp, so ties keep file order.
    """
    if isinstance(source, bytes):
        source = io.StringIO(source.decode("utf-8-sig"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    else:
        raw = source.read()
        source = io.StringIO(raw.decode("utf-8-sig") if isinstance(raw, bytes) else raw)

    reader = csv.DictReader(source, delimiter=schema.delimiter)
    if reader.fieldnames is None:
        raise SchemaError("input has no header row")
    wanted = {"student": schema.student, "question": schema.question, "kc": schema.kc, "correct": schema.correct}
    if schema.timestamp:
        wanted["timestamp"] = schema.timestamp
    missing = [f"{role}->{col!r}" for role, col in wanted.items() if col not in reader.fieldnames]
    if missing:
        raise SchemaError(f"header is missing mapped column(s): {', '.join(missing)}")

    records: list[Interaction] = []
    dropped = 0
    diagnostics: list[str] = []
    for row_no, row in enumerate(reader, start=2):
        values = {role: (row.get(col) or "").strip() for role, col in wanted.items()}
        if any(v == "" for v in values.values()):
            dropped += 1
            continue
        kcs = [k.strip() for k in values["kc"].split(schema.kc_delimiter) if k.strip()]
        try:
            correct = _parse_correct(values["correct"])
            ts = _parse_timestamp(values["timestamp"]) if schema.timestamp else float(row_no)
        except ValueError as exc:
            dropped += 1
            diagnostics.append(f"row {row_no}: {exc}")
            continue
        if not kcs:
            dropped += 1
            continue
        records.append(Interaction(values["student"], values["question"], tuple(kcs), correct, ts))

    records.sort(key=lambda r: r.timestamp)
    if dropped:
        log.info("dropped %d incomplete rows", dropped)
    return ParseResult(InteractionLog(tuple(records)), dropped, tuple(diagnostics))


def filter_log(log_: InteractionLog, min_student: int = 10, min_question: int = 10) -> InteractionLog:
    """Drop sparse students and questions, repeating until both thresholds hold."""
    if min_student < 1 or min_question < 1:
        raise ValueError("thresholds must be >= 1")
    records = list(log_.records)
    while True:
        per_student = Counter(r.student_id for r in records)
        kept = [r for r in records if per_student[r.student_id] >= min_student]
        per_question = Counter(r.question_id for r in kept)
        kept = [r for r in kept if per_question[r.question_id] >= min_question]
        if len(kept) == len(records):
            return InteractionLog(tuple(kept))
        records = kept


def split_students(log_: InteractionLog, spec: SplitSpec = SplitSpec()) -> tuple[InteractionLog, InteractionLog, InteractionLog]:
    students = list(log_.students)
    if len(students) < 3:
        raise ValueError(f"need at least 3 students to split, got {len(students)}")
    random.Random(spec.seed).shuffle(students)
    n = len(students)
    n_val = max(1, round(n * spec.val_ratio))
    n_test = max(1, round(n * spec.test_ratio))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"too few students ({n}) for ratios {spec}")
    train = students[:n_train]
    val = students[n_train:n_train + n_val]
    test = students[n_train + n_val:]
    return log_.subset(train), log_.subset(val), log_.subset(test)


def window_sequences(log_: InteractionLog, length: int = 100) -> list[Window]:
    """Cut each student's sequence into consecutive non-overlapping windows.

    A trailing window shorter than 2 is dropped since it has nothing to predict.
    """
    if length < 2:
        raise ValueError("window length must be >= 2")
    windows = []
    for student in sorted(log_.by_student):
        seq = log_.by_student[student]
        for start in range(0, len(seq), length):
            chunk = seq[start:start + length]
            if len(chunk) < 2:
                continue
            windows.append(Window(student, tuple((r.question_id, r.kc_ids, r.correct) for r in chunk)))
    return windows


# -- line-delimited serialization ------------------------------------------

def _interaction_record(r: Interaction) -> dict:
    return {"student": r.student_id, "question": r.question_id, "kcs": list(r.kc_ids),
            "correct": r.correct, "timestamp": r.timestamp}


def dump_log(log_: InteractionLog, fp: IO[str]) -> None:
    for r in log_.records:
        fp.write(json.dumps(_interaction_record(r)) + "\n")


def load_log(lines: Iterable[str]) -> InteractionLog:
    records = []
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        if "_meta" in d:
            continue
        records.append(Interaction(d["student"], d["question"], tuple(d["kcs"]), int(d["correct"]), float(d["timestamp"])))
    return InteractionLog(tuple(records))


def dump_windows(windows: Sequence[Window], fp: IO[str]) -> None:
    for w in windows:
        fp.write(json.dumps({"student": w.student_id,
                             "items": [[q, list(k), c] for q, k, c in w.items]}) + "\n")


def load_windows(lines: Iterable[str]) -> list[Window]:
    out = []
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        if "_meta" in d:
            continue
        out.append(Window(d["student"], tuple((q, tuple(k), int(c)) for q, k, c in d["items"])))
    return out


def summarize(log_: InteractionLog) -> dict:
    return {"students": len(log_.students), "questions": len(log_.questions),
            "kcs": len(log_.kcs), "interactions": len(log_)}


__all__ = [
    "ColumnMapping", "ParseResult", "SchemaError", "SplitSpec", "Window",
    "parse_interaction_csv", "filter_log", "split_students", "window_sequences",
    "dump_log", "load_log", "dump_windows", "load_windows", "summarize",
]
