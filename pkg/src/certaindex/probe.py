"""Probe-in-the-middle bookkeeping for chain-of-thought programs.

A trace is the sequence of answers forced out of the model every
``interval_tokens`` generated tokens. The exit rule watches the last ``window``
confident answers and stops once enough of them agree with the newest one.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import normalize_answer

__all__ = [
    "DEFAULT_MARKERS",
    "ProbeConfig",
    "AnswerRecord",
    "ProbeTrace",
    "Decision",
    "TraceFormatError",
    "flag_hesitation",
    "consistency",
    "should_exit",
    "evaluate_trace",
    "final_answer",
    "is_low_confidence",
    "tv_stop",
    "read_traces",
    "write_traces",
]

DEFAULT_MARKERS = ("wait", "hmm")


@dataclass(frozen=True)
class ProbeConfig:
    interval_tokens: int = 64
    window: int = 3
    threshold: float = 1.0
    hesitation_markers: tuple[str, ...] = DEFAULT_MARKERS
    max_tokens: int = 16384

    def __post_init__(self):
        object.__setattr__(self, "hesitation_markers", tuple(m.lower() for m in self.hesitation_markers))
        if self.interval_tokens < 1:
            raise ValueError("interval_tokens must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class AnswerRecord:
    step_index: int
    token_offset: int
    answer: str
    hesitant: bool = False


class Decision(enum.Enum):
    CONTINUE = "continue"
    EXIT_CERTAIN = "exit_certain"
    EXIT_BUDGET = "exit_budget"


@dataclass
class ProbeTrace:
    records: list[AnswerRecord] = field(default_factory=list)
    terminated_at: int | None = None
    termination_reason: str | None = None  # certain | budget | criteria_external

    def __post_init__(self):
        if self.terminated_at is not None:
            if not any(r.step_index == self.terminated_at for r in self.records):
                raise ValueError(f"terminated_at={self.terminated_at} is not a recorded step")
        for a, b in zip(self.records, self.records[1:]):
            if b.token_offset <= a.token_offset:
                raise ValueError("token_offset must strictly increase along a trace")

    def append(self, record: AnswerRecord) -> None:
        if self.records and record.token_offset <= self.records[-1].token_offset:
            raise ValueError("token_offset must strictly increase along a trace")
        self.records.append(record)

    def prefix(self, step_index: int) -> list[AnswerRecord]:
        return [r for r in self.records if r.step_index <= step_index]


class TraceFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def flag_hesitation(answer: str, markers: Iterable[str] = DEFAULT_MARKERS) -> bool:
    lowered = answer.lower()
    return any(m.lower() in lowered for m in markers)


def consistency(records: Sequence[AnswerRecord], k: int | None = None, w: int = 3) -> float | None:
    """Sliding-window agreement C_k over confident answers up to step ``k``.

    Hesitant records are dropped first; the window is the last ``w`` remaining
    records and the score is the fraction equal to the newest of them.
    Returns None while fewer than ``w`` usable records exist.
    """
    if w < 1:
        raise ValueError("window must be >= 1")
    usable = [r for r in records if not r.hesitant and (k is None or r.step_index <= k)]
    if len(usable) < w:
        return None
    window = usable[-w:]
    last = normalize_answer(window[-1].answer)
    hits = sum(1 for r in window if normalize_answer(r.answer) == last)
    return hits / w


def should_exit(trace: ProbeTrace | Sequence[AnswerRecord], cfg: ProbeConfig) -> Decision:
    """Decision at the newest record. Certainty wins over budget exhaustion."""
    records = trace.records if isinstance(trace, ProbeTrace) else list(trace)
    if not records:
        return Decision.CONTINUE
    c = consistency(records, None, cfg.window)
    if c is not None and c >= cfg.threshold:
        return Decision.EXIT_CERTAIN
    if records[-1].token_offset >= cfg.max_tokens:
        return Decision.EXIT_BUDGET
    return Decision.CONTINUE


_REASONS = {Decision.EXIT_CERTAIN: "certain", Decision.EXIT_BUDGET: "budget"}


def evaluate_trace(records: Sequence[AnswerRecord], cfg: ProbeConfig) -> ProbeTrace:
    """Replay ``records`` through the exit rule, stopping at the first exit.

    A trace that runs out before any exit fires is closed with reason
    ``criteria_external`` (the generation ended on its own).
    """
    trace = ProbeTrace()
    for rec in records:
        trace.append(rec)
        decision = should_exit(trace, cfg)
        if decision is not Decision.CONTINUE:
            trace.terminated_at = rec.step_index
            trace.termination_reason = _REASONS[decision]
            return trace
    if trace.records:
        trace.terminated_at = trace.records[-1].step_index
        trace.termination_reason = "criteria_external"
    return trace


def final_answer(trace: ProbeTrace) -> str:
    """Answer reported at exit.

    The newest confident answer at or before the exit step (for a certain
    exit this is the answer that closed the window); if every probe hesitated,
    the newest answer of any kind.
    """
    if not trace.records:
        raise ValueError("empty trace")
    upto = trace.terminated_at
    records = trace.prefix(upto) if upto is not None else trace.records
    for rec in reversed(records):
        if not rec.hesitant:
            return normalize_answer(rec.answer)
    return normalize_answer(records[-1].answer)


def is_low_confidence(trace: ProbeTrace) -> bool:
    """True when no confident answer exists, so final_answer fell back to a hesitant one."""
    upto = trace.terminated_at
    records = trace.prefix(upto) if upto is not None else trace.records
    return bool(records) and all(r.hesitant for r in records)


def tv_stop(records: Sequence[AnswerRecord], k: int, epsilon: float) -> bool:
    """Distribution-level alternative to the window rule, on confident answers.

    Answers become group indices in first-seen order and are handed to
    :func:`certaindex.theory.epsilon_stop_test`. Raises NotEnoughProbes when
    fewer than 2k confident answers exist.
    """
    from .theory import epsilon_stop_test

    groups: dict[str, int] = {}
    samples = []
    for r in records:
        if r.hesitant:
            continue
        key = normalize_answer(r.answer)
        samples.append(groups.setdefault(key, len(groups)))
    return epsilon_stop_test(samples, k, epsilon, n_groups=max(len(groups), 1))


# -- JSON-lines interchange ---------------------------------------------------

_FIELDS = ("program_id", "step_index", "token_offset", "answer", "hesitant")


def read_traces(path: str | Path) -> dict[str, list[AnswerRecord]]:
    """Parse a probe-trace JSONL file into per-program record lists.

    Records of one program must appear in increasing step and token order;
    programs may interleave. Errors carry the 1-based line number.
    """
    traces: dict[str, list[AnswerRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise TraceFormatError(line_no, "expected a JSON object")
            missing = [f for f in _FIELDS if f not in obj]
            if missing:
                raise TraceFormatError(line_no, f"missing field(s) {', '.join(missing)}")
            try:
                step = int(obj["step_index"])
                offset = int(obj["token_offset"])
            except (TypeError, ValueError):
                raise TraceFormatError(line_no, "step_index and token_offset must be integers") from None
            if not isinstance(obj["answer"], str):
                raise TraceFormatError(line_no, "answer must be a string")
            if not isinstance(obj["hesitant"], bool):
                raise TraceFormatError(line_no, "hesitant must be a boolean")
            if step < 1:
                raise TraceFormatError(line_no, "step_index must be >= 1")
            pid = str(obj["program_id"])
            recs = traces.setdefault(pid, [])
            if recs:
                if step <= recs[-1].step_index:
                    raise TraceFormatError(line_no, f"step_index regression for program {pid}")
                if offset <= recs[-1].token_offset:
                    raise TraceFormatError(line_no, f"token_offset regression for program {pid}")
            elif offset < 1:
                raise TraceFormatError(line_no, "token_offset must be >= 1")
            recs.append(AnswerRecord(step, offset, obj["answer"], obj["hesitant"]))
    if not traces:
        raise ValueError(f"{path}: trace file is empty")
    return traces


def write_traces(path: str | Path, traces: dict[str, Sequence[AnswerRecord]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pid, records in traces.items():
            for r in records:
                row = {
                    "program_id": pid,
                    "step_index": r.step_index,
                    "token_offset": r.token_offset,
                    "answer": r.answer,
                    "hesitant": r.hesitant,
                }
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
