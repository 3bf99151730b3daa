"""Discrete-event simulation of a slot-based serving backend.

Each request holds one of ``batch_capacity`` slots for ``tokens / token_rate``
seconds. Programs arrive (Poisson or fixed times), expand in stages, and are
re-allocated after every completed expansion. All events sharing a
timestamp are applied before the scheduler fills free slots, so
simultaneous arrivals compete on equal terms.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .probe import AnswerRecord, ProbeConfig
from .runtime import (
    ReasoningProgram,
    Request,
    SyntheticProgramSpec,
    TraceOracle,
    aggregate,
    complete,
    expand,
    make_program,
    update_certaindex,
)
from .scheduler import (
    AllocationPolicy,
    FairnessRecord,
    Grant,
    InterSchedPolicy,
    allocate,
    fairness_report,
    nearest_rank,
    next_batch,
)

__all__ = [
    "TraceRef",
    "SimConfig",
    "SimEvent",
    "ProgramResult",
    "SimReport",
    "deadline_for",
    "poisson_arrivals",
    "run",
    "attainment",
    "token_accuracy_curve",
    "CSV_COLUMNS",
]

EVENT_KINDS = ("request_complete", "arrival", "request_start", "probe_point", "program_terminate")
_RANK = {k: i for i, k in enumerate(EVENT_KINDS)}

CSV_COLUMNS = ("id", "archetype", "arrival", "latency", "deadline", "met", "tokens", "correct", "phi")


@dataclass(frozen=True)
class TraceRef:
    """A recorded CoT probe trace used as a workload item."""

    program_id: str
    records: tuple[AnswerRecord, ...]
    difficulty_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ValueError(f"trace {self.program_id} has no records")


@dataclass(frozen=True)
class SimConfig:
    workload: Sequence[SyntheticProgramSpec | TraceRef]
    allocation: AllocationPolicy = field(default_factory=AllocationPolicy)
    inter: InterSchedPolicy = field(default_factory=InterSchedPolicy)
    seed: int = 0
    arrival_rate: float | None = None
    arrivals: Sequence[float] | None = None
    token_rate: float = 1000.0
    slo_scale: float = 1.0
    base_deadline: float = 60.0
    horizon: float = math.inf
    probe_config: ProbeConfig | None = None
    record_events: bool = False

    def __post_init__(self):
        object.__setattr__(self, "workload", tuple(self.workload))
        if self.arrivals is not None:
            object.__setattr__(self, "arrivals", tuple(float(a) for a in self.arrivals))
            if len(self.arrivals) != len(self.workload):
                raise ValueError("arrivals: need one arrival time per workload item")
            if any(a < 0 for a in self.arrivals):
                raise ValueError("arrivals: times must be >= 0")
        elif self.workload and not (self.arrival_rate and self.arrival_rate > 0):
            raise ValueError("arrival: give a positive rate or an arrival list")
        if self.token_rate <= 0:
            raise ValueError("token_rate: must be > 0")
        if self.slo_scale <= 0 or self.base_deadline <= 0:
            raise ValueError("slo_scale and base_deadline must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon: must be > 0")

    @property
    def batch_capacity(self) -> int:
        return self.inter.batch_capacity


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str
    program_id: str
    request_id: str | None = None


@dataclass(frozen=True)
class ProgramResult:
    id: str
    archetype: str
    arrival: float
    latency: float | None
    deadline: float
    met: bool
    tokens: int
    correct: bool
    phi: float | None
    knob: int = 0
    reason: str | None = None


@dataclass
class SimReport:
    programs: list[ProgramResult] = field(default_factory=list)
    truncated: bool = False
    start: float = 0.0
    end: float = 0.0
    events: list[SimEvent] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.programs)

    @property
    def total_tokens(self) -> int:
        return sum(p.tokens for p in self.programs)

    @property
    def accuracy(self) -> float | None:
        if not self.programs:
            return None
        return sum(p.correct for p in self.programs) / self.n

    @property
    def mean_latency(self) -> float | None:
        done = [p.latency for p in self.programs if p.latency is not None]
        return math.fsum(done) / len(done) if done else None

    @property
    def p90_latency(self) -> float | None:
        done = sorted(p.latency for p in self.programs if p.latency is not None)
        return nearest_rank(done, 90) if done else None

    @property
    def attainment(self) -> float | None:
        return attainment(self) if self.programs else None

    @property
    def throughput(self) -> float:
        span = self.end - self.start
        return self.total_tokens / span if span > 0 else 0.0

    @property
    def fairness(self) -> dict | None:
        recs = [
            FairnessRecord(p.id, p.latency, p.tokens)
            for p in self.programs
            if p.latency is not None and p.tokens >= 1
        ]
        if not recs:
            return None
        rep = fairness_report(recs)
        rep.pop("phi")
        return rep

    def summary(self) -> dict:
        return {
            "programs": self.n,
            "truncated": self.truncated,
            "mean_latency": self.mean_latency,
            "p90_latency": self.p90_latency,
            "attainment": self.attainment,
            "total_tokens": self.total_tokens,
            "accuracy": self.accuracy,
            "throughput": self.throughput,
            "makespan": self.end - self.start,
            "fairness": self.fairness,
        }

    def to_json(self) -> str:
        body = {"summary": self.summary(), "programs": [asdict(p) for p in self.programs]}
        return json.dumps(body, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in self.programs:
            w.writerow([
                p.id,
                p.archetype,
                repr(p.arrival),
                "" if p.latency is None else repr(p.latency),
                repr(p.deadline),
                int(p.met),
                p.tokens,
                int(p.correct),
                "" if p.phi is None else repr(p.phi),
            ])
        return buf.getvalue()


def deadline_for(spec, slo_scale: float, base_deadline: float) -> float:
    factor = getattr(spec, "difficulty_factor", 1)
    if slo_scale <= 0 or base_deadline <= 0 or factor <= 0:
        raise ValueError("deadline inputs must be positive")
    return slo_scale * factor * base_deadline


def poisson_arrivals(n: int, rate: float, seed: int) -> list[float]:
    """Arrival times of a rate-``rate`` Poisson process.

    Gaps are unit exponentials scaled by 1/rate, so one seed gives the same
    arrival pattern compressed or stretched across rates.
    """
    if rate <= 0:
        raise ValueError("rate must be > 0")
    gaps = np.random.default_rng(seed).standard_exponential(n)
    return [float(t) for t in np.cumsum(gaps) / rate]


def _build_program(item, pid: str, cfg: SimConfig, arrival: float) -> ReasoningProgram:
    cap = cfg.allocation.resource_cap
    if isinstance(item, TraceRef):
        pc = cfg.probe_config or ProbeConfig()
        oracle = TraceOracle(item.records, pc.hesitation_markers)
        return ReasoningProgram(
            id=pid,
            archetype="CoT",
            resource_cap=min(cap, len(item.records)),
            oracle=oracle,
            arrival=arrival,
            probe_config=pc,
        )
    return make_program(item, min(cap, item.max_knob), pid, arrival, cfg.probe_config)


class _Sim:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.heap: list = []
        self.seq = 0
        self.programs: dict[str, ReasoningProgram] = {}
        self.items: dict[str, object] = {}
        self.stages: dict[str, deque] = {}
        self.stage_left: dict[str, int] = {}
        self.ready: list[Request] = []
        self.busy = 0
        self.finish: dict[str, float] = {}
        self.first_start: float | None = None
        self.last_time = 0.0
        self.report = SimReport()

    def push(self, time: float, kind: str, payload) -> None:
        heapq.heappush(self.heap, (time, _RANK[kind], self.seq, kind, payload))
        self.seq += 1

    def log(self, time: float, kind: str, pid: str, rid: str | None = None) -> None:
        if self.cfg.record_events:
            self.report.events.append(SimEvent(time, kind, pid, rid))

    # program lifecycle

    def decide(self, program: ReasoningProgram, now: float) -> None:
        decision = allocate(program, self.cfg.allocation)
        if isinstance(decision, Grant):
            reqs = expand(program, decision.units, now=now)
            groups: dict[int, list[Request]] = {}
            for r in reqs:
                groups.setdefault(r.stage, []).append(r)
            self.stages[program.id] = deque(groups[s] for s in sorted(groups))
            self.release(program.id, now)
        else:
            self.finish[program.id] = now
            self.log(now, "program_terminate", program.id)

    def release(self, pid: str, now: float) -> None:
        stage = self.stages[pid].popleft()
        for r in stage:
            r.issued_at = now
        self.stage_left[pid] = len(stage)
        self.ready.extend(stage)

    def on_arrival(self, pid: str, now: float) -> None:
        program = self.programs[pid]
        program.last_service = now
        self.decide(program, now)

    def on_complete(self, req: Request, now: float) -> None:
        program = self.programs[req.program_id]
        self.busy -= 1
        complete(program, req, now)
        program.in_flight -= 1
        program.last_service = now
        self.stage_left[program.id] -= 1
        if self.stage_left[program.id]:
            return
        if program.archetype == "CoT":
            self.log(now, "probe_point", program.id)
        if self.stages[program.id]:
            self.release(program.id, now)
            return
        update_certaindex(program)
        self.decide(program, now)

    def schedule(self, now: float) -> None:
        free = self.cfg.batch_capacity - self.busy
        if free <= 0 or not self.ready:
            return
        batch = next_batch(self.ready, self.programs, self.cfg.inter, now, free)
        started = set(map(id, batch))
        self.ready = [r for r in self.ready if id(r) not in started]
        for r in batch:
            r.started_at = now
            program = self.programs[r.program_id]
            program.in_flight += 1
            program.last_service = now
            self.busy += 1
            if self.first_start is None:
                self.first_start = now
            self.log(now, "request_start", r.program_id, r.request_id)
            self.push(now + r.tokens / self.cfg.token_rate, "request_complete", r)

    def run(self) -> SimReport:
        cfg = self.cfg
        n = len(cfg.workload)
        if cfg.arrivals is not None:
            arrivals = list(cfg.arrivals)
        else:
            arrivals = poisson_arrivals(n, cfg.arrival_rate, cfg.seed) if n else []
        width = max(4, len(str(max(n - 1, 0))))
        for i, (item, t) in enumerate(zip(cfg.workload, arrivals)):
            pid = item.program_id if isinstance(item, TraceRef) else f"p{i:0{width}d}"
            if pid in self.programs:
                raise ValueError(f"duplicate program id {pid!r}")
            self.programs[pid] = _build_program(item, pid, cfg, t)
            self.items[pid] = item
            self.push(t, "arrival", pid)

        while self.heap:
            now = self.heap[0][0]
            if now > cfg.horizon:
                self.report.truncated = True
                break
            while self.heap and self.heap[0][0] == now:
                _, _, _, kind, payload = heapq.heappop(self.heap)
                if kind == "arrival":
                    self.log(now, kind, payload)
                    self.on_arrival(payload, now)
                else:
                    self.log(now, kind, payload.program_id, payload.request_id)
                    self.on_complete(payload, now)
            self.last_time = now
            self.schedule(now)

        self.report.start = self.first_start if self.first_start is not None else 0.0
        self.report.end = self.last_time
        self.report.programs = [self.result(pid) for pid in self.programs]
        if any(r.latency is None for r in self.report.programs):
            self.report.truncated = True
        return self.report

    def result(self, pid: str) -> ProgramResult:
        program = self.programs[pid]
        item = self.items[pid]
        deadline = deadline_for(item, self.cfg.slo_scale, self.cfg.base_deadline)
        if pid in self.finish:
            latency = self.finish[pid] - program.arrival
            _, correct = aggregate(program)
            phi = latency / program.tokens_used if program.tokens_used >= 1 else None
            return ProgramResult(
                pid, program.archetype, program.arrival, latency, deadline, latency <= deadline,
                program.tokens_used, correct, phi, program.knob, program.termination_reason,
            )
        return ProgramResult(
            pid, program.archetype, program.arrival, None, deadline, False,
            program.tokens_used, False, None, program.knob, None,
        )


def run(config: SimConfig) -> SimReport:
    """Simulate ``config`` to quiescence or its horizon."""
    return _Sim(config).run()


def attainment(report: SimReport) -> float:
    """Fraction of programs that finished within their deadline; unfinished ones miss."""
    if not report.programs:
        raise ValueError("report has no programs")
    return sum(p.met for p in report.programs) / len(report.programs)


def token_accuracy_curve(reports: Sequence[SimReport]) -> list[tuple[int, float]]:
    if not reports:
        raise ValueError("need at least one report")
    return sorted((r.total_tokens, r.accuracy if r.accuracy is not None else 0.0) for r in reports)
