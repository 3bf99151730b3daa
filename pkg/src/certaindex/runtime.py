"""Reasoning programs driven by a synthetic oracle or a recorded probe trace.

A program owns a knob (branches for SC, width for Rebase, rollouts for MCTS,
probe intervals for CoT), a resource cap on that knob, and the outcomes of
every unit of work it has expanded. Outcomes come from an oracle whose
randomness is addressed by (seed, unit index), so two runs that split the
same units into different expansions observe identical answers and token
counts. That is what makes token savings exactly accountable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .metrics import SignalVector, normalize_answer
from .probe import AnswerRecord, ProbeConfig, ProbeTrace, final_answer, flag_hesitation, read_traces, consistency

__all__ = [
    "ARCHETYPES",
    "SUPPORTED_SIGNALS",
    "SyntheticProgramSpec",
    "Outcome",
    "SyntheticOracle",
    "TraceOracle",
    "Request",
    "ProgramState",
    "ReasoningProgram",
    "make_program",
    "expand",
    "complete",
    "aggregate",
    "aggregate_prefix",
    "update_certaindex",
    "signals_at",
    "replay_trace",
    "generate_workload",
    "synthetic_probe_trace",
]

ARCHETYPES = ("SC", "Rebase", "MCTS", "CoT")

SUPPORTED_SIGNALS = {
    "SC": {"certaindex_entropy", "mean_output_length", "mean_norm_logprob"},
    "Rebase": {"certaindex_entropy", "certaindex_reward", "mean_output_length", "mean_norm_logprob"},
    "MCTS": {"certaindex_entropy", "certaindex_reward", "mean_output_length", "mean_norm_logprob"},
    "CoT": {"consistency", "certaindex_entropy"},
}

_REWARD_FLOOR = 0.2
_REWARD_CEIL = 0.9


@dataclass(frozen=True)
class SyntheticProgramSpec:
    """Ground truth for one synthetic reasoning program.

    Before ``true_convergence_knob`` each unit's answer is a distractor with
    probability ``noise``; from it on, with probability ``residual_noise``.
    Unsolvable programs draw uniformly from the distractors forever.
    """

    archetype: str = "SC"
    true_convergence_knob: int = 1
    solvable: bool = True
    difficulty_factor: int = 1
    correct_answer: str = "42"
    n_groups: int = 4
    noise: float = 0.5
    residual_noise: float = 0.0
    tokens_mean: float = 256.0
    tokens_sigma: float = 0.0
    reward_concentration: float = 10.0
    hesitation_rate: float = 0.0
    interval_tokens: int = 64
    seed: int = 0
    max_knob: int = 4096

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise ValueError(f"unknown archetype {self.archetype!r}")
        if self.difficulty_factor not in (1, 2, 3):
            raise ValueError("difficulty_factor must be 1, 2 or 3")
        if not 1 <= self.true_convergence_knob <= self.max_knob:
            raise ValueError("true_convergence_knob must lie in [1, max_knob]")
        if self.n_groups < 2:
            raise ValueError("need at least one distractor (n_groups >= 2)")
        for name in ("noise", "residual_noise", "hesitation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tokens_mean < 1 or self.tokens_sigma < 0:
            raise ValueError("tokens_mean must be >= 1 and tokens_sigma >= 0")

    @property
    def distractors(self) -> list[str]:
        return [f"{self.correct_answer}~{d}" for d in range(1, self.n_groups)]


@dataclass(frozen=True)
class Outcome:
    answer: str
    reward: float
    norm_logprob: float
    hesitant: bool = False


class SyntheticOracle:
    """Index-addressed sampler over a SyntheticProgramSpec."""

    def __init__(self, spec: SyntheticProgramSpec):
        self.spec = spec

    @property
    def correct_answer(self) -> str | None:
        return self.spec.correct_answer if self.spec.solvable else None

    @property
    def max_units(self) -> int:
        return self.spec.max_knob

    def _rng(self, unit: int, sub: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.seed, unit, sub])

    def outcome(self, unit: int) -> Outcome:
        s = self.spec
        rng = self._rng(unit, 0)
        u_noise, u_pick, u_hes = rng.random(3)
        converged = unit >= s.true_convergence_knob
        if not s.solvable:
            is_correct = False
        else:
            is_correct = bool(u_noise >= (s.residual_noise if converged else s.noise))
        if is_correct:
            answer = s.correct_answer
        else:
            d = s.distractors
            answer = d[min(int(u_pick * len(d)), len(d) - 1)]
        progress = min(1.0, unit / s.true_convergence_knob) if s.solvable else 0.0
        mu = _REWARD_FLOOR + (_REWARD_CEIL - _REWARD_FLOOR) * progress
        if not is_correct:
            mu *= 0.6
        kappa = s.reward_concentration
        reward = float(rng.beta(mu * kappa, (1.0 - mu) * kappa))
        lp_mean = -0.2 if is_correct else -0.6
        norm_logprob = float(min(0.0, rng.normal(lp_mean, 0.05)))
        hesitant = bool(s.archetype == "CoT" and not converged and u_hes < s.hesitation_rate)
        if hesitant:
            answer = f"wait, {answer}"
        return Outcome(answer, reward, norm_logprob, hesitant)

    def tokens(self, unit: int, sub: int = 0) -> int:
        s = self.spec
        if s.archetype == "CoT":
            return s.interval_tokens
        if s.tokens_sigma == 0:
            return max(1, int(round(s.tokens_mean)))
        rng = self._rng(unit, sub + 1)
        mu = math.log(s.tokens_mean) - s.tokens_sigma ** 2 / 2.0
        return max(1, int(round(rng.lognormal(mu, s.tokens_sigma))))


class TraceOracle:
    """Replays recorded probe answers as CoT units; unit j is record j."""

    def __init__(self, records: Sequence[AnswerRecord], markers: Sequence[str] = ()):
        if not records:
            raise ValueError("trace has no records")
        self.records = list(records)
        self.markers = tuple(markers)
        self.correct_answer = None

    @property
    def max_units(self) -> int:
        return len(self.records)

    def outcome(self, unit: int) -> Outcome:
        rec = self.records[unit - 1]
        hesitant = rec.hesitant or (bool(self.markers) and flag_hesitation(rec.answer, self.markers))
        return Outcome(rec.answer, 0.0, 0.0, hesitant)

    def tokens(self, unit: int, sub: int = 0) -> int:
        prev = self.records[unit - 2].token_offset if unit > 1 else 0
        return self.records[unit - 1].token_offset - prev


@dataclass(eq=False)
class Request:
    program_id: str
    branch_id: int
    issued_at: float
    tokens: int
    stage: int = 0
    sub: int = 0
    started_at: float | None = None
    completed_at: float | None = None

    @property
    def request_id(self) -> str:
        return f"{self.program_id}/{self.branch_id}/{self.sub}"


@dataclass
class ProgramState:
    answers: list[str] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    norm_logprobs: list[float] = field(default_factory=list)
    unit_tokens: list[int] = field(default_factory=list)
    probes: list[AnswerRecord] = field(default_factory=list)


@dataclass(eq=False)
class ReasoningProgram:
    id: str
    archetype: str
    resource_cap: int
    oracle: SyntheticOracle | TraceOracle
    knob: int = 0
    certaindex_history: list[tuple[int, SignalVector]] = field(default_factory=list)
    state: ProgramState = field(default_factory=ProgramState)
    tokens_used: int = 0
    status: str = "pending"
    arrival: float = 0.0
    probe_config: ProbeConfig | None = None
    depth: int = 1
    budget_cap: int | None = None
    termination_reason: str | None = None
    completed_tokens: list[int] = field(default_factory=list)
    outstanding: int = 0
    in_flight: int = 0
    last_service: float | None = None
    spec: SyntheticProgramSpec | None = None

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise ValueError(f"unknown archetype {self.archetype!r}")
        if self.resource_cap < 1:
            raise ValueError("resource_cap must be >= 1")
        if self.resource_cap > self.oracle.max_units:
            raise ValueError(f"resource_cap {self.resource_cap} exceeds the oracle's {self.oracle.max_units} units")
        if self.budget_cap is None:
            self.budget_cap = self.resource_cap

    @property
    def correct_answer(self) -> str | None:
        return self.oracle.correct_answer

    def probe_trace(self) -> ProbeTrace:
        trace = ProbeTrace(list(self.state.probes))
        if trace.records and self.status == "terminated":
            trace.terminated_at = trace.records[-1].step_index
            trace.termination_reason = self.termination_reason
        return trace


def make_program(
    spec: SyntheticProgramSpec,
    resource_cap: int,
    program_id: str = "p0",
    arrival: float = 0.0,
    probe_config: ProbeConfig | None = None,
    depth: int | None = None,
) -> ReasoningProgram:
    """Build a program over a synthetic oracle. ``depth`` is layers per Rebase
    expansion and requests per MCTS rollout (default 3 and 2)."""
    if depth is None:
        depth = {"Rebase": 3, "MCTS": 2}.get(spec.archetype, 1)
    if spec.archetype == "CoT" and probe_config is None:
        probe_config = ProbeConfig(interval_tokens=spec.interval_tokens, max_tokens=resource_cap * spec.interval_tokens)
    return ReasoningProgram(
        id=program_id,
        archetype=spec.archetype,
        resource_cap=resource_cap,
        oracle=SyntheticOracle(spec),
        arrival=arrival,
        probe_config=probe_config,
        depth=depth,
        spec=spec,
    )


def expand(program: ReasoningProgram, step_budget: int, oracle=None, now: float = 0.0) -> list[Request]:
    """Advance the knob by ``step_budget`` units and emit the requests that do the work.

    Request ``stage`` encodes dependencies inside one expansion: stage s may
    start only after every stage s-1 request of the same expansion finished.
    SC issues its branches in one stage; Rebase issues ``depth`` layers of
    width ``step_budget``; MCTS runs rollouts one after another, each a chain
    of ``depth`` requests; CoT issues one probe interval per stage.
    """
    if program.status == "terminated":
        raise RuntimeError(f"program {program.id} is terminated")
    if step_budget < 1:
        raise ValueError("step_budget must be >= 1")
    if program.knob + step_budget > program.resource_cap:
        raise ValueError(
            f"expanding {program.id} by {step_budget} would pass its cap "
            f"({program.knob} + {step_budget} > {program.resource_cap})"
        )
    oracle = oracle or program.oracle
    program.status = "running"
    st = program.state
    requests: list[Request] = []
    first = program.knob + 1
    for offset, unit in enumerate(range(first, first + step_budget)):
        out = oracle.outcome(unit)
        st.answers.append(out.answer)
        st.rewards.append(out.reward)
        st.norm_logprobs.append(out.norm_logprob)
        arch = program.archetype
        if arch == "SC":
            reqs = [Request(program.id, unit, now, oracle.tokens(unit, 0), stage=0)]
        elif arch == "Rebase":
            reqs = [Request(program.id, unit, now, oracle.tokens(unit, d), stage=d, sub=d) for d in range(program.depth)]
        elif arch == "MCTS":
            reqs = [
                Request(program.id, unit, now, oracle.tokens(unit, d), stage=offset * program.depth + d, sub=d)
                for d in range(program.depth)
            ]
        else:
            reqs = [Request(program.id, unit, now, oracle.tokens(unit, 0), stage=offset)]
            prev = st.probes[-1].token_offset if st.probes else 0
            st.probes.append(AnswerRecord(unit, prev + reqs[0].tokens, out.answer, out.hesitant))
        st.unit_tokens.append(sum(r.tokens for r in reqs))
        requests.extend(reqs)
    program.knob += step_budget
    program.outstanding += len(requests)
    return requests


def complete(program: ReasoningProgram, request: Request, now: float = 0.0) -> None:
    """Account a finished request against its program."""
    if request.completed_at is not None:
        raise RuntimeError(f"request {request.request_id} completed twice")
    request.completed_at = max(now, request.issued_at)
    program.tokens_used += request.tokens
    program.completed_tokens.append(request.tokens)
    program.outstanding -= 1


def _plurality(answers: Sequence[str], weights: Sequence[float] | None = None) -> str:
    totals: dict[str, float] = {}
    for idx, a in enumerate(answers):
        key = normalize_answer(a)
        totals[key] = totals.get(key, 0.0) + (1.0 if weights is None else weights[idx])
    # max() keeps the first maximal key, i.e. the earliest-seen answer wins ties
    return max(totals, key=totals.__getitem__)


def aggregate_prefix(program: ReasoningProgram, upto: int | None = None) -> str:
    """Aggregated answer using only the first ``upto`` units (default: all)."""
    n = program.knob if upto is None else upto
    st = program.state
    if n < 1 or not st.answers:
        raise ValueError(f"program {program.id} has nothing to aggregate")
    answers = st.answers[:n]
    arch = program.archetype
    if arch == "SC":
        return _plurality(answers)
    if arch == "Rebase":
        scores = np.asarray(st.rewards[:n])
        w = np.exp(scores - scores.max())
        return _plurality(answers, list(w / w.sum()))
    if arch == "MCTS":
        best = int(np.argmax(st.rewards[:n]))
        return normalize_answer(answers[best])
    trace = ProbeTrace(st.probes[:n])
    trace.terminated_at = trace.records[-1].step_index
    return final_answer(trace)


def aggregate(program: ReasoningProgram) -> tuple[str, bool]:
    """Final answer and whether it is correct (answer matches a solvable oracle)."""
    if program.status != "terminated":
        raise RuntimeError(f"program {program.id} has not terminated")
    answer = aggregate_prefix(program)
    correct = program.correct_answer is not None and answer == program.correct_answer
    return answer, correct


def signals_at(program: ReasoningProgram, upto: int | None = None) -> SignalVector:
    """Archetype-appropriate signals over the first ``upto`` units."""
    n = program.knob if upto is None else upto
    st = program.state
    if n < 1:
        raise ValueError("no completed expansion yet")
    arch = program.archetype
    if arch == "CoT":
        probes = st.probes[:n]
        confident = [p.answer for p in probes if not p.hesitant]
        w = program.probe_config.window if program.probe_config else 3
        ent = metrics.certaindex_entropy(metrics.cluster_exact(confident)) if confident else 0.0
        return SignalVector(certaindex_entropy=ent, consistency=consistency(probes, None, w))
    clustering = metrics.cluster_exact(st.answers[:n])
    lengths = st.unit_tokens[:n]
    lp = [(lpt * t, t) for lpt, t in zip(st.norm_logprobs[:n], lengths)]
    kw = dict(
        certaindex_entropy=metrics.certaindex_entropy(clustering),
        mean_output_length=metrics.mean_output_length(lengths),
        mean_norm_logprob=metrics.mean_norm_logprob(lp),
    )
    if arch == "MCTS":
        kw["certaindex_reward"] = metrics.certaindex_reward(metrics.RewardSet(st.rewards[:n], "mean"))
    elif arch == "Rebase":
        kw["certaindex_reward"] = metrics.certaindex_reward(metrics.RewardSet(st.rewards[:n], "max"))
    return SignalVector(**kw)


def update_certaindex(program: ReasoningProgram) -> SignalVector:
    """Compute signals at the current knob and append them to the history."""
    sv = signals_at(program)
    hist = program.certaindex_history
    if hist and hist[-1][0] == program.knob:
        hist[-1] = (program.knob, sv)
    else:
        hist.append((program.knob, sv))
    return sv


def replay_trace(path: str | Path, probe_config: ProbeConfig | None = None) -> dict[str, ReasoningProgram]:
    """One CoT program per program_id in a probe-trace JSONL file.

    Each program's cap is its record count; expanding it consumes recorded
    answers instead of sampling. Recorded hesitation flags are kept, and
    answers containing the configured markers are flagged as well.
    """
    cfg = probe_config or ProbeConfig()
    programs = {}
    for pid, records in read_traces(path).items():
        oracle = TraceOracle(records, cfg.hesitation_markers)
        programs[pid] = ReasoningProgram(
            id=pid, archetype="CoT", resource_cap=len(records), oracle=oracle, probe_config=cfg
        )
    return programs


def generate_workload(
    n: int,
    archetype: str = "SC",
    seed: int = 0,
    *,
    p_solvable: float = 0.85,
    convergence_range: tuple[int, int] = (1, 8),
    easy_cutoff: int = 3,
    n_groups: int = 4,
    noise: float = 0.5,
    residual_noise: float = 0.0,
    tokens_mean: float = 256.0,
    tokens_spread: float = 0.5,
    tokens_sigma: float = 0.0,
    hesitation_rate: float = 0.0,
    interval_tokens: int = 64,
) -> list[SyntheticProgramSpec]:
    """Draw ``n`` synthetic program specs.

    Each program gets its own mean request length (lognormal with sigma
    ``tokens_spread`` around ``tokens_mean``), so length history carries
    per-program signal. Difficulty: unsolvable -> 3, solvable converging by
    ``easy_cutoff`` -> 1, otherwise 2.
    """
    rng = np.random.default_rng(seed)
    lo, hi = convergence_range
    specs = []
    for i in range(n):
        solvable = bool(rng.random() < p_solvable)
        conv = int(rng.integers(lo, hi + 1))
        mean = float(tokens_mean * math.exp(rng.normal(-tokens_spread ** 2 / 2, tokens_spread))) if tokens_spread else tokens_mean
        mean = float(max(1, round(mean)))
        answer = str(int(rng.integers(0, 10_000)))
        difficulty = 3 if not solvable else (1 if conv <= easy_cutoff else 2)
        specs.append(
            SyntheticProgramSpec(
                archetype=archetype,
                true_convergence_knob=conv,
                solvable=solvable,
                difficulty_factor=difficulty,
                correct_answer=answer,
                n_groups=n_groups,
                noise=noise,
                residual_noise=residual_noise,
                tokens_mean=mean,
                tokens_sigma=tokens_sigma,
                hesitation_rate=hesitation_rate,
                interval_tokens=interval_tokens,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return specs


def synthetic_probe_trace(spec: SyntheticProgramSpec, n_probes: int) -> list[AnswerRecord]:
    """Probe records a CoT program over ``spec`` would emit in ``n_probes`` intervals."""
    spec = spec if spec.archetype == "CoT" else replace(spec, archetype="CoT")
    oracle = SyntheticOracle(spec)
    records, offset = [], 0
    for unit in range(1, n_probes + 1):
        out = oracle.outcome(unit)
        offset += oracle.tokens(unit)
        records.append(AnswerRecord(unit, offset, out.answer, out.hesitant))
    return records
