"""Two-level scheduling of reasoning programs.

Intra-program: ``allocate`` reads a program's signals at its detect and
recheck knobs and either grants more knob units or terminates it. Thresholds
and budget curves are calibrated offline from profiled runs.

Inter-program: ``next_batch`` orders ready requests for a backend with a
fixed number of slots, optionally grouping them by program (gang) and
ordering programs by estimated remaining work with starvation escalation.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .metrics import DEFAULT_DIRECTIONS, SIGNAL_NAMES, SignalVector, combined_meets_thresholds
from .runtime import (
    SUPPORTED_SIGNALS,
    ReasoningProgram,
    Request,
    SyntheticProgramSpec,
    aggregate_prefix,
    complete,
    expand,
    make_program,
    signals_at,
    update_certaindex,
)

__all__ = [
    "POLICY_KINDS",
    "ORDERS",
    "BudgetCurve",
    "AllocationPolicy",
    "Grant",
    "Terminate",
    "allocate",
    "run_offline",
    "CalibrationRun",
    "calibrate_threshold",
    "ProfileRun",
    "profile_program",
    "profile_workload",
    "calibration_runs",
    "stop_knobs",
    "calibrate_recheck_threshold",
    "fit_budget_curve",
    "InterSchedPolicy",
    "estimate_iteration_tokens",
    "escalate",
    "next_batch",
    "FairnessRecord",
    "nearest_rank",
    "fairness_report",
]

POLICY_KINDS = (
    "even",
    "length_proxy",
    "static_threshold",
    "initial_curve_fit",
    "k_step_threshold",
    "dynamic_curve_fit",
)
ORDERS = ("fifo", "sjf_estimated", "lpm_like_baseline")


def _passes(value: float, cutoff: float, direction: str) -> bool:
    if direction == "ge":
        return value >= cutoff
    if direction == "le":
        return value <= cutoff
    raise ValueError(f"unknown threshold direction {direction!r}")


# -- intra-program allocation --------------------------------------------------


@dataclass(frozen=True)
class BudgetCurve:
    """Step function from a certaindex value to a remaining-knob budget.

    ``edges`` has one more entry than ``budgets``; bucket b covers
    [edges[b], edges[b+1]) and the last bucket is closed on the right.
    Values outside the edges clamp to the end buckets.
    """

    edges: tuple[float, ...]
    budgets: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        if len(self.edges) != len(self.budgets) + 1 or not self.budgets:
            raise ValueError("need len(edges) == len(budgets) + 1 and at least one bucket")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("curve edges must strictly increase")
        if any(b < 0 for b in self.budgets):
            raise ValueError("curve budgets must be >= 0")
        if any(b > a for a, b in zip(self.budgets, self.budgets[1:])):
            raise ValueError("curve must be non-increasing in certaindex")

    def bucket(self, c: float) -> int:
        idx = int(np.searchsorted(self.edges, c, side="right")) - 1
        return min(max(idx, 0), len(self.budgets) - 1)

    def __call__(self, c: float) -> int:
        return self.budgets[self.bucket(c)]


@dataclass(frozen=True)
class AllocationPolicy:
    kind: str = "even"
    resource_cap: int = 20
    detect_at_knob: int = 5
    thresholds: Mapping[str, float] = field(default_factory=dict)
    recheck_thresholds: Mapping[str, float] | None = None
    directions: Mapping[str, str] = field(default_factory=dict)
    recheck_every: int = 1
    curve: BudgetCurve | None = None
    curve_signal: str = "certaindex_entropy"
    length_threshold: float | None = None
    length_direction: str = "ge"

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"kind: unknown policy kind {self.kind!r} (expected one of {', '.join(POLICY_KINDS)})")
        if self.resource_cap < 1:
            raise ValueError("resource_cap: must be >= 1")
        if not 1 <= self.detect_at_knob <= self.resource_cap:
            raise ValueError("detect_at_knob: must lie in [1, resource_cap]")
        if self.recheck_every < 1:
            raise ValueError("recheck_every: must be >= 1")
        for name in list(self.thresholds) + list(self.recheck_thresholds or {}):
            if name not in SIGNAL_NAMES:
                raise ValueError(f"thresholds: unknown signal {name!r}")
        if self.kind in ("initial_curve_fit", "dynamic_curve_fit") and self.curve is None:
            raise ValueError(f"curve: required for kind {self.kind!r}")
        if self.kind == "length_proxy" and self.length_threshold is None:
            raise ValueError("length_threshold: required for kind 'length_proxy'")
        if self.length_direction not in ("ge", "le"):
            raise ValueError("length_direction: must be 'ge' or 'le'")

    def direction(self, signal: str) -> str:
        return self.directions.get(signal, DEFAULT_DIRECTIONS.get(signal, "ge"))


@dataclass(frozen=True)
class Grant:
    units: int


@dataclass(frozen=True)
class Terminate:
    reason: str  # certain | budget | curve | length


def _current_signals(program: ReasoningProgram) -> SignalVector:
    hist = program.certaindex_history
    if hist and hist[-1][0] == program.knob:
        return hist[-1][1]
    return update_certaindex(program)


def _meets(program: ReasoningProgram, sv: SignalVector, thresholds: Mapping[str, float], policy: AllocationPolicy) -> bool:
    if not thresholds:
        return False
    supported = SUPPORTED_SIGNALS[program.archetype]
    for name in thresholds:
        if name not in supported:
            raise ValueError(f"signal {name!r} is not available for {program.archetype} programs")
    # a supported signal can still be unready (CoT window not yet full)
    if any(sv.get(name) is None for name in thresholds):
        return False
    dirs = {name: policy.direction(name) for name in thresholds}
    return combined_meets_thresholds(sv, thresholds, dirs)


def _curve_value(program: ReasoningProgram, sv: SignalVector, policy: AllocationPolicy) -> int | None:
    if policy.curve_signal not in SUPPORTED_SIGNALS[program.archetype]:
        raise ValueError(f"signal {policy.curve_signal!r} is not available for {program.archetype} programs")
    c = sv.get(policy.curve_signal)
    return None if c is None else policy.curve(c)


def _stop(program: ReasoningProgram, reason: str) -> Terminate:
    program.status = "terminated"
    program.termination_reason = reason
    return Terminate(reason)


def allocate(program: ReasoningProgram, policy: AllocationPolicy) -> Grant | Terminate:
    """Decide the program's next knob grant, or terminate it.

    Call before the first expansion (knob 0) and after each expansion has
    fully completed. Grants never carry the knob past
    ``min(policy.resource_cap, program.resource_cap)``.
    """
    if program.status == "terminated":
        raise RuntimeError(f"program {program.id} is already terminated")
    if program.outstanding:
        raise RuntimeError(f"program {program.id} still has {program.outstanding} outstanding requests")
    cap = min(policy.resource_cap, program.resource_cap)
    program.budget_cap = min(program.budget_cap or cap, cap)
    k = program.knob
    if k >= program.budget_cap:
        return _stop(program, "budget" if k >= cap else "curve")
    if k == 0:
        first = cap if policy.kind == "even" else min(policy.detect_at_knob, cap)
        return Grant(first)
    kind = policy.kind
    if kind == "even":
        return Grant(cap - k)

    detect = policy.detect_at_knob
    at_detect = k == detect
    at_recheck = k > detect and (k - detect) % policy.recheck_every == 0

    if kind == "length_proxy":
        if at_detect and _passes(program.tokens_used, policy.length_threshold, policy.length_direction):
            return _stop(program, "length")
        return Grant(cap - k)

    sv = _current_signals(program)
    if kind in ("static_threshold", "initial_curve_fit"):
        if at_detect:
            if _meets(program, sv, policy.thresholds, policy):
                return _stop(program, "certain")
            if kind == "initial_curve_fit":
                budget = _curve_value(program, sv, policy)
                if budget is not None:
                    program.budget_cap = min(program.budget_cap, k + budget)
                    if k >= program.budget_cap:
                        return _stop(program, "curve")
        return Grant(program.budget_cap - k)

    # k_step_threshold and dynamic_curve_fit re-test at every check point
    if at_detect or at_recheck:
        th = policy.thresholds if at_detect else (policy.recheck_thresholds if policy.recheck_thresholds is not None else policy.thresholds)
        if _meets(program, sv, th, policy):
            return _stop(program, "certain")
        if kind == "dynamic_curve_fit":
            budget = _curve_value(program, sv, policy)
            if budget is not None:
                program.budget_cap = min(program.budget_cap, k + budget)
                if k >= program.budget_cap:
                    return _stop(program, "curve")
    return Grant(min(policy.recheck_every, program.budget_cap - k))


def run_offline(program: ReasoningProgram, policy: AllocationPolicy) -> ReasoningProgram:
    """Drive one program to termination with every request completing instantly."""
    while True:
        decision = allocate(program, policy)
        if isinstance(decision, Terminate):
            return program
        for req in expand(program, decision.units):
            complete(program, req)
        update_certaindex(program)


# -- calibration -----------------------------------------------------------------


class CalibrationRun(NamedTuple):
    certaindex: float
    correct_if_stopped: bool
    correct_if_full: bool
    tokens_saved: float = 0.0


def _disabled(direction: str) -> float:
    return math.inf if direction == "ge" else -math.inf


def calibrate_threshold(
    labeled_runs: Iterable[CalibrationRun | tuple],
    accuracy_tolerance: float = 0.0,
    direction: str = "ge",
) -> float:
    """Most aggressive cutoff whose early stops keep accuracy within tolerance.

    Candidates are the observed certaindex values. A cutoff is feasible when
    the runs it stops lose at most ``tolerance * N`` correct answers and the
    net accuracy change stays within the same bound, so tolerance 0 means
    stopped runs answer exactly as they would at the cap. Returns +inf
    (-inf for "le") when nothing is feasible: never stop early.
    """
    runs = [CalibrationRun(*r) for r in labeled_runs]
    if not runs:
        raise ValueError("calibration set is empty")
    if not 0.0 <= accuracy_tolerance <= 1.0:
        raise ValueError("accuracy_tolerance must lie in [0, 1]")
    c = np.array([r.certaindex for r in runs], dtype=float)
    stopped_ok = np.array([r.correct_if_stopped for r in runs], dtype=bool)
    full_ok = np.array([r.correct_if_full for r in runs], dtype=bool)
    losses = full_ok & ~stopped_ok
    gains = stopped_ok & ~full_ok
    budget = accuracy_tolerance * len(runs) + 1e-9
    candidates = np.unique(c)
    if direction == "le":
        candidates = candidates[::-1]
    elif direction != "ge":
        raise ValueError(f"unknown threshold direction {direction!r}")
    for t in candidates:
        mask = c >= t if direction == "ge" else c <= t
        lost = int(losses[mask].sum())
        net = int(gains[mask].sum()) - lost
        if lost <= budget and abs(net) <= budget:
            return float(t)
    return _disabled(direction)


@dataclass
class ProfileRun:
    """A program expanded one unit at a time up to ``cap``.

    ``signals[j-1]``, ``correct[j-1]`` and ``tokens[j-1]`` describe the
    program had it stopped at knob j.
    """

    signals: list[SignalVector]
    correct: list[bool]
    tokens: list[int]
    solvable: bool

    @property
    def cap(self) -> int:
        return len(self.correct)

    def signal(self, name: str) -> np.ndarray:
        return np.array([np.nan if s.get(name) is None else s.get(name) for s in self.signals])

    def safe_knob(self) -> int:
        """Smallest s such that stopping at any knob >= s answers like the cap."""
        final = self.correct[-1]
        s = self.cap
        while s > 1 and self.correct[s - 2] == final:
            s -= 1
        return s


def profile_program(spec: SyntheticProgramSpec, cap: int, **kwargs) -> ProfileRun:
    program = make_program(spec, cap, **kwargs)
    for req in expand(program, cap):
        complete(program, req)
    truth = program.correct_answer
    signals, correct, tokens = [], [], []
    cum = np.cumsum(program.state.unit_tokens)
    for j in range(1, cap + 1):
        signals.append(signals_at(program, j))
        correct.append(truth is not None and aggregate_prefix(program, j) == truth)
        tokens.append(int(cum[j - 1]))
    return ProfileRun(signals, correct, tokens, spec.solvable)


def profile_workload(specs: Sequence[SyntheticProgramSpec], cap: int, **kwargs) -> list[ProfileRun]:
    return [profile_program(s, cap, **kwargs) for s in specs]


def calibration_runs(profiles: Sequence[ProfileRun], detect: int, signal: str = "certaindex_entropy") -> list[CalibrationRun]:
    """Rows for :func:`calibrate_threshold` from stopping each profile at ``detect``."""
    rows = []
    for p in profiles:
        v = p.signals[detect - 1].get(signal)
        if v is None:
            continue
        rows.append(CalibrationRun(v, p.correct[detect - 1], p.correct[-1], p.tokens[-1] - p.tokens[detect - 1]))
    return rows


def stop_knobs(
    values: np.ndarray,
    checkpoints: Sequence[int],
    cutoffs: Sequence[float],
    cap: int,
    direction: str = "ge",
) -> np.ndarray:
    """Knob at which each run stops under per-checkpoint cutoffs.

    ``values`` is (runs, checkpoints); NaN never passes. Runs that pass no
    checkpoint stop at ``cap``.
    """
    values = np.asarray(values, dtype=float)
    cut = np.asarray(cutoffs, dtype=float)[None, :]
    with np.errstate(invalid="ignore"):
        hit = values >= cut if direction == "ge" else values <= cut
    hit &= ~np.isnan(values)
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
    ks = np.asarray(checkpoints)
    return np.where(first >= 0, ks[np.maximum(first, 0)], cap)


def calibrate_recheck_threshold(
    profiles: Sequence[ProfileRun],
    detect: int,
    detect_threshold: float,
    recheck_every: int = 1,
    signal: str = "certaindex_entropy",
    accuracy_tolerance: float = 0.0,
    direction: str = "ge",
) -> float:
    """Most aggressive recheck cutoff given a fixed cutoff at the detect knob.

    Same feasibility rule as :func:`calibrate_threshold`, evaluated on the
    whole stop-at-first-pass policy rather than a single checkpoint.
    """
    if not profiles:
        raise ValueError("calibration set is empty")
    cap = profiles[0].cap
    if any(p.cap != cap for p in profiles):
        raise ValueError("profiles must share one cap")
    checkpoints = list(range(detect, cap, recheck_every))
    if len(checkpoints) < 2:
        return detect_threshold
    values = np.array([[p.signals[k - 1].get(signal) if p.signals[k - 1].get(signal) is not None else np.nan for k in checkpoints] for p in profiles])
    correct = np.array([p.correct for p in profiles], dtype=bool)
    full = correct[:, -1]
    budget = accuracy_tolerance * len(profiles) + 1e-9
    candidates = np.unique(values[:, 1:][~np.isnan(values[:, 1:])])
    if direction == "le":
        candidates = candidates[::-1]
    rows = np.arange(len(profiles))
    for t in candidates:
        cutoffs = [detect_threshold] + [t] * (len(checkpoints) - 1)
        ks = stop_knobs(values, checkpoints, cutoffs, cap, direction)
        got = correct[rows, ks - 1]
        lost = int((full & ~got).sum())
        net = int((got & ~full).sum()) - lost
        if lost <= budget and abs(net) <= budget:
            return float(t)
    return _disabled(direction)


def fit_budget_curve(
    profiles: Sequence[ProfileRun],
    checkpoints: Sequence[int],
    signal: str = "certaindex_entropy",
    n_buckets: int = 10,
    quantile: float = 1.0,
    lo: float = 0.0,
    hi: float = 1.0,
) -> BudgetCurve:
    """Remaining-knob budget per certaindex bucket, learned from profiles.

    At each checkpoint j a run needs ``max(0, safe_knob - j)`` more units to
    be guaranteed its full-cap answer. A bucket's budget is the ``quantile``
    of those needs; a suffix max from the confident end makes the curve
    non-increasing. Buckets with no data above them inherit the nearest
    populated bucket below; with no data at all every bucket gets the cap.
    """
    if not profiles:
        raise ValueError("no profiles")
    cap = profiles[0].cap
    edges = np.linspace(lo, hi, n_buckets + 1)
    needs: dict[int, list[int]] = defaultdict(list)
    probe = BudgetCurve(tuple(edges), tuple([0] * n_buckets))
    for p in profiles:
        safe = p.safe_knob()
        for j in checkpoints:
            v = p.signals[j - 1].get(signal)
            if v is None:
                continue
            needs[probe.bucket(v)].append(max(0, safe - j))
    if not needs:
        return BudgetCurve(tuple(edges), tuple([cap] * n_buckets))
    raw = [
        int(np.quantile(needs[b], quantile, method="higher")) if b in needs else -1
        for b in range(n_buckets)
    ]
    budgets = [0] * n_buckets
    running = -1
    for b in reversed(range(n_buckets)):
        running = max(running, raw[b])
        budgets[b] = running
    top = max(b for b in needs)
    for b in range(top + 1, n_buckets):
        budgets[b] = budgets[top]
    return BudgetCurve(tuple(edges), tuple(budgets))


# -- inter-program scheduling ----------------------------------------------------


@dataclass(frozen=True)
class InterSchedPolicy:
    gang: bool = True
    order: str = "fifo"
    starvation_limit: float = math.inf
    batch_capacity: int = 1
    prior_tokens: float = 128.0
    exact_estimates: bool = False

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"order: unknown order {self.order!r} (expected one of {', '.join(ORDERS)})")
        if not self.starvation_limit > 0:
            raise ValueError("starvation_limit: must be > 0")
        if self.batch_capacity < 1:
            raise ValueError("batch_capacity: must be >= 1")
        if self.prior_tokens <= 0:
            raise ValueError("prior_tokens: must be > 0")


def estimate_iteration_tokens(history: Sequence[int], prior: float = 128.0) -> float:
    if not history:
        return float(prior)
    return float(sum(history)) / len(history)


def escalate(waiting: Iterable[tuple[str, float]], limit: float) -> set[str]:
    """Ids of programs whose wait since last service reached ``limit``."""
    if not limit > 0:
        raise ValueError("limit must be > 0")
    return {pid for pid, wait in waiting if wait >= limit}


def _per_request_estimate(program: ReasoningProgram, policy: InterSchedPolicy) -> float:
    if policy.exact_estimates and program.spec is not None:
        return float(program.spec.tokens_mean)
    return estimate_iteration_tokens(program.completed_tokens, policy.prior_tokens)


def remaining_work(program: ReasoningProgram, policy: InterSchedPolicy) -> float:
    """Estimated tokens still to generate: per-request estimate x requests left."""
    knob_left = max(0, (program.budget_cap or program.resource_cap) - program.knob)
    return _per_request_estimate(program, policy) * (program.outstanding + knob_left * program.depth)


def next_batch(
    ready: Sequence[Request],
    programs: Mapping[str, ReasoningProgram],
    policy: InterSchedPolicy,
    now: float = 0.0,
    slots: int | None = None,
) -> list[Request]:
    """Order ready requests and return the first ``slots`` of them.

    ``slots`` defaults to ``policy.batch_capacity``. Ties always fall back to
    (program arrival, program id).
    """
    n = policy.batch_capacity if slots is None else slots
    if n < 1 or not ready:
        return []
    pids = {r.program_id for r in ready}
    escalated: set[str] = set()
    if math.isfinite(policy.starvation_limit):
        waits = []
        for pid in pids:
            p = programs[pid]
            last = p.arrival if p.last_service is None else p.last_service
            waits.append((pid, now - last))
        escalated = escalate(waits, policy.starvation_limit)

    def base(pid: str) -> tuple:
        p = programs[pid]
        return (p.arrival, pid)

    def order_key(pid: str, req: Request | None = None) -> float:
        p = programs[pid]
        if policy.order == "sjf_estimated":
            if req is not None and not policy.gang:
                return _per_request_estimate(p, policy)
            return remaining_work(p, policy)
        if policy.order == "lpm_like_baseline":
            # prefer programs with work in flight: their prefixes are warm
            return 0.0 if p.in_flight > 0 else 1.0
        return 0.0

    if policy.gang:
        def prog_key(pid: str) -> tuple:
            if pid in escalated:
                return (0, 0.0) + base(pid)
            return (1, order_key(pid)) + base(pid)

        by_prog: dict[str, list[Request]] = defaultdict(list)
        for r in ready:
            by_prog[r.program_id].append(r)
        out: list[Request] = []
        for pid in sorted(by_prog, key=prog_key):
            out.extend(sorted(by_prog[pid], key=lambda r: (r.stage, r.branch_id, r.sub)))
            if len(out) >= n:
                break
        return out[:n]

    keys = {pid: order_key(pid, ready[0]) for pid in pids}

    def req_key(r: Request) -> tuple:
        pid = r.program_id
        if pid in escalated:
            return (0,) + base(pid) + (r.issued_at, r.branch_id, r.sub)
        return (1, keys[pid], r.issued_at, r.branch_id, r.sub) + base(pid)

    return sorted(ready, key=req_key)[:n]


# -- fairness ------------------------------------------------------------------


@dataclass(frozen=True)
class FairnessRecord:
    program_id: str
    finish_time_shared: float
    output_tokens: int

    def __post_init__(self):
        if self.output_tokens < 1:
            raise ValueError("output_tokens must be >= 1")
        if self.finish_time_shared < 0:
            raise ValueError("finish_time_shared must be >= 0")

    @property
    def phi(self) -> float:
        return self.finish_time_shared / self.output_tokens


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    if not sorted_values:
        raise ValueError("no values")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values) - 1e-12))
    return float(sorted_values[min(rank, len(sorted_values)) - 1])


def fairness_report(records: Sequence[FairnessRecord]) -> dict:
    if not records:
        raise ValueError("no fairness records")
    phis = sorted(r.phi for r in records)
    return {
        "phi": phis,
        "p50": nearest_rank(phis, 50),
        "p90": nearest_rank(phis, 90),
        "p99": nearest_rank(phis, 99),
        "mean": math.fsum(phis) / len(phis),
    }
