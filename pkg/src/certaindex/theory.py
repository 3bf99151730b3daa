"""Distribution-level stopping theory for probed reasoning chains.

Mixture distributions over windows of reasoning steps, total variation,
the empirical epsilon-accuracy stopping test, the sample size that makes
empirical mixtures epsilon/3-close to the true ones, and a direct check of
the window-agreement implication used as a property-test oracle.

Indexing follows the math: ``seq[0]`` is P_1, and the window (i, k) covers
steps i+1 .. i+k, i.e. ``seq[i:i+k]``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "CategoricalDistribution",
    "DistributionSequence",
    "EmpiricalMixture",
    "NotEnoughProbes",
    "tv_distance",
    "mixture",
    "empirical_mixture",
    "required_probes",
    "tail_bound",
    "epsilon_stop_test",
    "lemma2_bruteforce_check",
    "simplex_grid",
    "lemma2_sweep",
    "concentration_coverage",
]

_SUM_TOL = 1e-9


class NotEnoughProbes(ValueError):
    """Raised when a test needs more probed samples than are available."""


class CategoricalDistribution:
    """Probability mass over M answer groups (read-only numpy vector)."""

    __slots__ = ("mass",)

    def __init__(self, mass):
        arr = np.array(mass, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("mass must be a non-empty vector")
        if np.any(arr < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(arr.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"probabilities sum to {arr.sum()}, not 1")
        arr.flags.writeable = False
        self.mass = arr

    @property
    def M(self) -> int:
        return self.mass.size

    def __eq__(self, other):
        if not isinstance(other, CategoricalDistribution):
            return NotImplemented
        return self.M == other.M and bool(np.array_equal(self.mass, other.mass))

    def __hash__(self):
        return hash(self.mass.tobytes())

    def __repr__(self):
        return f"CategoricalDistribution({self.mass.tolist()})"


@dataclass(frozen=True)
class DistributionSequence:
    dists: tuple[CategoricalDistribution, ...]

    def __post_init__(self):
        object.__setattr__(self, "dists", tuple(self.dists))
        if self.dists and len({d.M for d in self.dists}) != 1:
            raise ValueError("all distributions in a sequence must share M")

    def __len__(self):
        return len(self.dists)

    def __getitem__(self, idx):
        return self.dists[idx]

    @property
    def M(self) -> int:
        return self.dists[0].M

    def as_array(self) -> np.ndarray:
        return np.stack([d.mass for d in self.dists])


@dataclass(frozen=True)
class EmpiricalMixture:
    counts: tuple[int, ...]
    total: int

    def __post_init__(self):
        if sum(self.counts) != self.total:
            raise ValueError("counts must sum to total")
        if self.total < 1:
            raise ValueError("empirical mixture needs at least one sample")

    def distribution(self) -> CategoricalDistribution:
        return CategoricalDistribution([c / self.total for c in self.counts])


def _mass(p) -> np.ndarray:
    return p.mass if isinstance(p, CategoricalDistribution) else np.asarray(p, dtype=float)


def tv_distance(p, q) -> float:
    """Total variation distance, computed as half the L1 distance."""
    a, b = _mass(p), _mass(q)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(min(1.0, 0.5 * np.abs(a - b).sum()))


def mixture(seq: DistributionSequence | Sequence[CategoricalDistribution], i: int, k: int) -> CategoricalDistribution:
    """Uniform mixture of P_{i+1} .. P_{i+k}."""
    dists = seq.dists if isinstance(seq, DistributionSequence) else tuple(seq)
    if k < 1 or i < 0 or i + k > len(dists):
        raise IndexError(f"window ({i}, {k}) outside a sequence of length {len(dists)}")
    avg = np.mean([d.mass for d in dists[i:i + k]], axis=0)
    return CategoricalDistribution(avg / avg.sum())


def empirical_mixture(samples: Sequence[int], l: int, t: int, n_groups: int) -> EmpiricalMixture:
    """Counts of group indices among samples l+1 .. l+t."""
    if t < 1 or l < 0 or l + t > len(samples):
        raise IndexError(f"window ({l}, {t}) outside {len(samples)} samples")
    counts = np.bincount(np.asarray(samples[l:l + t], dtype=int), minlength=n_groups)
    return EmpiricalMixture(tuple(int(c) for c in counts), t)


def tail_bound(M: int, epsilon: float, k: int) -> float:
    """Union-bound failure probability 2^(M+2) k exp(-(k-1) eps^2 / 2)."""
    log_val = (M + 2) * math.log(2.0) + math.log(k) - (k - 1) * epsilon ** 2 / 2.0
    return math.exp(log_val) if log_val < 700 else math.inf


def required_probes(M: int, epsilon: float, delta: float) -> int:
    """Smallest k >= 2 with 2^(M+2) k exp(-(k-1) eps^2 / 2) <= delta.

    For k >= 2 the bound is eventually decreasing and the feasible set is
    upward-closed, so a doubling search followed by bisection finds the edge.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")

    def ok(k: int) -> bool:
        log_val = (M + 2) * math.log(2.0) + math.log(k) - (k - 1) * epsilon ** 2 / 2.0
        return log_val <= math.log(delta)

    if ok(2):
        return 2
    lo, hi = 2, 4
    while not ok(hi):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _tv_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(a - b).sum(axis=-1)


def epsilon_stop_test(
    samples: Sequence[int],
    k: int,
    epsilon: float,
    n_groups: int | None = None,
    anchor: int | None = None,
) -> bool:
    """Empirical epsilon-accuracy stopping test on observed group indices.

    With anchor i (default: the most recent feasible one, len - 2k) checks
    TV(P^_i^{i+k}, P^_{i+j}^{i+j+k}) <= eps/3 for 1 <= j <= k and the same for
    windows of length k-1 with 1 <= j <= k-1.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    x = np.asarray(samples, dtype=int)
    if x.size and x.min() < 0:
        raise ValueError("group indices must be non-negative")
    M = n_groups if n_groups is not None else (int(x.max()) + 1 if x.size else 1)
    i = len(x) - 2 * k if anchor is None else anchor
    if i < 0 or i + 2 * k > len(x):
        raise NotEnoughProbes(f"need {2 * k} samples from anchor {max(i, 0)}, have {len(x)}")
    onehot = np.zeros((len(x) + 1, M))
    onehot[np.arange(1, len(x) + 1), x] = 1.0
    cum = onehot.cumsum(axis=0)  # cum[s] = counts over samples 1..s
    limit = epsilon / 3.0

    def window(l: int, t: int) -> np.ndarray:
        return (cum[l + t] - cum[l]) / t

    for t, jmax in ((k, k), (k - 1, k - 1)):
        if t < 1:
            continue
        base = window(i, t)
        for j in range(1, jmax + 1):
            if tv_distance(base, window(i + j, t)) > limit:
                return False
    return True


def lemma2_bruteforce_check(seq, i: int, k: int, atol: float = 1e-12):
    """Check the mixture-equivalence implication directly.

    Premise: TV(Pbar_i^{i+k}, Pbar_{i+j}^{i+j+k}) = 0 for 1 <= j <= k and
    TV(Pbar_i^{i+k-1}, Pbar_{i+j}^{i+j+k-1}) = 0 for 1 <= j <= k-1.
    Conclusion: P_{i+1} = ... = P_{i+2k-1}. Returns ``not premise or conclusion``.

    ``seq`` may be a DistributionSequence or an array of shape (..., L, M);
    batched input returns a boolean array over the leading axes.
    """
    if isinstance(seq, DistributionSequence):
        arr = seq.as_array()
    elif isinstance(seq, (list, tuple)) and seq and isinstance(seq[0], CategoricalDistribution):
        arr = np.stack([d.mass for d in seq])
    else:
        arr = np.asarray(seq, dtype=float)
    if k < 1 or i < 0:
        raise IndexError("need k >= 1 and i >= 0")
    if arr.shape[-2] < i + 2 * k:
        raise IndexError(f"sequence of length {arr.shape[-2]} does not cover steps {i + 1}..{i + 2 * k}")
    zeros = np.zeros(arr.shape[:-2] + (1, arr.shape[-1]))
    cum = np.concatenate([zeros, np.cumsum(arr, axis=-2)], axis=-2)

    def pbar(start: int, length: int) -> np.ndarray:
        return (cum[..., start + length, :] - cum[..., start, :]) / length

    premise = np.ones(arr.shape[:-2], dtype=bool)
    for t, jmax in ((k, k), (k - 1, k - 1)):
        if t < 1:
            continue
        base = pbar(i, t)
        for j in range(1, jmax + 1):
            premise &= _tv_rows(base, pbar(i + j, t)) <= atol
    block = arr[..., i:i + 2 * k - 1, :]
    conclusion = np.all(np.abs(block - block[..., :1, :]).max(axis=-1) <= atol, axis=-1)
    result = ~premise | conclusion
    return bool(result) if result.ndim == 0 else result


def simplex_grid(M: int, steps: int = 4) -> np.ndarray:
    """All distributions over M groups whose entries are multiples of 1/steps."""
    rows = [c for c in itertools.product(range(steps + 1), repeat=M) if sum(c) == steps]
    return np.array(rows, dtype=float) / steps


def _grid_sequences(grid: np.ndarray, length: int, chunk_prefix: int) -> Iterator[np.ndarray]:
    g = len(grid)
    prefix = min(chunk_prefix, length)
    rest = length - prefix
    tail_idx = np.array(list(itertools.product(range(g), repeat=rest)), dtype=int).reshape(-1, rest)
    for head in itertools.product(range(g), repeat=prefix):
        head_idx = np.broadcast_to(np.array(head, dtype=int), (len(tail_idx), prefix))
        idx = np.concatenate([head_idx, tail_idx], axis=1)
        yield grid[idx]


def lemma2_sweep(max_M: int = 3, max_k: int = 3, steps: int = 4) -> dict:
    """Exhaustive sweep of lemma2_bruteforce_check over grid-valued sequences.

    Every sequence of length 2k drawn from the simplex grid with entries in
    multiples of 1/steps, for 1 <= M <= max_M (M >= 2 is where anything can
    differ) and 1 <= k <= max_k, anchor i = 0.
    """
    checked = 0
    premise_hits = 0
    failures = 0
    for M in range(1, max_M + 1):
        grid = simplex_grid(M, steps)
        for k in range(1, max_k + 1):
            length = 2 * k
            for batch in _grid_sequences(grid, length, chunk_prefix=max(0, length - 4)):
                ok = lemma2_bruteforce_check(batch, 0, k)
                checked += batch.shape[0]
                failures += int((~ok).sum())
                premise_hits += int(np.all(batch == batch[:, :1, :], axis=(1, 2)).sum())
    return {"checked": checked, "failures": failures, "constant_sequences": premise_hits}


def concentration_coverage(
    M: int,
    epsilon: float,
    delta: float,
    replications: int = 1000,
    seed: int = 0,
    p_star=None,
) -> dict:
    """Monte-Carlo frequency of the all-windows event TV(Pbar, P^) <= eps/3.

    A stationary chain (every P_t = P_*) is sampled 2k times per replication
    with k = required_probes(M, eps, delta); the event covers windows
    l = 1..k and lengths t in {k-1, k}. Replications use independent streams
    spawned from ``seed``.
    """
    k = required_probes(M, epsilon, delta)
    p = np.full(M, 1.0 / M) if p_star is None else _mass(p_star)
    if p.size != M:
        raise ValueError("p_star must have M entries")
    limit = epsilon / 3.0
    streams = np.random.SeedSequence(seed).spawn(replications)
    hits = 0
    for ss in streams:
        rng = np.random.default_rng(ss)
        x = rng.choice(M, size=2 * k, p=p)
        onehot = np.zeros((2 * k + 1, M))
        onehot[np.arange(1, 2 * k + 1), x] = 1.0
        cum = onehot.cumsum(axis=0)
        ok = True
        ls = np.arange(1, k + 1)
        for t in (k - 1, k):
            if t < 1:
                continue
            emp = (cum[ls + t] - cum[ls]) / t
            if np.any(_tv_rows(emp, p[None, :]) > limit):
                ok = False
                break
        hits += ok
    return {"k": k, "replications": replications, "coverage": hits / replications, "target": 1.0 - delta}
