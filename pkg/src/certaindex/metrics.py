"""Certaindex metrics and alternative progress signals.

All functions here are pure. Entropies use the natural logarithm; the
normalized certaindex is base-invariant so the choice never leaks out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

__all__ = [
    "AnswerCluster",
    "Clustering",
    "RewardSet",
    "SignalVector",
    "SIGNAL_NAMES",
    "DEFAULT_DIRECTIONS",
    "normalize_answer",
    "cluster_exact",
    "cluster_similarity",
    "char_jaccard",
    "trigram_jaccard",
    "semantic_entropy",
    "certaindex_entropy",
    "certaindex_reward",
    "combined_meets_thresholds",
    "mean_norm_logprob",
    "mean_output_length",
]


@dataclass(frozen=True)
class AnswerCluster:
    label: str
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"cluster size must be >= 1, got {self.size}")


@dataclass(frozen=True)
class Clustering:
    clusters: tuple[AnswerCluster, ...]
    n: int

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if self.n < 1:
            raise ValueError("clustering must cover at least one path")
        if sum(c.size for c in self.clusters) != self.n:
            raise ValueError("cluster sizes must sum to n")
        labels = [c.label for c in self.clusters]
        if len(set(labels)) != len(labels):
            raise ValueError("cluster labels must be distinct")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "Clustering":
        clusters = tuple(AnswerCluster(str(i), s) for i, s in enumerate(sizes))
        return cls(clusters, sum(sizes))

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> list[int]:
        return [c.size for c in self.clusters]


@dataclass(frozen=True)
class RewardSet:
    rewards: tuple[float, ...]
    aggregation: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if not self.rewards:
            raise ValueError("reward set must be non-empty")
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        for r in self.rewards:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"reward {r} outside [0, 1]")


SIGNAL_NAMES = (
    "certaindex_entropy",
    "certaindex_reward",
    "mean_output_length",
    "mean_norm_logprob",
    "consistency",
)

# Higher log-probability means more confident; a longer mean output means a
# harder query, so the length signal passes when it is at or below its cutoff.
DEFAULT_DIRECTIONS = {
    "certaindex_entropy": "ge",
    "certaindex_reward": "ge",
    "consistency": "ge",
    "mean_norm_logprob": "ge",
    "mean_output_length": "le",
}


@dataclass(frozen=True)
class SignalVector:
    certaindex_entropy: float | None = None
    certaindex_reward: float | None = None
    mean_output_length: float | None = None
    mean_norm_logprob: float | None = None
    consistency: float | None = None

    def __post_init__(self):
        if all(getattr(self, name) is None for name in SIGNAL_NAMES):
            raise ValueError("SignalVector needs at least one signal")
        for name in ("certaindex_entropy", "certaindex_reward", "consistency"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.mean_output_length is not None and self.mean_output_length < 0:
            raise ValueError("mean_output_length must be >= 0")
        if self.mean_norm_logprob is not None and self.mean_norm_logprob > 0:
            raise ValueError("mean_norm_logprob must be <= 0")

    def get(self, name: str) -> float | None:
        if name not in SIGNAL_NAMES:
            raise KeyError(f"unknown signal {name!r}")
        return getattr(self, name)

    def as_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in SIGNAL_NAMES if getattr(self, n) is not None}


def normalize_answer(answer: str) -> str:
    """Trim surrounding whitespace. No case folding: math answers are case-sensitive."""
    return answer.strip()


def cluster_exact(answers: Sequence[str]) -> Clustering:
    """Group answers by exact match after trimming; clusters keep first-seen order."""
    if not answers:
        raise ValueError("empty answer set")
    counts: dict[str, int] = {}
    for a in answers:
        key = normalize_answer(a)
        counts[key] = counts.get(key, 0) + 1
    return Clustering(tuple(AnswerCluster(k, v) for k, v in counts.items()), len(answers))


def char_jaccard(a: str, b: str) -> float:
    """Jaccard similarity of the character sets of two strings."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def _trigrams(s: str) -> set[str]:
    if len(s) < 3:
        return {s}
    return {s[i:i + 3] for i in range(len(s) - 2)}


def trigram_jaccard(a: str, b: str) -> float:
    """Jaccard similarity over character trigrams (strings under 3 chars are one gram)."""
    ga, gb = _trigrams(a), _trigrams(b)
    return len(ga & gb) / len(ga | gb)


def cluster_similarity(
    answers: Sequence[str],
    similarity: Callable[[str, str], float] = trigram_jaccard,
    cutoff: float = 0.5,
) -> Clustering:
    """Single-linkage clustering: answers joined by any chain of pairs with similarity >= cutoff.

    Stands in for embedding-model clustering of free-form answers. Each
    cluster is labelled by its first-seen member.
    """
    if not answers:
        raise ValueError("empty answer set")
    if not 0.0 <= cutoff <= 1.0:
        raise ValueError(f"cutoff must lie in [0, 1], got {cutoff}")
    norm = [normalize_answer(a) for a in answers]
    parent = list(range(len(norm)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(norm)):
        for j in range(i + 1, len(norm)):
            if find(i) != find(j) and similarity(norm[i], norm[j]) >= cutoff:
                parent[max(find(i), find(j))] = min(find(i), find(j))

    sizes: dict[int, int] = {}
    for i in range(len(norm)):
        r = find(i)
        sizes[r] = sizes.get(r, 0) + 1
    # the root is always the smallest index in its component, i.e. first seen
    clusters = []
    used: set[str] = set()
    for root in sorted(sizes):
        label = norm[root]
        # distinct answers can share a label only if they normalize equal, which
        # would have linked them already; guard anyway for exotic similarity fns
        while label in used:
            label += "'"
        used.add(label)
        clusters.append(AnswerCluster(label, sizes[root]))
    return Clustering(tuple(clusters), len(norm))


def semantic_entropy(c: Clustering) -> float:
    """H = -sum |C_i|/n log(|C_i|/n)."""
    n = c.n
    h = -math.fsum((s / n) * math.log(s / n) for s in c.sizes)
    return max(0.0, h)


def certaindex_entropy(c: Clustering) -> float:
    """Normalized certaindex (log n - H) / log n in [0, 1]; a single path scores 1."""
    if c.n == 1:
        return 1.0
    log_n = math.log(c.n)
    value = (log_n - semantic_entropy(c)) / log_n
    return min(1.0, max(0.0, value))


def certaindex_reward(r: RewardSet) -> float:
    if r.aggregation == "max":
        return max(r.rewards)
    return math.fsum(r.rewards) / len(r.rewards)


def combined_meets_thresholds(
    s: SignalVector,
    thresholds: Mapping[str, float],
    directions: Mapping[str, str] | None = None,
) -> bool:
    """True iff every thresholded signal passes its cutoff (inclusive comparison).

    Direction "ge" passes when value >= cutoff, "le" when value <= cutoff.
    """
    dirs = dict(DEFAULT_DIRECTIONS)
    if directions:
        dirs.update(directions)
    ok = True
    for name, cutoff in thresholds.items():
        value = s.get(name)
        if value is None:
            raise ValueError(f"threshold configured for absent signal {name!r}")
        direction = dirs.get(name, "ge")
        if direction == "ge":
            ok = ok and value >= cutoff
        elif direction == "le":
            ok = ok and value <= cutoff
        else:
            raise ValueError(f"unknown threshold direction {direction!r}")
    return ok


def mean_norm_logprob(paths: Sequence[tuple[float, int]]) -> float:
    """Mean over paths of sum_logprob / token_count."""
    if not paths:
        raise ValueError("no paths")
    per_path = []
    for total, count in paths:
        if count < 1:
            raise ValueError("token count must be >= 1")
        per_path.append(total / count)
    return math.fsum(per_path) / len(per_path)


def mean_output_length(lengths: Sequence[int]) -> float:
    if not lengths:
        raise ValueError("no paths")
    return sum(lengths) / len(lengths)
