from __future__ import annotations

import math
from decimal import Decimal, localcontext

import pytest
from hypothesis import given, strategies as st

from certaindex import metrics as m


def partitions(n, largest=None):
    """All integer partitions of n (non-increasing parts)."""
    largest = n if largest is None else largest
    if n == 0:
        yield ()
        return
    for first in range(min(n, largest), 0, -1):
        for rest in partitions(n - first, first):
            yield (first,) + rest


def oracle_entropy(sizes):
    # independent evaluator in 50-digit decimal arithmetic
    with localcontext() as ctx:
        ctx.prec = 50
        n = Decimal(sum(sizes))
        total = Decimal(0)
        for s in sizes:
            p = Decimal(s) / n
            total -= p * p.ln()
        return float(total)


def test_entropy_matches_oracle_for_all_small_clusterings():
    count = 0
    for n in range(1, 6):
        for sizes in partitions(n):
            c = m.Clustering.from_sizes(sizes)
            h = oracle_entropy(sizes)
            assert m.semantic_entropy(c) == pytest.approx(h, abs=1e-12)
            expected = 1.0 if n == 1 else (math.log(n) - h) / math.log(n)
            assert m.certaindex_entropy(c) == pytest.approx(expected, abs=1e-12)
            count += 1
    assert count == 1 + 2 + 3 + 5 + 7


@pytest.mark.parametrize(
    "sizes, h_tilde",
    [
        ((5,), 1.0),
        ((1, 1, 1, 1, 1), 0.0),
        ((4, 1), (math.log(5) - (-(0.8 * math.log(0.8)) - 0.2 * math.log(0.2))) / math.log(5)),
        ((1,), 1.0),
        ((2, 2), 0.5),
    ],
)
def test_known_values(sizes, h_tilde):
    assert m.certaindex_entropy(m.Clustering.from_sizes(sizes)) == pytest.approx(h_tilde, abs=1e-12)


def test_entropy_is_base_invariant_once_normalized():
    sizes = (3, 1, 1)
    n = sum(sizes)
    h2 = -sum((s / n) * math.log2(s / n) for s in sizes)
    assert m.certaindex_entropy(m.Clustering.from_sizes(sizes)) == pytest.approx((math.log2(n) - h2) / math.log2(n), abs=1e-12)


@given(st.lists(st.integers(1, 20), min_size=1, max_size=12))
def test_certaindex_in_unit_interval(sizes):
    v = m.certaindex_entropy(m.Clustering.from_sizes(sizes))
    assert 0.0 <= v <= 1.0


@given(st.lists(st.integers(1, 20), min_size=1, max_size=12), st.randoms())
def test_certaindex_permutation_invariant(sizes, rnd):
    shuffled = list(sizes)
    rnd.shuffle(shuffled)
    a = m.certaindex_entropy(m.Clustering.from_sizes(sizes))
    b = m.certaindex_entropy(m.Clustering.from_sizes(shuffled))
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(2, 40))
def test_merging_two_clusters_never_lowers_certaindex(n):
    # splitting a singleton pair off the consensus raises entropy
    whole = m.certaindex_entropy(m.Clustering.from_sizes([n]))
    split = m.certaindex_entropy(m.Clustering.from_sizes([n - 1, 1]))
    assert whole >= split


def test_clustering_validation():
    with pytest.raises(ValueError):
        m.Clustering((m.AnswerCluster("a", 2),), 3)
    with pytest.raises(ValueError):
        m.AnswerCluster("a", 0)
    with pytest.raises(ValueError):
        m.Clustering((m.AnswerCluster("a", 1), m.AnswerCluster("a", 1)), 2)


def test_cluster_exact_trims_and_keeps_case():
    c = m.cluster_exact([" 42", "42 ", "x", "X"])
    assert c.sizes == [2, 1, 1]
    assert [cl.label for cl in c.clusters] == ["42", "x", "X"]
    with pytest.raises(ValueError, match="empty answer set"):
        m.cluster_exact([])


def test_cluster_similarity_links_chains():
    c = m.cluster_similarity(["x = 12", "x=12", "answer 7"], similarity=m.char_jaccard, cutoff=0.6)
    assert c.n == 3
    assert sorted(c.sizes) == [1, 2]
    assert m.cluster_similarity(["a", "b"], cutoff=0.0).sizes == [2]
    assert m.cluster_similarity(["ab", "ab", "cd"]).sizes == [2, 1]
    # single linkage: a~b and b~c join a and c even though a !~ c
    chain = m.cluster_similarity(["ab", "bc", "cd", "xy"], similarity=m.char_jaccard, cutoff=0.3)
    assert m.char_jaccard("ab", "cd") == 0.0
    assert chain.sizes == [3, 1]
    with pytest.raises(ValueError):
        m.cluster_similarity([])


def test_similarity_functions():
    assert m.char_jaccard("abc", "abc") == 1.0
    assert m.char_jaccard("ab", "cd") == 0.0
    assert m.trigram_jaccard("abcd", "abcd") == 1.0
    assert m.trigram_jaccard("ab", "ab") == 1.0
    assert 0.0 < m.trigram_jaccard("abcde", "abcdf") < 1.0


def test_reward_certaindex():
    assert m.certaindex_reward(m.RewardSet((0.2, 0.4, 0.9))) == pytest.approx(0.5)
    assert m.certaindex_reward(m.RewardSet((0.2, 0.4, 0.9), "max")) == 0.9
    with pytest.raises(ValueError):
        m.RewardSet(())
    with pytest.raises(ValueError):
        m.RewardSet((1.2,))
    with pytest.raises(ValueError):
        m.RewardSet((0.5,), "median")


def test_combined_thresholds_inclusive_and_conjunctive():
    s = m.SignalVector(certaindex_entropy=0.7, certaindex_reward=0.5, mean_output_length=300.0)
    assert m.combined_meets_thresholds(s, {"certaindex_entropy": 0.7})
    assert not m.combined_meets_thresholds(s, {"certaindex_entropy": 0.7, "certaindex_reward": 0.6})
    assert m.combined_meets_thresholds(s, {"mean_output_length": 300.0})
    assert not m.combined_meets_thresholds(s, {"mean_output_length": 299.0})
    assert m.combined_meets_thresholds(s, {"mean_output_length": 299.0}, {"mean_output_length": "ge"})
    assert m.combined_meets_thresholds(s, {})
    with pytest.raises(ValueError, match="absent signal"):
        m.combined_meets_thresholds(s, {"mean_norm_logprob": -1.0})


def test_signal_vector_validation():
    with pytest.raises(ValueError):
        m.SignalVector()
    with pytest.raises(ValueError):
        m.SignalVector(certaindex_entropy=1.5)
    with pytest.raises(ValueError):
        m.SignalVector(mean_norm_logprob=0.1)
    with pytest.raises(KeyError):
        m.SignalVector(consistency=1.0).get("nope")
    assert m.SignalVector(consistency=1.0).as_dict() == {"consistency": 1.0}


def test_length_and_logprob_signals():
    assert m.mean_output_length([100, 200]) == 150
    assert m.mean_norm_logprob([(-10.0, 10), (-30.0, 10)]) == pytest.approx(-2.0)
    with pytest.raises(ValueError):
        m.mean_norm_logprob([(-1.0, 0)])
    with pytest.raises(ValueError):
        m.mean_output_length([])
