from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given, strategies as st

from certaindex.probe import (
    AnswerRecord,
    Decision,
    ProbeConfig,
    ProbeTrace,
    TraceFormatError,
    consistency,
    evaluate_trace,
    final_answer,
    flag_hesitation,
    is_low_confidence,
    read_traces,
    should_exit,
    tv_stop,
    write_traces,
)
from certaindex.theory import NotEnoughProbes


def recs(answers, hesitant=(), interval=64):
    return [AnswerRecord(i + 1, (i + 1) * interval, a, i in hesitant) for i, a in enumerate(answers)]


def test_flag_hesitation():
    assert not flag_hesitation("42", ["wait", "hmm"])
    assert flag_hesitation("wait, let me check", ["wait", "hmm"])
    assert flag_hesitation("Hmm 42", ["wait", "hmm"])
    assert not flag_hesitation("anything", [])


@pytest.mark.parametrize(
    "answers, hesitant, w, expected",
    [
        (["x", "x", "x"], (), 3, 1.0),
        (["x", "y", "x"], (), 3, 2 / 3),
        (["x", "x", "x"], (1,), 2, 1.0),
        (["a", "a", "b", "a", "a"], (), 5, 0.8),
    ],
)
def test_consistency_examples(answers, hesitant, w, expected):
    assert consistency(recs(answers, hesitant), w=w) == pytest.approx(expected)


def test_consistency_window_not_ready_is_none():
    assert consistency(recs(["x", "x"]), w=3) is None
    assert consistency(recs(["x", "x", "x"], hesitant=(0,)), w=3) is None
    assert consistency(recs(["x", "y", "y", "y"]), k=2, w=2) == 0.5


def test_should_exit_examples():
    cfg = ProbeConfig(window=2, threshold=1.0, max_tokens=10_000)
    assert should_exit(recs(["a", "b", "b"]), cfg) is Decision.EXIT_CERTAIN
    budget = ProbeConfig(window=2, threshold=1.0, max_tokens=3 * 64)
    assert should_exit(recs(["a", "a", "b"]), budget) is Decision.EXIT_BUDGET
    loose = ProbeConfig(window=5, threshold=0.6)
    assert should_exit(recs(["a", "a", "b", "a", "a"]), loose) is Decision.EXIT_CERTAIN
    assert should_exit([], cfg) is Decision.CONTINUE
    assert should_exit(recs(["a", "b"]), cfg) is Decision.CONTINUE


def test_certainty_beats_budget():
    cfg = ProbeConfig(window=2, threshold=1.0, max_tokens=128)
    assert should_exit(recs(["a", "a"]), cfg) is Decision.EXIT_CERTAIN


def test_final_answer_rules():
    t = evaluate_trace(recs(["1", "3", "7", "7", "7"]), ProbeConfig(window=3))
    assert t.termination_reason == "certain" and t.terminated_at == 5
    assert final_answer(t) == "7"
    budget = ProbeTrace(recs(["a", "b"], hesitant=(1,)), terminated_at=2, termination_reason="budget")
    assert final_answer(budget) == "a"
    single = ProbeTrace(recs(["x"]), terminated_at=1, termination_reason="budget")
    assert final_answer(single) == "x"
    all_hesitant = ProbeTrace(recs(["wait 3", "hmm 4"], hesitant=(0, 1)), 2, "budget")
    assert final_answer(all_hesitant) == "hmm 4"
    assert is_low_confidence(all_hesitant) and not is_low_confidence(budget)
    with pytest.raises(ValueError):
        final_answer(ProbeTrace())


def test_evaluate_trace_reasons():
    assert evaluate_trace(recs(["a", "b", "c"]), ProbeConfig(window=2)).termination_reason == "criteria_external"
    t = evaluate_trace(recs(["a", "b", "c", "d"]), ProbeConfig(window=2, max_tokens=128))
    assert (t.terminated_at, t.termination_reason) == (2, "budget")


def test_trace_validation():
    with pytest.raises(ValueError):
        ProbeTrace([AnswerRecord(1, 64, "a"), AnswerRecord(2, 64, "b")])
    with pytest.raises(ValueError):
        ProbeTrace(recs(["a"]), terminated_at=3)
    t = ProbeTrace(recs(["a"]))
    with pytest.raises(ValueError):
        t.append(AnswerRecord(2, 10, "b"))
    with pytest.raises(ValueError):
        ProbeConfig(threshold=0.0)


answer_lists = st.lists(st.sampled_from("abc"), min_size=1, max_size=10)


@given(answer_lists, st.integers(1, 4))
def test_identical_window_always_exits(answers, w):
    rs = recs(answers + ["z"] * w)
    for tau in (0.1, 0.5, 1.0):
        assert should_exit(rs, ProbeConfig(window=w, threshold=tau)) is Decision.EXIT_CERTAIN


@given(answer_lists, answer_lists, st.integers(1, 4))
def test_exit_decisions_are_prefix_deterministic(a, b, w):
    cfg = ProbeConfig(window=w, threshold=0.6)
    prefix = recs(a)
    before = should_exit(prefix, cfg)
    extended = recs(a + b)
    assert should_exit(extended[: len(a)], cfg) is before


def _first_exit(answers, hesitant, w, tau):
    t = evaluate_trace(recs(answers, hesitant), ProbeConfig(window=w, threshold=tau, max_tokens=10**9))
    return t.terminated_at if t.termination_reason == "certain" else None


@given(answer_lists, st.integers(1, 4), st.sampled_from([0.3, 0.5, 0.7, 1.0]), st.sampled_from([0.3, 0.5, 0.7, 1.0]))
def test_lowering_tau_never_delays_exit(answers, w, t1, t2):
    lo, hi = sorted((t1, t2))
    e_hi = _first_exit(answers, (), w, hi)
    e_lo = _first_exit(answers, (), w, lo)
    if e_hi is not None:
        assert e_lo is not None and e_lo <= e_hi


def test_hesitant_insertions_delay_exit_by_at_most_their_count():
    # brute force over all traces of length <= 6 on a 2-letter alphabet,
    # with up to two hesitant records inserted anywhere
    for n in range(1, 7):
        for answers in itertools.product("ab", repeat=n):
            base = _first_exit(list(answers), (), 2, 1.0)
            if base is None:
                continue
            for n_ins in (1, 2):
                for positions in itertools.combinations(range(n + n_ins), n_ins):
                    merged, hes, it = [], [], iter(answers)
                    for idx in range(n + n_ins):
                        if idx in positions:
                            merged.append("wait")
                            hes.append(idx)
                        else:
                            merged.append(next(it))
                    got = _first_exit(merged, tuple(hes), 2, 1.0)
                    assert got is not None and got <= base + n_ins


def test_tv_stop_uses_confident_answers():
    assert tv_stop(recs(["a"] * 6), k=3, epsilon=0.3)
    assert not tv_stop(recs(["a", "b"] * 3), k=2, epsilon=0.1)
    with pytest.raises(NotEnoughProbes):
        tv_stop(recs(["a"] * 4, hesitant=(0,)), k=2, epsilon=0.3)


def test_jsonl_roundtrip(tmp_path):
    traces = {"p1": recs(["1", "wait 2", "2"], hesitant=(1,)), "p2": recs(["x"])}
    path = tmp_path / "t.jsonl"
    write_traces(path, traces)
    assert read_traces(path) == traces


@pytest.mark.parametrize(
    "lines, line_no, fragment",
    [
        (['{"program_id": "a"'], 1, "invalid JSON"),
        (['{"program_id": "a", "step_index": 1, "token_offset": 64, "answer": "x"}'], 1, "hesitant"),
        (
            [
                '{"program_id": "a", "step_index": 2, "token_offset": 64, "answer": "x", "hesitant": false}',
                '{"program_id": "a", "step_index": 1, "token_offset": 128, "answer": "x", "hesitant": false}',
            ],
            2,
            "step_index regression",
        ),
        (
            [
                '{"program_id": "a", "step_index": 1, "token_offset": 64, "answer": "x", "hesitant": false}',
                '{"program_id": "a", "step_index": 2, "token_offset": 64, "answer": "x", "hesitant": false}',
            ],
            2,
            "token_offset regression",
        ),
        (['{"program_id": "a", "step_index": 1, "token_offset": 64, "answer": 3, "hesitant": false}'], 1, "answer"),
        (['[1, 2]'], 1, "object"),
    ],
)
def test_jsonl_errors_carry_line_numbers(tmp_path, lines, line_no, fragment):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceFormatError) as exc:
        read_traces(path)
    assert exc.value.line_no == line_no
    assert fragment in str(exc.value)


def test_empty_trace_file_is_an_error(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_traces(path)


def test_programs_may_interleave(tmp_path):
    rows = [
        {"program_id": "a", "step_index": 1, "token_offset": 64, "answer": "1", "hesitant": False},
        {"program_id": "b", "step_index": 1, "token_offset": 64, "answer": "2", "hesitant": False},
        {"program_id": "a", "step_index": 2, "token_offset": 128, "answer": "1", "hesitant": False},
    ]
    path = tmp_path / "t.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    got = read_traces(path)
    assert [len(v) for v in got.values()] == [2, 1]
