import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxspike.eval_metrics import (
    DEL, INS, MATCH, SUB, EvalReport, align, edit_distance, score, score_corpus, tag_bias_regions,
)
import oracles

text = st.text(alphabet="ABCD", max_size=8)


def _replay(ref, hyp, ops):
    r, h = [], []
    for op in ops:
        if op.op in (MATCH, SUB, DEL):
            r.append(ref[op.ref_pos])
        if op.op in (MATCH, SUB, INS):
            h.append(hyp[op.hyp_pos])
        if op.op == MATCH:
            assert ref[op.ref_pos] == hyp[op.hyp_pos]
    return "".join(r), "".join(h)


def test_align_examples():
    assert all(op.op == MATCH for op in align("ABC", "ABC"))
    assert [op.op for op in align("AB", "A")] == [MATCH, DEL]
    assert [op.op for op in align("", "AB")] == [INS, INS]


def test_align_prefers_substitution_over_indels():
    assert [op.op for op in align("AB", "AC")] == [MATCH, SUB]


@settings(max_examples=300, deadline=None)
@given(text, text)
def test_align_is_minimal_and_replays(ref, hyp):
    ops = align(ref, hyp)
    assert edit_distance(ops) == oracles.levenshtein(ref, hyp)
    assert _replay(ref, hyp, ops) == (ref, hyp)


def test_tag_regions():
    assert tag_bias_regions("ABCD", []) == [False] * 4
    assert tag_bias_regions("ABAB", ["AB"]) == [True] * 4
    assert tag_bias_regions("ABCD", ["ABC", "BCD"]) == [True] * 4
    assert tag_bias_regions("XABY", ["AB"]) == [False, True, True, False]


def test_score_substitution_in_biased_region():
    r = score("ABCD", "ABXD", ["CD"])
    assert r.b_cer == 0.5 and r.u_cer == 0.0 and r.cer == 0.25


def test_inserted_phrase_counts_as_biased():
    r = score("ABEF", "ABCDEF", ["CD"])
    assert r.biased.ins == 2 and r.unbiased.ins == 0
    assert r.biased.n_ref == 0 and math.isinf(r.b_cer) and r.flagged
    r = score("ABEF", "ABCEF", ["CD"])
    assert r.unbiased.ins == 1 and r.biased.ins == 0


def test_perfect_hypothesis():
    r = score("ABCD", "ABCD", ["BC"])
    assert (r.cer, r.b_cer, r.u_cer) == (0.0, 0.0, 0.0) and not r.flagged


def test_report_text():
    r = score("ABCD", "ABXD", ["CD"])
    kv = dict(line.split("=") for line in r.key_values())
    assert kv["b_cer"] == "0.500000" and kv["biased.sub"] == "1" and kv["unbiased.n_ref"] == "2"
    assert "biased" in r.table() and "50.00" in r.table()


phrase_lists = st.lists(st.text(alphabet="ABCD", min_size=1, max_size=3), max_size=3)


@settings(max_examples=300, deadline=None)
@given(text, text, phrase_lists)
def test_score_invariants(ref, hyp, phrases):
    r = score(ref, hyp, phrases)
    assert r.biased.errors + r.unbiased.errors == oracles.levenshtein(ref, hyp)
    assert r.biased.n_ref + r.unbiased.n_ref == len(ref)
    extra = score(ref, hyp, phrases + ["EEF", "FE"])
    assert (extra.b_cer, extra.u_cer) == (r.b_cer, r.u_cer)
    same = score(ref, ref, phrases)
    assert (same.cer, same.b_cer, same.u_cer) == (0.0, 0.0, 0.0)


def test_corpus_is_micro_averaged(rng):
    refs, hyps = [], []
    for _ in range(30):
        refs.append("".join(rng.choice(list("ABCD"), size=int(rng.integers(1, 9)))))
        hyps.append("".join(rng.choice(list("ABCD"), size=int(rng.integers(0, 9)))))
    phrases = ["AB", "CD"]
    rep = score_corpus(refs, hyps, phrases)
    parts = [score(r, h, phrases) for r, h in zip(refs, hyps)]
    assert rep.utterances == 30
    errs = sum(p.biased.errors for p in parts)
    n = sum(p.biased.n_ref for p in parts)
    assert rep.b_cer == pytest.approx(errs / n)
    assert rep.cer == pytest.approx(sum(oracles.levenshtein(r, h) for r, h in zip(refs, hyps))
                                    / sum(map(len, refs)))
