import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxspike.bias_graph import build_graph
from ctxspike.context_bias import ContractError
from ctxspike.ctc_core import PosteriorMatrix, prefix_beam_search
from ctxspike.explicit_bias import (
    BiasApplication, BiasPath, apply_bias, collect_bias_applications, context_beam_search,
)
from ctxspike.shallow_fusion import CascadeConfig, DecodeParams, Utterance, run_cascade
from ctxspike.synthgen import Corruption, SynthSpec, fixture_weights, synth_utterance
from ctxspike.context_bias import BiasingList
from helpers import rand_post
import oracles


def test_empty_graph_single_blank_path(rng):
    post = rand_post(rng, 3, 4)
    paths = context_beam_search(post, build_graph([]), 8)
    assert len(paths) == 1 and paths[0].choices == (0, 0, 0)
    assert paths[0].score == pytest.approx(post.logp[:, 0].sum(), abs=1e-12)


def test_two_spike_phrase_found():
    p = np.full((2, 4), 0.02)
    p[0, 1], p[1, 2] = 0.94, 0.94
    post = PosteriorMatrix(np.log(p / p.sum(axis=1, keepdims=True)), 0, np.array([3, 7]))
    paths = context_beam_search(post, build_graph([(1, 2)]), 8)
    assert paths[0].choices == (1, 2)
    assert paths[0].completed_matches == [(0, (0, 1))]
    best = max(oracles.brute_context_paths(post.logp, [(1, 2)], 1.0))
    assert paths[0].score == pytest.approx(best[0], abs=1e-12)


def test_empty_spikes_give_no_paths():
    assert context_beam_search(PosteriorMatrix(np.zeros((0, 3))), build_graph([(1,)])) == []


def test_top1_vs_exhaustive(rng):
    for _ in range(150):
        U, V = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        post = rand_post(rng, U, V)
        phrases = sorted({tuple(int(t) for t in rng.integers(1, V, size=int(rng.integers(1, 4))))
                          for _ in range(int(rng.integers(1, 4)))})
        s = float(rng.choice([0.5, 1.0, 2.0]))
        best = max(oracles.brute_context_paths(post.logp, phrases, s))
        top = context_beam_search(post, build_graph(phrases, s), 64)[0]
        assert top.score == pytest.approx(best[0], abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_path_invariants(seed):
    r = np.random.default_rng(seed)
    U, V = int(r.integers(1, 7)), int(r.integers(2, 6))
    post = rand_post(r, U, V)
    phrases = sorted({tuple(int(t) for t in r.integers(1, V, size=int(r.integers(1, 4))))
                      for _ in range(3)})
    g = build_graph(phrases)
    prev = -np.inf
    for beam in (1, 2, 4, 8, 32):
        paths = context_beam_search(post, g, beam)
        scores = [p.score for p in paths]
        assert scores == sorted(scores, reverse=True)
        assert scores[0] >= prev - 1e-12
        prev = scores[0]
    for p in paths:
        emitted = [t for t in p.choices if t != 0]
        for k in range(len(emitted)):
            assert oracles.longest_suffix_prefix(emitted[:k + 1], g.phrases)
        for pid, span in p.completed_matches:
            assert [p.choices[u] for u in span] == list(g.phrases[pid])


def _path(choices, matches, score=0.0):
    return BiasPath(tuple(choices), (), score, matches)


def test_collect_dedups_and_skips_incomplete():
    frames = [10, 20, 30]
    a = _path([1, 2, 0], [(0, (0, 1))])
    b = _path([1, 2, 0], [(0, (0, 1))])
    incomplete = _path([0, 1, 0], [])
    app = collect_bias_applications([a, b, incomplete], None, 3.0, frames)
    assert app.cells == {(10, 1), (20, 2)} and app.bias_score == 3.0
    assert len(collect_bias_applications([incomplete, a], 1, 3.0, frames)) == 0
    assert len(collect_bias_applications([_path([0, 0, 0], [])], 1, 3.0, frames)) == 0
    with pytest.raises(ValueError):
        collect_bias_applications([a], 0, 3.0, frames)


def test_apply_bias(rng):
    post = rand_post(rng, 4, 3)
    assert np.array_equal(apply_bias(post, BiasApplication(set(), 3.0)).logp, post.logp)
    assert np.array_equal(apply_bias(post, BiasApplication({(1, 2)}, 0.0)).logp, post.logp)
    out = apply_bias(post, BiasApplication({(1, 2)}, 3.0)).logp
    diff = np.argwhere(out != post.logp)
    assert diff.tolist() == [[1, 2]] and out[1, 2] == post.logp[1, 2] + 3.0
    with pytest.raises(ContractError):
        apply_bias(post, BiasApplication({(4, 0)}, 1.0))


def test_zero_bias_decode_identical(rng):
    post = rand_post(rng, 8, 4)
    app = BiasApplication({(1, 2), (3, 1)}, 0.0)
    a = [(h.tokens, h.score) for h in prefix_beam_search(post, 8)]
    b = [(h.tokens, h.score) for h in prefix_beam_search(apply_bias(post, app), 8)]
    assert a == b


def test_corrupted_phrase_recovered_by_explicit_bias():
    V = 12
    phrase = (3, 4, 5)
    spec = SynthSpec(V, [7, 3, 4, 5, 9], corruptions=[Corruption(2, 8, 1.0)])
    su = synth_utterance(spec)
    utt = Utterance(su.post, BiasingList.from_phrases([phrase, (10, 11)]), su.h_e, "u")
    w = fixture_weights(V)
    base = run_cascade(utt, CascadeConfig.from_mode("baseline"), DecodeParams(), w)
    expl = run_cascade(utt, CascadeConfig.from_mode("explicit"), DecodeParams(), w)
    assert list(base.hypotheses[0].tokens) != su.reference
    assert list(expl.hypotheses[0].tokens) == su.reference
    assert expl.trace["applied"]
