import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxspike.context_bias import (
    BiasingList, ContractError, EncoderEmbeddings, bias_loss, context_decode, ctc_head,
    encode_biasing_list, integrate, mask_bias_labels, rescore_spikes,
)
from ctxspike.ctc_core import PosteriorMatrix
from ctxspike.tensor_nn import (
    WeightBundle, blstm_encode, conv1d, label_smoothing_loss, linear, log_softmax,
    multi_head_attention,
)
from helpers import random_bundle


def _emb(rng, T=8, d=4, frames=(1, 3, 6)):
    return EncoderEmbeddings(rng.normal(size=(T, d)), np.array(frames))


def test_biasing_list_contract():
    bl = BiasingList.from_phrases([(1, 2), (3,)])
    assert bl.phrases[0] == (0,) and bl.content == [(1, 2), (3,)]
    with pytest.raises(ContractError):
        BiasingList([(1,), (2,)])
    with pytest.raises(ContractError):
        BiasingList.from_phrases([(1, 0)])
    with pytest.raises(ContractError):
        BiasingList.from_phrases([()])
    with pytest.raises(ContractError):
        encode_biasing_list(BiasingList([(1,)], includes_blank_entry=False), random_bundle(
            np.random.default_rng(0)))


def test_encode_rows(rng):
    w = random_bundle(rng)
    assert encode_biasing_list(BiasingList.from_phrases([]), w).shape == (1, 4)
    bl = BiasingList.from_phrases([(1, 2), (3, 4, 5), (1, 2)])
    h = encode_biasing_list(bl, w)
    assert np.array_equal(h[1], h[3])
    E = w.get("context_encoder.embed")
    lstm = lambda d: tuple(w.get(f"context_encoder.{d}.{k}") for k in ("w_ih", "w_hh", "b"))
    for m, p in enumerate(bl.phrases):
        want = blstm_encode(E[list(p)], lstm("fwd"), lstm("bwd"), w.get("context_encoder.out.w"),
                            w.get("context_encoder.out.b"))
        np.testing.assert_array_equal(h[m], want)


def test_integrate_definition(rng):
    w = random_bundle(rng)
    emb = _emb(rng)
    h_ce = encode_biasing_list(BiasingList.from_phrases([(1, 2), (3,)]), w)
    state, biased = integrate(emb, h_ce, w, 0.75)
    h_se = emb.h_e[[1, 3, 6]]
    h_cse = conv1d(h_se, w.get("integration.conv.w"), w.get("integration.conv.b"))
    alpha, c = multi_head_attention(h_cse, h_ce, *(w.get(f"integration.attn.{k}") for k in ("wq", "wk", "wv")), 2)
    c_im = linear(c, w.get("integration.out.w"), w.get("integration.out.b"))
    np.testing.assert_allclose(state.alpha, alpha, atol=1e-12)
    np.testing.assert_allclose(state.c, c, atol=1e-12)
    np.testing.assert_allclose(state.c_im, c_im, atol=1e-12)
    np.testing.assert_array_equal(state.c_ex[:, 4:], h_se)
    np.testing.assert_array_equal(state.c_ex[:, :4], state.c)
    want = emb.h_e.copy()
    want[[1, 3, 6]] += 0.75 * state.c_im
    np.testing.assert_array_equal(biased.h_e, want)
    untouched = [t for t in range(8) if t not in (1, 3, 6)]
    np.testing.assert_array_equal(biased.h_e[untouched], emb.h_e[untouched])
    np.testing.assert_allclose(state.alpha.sum(axis=2), 1.0, atol=1e-9)


def test_integrate_zero_weight_and_no_spikes(rng):
    w = random_bundle(rng)
    emb = _emb(rng)
    h_ce = encode_biasing_list(BiasingList.from_phrases([(1, 2)]), w)
    _, biased = integrate(emb, h_ce, w, 0.0)
    assert np.array_equal(biased.h_e, emb.h_e)
    np.testing.assert_array_equal(ctc_head(biased.h_e, w).logp, ctc_head(emb.h_e, w).logp)
    empty = EncoderEmbeddings(emb.h_e, np.array([], dtype=np.int64))
    state, biased = integrate(empty, h_ce, w, 1.0)
    assert state.U == 0 and biased is empty
    with pytest.raises(ContractError):
        integrate(emb, h_ce, w, -1.0)


def test_blank_only_list_with_null_values(rng):
    w = random_bundle(rng)
    h_ce = encode_biasing_list(BiasingList.from_phrases([]), w)
    # W_v sends the blank embedding to zero: take a basis orthogonal to it
    v = h_ce[0] / np.linalg.norm(h_ce[0])
    w.params["integration.attn.wv"] = np.eye(4) - np.outer(v, v)
    w.params["integration.out.b"] = np.zeros(4)
    emb = _emb(rng)
    state, biased = integrate(emb, h_ce, w, 1.0)
    assert np.array_equal(state.alpha, np.ones((2, 3, 1)))
    np.testing.assert_allclose(state.c_im, 0.0, atol=1e-14)
    np.testing.assert_allclose(biased.h_e, emb.h_e, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_phrase_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    w = random_bundle(r)
    phrases = [tuple(int(t) for t in r.integers(1, 6, size=int(r.integers(1, 4)))) for _ in range(4)]
    perm = r.permutation(4)
    emb = _emb(r)
    h1 = encode_biasing_list(BiasingList.from_phrases(phrases), w)
    h2 = encode_biasing_list(BiasingList.from_phrases([phrases[i] for i in perm]), w)
    s1, b1 = integrate(emb, h1, w, 1.0)
    s2, b2 = integrate(emb, h2, w, 1.0)
    cols = np.concatenate([[0], perm + 1])
    np.testing.assert_array_equal(s2.alpha, s1.alpha[:, :, cols])
    for a, b in ((s1.c, s2.c), (s1.c_im, s2.c_im), (s1.c_ex, s2.c_ex), (b1.h_e, b2.h_e)):
        assert np.array_equal(a, b)
    assert np.array_equal(context_decode(s1.c_ex, w).logp, context_decode(s2.c_ex, w).logp)


def test_context_decode(rng):
    w = random_bundle(rng)
    c_ex = rng.normal(size=(3, 8))
    post = context_decode(c_ex, w, frames=[2, 5, 9])
    assert post.frames.tolist() == [2, 5, 9] and post.is_normalized(1e-9)
    for u in range(3):
        row = c_ex[u] @ w.get("ctx_decoder.w") + w.get("ctx_decoder.b")
        np.testing.assert_allclose(post.logp[u], log_softmax(row[None])[0], atol=1e-13)
    w.params["ctx_decoder.w"] = np.zeros((8, 6))
    w.params["ctx_decoder.b"] = np.zeros(6)
    np.testing.assert_allclose(context_decode(c_ex, w).logp, np.log(1 / 6), atol=1e-15)
    assert context_decode(np.zeros((0, 8)), w).T == 0


def test_mask_bias_labels():
    A, B, C, D, E = 1, 2, 3, 4, 5
    assert mask_bias_labels([A, B, C], []) == [0, 0, 0]
    assert mask_bias_labels([A, B, C], [(0, 3)]) == [A, B, C]
    masked = mask_bias_labels([A, B, C, D, E], [(1, 2)])
    assert masked == [0, B, C, 0, 0]
    assert mask_bias_labels(masked, [(1, 2)]) == masked
    with pytest.raises(ContractError):
        mask_bias_labels([A, B], [(1, 2)])


def test_bias_loss(rng):
    post = PosteriorMatrix(log_softmax(rng.normal(size=(3, 5))))
    assert bias_loss(post, [0, 2, 0], 0.1) == label_smoothing_loss(post.logp, [0, 2, 0], 0.1)
    with pytest.raises(ContractError):
        bias_loss(post, [0, 1])


def test_ctc_head(rng):
    emb = rng.normal(size=(5, 4))
    w = WeightBundle({"ctc_head.w": np.eye(4), "ctc_head.b": np.zeros(4)}, 4, 1, 4)
    np.testing.assert_array_equal(ctc_head(emb, w).logp, log_softmax(emb))
    w2 = random_bundle(rng)
    post = ctc_head(emb, w2)
    assert post.is_normalized(1e-9)
    for t in range(5):
        np.testing.assert_allclose(post.logp[t], log_softmax((emb[t] @ w2.get("ctc_head.w") + w2.get("ctc_head.b"))[None])[0], atol=1e-13)
    with pytest.raises(KeyError):
        ctc_head(emb, WeightBundle({}, 4, 1, 4))


def test_spike_rescore_matches_full_recompute(rng):
    w = random_bundle(rng)
    emb = _emb(rng)
    post = ctc_head(emb.h_e, w)
    h_ce = encode_biasing_list(BiasingList.from_phrases([(1, 2), (4,)]), w)
    _, biased = integrate(emb, h_ce, w, 1.0)
    fast = rescore_spikes(post, biased, w)
    full = rescore_spikes(post, biased, w, full=True)
    np.testing.assert_allclose(fast.logp, full.logp, atol=1e-13)
