import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxspike.context_bias import BiasingList, ContractError
from ctxspike.ctc_core import PosteriorMatrix, greedy_spikes
from ctxspike.phrase_filter import FilterConfig, emit_rows, filter_list, psc, soc
from helpers import rand_post, spiky_post
import oracles

CFG = FilterConfig()
NOPEN = FilterConfig(penalty_enabled=False)


def _rows(best, V=6, fill=-40.0):
    """One row per entry: token i+1 carries ``best[i]``, everything else ``fill``."""
    rows = np.full((len(best), V), fill)
    for i, v in enumerate(best):
        rows[i, i + 1] = v
    return rows


def test_defaults():
    assert (CFG.q, CFG.p, CFG.window_factor) == (-6.0, -12.0, 1.5)
    with pytest.raises(ValueError):
        FilterConfig(q=-6, p=-3)


def test_psc_single_token():
    assert psc(_rows([-0.5]), [1], CFG) == -0.5


def test_penalty_worked_example():
    rows = _rows([-0.1, -0.2, -30.0])
    assert psc(rows, [1, 2, 3], CFG) == pytest.approx(-4.1, abs=1e-12)
    assert psc(rows, [1, 2, 3], NOPEN) == pytest.approx(-10.1, abs=1e-12)
    assert psc(rows, [1, 2, 3], CFG) >= CFG.q > psc(rows, [1, 2, 3], NOPEN)


def test_soc_in_order_equals_psc():
    rows = _rows([-0.1, -0.3, -0.2])
    for cfg in (CFG, NOPEN):
        assert soc(rows, [1, 2, 3], cfg) == pytest.approx(psc(rows, [1, 2, 3], cfg), abs=1e-12)


def test_soc_order_sensitivity():
    A, B = 1, 2
    rows = _rows([-0.01, -0.02])
    assert psc(rows, [B, A], CFG) == pytest.approx(-0.015)
    want = oracles.brute_soc(rows, [B, A], CFG.p)
    assert soc(rows, [B, A], CFG) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx((-0.01 + CFG.p) / 2, abs=1e-12)


def test_empty_phrase_rejected():
    with pytest.raises(ContractError):
        psc(_rows([-1.0]), [], CFG)
    with pytest.raises(ContractError):
        soc(_rows([-1.0]), [], CFG)


def _case(r):
    U, V = int(r.integers(1, 9)), int(r.integers(2, 6))
    rows = np.log(r.dirichlet(np.full(V, 0.3), size=U))
    rows = np.maximum(rows, -60)
    phrase = [int(t) for t in r.integers(1, V, size=int(r.integers(1, 5)))]
    return rows, phrase


def test_scores_vs_oracles(rng):
    for _ in range(300):
        rows, phrase = _case(rng)
        for cfg in (CFG, NOPEN, FilterConfig(q=-3, p=-5, window_factor=2.0)):
            assert psc(rows, phrase, cfg) == pytest.approx(
                oracles.brute_psc(rows, phrase, cfg.floor, cfg.window_factor), abs=1e-12)
            assert soc(rows, phrase, cfg) == pytest.approx(
                oracles.brute_soc(rows, phrase, cfg.floor, cfg.window_factor), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, -0.5), st.floats(1.05, 3.0))
def test_score_properties(seed, q, ratio):
    r = np.random.default_rng(seed)
    rows, phrase = _case(r)
    lo, hi = FilterConfig(q=q, p=q * ratio * 1.5), FilterConfig(q=q, p=q * ratio)
    for cfg in (lo, hi, NOPEN):
        assert soc(rows, phrase, cfg) <= psc(rows, phrase, cfg) + 1e-12
    for f in (psc, soc):
        assert f(rows, phrase, lo) <= f(rows, phrase, hi) + 1e-12
        assert f(rows, phrase, hi) >= hi.p - 1e-12


def test_penalty_rescues_half_of_missing_tokens():
    # near-0 tokens plus k fully missing ones: mean = k*p/L, kept iff k <= L/2
    for L in range(2, 7):
        for k in range(L + 1):
            best = [0.0] * (L - k) + [-80.0] * k
            score = psc(_rows(best, V=8, fill=-90.0), list(range(1, L + 1)), CFG)
            assert (score >= CFG.q) == (k <= L // 2)


def test_emit_rows_gather(rng):
    post = rand_post(rng, 6, 4)
    assert emit_rows(post, greedy_spikes(spiky_post([0, 0], 4))).shape == (0, 4)
    sp = greedy_spikes(spiky_post([0, 1, 0, 2, 2, 3], 4))
    np.testing.assert_array_equal(emit_rows(post, sp), post.logp[[1, 3, 5]])
    full = greedy_spikes(spiky_post([1, 2, 3, 1, 2, 3], 4))
    np.testing.assert_array_equal(emit_rows(post, full), post.logp)


def test_filter_without_spikes_keeps_only_blank():
    rep = filter_list(spiky_post([0, 0, 0], 4), BiasingList.from_phrases([(1,), (2, 3)]))
    assert rep.kept.phrases == [(0,)]


def test_filter_keeps_present_phrase():
    post = spiky_post([0, 1, 0, 2, 0, 3, 0], 6, conf=0.999)
    rep = filter_list(post, BiasingList.from_phrases([(1, 2, 3), (4, 5), (3, 1)]))
    by = {s.phrase: s for s in rep.scores}
    assert by[(1, 2, 3)].kept and by[(1, 2, 3)].psc > -0.01 and by[(1, 2, 3)].soc > -0.01
    assert not by[(4, 5)].kept
    assert by[(3, 1)].psc > -0.01 and not by[(3, 1)].kept
    assert rep.kept.phrases[0] == (0,)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_report_consistency_and_stage2_superset(seed):
    r = np.random.default_rng(seed)
    post = PosteriorMatrix(np.log(r.dirichlet(np.full(5, 0.2), size=10)).clip(-50), 0)
    phrases = sorted({tuple(int(t) for t in r.integers(1, 5, size=int(r.integers(1, 4))))
                      for _ in range(6)})
    blist = BiasingList.from_phrases(phrases)
    two = filter_list(post, blist, CFG)
    one = filter_list(post, blist, FilterConfig(stage2_enabled=False))
    for s in two.scores:
        assert s.kept == (s.psc >= CFG.q and (s.soc is None or s.soc >= CFG.q))
        if len(s.phrase) == 1 and s.soc is not None:
            assert s.soc == s.psc
    assert set(two.kept.phrases) <= set(one.kept.phrases)


def test_vanilla_uses_all_frames_without_penalty():
    v = FilterConfig.vanilla()
    assert not v.penalty_enabled and not v.emitting_only and v.floor == -math.inf
    post = spiky_post([1, 0, 0, 0, 2], 4, conf=1 - 1e-13)
    blist = BiasingList.from_phrases([(1, 2)])
    # five frames: window 3 never covers both spikes, spike rows alone do
    assert filter_list(post, blist, CFG).scores[0].kept
    assert not filter_list(post, blist, v).scores[0].kept
