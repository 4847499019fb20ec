"""Shallow fusion over the bias graph and cascading of the biasing methods."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .bias_graph import PROSPECTIVE, ROOT, BiasGraph, build_graph
from .context_bias import (
    BiasingList,
    ContractError,
    EncoderEmbeddings,
    context_decode,
    ctc_head,
    encode_biasing_list,
    encode_phrase,
    integrate,
    rescore_spikes,
)
from .ctc_core import Hypothesis, PosteriorMatrix, greedy_spikes, prefix_beam_search
from .explicit_bias import apply_bias, collect_bias_applications, context_beam_search
from .phrase_filter import FilterConfig, filter_list
from .tensor_nn import WeightBundle

METHODS = ("implicit", "explicit", "sf")


class ConfigurationError(ValueError):
    """A method was enabled without the artifacts it needs."""


class SFScorer:
    """Incremental graph scorer for ``prefix_beam_search``.

    The scorer state is the graph state, so one instance can serve any
    number of decodes.
    """

    def __init__(self, g: BiasGraph, weight: float = 1.0):
        self.graph = g
        self.weight = float(weight)
        self._memo: dict[tuple[int, int], tuple[int, float]] = {}

    def initial_state(self) -> int:
        return ROOT

    def step(self, state: int, token: int) -> tuple[int, float]:
        key = (state, token)
        hit = self._memo.get(key)
        if hit is None:
            st = self.graph.step(state, token, PROSPECTIVE)
            hit = self._memo[key] = (st.new_state, self.weight * st.score_delta)
        return hit

    def finalize(self, state: int) -> float:
        return self.weight * self.graph.final_delta(state, PROSPECTIVE)


def sf_scorer(g: BiasGraph, weight: float = 1.0) -> SFScorer:
    return SFScorer(g, weight)


def default_weight(n_enabled: int) -> float:
    """Per-method weight for a cascade of ``n_enabled`` methods."""
    return {0: 1.0, 1: 1.0, 2: 0.75}.get(n_enabled, 0.5)


@dataclass
class CascadeConfig:
    implicit: bool = False
    explicit: bool = False
    sf: bool = False
    implicit_weight: float | None = None
    explicit_weight: float | None = None
    sf_weight: float | None = None

    def __post_init__(self) -> None:
        auto = default_weight(self.n_enabled)
        for m in METHODS:
            key = f"{m}_weight"
            if getattr(self, key) is None:
                setattr(self, key, auto)
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative")

    @property
    def n_enabled(self) -> int:
        return sum((self.implicit, self.explicit, self.sf))

    @classmethod
    def from_mode(cls, mode: str, **weights) -> "CascadeConfig":
        """Parse ``baseline`` or a ``+``-joined method list such as ``implicit+sf``."""
        mode = mode.strip().lower()
        flags = {m: False for m in METHODS}
        if mode not in ("baseline", ""):
            parts = mode.split("+")
            if "all" in parts:
                parts = [p for p in parts if p != "all"] + ["implicit", "explicit"]
            for part in parts:
                if part not in flags:
                    raise ValueError(f"unknown decoding method {part!r}")
                flags[part] = True
        return cls(**flags, **{k: v for k, v in weights.items() if v is not None})


@dataclass
class DecodeParams:
    beam: int = 10
    token_topk: int | None = 20
    bias_score: float = 3.0
    graph_score: float = 1.0
    context_beam: int = 10
    bias_top_k: int | None = None
    filter: FilterConfig | None = field(default_factory=FilterConfig)
    full_recompute: bool = False


@dataclass
class Utterance:
    """Per-utterance decoding inputs; ``h_e`` is needed by the neural methods."""

    post: PosteriorMatrix | None
    biasing_list: BiasingList
    h_e: np.ndarray | None = None
    uid: str = ""


@dataclass
class CascadeResult:
    hypotheses: list[Hypothesis]
    trace: dict[str, Any]


def _encode_cached(blist: BiasingList, weights: WeightBundle, cache: dict | None):
    if cache is None:
        return encode_biasing_list(blist, weights)
    for p in blist.phrases:
        if p not in cache:
            cache[p] = encode_phrase(p, weights)
    return np.vstack([cache[p] for p in blist.phrases])


def run_cascade(utt: Utterance, methods: CascadeConfig, params: DecodeParams,
                weights: WeightBundle | None = None, encoder_cache: dict | None = None) -> CascadeResult:
    """Filter, then implicit, explicit and shallow-fusion biasing, then decode."""
    neural = methods.implicit or methods.explicit
    if neural and weights is None:
        name = "implicit" if methods.implicit else "explicit"
        raise ConfigurationError(f"{name} biasing needs a weight bundle")
    if neural and utt.h_e is None:
        name = "implicit" if methods.implicit else "explicit"
        raise ConfigurationError(f"{name} biasing needs encoder embeddings")
    if utt.post is None:
        if utt.h_e is None or weights is None:
            raise ConfigurationError("no posterior given and no embeddings to derive one")
        post = ctc_head(utt.h_e, weights)
    else:
        post = utt.post
    blank = post.blank_id
    trace: dict[str, Any] = {"id": utt.uid}

    spikes = greedy_spikes(post)
    trace["spikes"] = [[s.frame, s.token] for s in spikes]

    blist = utt.biasing_list
    if params.filter is not None and (neural or methods.sf):
        report = filter_list(post, blist, params.filter, spikes)
        blist = report.kept
    trace["kept"] = [list(p) for p in blist.content]

    lattice = post
    applied: list[list[int]] = []
    if neural:
        h_ce = _encode_cached(blist, weights, encoder_cache)
        emb = EncoderEmbeddings(utt.h_e, np.array(spikes.frames, dtype=np.int64))
        iw = methods.implicit_weight if methods.implicit else 0.0
        state, biased = integrate(emb, h_ce, weights, iw)
        if methods.implicit and iw > 0 and len(spikes):
            lattice = rescore_spikes(post, biased, weights, params.full_recompute)
        if methods.explicit and len(spikes) and blist.content:
            ctx_post = context_decode(state.c_ex, weights, state.frames, blank)
            g = build_graph(blist.content, params.graph_score, blank)
            paths = context_beam_search(ctx_post, g, params.context_beam)
            app = collect_bias_applications(paths, params.bias_top_k,
                                            params.bias_score * methods.explicit_weight,
                                            state.frames)
            lattice = apply_bias(lattice, app)
            applied = [list(c) for c in sorted(app.cells)]
    trace["applied"] = applied

    scorer = None
    if methods.sf and blist.content:
        scorer = sf_scorer(build_graph(blist.content, params.graph_score, blank), methods.sf_weight)
    hyps = prefix_beam_search(lattice, params.beam, scorer, 1.0, params.token_topk)
    trace["hyp"] = list(hyps[0].tokens) if hyps else []
    trace["score"] = hyps[0].score if hyps else None
    return CascadeResult(hyps, trace)
