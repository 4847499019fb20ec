"""Synthetic utterances with designed CTC posteriors.

The CTC head is the identity (d_model = V, zero bias), so encoder
embeddings are just per-frame logits. Each row is shifted so its smallest
entry is 0, which leaves the posterior unchanged and keeps embedding
values comparable across frames.

:func:`fixture_weights` builds context-module weights by hand so the
neural biasing paths have a predictable effect: the encoder returns a
bag-of-tokens count vector per phrase, attention favours phrases sharing
tokens with a spike and its neighbours, and both the implicit boost and
the context decoder push the phrase's tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .context_bias import BiasingList
from .ctc_core import PosteriorMatrix
from .tensor_nn import WeightBundle


@dataclass(frozen=True)
class Corruption:
    position: int
    confusable: int
    margin: float = 1.0


@dataclass
class SynthSpec:
    vocab_size: int
    transcript: Sequence[int]
    frames_per_token: int = 2
    blank_margin: int = 2
    confidence: float = 0.98
    corruptions: Sequence[Corruption] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be at least 1")
        for c in self.corruptions:
            if c.confusable == self.transcript[c.position]:
                raise ValueError(f"confusable at position {c.position} equals the true token")
            if c.confusable == 0:
                raise ValueError("confusable must not be blank")


@dataclass
class SynthUtterance:
    h_e: np.ndarray
    post: PosteriorMatrix
    reference: list[int]
    spike_frames: list[int]
    weights: WeightBundle


def _row(V: int, top: int, conf: float) -> np.ndarray:
    p = np.full(V, (1.0 - conf) / (V - 1))
    p[top] = conf
    return p


def _corrupted_row(V: int, true: int, confusable: int, conf: float, margin: float) -> np.ndarray:
    p = np.full(V, (1.0 - conf) / (V - 2))
    hi = conf / (1.0 + math.exp(-margin))
    p[confusable] = hi
    p[true] = conf - hi
    return p


def head_weights(V: int) -> WeightBundle:
    return WeightBundle({"ctc_head.w": np.eye(V), "ctc_head.b": np.zeros(V)},
                        d_model=V, heads=1, vocab=V)


def synth_utterance(spec: SynthSpec) -> SynthUtterance:
    V = spec.vocab_size
    tokens = [int(t) for t in spec.transcript]
    fpt, margin = spec.frames_per_token, spec.blank_margin
    T = 2 * margin + len(tokens) * fpt
    probs = np.tile(_row(V, 0, spec.confidence), (T, 1))
    corr = {c.position: c for c in spec.corruptions}
    frames = []
    for i, tok in enumerate(tokens):
        t = margin + i * fpt
        frames.append(t)
        if i in corr:
            c = corr[i]
            probs[t] = _corrupted_row(V, tok, c.confusable, spec.confidence, c.margin)
        else:
            probs[t] = _row(V, tok, spec.confidence)
    # repeated tokens need a blank between their spikes
    if fpt == 1:
        for a, b in zip(tokens, tokens[1:]):
            if a == b:
                raise ValueError("frames_per_token=1 cannot separate repeated tokens")
    logp = np.log(probs)
    h_e = logp - logp.min(axis=1, keepdims=True)
    logp = h_e - np.log(np.exp(h_e).sum(axis=1, keepdims=True))
    return SynthUtterance(h_e, PosteriorMatrix(logp, 0), tokens, frames, head_weights(V))


def fixture_weights(V: int, beta: float = 3.0, blank_level: float = 12.0,
                    implicit_gain: float = 3.0, ctx_gain: float = 4.0,
                    ctx_blank_gain: float = 12.0) -> WeightBundle:
    """Hand-built weights for a V-token toy model (d_model = hidden = V, one head).

    ``beta`` is the effective attention sharpness per unit of matched
    embedding; ``blank_level`` is the matched evidence needed to beat the
    blank phrase.
    """
    I = np.eye(V)
    Z = np.zeros((V, V))
    sat = 30.0
    w_ih = np.hstack([Z, Z, 20.0 * I, Z])
    b = np.concatenate([np.full(V, sat), np.full(V, sat), np.zeros(V), np.zeros(V)])
    lstm = {"w_ih": w_ih, "w_hh": np.zeros((V, 4 * V)), "b": b}
    out_w = np.vstack([Z, I, Z, Z])
    scale = beta * math.sqrt(V)
    wk = scale * I
    wk[0, 0] = scale * blank_level
    conv_b = np.zeros(V)
    conv_b[0] = 1.0
    out = implicit_gain * I
    out[0, 0] = 0.0
    ctx_top = ctx_gain * I
    ctx_top[0, 0] = ctx_blank_gain
    params = {
        "context_encoder.embed": I.copy(),
        "context_encoder.out.w": out_w,
        "context_encoder.out.b": np.zeros(V),
        "integration.conv.w": np.stack([I, I, I]),
        "integration.conv.b": conv_b,
        "integration.attn.wq": I.copy(),
        "integration.attn.wk": wk,
        "integration.attn.wv": I.copy(),
        "integration.out.w": out,
        "integration.out.b": np.zeros(V),
        "ctx_decoder.w": np.vstack([ctx_top, I]),
        "ctx_decoder.b": np.zeros(V),
        "ctc_head.w": I.copy(),
        "ctc_head.b": np.zeros(V),
    }
    for d in ("fwd", "bwd"):
        for k, v in lstm.items():
            params[f"context_encoder.{d}.{k}"] = v.copy()
    return WeightBundle(params, d_model=V, heads=1, vocab=V, conv_kernel=3,
                        hidden=V, embed_dim=V)


def random_phrases(rng: np.random.Generator, n: int, V: int, min_len: int = 2,
                   max_len: int = 6) -> list[tuple[int, ...]]:
    """``n`` distinct blank-free phrases without repeated tokens."""
    seen: dict[tuple[int, ...], None] = {}
    while len(seen) < n:
        L = int(rng.integers(min_len, max_len + 1))
        p = tuple(int(t) for t in rng.choice(np.arange(1, V), size=L, replace=False))
        seen.setdefault(p)
    return list(seen)


@dataclass
class CorruptionPolicy:
    """One phrase token per utterance is corrupted with ``margin`` (0 disables)."""

    margin: float = 1.0
    rate: float = 1.0
    min_phrase_len: int = 1


@dataclass
class CorpusUtterance:
    uid: str
    reference: list[int]
    phrase_ids: list[int]
    occurrences: list[tuple[int, int]]
    corruptions: list[Corruption] = field(default_factory=list)


@dataclass
class SynthCorpus:
    vocab_size: int
    phrases: list[tuple[int, ...]]
    utterances: list[CorpusUtterance]
    frames_per_token: int = 2
    blank_margin: int = 2
    confidence: float = 0.98

    def spec(self, utt: CorpusUtterance) -> SynthSpec:
        return SynthSpec(self.vocab_size, utt.reference, self.frames_per_token,
                         self.blank_margin, self.confidence, utt.corruptions)

    def render(self, utt: CorpusUtterance) -> SynthUtterance:
        return synth_utterance(self.spec(utt))

    def biasing_list(self) -> BiasingList:
        return BiasingList.from_phrases(self.phrases)


def synth_corpus(n: int, phrase_pool: Sequence[Sequence[int]], policy: CorruptionPolicy | None = None,
                 seed: int = 0, vocab_size: int = 100, filler: tuple[int, int] = (3, 8),
                 frames_per_token: int = 2, confidence: float = 0.98,
                 phrases_per_utt: int = 1) -> SynthCorpus:
    """``n`` utterances, each embedding pool phrases between random filler tokens."""
    if not phrase_pool:
        raise ValueError("phrase pool must not be empty")
    policy = policy or CorruptionPolicy()
    pool = [tuple(int(t) for t in p) for p in phrase_pool]
    rng = np.random.default_rng(seed)
    eligible = [i for i, p in enumerate(pool) if len(p) >= policy.min_phrase_len]
    if not eligible:
        raise ValueError("no pool phrase satisfies the corruption policy's minimum length")
    utts = []
    width = len(str(max(n - 1, 1)))
    for k in range(n):
        ref: list[int] = []
        occ, pids = [], []
        for j in range(phrases_per_utt):
            ref += [int(t) for t in rng.integers(1, vocab_size, size=int(rng.integers(*filler) + 1))]
            pid = int(eligible[int(rng.integers(len(eligible)))]) if j == 0 else int(rng.integers(len(pool)))
            occ.append((len(ref), len(pool[pid])))
            pids.append(pid)
            ref += list(pool[pid])
        ref += [int(t) for t in rng.integers(1, vocab_size, size=int(rng.integers(*filler) + 1))]
        corruptions = []
        if policy.margin > 0 and rng.random() < policy.rate:
            start, length = occ[0]
            pos = start + int(rng.integers(length))
            banned = set(pool[pids[0]]) | {0, ref[pos]}
            if pos > 0:
                banned.add(ref[pos - 1])
            if pos + 1 < len(ref):
                banned.add(ref[pos + 1])
            choices = [t for t in range(1, vocab_size) if t not in banned]
            corruptions.append(Corruption(pos, int(choices[int(rng.integers(len(choices)))]), policy.margin))
        utts.append(CorpusUtterance(f"utt{k:0{width}d}", ref, pids, occ, corruptions))
    return SynthCorpus(vocab_size, pool, utts, frames_per_token, 2, confidence)
