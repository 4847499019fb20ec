"""Context encoder, context integration and context decoder.

Weight names consumed here::

    context_encoder.embed          (V, e)
    context_encoder.fwd.w_ih       (e, 4h)   fwd.w_hh (h, 4h)   fwd.b (4h,)
    context_encoder.bwd.*          same shapes as fwd
    context_encoder.out.w          (4h, d)   out.b (d,)
    integration.conv.w             (k, d, d) conv.b (d,)
    integration.attn.wq / wk / wv  (d, d)
    integration.out.w              (d, d)    out.b (d,)
    ctx_decoder.w                  (2d, V)   ctx_decoder.b (V,)
    ctc_head.w                     (d, V)    ctc_head.b (V,)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctc_core import PosteriorMatrix, SpikeSequence
from .tensor_nn import (
    WeightBundle,
    blstm_encode,
    conv1d,
    label_smoothing_loss,
    linear,
    log_softmax,
    multi_head_attention,
)

ENCODER_KEYS = (
    "context_encoder.embed",
    "context_encoder.fwd.w_ih", "context_encoder.fwd.w_hh", "context_encoder.fwd.b",
    "context_encoder.bwd.w_ih", "context_encoder.bwd.w_hh", "context_encoder.bwd.b",
    "context_encoder.out.w", "context_encoder.out.b",
)
INTEGRATION_KEYS = (
    "integration.conv.w", "integration.conv.b",
    "integration.attn.wq", "integration.attn.wk", "integration.attn.wv",
    "integration.out.w", "integration.out.b",
)
DECODER_KEYS = ("ctx_decoder.w", "ctx_decoder.b")
HEAD_KEYS = ("ctc_head.w", "ctc_head.b")


class ContractError(ValueError):
    """An input violates a documented precondition."""


@dataclass
class BiasingList:
    """Phrases as token-id tuples; index 0 holds the blank phrase when present."""

    phrases: list[tuple[int, ...]]
    includes_blank_entry: bool = True
    blank_id: int = 0

    def __post_init__(self) -> None:
        self.phrases = [tuple(int(t) for t in p) for p in self.phrases]
        for i, p in enumerate(self.phrases):
            if not p:
                raise ContractError(f"phrase {i} is empty")
            is_blank_entry = self.includes_blank_entry and i == 0
            if is_blank_entry:
                if p != (self.blank_id,):
                    raise ContractError("entry 0 must be the single-blank phrase")
            elif self.blank_id in p:
                raise ContractError(f"phrase {i} contains the blank token")

    @classmethod
    def from_phrases(cls, phrases: Sequence[Sequence[int]], blank_id: int = 0) -> "BiasingList":
        return cls([(blank_id,)] + [tuple(p) for p in phrases], True, blank_id)

    @property
    def content(self) -> list[tuple[int, ...]]:
        """Phrases without the blank entry."""
        return self.phrases[1:] if self.includes_blank_entry else list(self.phrases)

    def __len__(self) -> int:
        return len(self.phrases)


@dataclass
class EncoderEmbeddings:
    h_e: np.ndarray
    spike_frames: np.ndarray

    def __post_init__(self) -> None:
        self.h_e = np.asarray(self.h_e, dtype=np.float64)
        self.spike_frames = np.asarray(self.spike_frames, dtype=np.int64).reshape(-1)

    @property
    def h_se(self) -> np.ndarray:
        return self.h_e[self.spike_frames]


@dataclass
class ContextState:
    h_ce: np.ndarray
    alpha: np.ndarray
    c: np.ndarray
    c_im: np.ndarray
    c_ex: np.ndarray
    frames: np.ndarray

    @property
    def U(self) -> int:
        return self.c.shape[0]


def _lstm_params(w: WeightBundle, direction: str):
    p = f"context_encoder.{direction}"
    return (w.get(f"{p}.w_ih"), w.get(f"{p}.w_hh"), w.get(f"{p}.b"))


def encode_phrase(phrase: Sequence[int], w: WeightBundle) -> np.ndarray:
    embed = w.get("context_encoder.embed")
    xs = embed[np.asarray(phrase, dtype=np.int64)]
    return blstm_encode(xs, _lstm_params(w, "fwd"), _lstm_params(w, "bwd"),
                        w.get("context_encoder.out.w"), w.get("context_encoder.out.b"))


def encode_biasing_list(blist: BiasingList, w: WeightBundle) -> np.ndarray:
    if not blist.includes_blank_entry or not blist.phrases:
        raise ContractError("biasing list must start with the blank phrase")
    w.require(ENCODER_KEYS)
    cache: dict[tuple[int, ...], np.ndarray] = {}
    rows = []
    for p in blist.phrases:
        if p not in cache:
            cache[p] = encode_phrase(p, w)
        rows.append(cache[p])
    return np.vstack(rows)


def integrate(emb: EncoderEmbeddings, h_ce: np.ndarray, w: WeightBundle,
              implicit_weight: float = 1.0):
    """Run the context integration module at the spike frames of ``emb``.

    Returns ``(state, biased)`` where ``biased`` carries h^E with
    ``implicit_weight * c_im`` added on the spike rows only.
    """
    if implicit_weight < 0:
        raise ContractError("implicit_weight must be non-negative")
    w.require(INTEGRATION_KEYS)
    h_ce = np.asarray(h_ce, dtype=np.float64)
    frames = emb.spike_frames
    U, M, d = len(frames), h_ce.shape[0], emb.h_e.shape[1]
    if U == 0:
        empty = np.zeros((0, d))
        state = ContextState(h_ce, np.zeros((w.heads, 0, M)), empty, empty,
                             np.zeros((0, 2 * d)), frames)
        return state, emb
    h_se = emb.h_se
    h_cse = conv1d(h_se, w.get("integration.conv.w"), w.get("integration.conv.b"))
    # attend over rows in a canonical order so list order cannot change c by rounding
    order = np.lexsort(h_ce.T[::-1])
    alpha_sorted, c = multi_head_attention(h_cse, h_ce[order], w.get("integration.attn.wq"),
                                           w.get("integration.attn.wk"),
                                           w.get("integration.attn.wv"), w.heads)
    alpha = np.empty_like(alpha_sorted)
    alpha[:, :, order] = alpha_sorted
    c_im = linear(c, w.get("integration.out.w"), w.get("integration.out.b"))
    c_ex = np.concatenate([c, h_se], axis=1)
    state = ContextState(h_ce, alpha, c, c_im, c_ex, frames)
    if implicit_weight == 0.0:
        return state, emb
    h_tilde = emb.h_e.copy()
    h_tilde[frames] = h_tilde[frames] + implicit_weight * c_im
    return state, EncoderEmbeddings(h_tilde, frames)


def context_decode(c_ex: np.ndarray, w: WeightBundle, frames=None, blank_id: int = 0) -> PosteriorMatrix:
    """Spike-indexed posterior of the context decoder (rows carry frame ids)."""
    w.require(DECODER_KEYS)
    c_ex = np.asarray(c_ex, dtype=np.float64)
    V = w.get("ctx_decoder.b").shape[0]
    if c_ex.shape[0] == 0:
        return PosteriorMatrix(np.zeros((0, V)), blank_id, np.zeros(0, dtype=np.int64))
    logits = linear(c_ex, w.get("ctx_decoder.w"), w.get("ctx_decoder.b"))
    return PosteriorMatrix(log_softmax(logits), blank_id, frames)


def mask_bias_labels(label: Sequence[int], occurrences, blank_id: int = 0) -> list[int]:
    L = len(label)
    keep = [False] * L
    for start, length in occurrences:
        if start < 0 or length < 0 or start + length > L:
            raise ContractError(f"occurrence ({start}, {length}) outside label of length {L}")
        for i in range(start, start + length):
            keep[i] = True
    return [int(t) if k else blank_id for t, k in zip(label, keep)]


def bias_loss(ctx_post: PosteriorMatrix, masked_labels: Sequence[int], eps: float = 0.1) -> float:
    if len(masked_labels) != ctx_post.T:
        raise ContractError(
            f"{ctx_post.T} spike rows but {len(masked_labels)} masked labels"
        )
    return label_smoothing_loss(ctx_post.logp, masked_labels, eps)


def ctc_head(emb: np.ndarray, w: WeightBundle, blank_id: int = 0) -> PosteriorMatrix:
    w.require(HEAD_KEYS)
    return PosteriorMatrix(log_softmax(linear(emb, w.get("ctc_head.w"), w.get("ctc_head.b"))),
                           blank_id)


def rescore_spikes(post: PosteriorMatrix, biased: EncoderEmbeddings, w: WeightBundle,
                   full: bool = False) -> PosteriorMatrix:
    """Posterior after implicit biasing.

    Only spike rows change, so by default just those rows are recomputed
    and the rest are copied from ``post``; ``full=True`` recomputes all.
    """
    if full:
        return ctc_head(biased.h_e, w, post.blank_id)
    w.require(HEAD_KEYS)
    frames = biased.spike_frames
    logp = post.logp.copy()
    if len(frames):
        rows = linear(biased.h_e[frames], w.get("ctc_head.w"), w.get("ctc_head.b"))
        logp[frames] = log_softmax(rows)
    return PosteriorMatrix(logp, post.blank_id)
