"""Two-stage contextual phrase filtering on emitting-frame posteriors.

Stage 1 scores each phrase with the phrase score confidence (PSC): the
per-token best log-posterior inside a sliding window, averaged over the
phrase, ignoring order. Survivors are rescored with the sequence order
confidence (SOC), a monotone alignment DP over the same windows. A
mismatch penalty ``p`` floors every token score and prices insertions and
deletions; with ``penalty_enabled=False`` scores use raw posteriors and
the alignment must place every token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .context_bias import BiasingList, ContractError
from .ctc_core import PosteriorMatrix, SpikeSequence

NEG_INF = float("-inf")


@dataclass(frozen=True)
class FilterConfig:
    q: float = -6.0
    p: float = -12.0
    window_factor: float = 1.5
    stage2_enabled: bool = True
    penalty_enabled: bool = True
    emitting_only: bool = True

    def __post_init__(self) -> None:
        if self.penalty_enabled and not self.p < self.q < 0:
            raise ValueError(f"expected p < q < 0, got p={self.p}, q={self.q}")
        if self.window_factor < 1.0:
            raise ValueError("window_factor must be at least 1")

    @property
    def floor(self) -> float:
        return self.p if self.penalty_enabled else NEG_INF

    @classmethod
    def vanilla(cls, q: float = -6.0) -> "FilterConfig":
        """All frames, no penalty: the reconstruction of the unimproved filter."""
        return cls(q=q, p=2 * q, penalty_enabled=False, emitting_only=False)


@dataclass
class PhraseScore:
    phrase: tuple[int, ...]
    psc: float
    soc: float | None
    kept: bool


@dataclass
class FilterReport:
    scores: list[PhraseScore] = field(default_factory=list)
    blank_id: int = 0

    @property
    def kept(self) -> BiasingList:
        return BiasingList.from_phrases([s.phrase for s in self.scores if s.kept], self.blank_id)


def emit_rows(post: PosteriorMatrix, spikes: SpikeSequence) -> np.ndarray:
    idx = np.searchsorted(post.frames, spikes.frames) if len(spikes) else np.zeros(0, int)
    return post.logp[idx]


def window_length(L: int, window_factor: float) -> int:
    return max(L, math.ceil(window_factor * L))


def windows(U: int, W: int):
    if U <= W:
        yield 0, U
        return
    for start in range(U - W + 1):
        yield start, start + W


def _check(phrase) -> tuple[int, ...]:
    phrase = tuple(int(t) for t in phrase)
    if not phrase:
        raise ContractError("empty phrase")
    return phrase


def _psc_batch(rows: np.ndarray, phrases: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    """PSC of every row of ``phrases`` (N x L, one shared length) over ``rows``."""
    L = phrases.shape[1]
    W = window_length(L, cfg.window_factor)
    if rows.shape[0] <= W:
        best = rows.max(axis=0, keepdims=True)
    else:
        best = sliding_window_view(rows, W, axis=0).max(axis=2)
    per_tok = np.maximum(best[:, phrases], cfg.floor)  # windows x N x L
    return (per_tok.sum(axis=2) / L).max(axis=0)


def psc(rows: np.ndarray, phrase: Sequence[int], cfg: FilterConfig) -> float:
    phrase = _check(phrase)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        return cfg.floor
    return float(_psc_batch(rows, np.array([phrase]), cfg)[0])


def _penalty(n: int, floor: float) -> float:
    return 0.0 if n == 0 else n * floor


def _soc_windows(blocks: np.ndarray, floor: float) -> np.ndarray:
    """Best monotone alignment score of a phrase over each of ``blocks`` (B x W x L).

    Mapped tokens score max(posterior, floor); each skipped token and each
    skipped row strictly between mapped rows costs ``floor``.
    """
    B, W, L = blocks.shape
    if W == 0:
        return np.full(B, _penalty(L, floor))
    sc = np.maximum(blocks, floor)
    finite = floor > NEG_INF
    js = np.arange(W)
    # last[:, j]: tokens handled so far, the latest mapped one sits on row j
    last = np.full((B, W), NEG_INF)
    for i in range(1, L + 1):
        start = np.full((B, W), _penalty(i - 1, floor))
        if i >= 2:
            chained = np.full((B, W), NEG_INF)
            if finite:
                # last[jp] + (j - jp - 1) * floor, maximised over jp < j
                run = np.maximum.accumulate(last - (js + 1) * floor, axis=1)
                chained[:, 1:] = run[:, :-1] + js[1:] * floor
            else:
                chained[:, 1:] = last[:, :-1]
            start = np.maximum(start, chained)
        last = np.maximum(start + sc[:, :, i - 1], last + floor)
    return np.maximum(_penalty(L, floor), last.max(axis=1))


def soc(rows: np.ndarray, phrase: Sequence[int], cfg: FilterConfig) -> float:
    phrase = _check(phrase)
    rows = np.asarray(rows, dtype=np.float64)
    L = len(phrase)
    floor = cfg.floor
    U = rows.shape[0]
    if U == 0:
        return floor
    cols = rows[:, list(phrase)]
    W = window_length(L, cfg.window_factor)
    if U <= W:
        blocks = cols[None]
    else:
        blocks = sliding_window_view(cols, W, axis=0).transpose(0, 2, 1)
    return float((_soc_windows(blocks, floor) / L).max())


def filter_list(post: PosteriorMatrix, blist: BiasingList, cfg: FilterConfig = FilterConfig(),
                spikes: SpikeSequence | None = None) -> FilterReport:
    """Score every non-blank phrase and keep the confident ones.

    ``post`` must be the unbiased posterior. Spikes are detected greedily
    when not supplied.
    """
    from .ctc_core import greedy_spikes

    report = FilterReport(blank_id=blist.blank_id)
    if cfg.emitting_only:
        if spikes is None:
            spikes = greedy_spikes(post)
        rows = emit_rows(post, spikes)
    else:
        rows = post.logp
    if rows.shape[0] == 0:
        report.scores = [PhraseScore(p, NEG_INF, None, False) for p in blist.content]
        return report
    by_len: dict[int, list[int]] = {}
    for i, phrase in enumerate(blist.content):
        by_len.setdefault(len(phrase), []).append(i)
    stage1 = [0.0] * len(blist.content)
    for idx in by_len.values():
        scores = _psc_batch(rows, np.array([blist.content[i] for i in idx]), cfg)
        for i, v in zip(idx, scores.tolist()):
            stage1[i] = v
    for phrase, s1 in zip(blist.content, stage1):
        if s1 < cfg.q:
            report.scores.append(PhraseScore(phrase, s1, None, False))
            continue
        if not cfg.stage2_enabled:
            report.scores.append(PhraseScore(phrase, s1, None, True))
            continue
        s2 = s1 if len(phrase) == 1 else soc(rows, phrase, cfg)
        report.scores.append(PhraseScore(phrase, s1, s2, s2 >= cfg.q))
    return report
