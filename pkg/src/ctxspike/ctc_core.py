"""CTC lattice algorithms: spike detection, forced alignment, forward
scoring and prefix beam search with an optional external scorer."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

NEG_INF = float("-inf")


class AlignmentInfeasible(ValueError):
    """The label needs more frames than the posterior provides."""


@dataclass
class PosteriorMatrix:
    """T x V matrix of log scores.

    ``frames`` maps each row back to an original frame index; it is only
    set for spike-indexed matrices such as the context decoder output.
    """

    logp: np.ndarray
    blank_id: int = 0
    frames: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.logp = np.asarray(self.logp, dtype=np.float64)
        if self.logp.ndim != 2:
            raise ValueError(f"posterior must be T x V, got shape {self.logp.shape}")
        if np.any(np.isnan(self.logp)) or np.any(self.logp == np.inf):
            raise ValueError("posterior contains NaN or +inf")
        if not 0 <= self.blank_id < max(self.V, 1):
            raise ValueError(f"blank_id {self.blank_id} outside vocabulary of size {self.V}")
        if self.frames is None:
            self.frames = np.arange(self.T)
        else:
            self.frames = np.asarray(self.frames, dtype=np.int64)
            if self.frames.shape != (self.T,):
                raise ValueError("frames must carry one index per row")

    @property
    def T(self) -> int:
        return self.logp.shape[0]

    @property
    def V(self) -> int:
        return self.logp.shape[1]

    def is_normalized(self, tol: float = 1e-6) -> bool:
        if self.T == 0:
            return True
        m = self.logp.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(self.logp - m).sum(axis=1, keepdims=True))).ravel()
        return bool(np.all(np.abs(lse) <= tol))


class Spike(NamedTuple):
    frame: int
    token: int
    logp: float


@dataclass
class SpikeSequence:
    spikes: list[Spike] = field(default_factory=list)

    def __post_init__(self) -> None:
        frames = [s.frame for s in self.spikes]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("spike frames must be strictly increasing")

    def __len__(self) -> int:
        return len(self.spikes)

    def __iter__(self):
        return iter(self.spikes)

    def __getitem__(self, i):
        return self.spikes[i]

    @property
    def frames(self) -> list[int]:
        return [s.frame for s in self.spikes]

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.spikes]


def collapse(path: Sequence[int], blank_id: int = 0) -> list[int]:
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != blank_id:
            out.append(int(tok))
        prev = tok
    return out


def greedy_spikes(post: PosteriorMatrix) -> SpikeSequence:
    best = np.argmax(post.logp, axis=1) if post.T else np.zeros(0, dtype=int)
    spikes = []
    prev = None
    for t, tok in enumerate(best):
        tok = int(tok)
        if tok != post.blank_id and tok != prev:
            spikes.append(Spike(int(post.frames[t]), tok, float(post.logp[t, tok])))
        prev = tok
    return SpikeSequence(spikes)


def _extended(label: Sequence[int], blank_id: int) -> list[int]:
    ext = [blank_id]
    for tok in label:
        ext += [int(tok), blank_id]
    return ext


def min_frames(label: Sequence[int]) -> int:
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def _check_label(post: PosteriorMatrix, label: Sequence[int]) -> None:
    for tok in label:
        if tok == post.blank_id:
            raise ValueError("label must not contain the blank token")
        if not 0 <= tok < post.V:
            raise ValueError(f"label token {tok} outside vocabulary")


def viterbi_align(post: PosteriorMatrix, label: Sequence[int]):
    """Best CTC alignment of ``label``.

    Returns ``(path, spikes, log_score)``; ``path`` holds one token per frame.
    """
    label = [int(t) for t in label]
    _check_label(post, label)
    T = post.T
    if min_frames(label) > T:
        raise AlignmentInfeasible(
            f"label of length {len(label)} needs {min_frames(label)} frames, posterior has {T}"
        )
    blank = post.blank_id
    if not label:
        path = [blank] * T
        return path, SpikeSequence([]), float(post.logp[:, blank].sum())

    ext = _extended(label, blank)
    S = len(ext)
    lp = post.logp
    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    delta[0, 0] = lp[0, ext[0]]
    delta[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            best, arg = delta[t - 1, s], s
            if s >= 1 and delta[t - 1, s - 1] > best:
                best, arg = delta[t - 1, s - 1], s - 1
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2] and delta[t - 1, s - 2] > best:
                best, arg = delta[t - 1, s - 2], s - 2
            if best > NEG_INF:
                delta[t, s] = best + lp[t, ext[s]]
                back[t, s] = arg
    if delta[T - 1, S - 1] >= delta[T - 1, S - 2]:
        s = S - 1
    else:
        s = S - 2
    score = float(delta[T - 1, s])
    states = [0] * T
    for t in range(T - 1, -1, -1):
        states[t] = s
        s = back[t, s]
    path = [ext[s] for s in states]

    # one spike per label position: highest-posterior frame of its span
    spikes = []
    for k, tok in enumerate(label):
        span = [t for t in range(T) if states[t] == 2 * k + 1]
        frame = max(span, key=lambda t: (lp[t, tok], -t))
        spikes.append(Spike(int(post.frames[frame]), tok, float(lp[frame, tok])))
    return path, SpikeSequence(spikes), score


def ctc_forward(post: PosteriorMatrix, label: Sequence[int]) -> float:
    """Log of the total probability of ``label`` over all CTC alignments.

    Infeasible labels give ``-inf`` (logged at debug level).
    """
    label = [int(t) for t in label]
    _check_label(post, label)
    T = post.T
    blank = post.blank_id
    if min_frames(label) > T:
        log.debug("ctc_forward: label needs %d frames, have %d", min_frames(label), T)
        return NEG_INF
    if T == 0:
        return 0.0
    ext = _extended(label, blank)
    S = len(ext)
    lp = post.logp
    alpha = np.full(S, NEG_INF)
    alpha[0] = lp[0, ext[0]]
    if S > 1:
        alpha[1] = lp[0, ext[1]]
    skip = np.array(
        [s >= 2 and ext[s] != blank and ext[s] != ext[s - 2] for s in range(S)]
    )
    emit_idx = np.array(ext)
    for t in range(1, T):
        prev = alpha
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        two = np.full(S, NEG_INF)
        two[2:] = prev[:-2]
        a = np.where(skip, np.logaddexp(a, two), a)
        alpha = a + lp[t, emit_idx]
    if S == 1:
        return float(alpha[0])
    return float(np.logaddexp(alpha[-1], alpha[-2]))


class ExternalScorer(Protocol):
    """Incremental scorer consulted on every non-blank extension."""

    def initial_state(self) -> Any: ...

    def step(self, state: Any, token: int) -> tuple[Any, float]: ...

    def finalize(self, state: Any) -> float: ...


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score_ctc: float
    score_external: float = 0.0
    scorer_state: Any = None
    weight: float = 0.0

    @property
    def score(self) -> float:
        if self.weight == 0.0:
            return self.score_ctc
        return self.score_ctc + self.weight * self.score_external


def _rank(entries):
    return sorted(entries, key=lambda h: (-h.score, h.tokens))


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def prefix_beam_search(
    post: PosteriorMatrix,
    beam: int = 10,
    scorer: ExternalScorer | None = None,
    weight: float = 1.0,
    token_topk: int | None = None,
) -> list[Hypothesis]:
    """CTC prefix beam search.

    Every prefix keeps separate blank-ending and non-blank-ending log
    probabilities. When a scorer is given, it is stepped on each new
    non-blank token and ``weight`` times its delta joins the ranking score;
    ``scorer.finalize`` is applied once after the last frame. ``token_topk``
    restricts the candidate tokens per frame to the best-scoring ones
    (``None`` tries every token).
    """
    if beam < 1:
        raise ValueError("beam must be at least 1")
    blank = post.blank_id
    V = post.V
    use_scorer = scorer is not None
    ext_w = weight if use_scorer else 0.0
    root_state = scorer.initial_state() if use_scorer else None
    # prefix -> [p_blank, p_nonblank, external, scorer_state]
    beams: dict[tuple[int, ...], list] = {(): [0.0, NEG_INF, 0.0, root_state]}

    for t in range(post.T):
        row_arr = post.logp[t]
        row = row_arr.tolist()
        if token_topk is not None and token_topk < V:
            cand = np.argpartition(-row_arr, token_topk - 1)[:token_topk].tolist()
            cand = sorted(set(cand) - {blank})
        else:
            cand = [v for v in range(V) if v != blank]
        p_blank = row[blank]
        nxt: dict[tuple[int, ...], list] = {}
        for prefix, (pb, pnb, ext, state) in beams.items():
            ptot = _lae(pb, pnb)
            e = nxt.get(prefix)
            if e is None:
                e = nxt[prefix] = [NEG_INF, NEG_INF, ext, state]
            e[0] = _lae(e[0], ptot + p_blank)
            last = prefix[-1] if prefix else None
            if last is not None:
                e[1] = _lae(e[1], pnb + row[last])
            for v in cand:
                new = prefix + (v,)
                p = (pb if v == last else ptot) + row[v]
                e2 = nxt.get(new)
                if e2 is None:
                    if use_scorer:
                        st, delta = scorer.step(state, v)
                        nxt[new] = [NEG_INF, p, ext + delta, st]
                    else:
                        nxt[new] = [NEG_INF, p, 0.0, None]
                else:
                    e2[1] = _lae(e2[1], p)
        if len(nxt) > beam:
            keyed = [(-(_lae(e[0], e[1]) + ext_w * e[2]), k) for k, e in nxt.items()]
            beams = {k: nxt[k] for _, k in heapq.nsmallest(beam, keyed)}
        else:
            beams = nxt

    hyps = []
    for prefix, (pb, pnb, ext, state) in beams.items():
        if use_scorer:
            ext = ext + scorer.finalize(state)
        hyps.append(Hypothesis(prefix, _lae(pb, pnb), float(ext), state, ext_w))
    return _rank(hyps)
