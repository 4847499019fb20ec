"""Explicit biasing through the bias decoding graph.

A beam search runs over the context decoder's spike posteriors. Paths may
only emit tokens reachable through goto arcs, so every non-blank token is
part of a phrase being followed. Tokens of phrases that a surviving path
completes are then boosted by a fixed score in the ASR lattice, once per
(frame, token) no matter how many paths agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bias_graph import PROSPECTIVE, ROOT, BiasGraph
from .ctc_core import PosteriorMatrix
from .context_bias import ContractError


@dataclass
class BiasPath:
    choices: tuple[int, ...]
    states: tuple[int, ...]
    score: float
    # (phrase id, spike indices of its tokens)
    completed_matches: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)


@dataclass
class BiasApplication:
    cells: set[tuple[int, int]]
    bias_score: float

    def __len__(self) -> int:
        return len(self.cells)


def context_beam_search(ctx_post: PosteriorMatrix, g: BiasGraph, beam: int = 10) -> list[BiasPath]:
    """Ranked paths through the graph driven by context-decoder posteriors.

    Path score is the summed context log-posterior of the chosen tokens
    plus the graph score (prospective during the search; a forced failure
    at the end removes credit of unfinished prefixes).
    """
    if beam < 1:
        raise ValueError("beam must be at least 1")
    U = ctx_post.T
    if U == 0:
        return []
    blank = ctx_post.blank_id
    lp = ctx_post.logp
    allowed_cache: dict[int, list[int]] = {}
    steps: dict[tuple[int, int], object] = {}
    # entry: (score, choices, states, emitted[(spike, token)], matches)
    paths = [(0.0, (), (), (), ())]
    for u in range(U):
        row = lp[u]
        nxt = []
        for score, choices, states, emitted, matches in paths:
            state = states[-1] if states else ROOT
            nxt.append((score + row[blank], choices + (blank,), states + (state,), emitted, matches))
            allowed = allowed_cache.get(state)
            if allowed is None:
                allowed = allowed_cache[state] = sorted(
                    t for t in g.allowed_tokens(state) if t < ctx_post.V)
            for tok in allowed:
                st = steps.get((state, tok))
                if st is None:
                    st = steps[(state, tok)] = g.step(state, tok, PROSPECTIVE)
                em = emitted + ((u, tok),)
                ms = matches
                for pid, length in st.matches:
                    ms = ms + ((pid, tuple(s for s, _ in em[-length:])),)
                nxt.append((score + row[tok] + st.score_delta, choices + (tok,),
                            states + (st.new_state,), em, ms))
        nxt.sort(key=lambda e: (-e[0], e[1]))
        paths = nxt[:beam]

    out = []
    for score, choices, states, _, matches in paths:
        final = score + g.final_delta(states[-1], PROSPECTIVE)
        out.append(BiasPath(choices, states, float(final), list(matches)))
    out.sort(key=lambda p: (-p.score, p.choices))
    return out


def collect_bias_applications(paths, top_k: int | None, b: float, frames) -> BiasApplication:
    """Union of (frame, token) cells inside completed phrases of the top paths.

    ``frames`` maps spike positions to frame indices; ``top_k=None`` uses
    every path given.
    """
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be at least 1")
    frames = np.asarray(frames, dtype=np.int64)
    cells: set[tuple[int, int]] = set()
    for path in paths[:top_k] if top_k is not None else paths:
        for _, spans in path.completed_matches:
            for u in spans:
                cells.add((int(frames[u]), int(path.choices[u])))
    return BiasApplication(cells, float(b))


def apply_bias(post: PosteriorMatrix, app: BiasApplication) -> PosteriorMatrix:
    """Add the bias score to each application cell; rows are not renormalized."""
    logp = post.logp.copy()
    for frame, tok in sorted(app.cells):
        if not (0 <= frame < post.T and 0 <= tok < post.V):
            raise ContractError(f"bias cell ({frame}, {tok}) outside {post.T}x{post.V} lattice")
        logp[frame, tok] += app.bias_score
    return PosteriorMatrix(logp, post.blank_id, post.frames)
