"""Failure-arc keyword automaton used as the bias decoding graph.

The graph is a trie over the biasing phrases with breadth-first failure
links (longest proper suffix that is also a phrase prefix) and output sets
closed over those links, so overlapping phrases are all reported.

Two scoring modes are offered:

``commit``
    A step earns ``s`` times the total length of the phrases that end on
    it. Whole-sequence totals equal a naive count of every occurrence.
``prospective``
    Credit is paid one token at a time while a phrase prefix is being
    followed, and taken back when a failure arc abandons it. Completed
    phrases are banked, so after the final forced failure the total agrees
    with commit mode; the difference is only *when* the credit arrives.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

COMMIT = "commit"
PROSPECTIVE = "prospective"
ROOT = 0


@dataclass(frozen=True)
class GraphStep:
    new_state: int
    score_delta: float
    matches: tuple[tuple[int, int], ...] = ()


@dataclass
class BiasGraph:
    phrases: list[tuple[int, ...]]
    s: float = 1.0
    blank_id: int = 0
    goto: list[dict[int, int]] = field(default_factory=list)
    fail: list[int] = field(default_factory=list)
    depth: list[int] = field(default_factory=list)
    # phrase ids whose full token path ends exactly at the node
    terminal: list[tuple[int, ...]] = field(default_factory=list)
    outputs: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def num_states(self) -> int:
        return len(self.goto)

    def _check(self, state: int) -> None:
        if not 0 <= state < len(self.goto):
            raise ValueError(f"unknown graph state {state}")

    def is_end(self, state: int) -> bool:
        return bool(self.terminal[state])

    def potential(self, state: int) -> float:
        """Unbanked prospective credit held by ``state``."""
        return 0.0 if self.terminal[state] else self.s * self.depth[state]

    def transition(self, state: int, token: int) -> int:
        while state != ROOT and token not in self.goto[state]:
            state = self.fail[state]
        return self.goto[state].get(token, ROOT)

    def allowed_tokens(self, state: int) -> set[int]:
        """Tokens that leave ``state`` through a goto arc (after any failure hops)."""
        toks = set()
        while True:
            toks.update(self.goto[state])
            if state == ROOT:
                return toks
            state = self.fail[state]

    def commit_score(self, state: int) -> float:
        return self.s * sum(len(self.phrases[p]) for p in self.outputs[state])

    def step(self, state: int, token: int, mode: str = COMMIT) -> GraphStep:
        self._check(state)
        if token == self.blank_id:
            return GraphStep(state, 0.0)
        new = self.transition(state, token)
        matches = tuple((p, len(self.phrases[p])) for p in self.outputs[new])
        gain = self.commit_score(new)
        if mode == COMMIT:
            delta = gain
        elif mode == PROSPECTIVE:
            delta = gain + self.potential(new) - self.potential(state)
        else:
            raise ValueError(f"unknown scoring mode {mode!r}")
        return GraphStep(new, delta, matches)

    def final_delta(self, state: int, mode: str = PROSPECTIVE) -> float:
        """Score change of the forced failure back to the root."""
        self._check(state)
        return -self.potential(state) if mode == PROSPECTIVE else 0.0


def build_graph(phrases: Sequence[Sequence[int]], s: float = 1.0, blank_id: int = 0) -> BiasGraph:
    """Build the automaton for ``phrases`` (blank entry excluded).

    Duplicate phrases are merged; phrase ids index ``graph.phrases``.
    """
    phrases = list(dict.fromkeys(tuple(int(t) for t in p) for p in phrases))
    for p in phrases:
        if not p:
            raise ValueError("empty phrase in biasing list")
        if blank_id in p:
            raise ValueError(f"phrase {p} contains the blank token")
    if s < 0:
        raise ValueError("per-token score must be non-negative")
    goto: list[dict[int, int]] = [{}]
    depth = [0]
    terminal: list[list[int]] = [[]]
    for pid, phrase in enumerate(phrases):
        node = ROOT
        for tok in phrase:
            nxt = goto[node].get(tok)
            if nxt is None:
                nxt = len(goto)
                goto[node][tok] = nxt
                goto.append({})
                depth.append(depth[node] + 1)
                terminal.append([])
            node = nxt
        terminal[node].append(pid)

    fail = [ROOT] * len(goto)
    outputs: list[tuple[int, ...]] = [()] * len(goto)
    queue = deque()
    for child in goto[ROOT].values():
        queue.append(child)
    order = []
    while queue:
        node = queue.popleft()
        order.append(node)
        for tok, child in sorted(goto[node].items()):
            f = fail[node]
            while f != ROOT and tok not in goto[f]:
                f = fail[f]
            target = goto[f].get(tok, ROOT)
            fail[child] = ROOT if target == child else target
            queue.append(child)
    for node in order:
        outputs[node] = tuple(sorted(set(terminal[node]) | set(outputs[fail[node]])))

    return BiasGraph(
        phrases=phrases,
        s=float(s),
        blank_id=blank_id,
        goto=goto,
        fail=fail,
        depth=depth,
        terminal=[tuple(t) for t in terminal],
        outputs=outputs,
    )


def score_sequence(g: BiasGraph, tokens: Sequence[int], mode: str = COMMIT):
    """Fold ``step`` over ``tokens`` from the root.

    Returns ``(total, matches)`` where matches are (phrase id, end position)
    pairs. Prospective mode ends with a forced failure so unfinished
    prefixes earn nothing.
    """
    state = ROOT
    total = 0.0
    found = []
    for pos, tok in enumerate(tokens):
        st = g.step(state, int(tok), mode)
        total += st.score_delta
        found.extend((pid, pos) for pid, _ in st.matches)
        state = st.new_state
    if mode == PROSPECTIVE:
        total += g.final_delta(state, mode)
    return total, found
