"""Character error rates split into biased and unbiased populations.

Reference characters covered by any occurrence of a biasing phrase are
*biased*; the rest are *unbiased*. Substitutions and deletions go to the
class of their reference position. A maximal run of inserted characters
counts as biased only when the run is exactly one of the biasing phrases.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, NamedTuple, Sequence

log = logging.getLogger(__name__)

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


class EditOp(NamedTuple):
    op: str
    ref_pos: int | None
    hyp_pos: int | None


def align(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> list[EditOp]:
    """Minimal unit-cost alignment.

    Backtracking from the end prefers match, then substitution, deletion,
    insertion whenever several moves are optimal.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (0 if ri == hyp[j - 1] else 1)
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if same and d[i][j] == d[i - 1][j - 1]:
                ops.append(EditOp(MATCH, i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
            if not same and d[i][j] == d[i - 1][j - 1] + 1:
                ops.append(EditOp(SUB, i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append(EditOp(DEL, i - 1, None))
            i -= 1
            continue
        ops.append(EditOp(INS, None, j - 1))
        j -= 1
    ops.reverse()
    return ops


def edit_distance(ops: Sequence[EditOp]) -> int:
    return sum(op.op != MATCH for op in ops)


def tag_bias_regions(ref: Sequence[Hashable], phrases) -> list[bool]:
    mask = [False] * len(ref)
    ref = list(ref)
    for phrase in phrases:
        phrase = list(phrase)
        L = len(phrase)
        if L == 0:
            continue
        for start in range(len(ref) - L + 1):
            if ref[start:start + L] == phrase:
                for k in range(start, start + L):
                    mask[k] = True
    return mask


@dataclass
class ClassCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    n_ref: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.sub + other.sub, self.dele + other.dele,
                           self.ins + other.ins, self.n_ref + other.n_ref)


def _rate(errors: int, n: int) -> float:
    if n == 0:
        if errors:
            log.warning("errors attributed to an empty reference class")
            return math.inf
        return 0.0
    return errors / n


@dataclass
class EvalReport:
    biased: ClassCounts = field(default_factory=ClassCounts)
    unbiased: ClassCounts = field(default_factory=ClassCounts)
    utterances: int = 0

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.biased + other.biased, self.unbiased + other.unbiased,
                          self.utterances + other.utterances)

    @property
    def total(self) -> ClassCounts:
        return self.biased + self.unbiased

    @property
    def cer(self) -> float:
        t = self.total
        return _rate(t.errors, t.n_ref)

    @property
    def b_cer(self) -> float:
        return _rate(self.biased.errors, self.biased.n_ref)

    @property
    def u_cer(self) -> float:
        return _rate(self.unbiased.errors, self.unbiased.n_ref)

    @property
    def flagged(self) -> bool:
        return any(math.isinf(r) for r in (self.cer, self.b_cer, self.u_cer))

    def key_values(self) -> list[str]:
        lines = [f"utterances={self.utterances}",
                 f"cer={self.cer:.6f}", f"b_cer={self.b_cer:.6f}", f"u_cer={self.u_cer:.6f}"]
        for name, c in (("biased", self.biased), ("unbiased", self.unbiased)):
            lines += [f"{name}.sub={c.sub}", f"{name}.del={c.dele}",
                      f"{name}.ins={c.ins}", f"{name}.n_ref={c.n_ref}"]
        return lines

    def table(self) -> str:
        rows = [("class", "N", "S", "D", "I", "rate%")]
        for name, c, r in (("biased", self.biased, self.b_cer),
                           ("unbiased", self.unbiased, self.u_cer),
                           ("all", self.total, self.cer)):
            rows.append((name, str(c.n_ref), str(c.sub), str(c.dele), str(c.ins), f"{100 * r:.2f}"))
        widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows)


def score(ref: Sequence[Hashable], hyp: Sequence[Hashable], phrases) -> EvalReport:
    phrases = [tuple(p) for p in phrases]
    phrase_set = set(phrases)
    mask = tag_bias_regions(ref, phrases)
    report = EvalReport(utterances=1)
    report.biased.n_ref = sum(mask)
    report.unbiased.n_ref = len(ref) - report.biased.n_ref
    ops = align(ref, hyp)
    run: list[Hashable] = []

    def close_run():
        if run:
            target = report.biased if tuple(run) in phrase_set else report.unbiased
            target.ins += len(run)
            run.clear()

    for op in ops:
        if op.op == INS:
            run.append(hyp[op.hyp_pos])
            continue
        close_run()
        if op.op == MATCH:
            continue
        target = report.biased if mask[op.ref_pos] else report.unbiased
        if op.op == SUB:
            target.sub += 1
        else:
            target.dele += 1
    close_run()
    return report


def score_corpus(refs, hyps, phrases) -> EvalReport:
    total = EvalReport()
    for r, h in zip(refs, hyps, strict=True):
        total = total + score(r, h, phrases)
    return total
