"""Training-data augmentation: phrase sampling, distractors, homophone swaps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

N_SAMPLED = 3
MIN_LEN, MAX_LEN = 2, 6
MAX_DISTRACTORS = 5


@dataclass
class HomophoneLexicon:
    entries: dict[int, list[int]]

    def __post_init__(self) -> None:
        for tok, alts in self.entries.items():
            if tok in alts:
                raise ValueError(f"token {tok} lists itself as a homophone")

    def validate(self, vocab_size: int) -> None:
        for tok, alts in self.entries.items():
            bad = [t for t in [tok, *alts] if not 0 <= t < vocab_size]
            if bad:
                raise ValueError(f"lexicon ids {bad} outside vocabulary of size {vocab_size}")

    def __contains__(self, tok: int) -> bool:
        return bool(self.entries.get(tok))


@dataclass
class AugmentedExample:
    transcript: list[int]
    biasing_list: list[tuple[int, ...]]
    phrase_occurrences: list[tuple[int, int]]
    # (phrase index, position in phrase, old token, new token)
    replacement_log: list[tuple[int, int, int, int]] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def sampled(self) -> list[tuple[int, ...]]:
        return self.biasing_list[:len(self.phrase_occurrences)]


def sample_phrases(transcript: Sequence[int], rng: np.random.Generator,
                   n: int = N_SAMPLED) -> list[tuple[int, int]]:
    """``n`` random substrings as (start, length); lengths uniform in [2, min(6, len)]."""
    T = len(transcript)
    if T < MIN_LEN:
        log.warning("transcript of length %d is too short to sample phrases", T)
        return []
    occ = []
    for _ in range(n):
        length = int(rng.integers(MIN_LEN, min(MAX_LEN, T) + 1))
        start = int(rng.integers(0, T - length + 1))
        occ.append((start, length))
    return occ


def add_distractors(phrases: Sequence[tuple[int, ...]], pool: Sequence[tuple[int, ...]],
                    rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Append between 0 and 5 distinct phrases drawn from ``pool``."""
    out = [tuple(p) for p in phrases]
    distinct = list(dict.fromkeys(tuple(p) for p in pool))
    k = int(rng.integers(0, MAX_DISTRACTORS + 1))
    k = min(k, len(distinct))
    if k:
        picks = rng.choice(len(distinct), size=k, replace=False)
        out.extend(distinct[i] for i in sorted(int(i) for i in picks))
    return out


def homophone_replace(example: AugmentedExample, lexicon: HomophoneLexicon, prob: float,
                      rng: np.random.Generator) -> AugmentedExample:
    """Swap one token per sampled phrase (with probability ``prob``) for a homophone.

    The swap is written into the transcript, so overlapping sampled phrases
    see it too; phrases are re-read from their spans afterwards.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must lie in [0, 1], got {prob}")
    transcript = list(example.transcript)
    replacements = list(example.replacement_log)
    skipped = list(example.skipped)
    for idx, (start, length) in enumerate(example.phrase_occurrences):
        if rng.random() >= prob:
            continue
        positions = [i for i in range(length) if transcript[start + i] in lexicon]
        if not positions:
            skipped.append(idx)
            log.debug("phrase %d has no replaceable token", idx)
            continue
        i = positions[int(rng.integers(len(positions)))]
        old = transcript[start + i]
        alts = lexicon.entries[old]
        new = int(alts[int(rng.integers(len(alts)))])
        transcript[start + i] = new
        replacements.append((idx, i, old, new))
    sampled = [tuple(transcript[s:s + n]) for s, n in example.phrase_occurrences]
    extra = example.biasing_list[len(example.phrase_occurrences):]
    return AugmentedExample(transcript, sampled + list(extra),
                            list(example.phrase_occurrences), replacements, skipped)


def augment_utterance(transcript: Sequence[int], pool: Sequence[tuple[int, ...]],
                      lexicon: HomophoneLexicon | None, prob: float,
                      rng: np.random.Generator) -> AugmentedExample:
    occ = sample_phrases(transcript, rng)
    sampled = [tuple(transcript[s:s + n]) for s, n in occ]
    ex = AugmentedExample(list(transcript), add_distractors(sampled, pool, rng), occ)
    if lexicon is not None and prob > 0:
        ex = homophone_replace(ex, lexicon, prob, rng)
    return ex
