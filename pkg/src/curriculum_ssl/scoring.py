"""Pseudo-label quality scores and edit-distance metrics."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .ctc import BLANK, FramePath, greedy_decode
from .errors import EmptyReference, NegativeLambda


class CSVariant(str, Enum):
    """Which frame of each non-blank run contributes to the confidence score."""

    FIRST = "first"
    MEAN = "mean"
    MAX = "max"


@dataclass(frozen=True)
class ScoredPL:
    pl: tuple
    cs: float
    crs: float
    perturbed_pl: tuple
    perturbed_cs: float


def _runs(tokens: np.ndarray):
    """Yield (start, stop, token) for maximal runs of identical ids."""
    n = len(tokens)
    start = 0
    for i in range(1, n + 1):
        if i == n or tokens[i] != tokens[start]:
            yield start, i, int(tokens[start])
            start = i


def confidence_score(post, path: FramePath | None = None, variant=CSVariant.FIRST) -> float:
    """Mean probability over the non-blank runs of the greedy path.

    With the default variant each run contributes the probability of its first
    frame, since that frame is where the CTC state transition happens. Blank
    runs never survive collapse and are left out. An empty pseudo label scores
    0.0.
    """
    if path is None:
        _, path = greedy_decode(post)
    variant = CSVariant(variant)
    vals = []
    for start, stop, tok in _runs(path.tokens):
        if tok == BLANK:
            continue
        run = path.probs[start:stop]
        if variant is CSVariant.FIRST:
            vals.append(run[0])
        elif variant is CSVariant.MEAN:
            vals.append(run.mean())
        else:
            vals.append(run.max())
    if not vals:
        return 0.0
    return float(np.mean(vals))


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def crs(cs_clean: float, pl_clean: Sequence, cs_perturbed: float, pl_perturbed: Sequence,
        lam: float = 1.0) -> float:
    """Confidence-robustness score.

    Average of the clean and perturbed confidence scores minus ``lam`` times
    the edit distance between the two pseudo labels, normalised by the clean
    label length. An empty clean label normalises by ``max(1, len(perturbed))``
    instead.
    """
    if lam < 0:
        raise NegativeLambda(f"lambda must be >= 0, got {lam}")
    denom = len(pl_clean) if len(pl_clean) > 0 else max(1, len(pl_perturbed))
    dist = levenshtein(pl_clean, pl_perturbed)
    return (cs_clean + cs_perturbed) / 2.0 - lam * dist / denom


def score_pl(post_clean, post_perturbed, lam=1.0, variant=CSVariant.FIRST) -> ScoredPL:
    pl, path = greedy_decode(post_clean)
    ppl, ppath = greedy_decode(post_perturbed)
    cs = confidence_score(post_clean, path, variant)
    pcs = confidence_score(post_perturbed, ppath, variant)
    return ScoredPL(pl=pl, cs=cs, crs=crs(cs, pl, pcs, ppl, lam), perturbed_pl=ppl, perturbed_cs=pcs)


def token_error_rate(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise EmptyReference("token error rate needs a non-empty reference")
    return levenshtein(hyp, ref) / len(ref)


def corpus_ter(pairs: Iterable[tuple]) -> float:
    """Corpus-level TER: summed distances over summed reference lengths."""
    dist = 0
    total = 0
    for hyp, ref in pairs:
        dist += levenshtein(hyp, ref)
        total += len(ref)
    if total == 0:
        raise EmptyReference("corpus has no reference tokens")
    return dist / total
