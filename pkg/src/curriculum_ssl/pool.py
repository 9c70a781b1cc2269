"""Temporary pseudo-label pool and the curriculum schedule that sizes it."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .scoring import token_error_rate
from .errors import EmptyCorpus, Exhausted, InvalidStageCount, IterOutOfRange


def stage_durations(n_stages: int, total_iters: int) -> list[int]:
    """Iterations per curriculum stage, proportional to the stage index.

    Stage k gets ``round(k / sum(1..K) * F)`` iterations; the final stage
    absorbs the rounding remainder so the durations sum to F exactly.
    """
    if n_stages < 1 or total_iters < n_stages:
        raise InvalidStageCount(f"need 1 <= K <= F, got K={n_stages}, F={total_iters}")
    denom = n_stages * (n_stages + 1) // 2
    # half-up rounding in exact integer arithmetic
    head = [(2 * k * total_iters + denom) // (2 * denom) for k in range(1, n_stages)]
    last = total_iters - sum(head)
    if last < 0:
        raise InvalidStageCount(f"K={n_stages} too large for F={total_iters}")
    return head + [last]


@dataclass(frozen=True)
class CurriculumSchedule:
    n_stages: int
    total_iters: int
    durations: tuple
    boundaries: tuple

    @classmethod
    def build(cls, n_stages: int, total_iters: int) -> "CurriculumSchedule":
        d = stage_durations(n_stages, total_iters)
        return cls(n_stages, total_iters, tuple(d), tuple(int(b) for b in np.cumsum(d)))


def current_stage(it: int, sched: CurriculumSchedule) -> int:
    """1-based stage containing SSL iteration ``it``."""
    if not 0 <= it < sched.total_iters:
        raise IterOutOfRange(f"iteration {it} outside [0, {sched.total_iters})")
    for k, bound in enumerate(sched.boundaries, 1):
        if it < bound:
            return k
    raise AssertionError("unreachable")


def eta(k: int, n_stages: int, count: int) -> int:
    """Entries kept at stage k: ``floor(k/K * count)``, at least one."""
    if not 1 <= k <= n_stages:
        raise ValueError(f"stage {k} outside [1, {n_stages}]")
    if count < 1:
        raise ValueError("pool entry count must be >= 1")
    return max(1, (k * count) // n_stages)


@dataclass
class PoolEntry:
    utt_id: str
    features: np.ndarray
    pl: tuple
    score: float
    cs: float
    true_ref: tuple = ()
    true_error: float = float("nan")
    crs: float = float("nan")


def _score_key(e: PoolEntry):
    return (-e.score, e.utt_id)


def sort_by_score(entries: Sequence[PoolEntry]) -> list[PoolEntry]:
    """Descending score, ties broken by ascending utt_id."""
    return sorted(entries, key=_score_key)


def curriculum_select(entries: Sequence[PoolEntry], k: int, n_stages: int) -> list[PoolEntry]:
    ranked = sort_by_score(entries)
    return ranked[: eta(k, n_stages, len(ranked))]


def threshold_select(entries: Sequence[PoolEntry], tau: float) -> list[PoolEntry]:
    """Keep entries with confidence score >= tau, best first."""
    return sort_by_score([e for e in entries if e.cs >= tau])


def oracle_select(entries: Sequence[PoolEntry], k: int, n_stages: int) -> list[PoolEntry]:
    """Curriculum selection ordered by the true pseudo-label error."""
    ranked = sorted(entries, key=lambda e: (e.true_error, e.utt_id))
    return ranked[: eta(k, n_stages, len(ranked))]


class EpochSampler:
    """Draws ids without replacement, reshuffling once the corpus is used up."""

    def __init__(self, ids: Sequence[str], rng: np.random.Generator):
        if len(ids) == 0:
            raise EmptyCorpus("unlabeled corpus is empty")
        self.ids = list(ids)
        self.rng = rng
        self.epoch = 0
        self._order: list[str] = []
        self._pos = 0

    def draw(self, n: int) -> list[str]:
        if self._pos >= len(self._order):
            perm = self.rng.permutation(len(self.ids))
            self._order = [self.ids[i] for i in perm]
            self._pos = 0
            self.epoch += 1
        out = self._order[self._pos : self._pos + n]
        self._pos += len(out)
        return out


SELECTION_KINDS = ("curriculum", "threshold", "full", "oracle")

# scorer(list of (utt_id, features)) -> list of (pl, cs, crs)
Scorer = Callable[[Sequence[tuple]], Sequence[tuple]]


class PLPool:
    """Capacity-limited pool of scored pseudo labels, consumed in order.

    ``capacity`` counts batches of ``batch_size`` unlabeled utterances.
    ``selection`` picks how the drawn entries are ranked and truncated:
    ``curriculum`` (top eta_k by score), ``threshold`` (cs >= tau),
    ``full`` (everything, in draw order) or ``oracle`` (top eta_k by true
    error).
    """

    def __init__(self, capacity: int, batch_size: int, n_stages: int = 1, selection="curriculum",
                 score_key="cs", tau: float = 0.95, rng: Optional[np.random.Generator] = None):
        if capacity < 1 or batch_size < 1:
            raise ValueError("capacity and batch_size must be >= 1")
        if selection not in SELECTION_KINDS:
            raise ValueError(f"unknown selection {selection!r}")
        if score_key not in ("cs", "crs"):
            raise ValueError(f"unknown score key {score_key!r}")
        self.capacity = capacity
        self.batch_size = batch_size
        self.n_stages = n_stages
        self.selection = selection
        self.score_key = score_key
        self.tau = tau
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.sampler: Optional[EpochSampler] = None
        self.drawn: list[PoolEntry] = []
        self.entries: list[PoolEntry] = []
        self.cursor = 0
        self.stage = 1
        self.refills = 0

    @property
    def entry_capacity(self) -> int:
        return self.capacity * self.batch_size

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.entries)

    def refill(self, corpus, scorer: Scorer, stage: int) -> list[PoolEntry]:
        """Empty the pool, draw the next chunk, score it and select entries.

        ``corpus`` must offer ``ids``, ``features(utt_id)`` and
        ``oracle_transcript(utt_id)``. The transcript is only stored for
        diagnostics and the oracle ordering.
        """
        if self.sampler is None:
            self.sampler = EpochSampler(corpus.ids, self.rng)
        ids = sorted(self.sampler.draw(self.entry_capacity))
        feats = [corpus.features(u) for u in ids]
        scored = scorer(list(zip(ids, feats)))
        drawn = []
        for uid, f, (pl, cs, crs_val) in zip(ids, feats, scored):
            ref = tuple(corpus.oracle_transcript(uid))
            score = cs if self.score_key == "cs" else crs_val
            if len(pl) == 0:
                score = -math.inf
            drawn.append(PoolEntry(uid, f, tuple(pl), float(score), float(cs), ref,
                                   token_error_rate(pl, ref) if ref else float("nan"), float(crs_val)))
        self.drawn = drawn
        self.stage = stage
        if self.selection == "curriculum":
            self.entries = curriculum_select(drawn, stage, self.n_stages)
        elif self.selection == "oracle":
            self.entries = oracle_select(drawn, stage, self.n_stages)
        elif self.selection == "threshold":
            self.entries = threshold_select(drawn, self.tau)
        else:
            order = {u: i for i, u in enumerate(self.sampler._order)}
            self.entries = sorted(drawn, key=lambda e: order[e.utt_id])
        self.cursor = 0
        self.refills += 1
        return self.entries

    def next_batch(self, batch_size: Optional[int] = None) -> list[PoolEntry]:
        """Next entries in selection order; entries with empty labels are skipped."""
        if self.exhausted:
            raise Exhausted()
        n = batch_size or self.batch_size
        batch = self.entries[self.cursor : self.cursor + n]
        self.cursor += len(batch)
        return [e for e in batch if len(e.pl) > 0]

    def dump_records(self) -> list[dict]:
        selected = {e.utt_id for e in self.entries}
        return [
            {
                "utt_id": e.utt_id,
                "score": e.score if math.isfinite(e.score) else None,
                "pl_length": len(e.pl),
                "true_error": e.true_error,
                "selected": e.utt_id in selected,
            }
            for e in sort_by_score(self.drawn)
        ]
