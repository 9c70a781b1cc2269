import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curriculum_ssl.errors import EmptyCorpus, Exhausted, InvalidStageCount, IterOutOfRange
from curriculum_ssl.pool import (
    CurriculumSchedule,
    EpochSampler,
    PLPool,
    PoolEntry,
    current_stage,
    eta,
    oracle_select,
    sort_by_score,
    stage_durations,
    threshold_select,
)


def _reference_durations(K, F):
    # exact rational arithmetic, half-up rounding, remainder to the last stage
    total = Fraction(K * (K + 1), 2)
    head = [math.floor(Fraction(k, 1) / total * F + Fraction(1, 2)) for k in range(1, K)]
    return head + [F - sum(head)]


def test_stage_durations_known_values():
    assert stage_durations(5, 30000) == [2000, 4000, 6000, 8000, 10000]


def test_stage_durations_single_stage():
    assert stage_durations(1, 777) == [777]


def test_stage_durations_rounding():
    assert stage_durations(3, 10) == [2, 3, 5]


@pytest.mark.parametrize("K", range(1, 11))
@pytest.mark.parametrize("F", [100, 30000])
def test_stage_durations_sum_and_reference(K, F):
    d = stage_durations(K, F)
    assert sum(d) == F
    assert d == _reference_durations(K, F)
    assert all(b > a for a, b in zip(d, d[1:]))


def test_stage_durations_invalid():
    with pytest.raises(InvalidStageCount):
        stage_durations(0, 10)
    with pytest.raises(InvalidStageCount):
        stage_durations(5, 4)


def test_current_stage():
    sched = CurriculumSchedule.build(5, 30000)
    assert current_stage(0, sched) == 1
    assert current_stage(29999, sched) == 5
    assert current_stage(1999, sched) == 1
    assert current_stage(2000, sched) == 2
    with pytest.raises(IterOutOfRange):
        current_stage(30000, sched)
    with pytest.raises(IterOutOfRange):
        current_stage(-1, sched)


def test_eta():
    assert eta(5, 5, 123) == 123
    assert eta(2, 5, 100) == 40
    assert eta(1, 10, 5) == 1


@pytest.mark.parametrize("K", range(1, 11))
@pytest.mark.parametrize("count", [100, 160, 6400])
def test_epochs_per_selected_set_constant(K, count):
    d = stage_durations(K, 30000)
    ratios = [d[k - 1] / eta(k, K, count) for k in range(1, K + 1)]
    assert max(ratios) / min(ratios) - 1 < 0.05


def _entry(uid, score, cs=None, err=0.0, pl=(1,)):
    return PoolEntry(uid, np.zeros((2, 2)), pl, score, score if cs is None else cs, (1,), err)


def test_sort_ties_by_utt_id():
    entries = [_entry(u, 0.5) for u in ("c", "a", "b")]
    assert [e.utt_id for e in sort_by_score(entries)] == ["a", "b", "c"]


def test_threshold_select():
    entries = [_entry("x", 0.99), _entry("y", 0.95), _entry("z", 0.90)]
    assert [e.utt_id for e in threshold_select(entries, 0.95)] == ["x", "y"]
    assert len(threshold_select(entries, 0.0)) == 3
    assert threshold_select(entries, 1.01) == []


def test_oracle_select():
    entries = [_entry("a", 0.1, err=1.0), _entry("b", 0.2, err=0.0), _entry("c", 0.3, err=0.5)]
    kept = oracle_select(entries, 2, 3)
    assert [e.utt_id for e in kept] == ["b", "c"]
    exact = [_entry(u, 0.3, err=0.0) for u in ("q", "p", "r")]
    assert [e.utt_id for e in oracle_select(exact, 3, 3)] == ["p", "q", "r"]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40, unique=True), st.integers(1, 5))
def test_oracle_order_matches_score_order_when_score_is_negative_error(errors, K):
    entries = [_entry(f"u{i:03d}", -e, err=e) for i, e in enumerate(errors)]
    for k in range(1, K + 1):
        by_score = sort_by_score(entries)[: eta(k, K, len(entries))]
        assert [e.utt_id for e in oracle_select(entries, k, K)] == [e.utt_id for e in by_score]


class FakeCorpus:
    def __init__(self, n):
        self.ids = [f"u{i:04d}" for i in range(n)]

    def features(self, uid):
        return np.full((3, 2), int(uid[1:]), dtype=np.float32)

    def oracle_transcript(self, uid):
        return (1, 2)


def const_scorer(value):
    return lambda items: [((1, 2), value, value) for _ in items]


def id_scorer(items):
    # deterministic pseudo-random score per utterance
    return [((1,), (int(uid[1:]) * 7919 % 101) / 100, 0.0) for uid, _ in items]


def test_epoch_sampler_partial_tail_and_reshuffle():
    s = EpochSampler([str(i) for i in range(10)], np.random.default_rng(0))
    first = s.draw(4) + s.draw(4) + s.draw(4)
    assert len(first) == 10 and sorted(first) == sorted(str(i) for i in range(10))
    assert s.epoch == 1
    assert len(s.draw(4)) == 4 and s.epoch == 2
    with pytest.raises(EmptyCorpus):
        EpochSampler([], np.random.default_rng(0))


def test_refill_full_retention_covers_corpus_once():
    corpus = FakeCorpus(64)
    pool = PLPool(capacity=4, batch_size=16, n_stages=5, rng=np.random.default_rng(1))
    pool.refill(corpus, id_scorer, stage=5)
    assert sorted(e.utt_id for e in pool.entries) == corpus.ids


def test_refill_equal_scores_tie_break():
    corpus = FakeCorpus(64)
    pool = PLPool(capacity=4, batch_size=16, n_stages=4, rng=np.random.default_rng(2))
    pool.refill(corpus, const_scorer(0.5), stage=1)
    assert [e.utt_id for e in pool.entries] == corpus.ids[:16]


def test_refill_partial_pool_eta_over_actual_count():
    corpus = FakeCorpus(67)
    pool = PLPool(capacity=4, batch_size=16, n_stages=5, rng=np.random.default_rng(3))
    pool.refill(corpus, id_scorer, stage=5)
    assert len(pool.drawn) == 64
    pool.refill(corpus, id_scorer, stage=2)
    assert len(pool.drawn) == 3
    assert len(pool.entries) == eta(2, 5, 3) == 1


def test_refill_sorted_descending():
    pool = PLPool(capacity=2, batch_size=10, n_stages=3, rng=np.random.default_rng(4))
    pool.refill(FakeCorpus(50), id_scorer, stage=2)
    scores = [e.score for e in pool.entries]
    assert scores == sorted(scores, reverse=True)
    assert len(pool.entries) == eta(2, 3, 20)
    kept = {e.utt_id for e in pool.entries}
    dropped = [e.score for e in pool.drawn if e.utt_id not in kept]
    assert max(dropped) <= min(scores)


def test_every_id_enters_pool_once_per_epoch():
    corpus = FakeCorpus(100)
    pool = PLPool(capacity=3, batch_size=8, n_stages=2, rng=np.random.default_rng(5))
    seen = []
    while len(seen) < 100:
        pool.refill(corpus, id_scorer, stage=1)
        seen.extend(e.utt_id for e in pool.drawn)
    assert sorted(seen) == corpus.ids


def test_selection_deterministic_under_seed():
    def run():
        pool = PLPool(capacity=2, batch_size=8, n_stages=3, rng=np.random.default_rng(9))
        out = []
        for k in (1, 2, 3, 1):
            pool.refill(FakeCorpus(40), id_scorer, stage=k)
            out.append([e.utt_id for e in pool.entries])
        return out

    assert run() == run()


def test_next_batch_counts_and_exhaustion():
    pool = PLPool(capacity=5, batch_size=8, n_stages=5, rng=np.random.default_rng(0))
    pool.refill(FakeCorpus(40), id_scorer, stage=5)
    assert len(pool.entries) == 40
    seen = []
    for _ in range(5):
        batch = pool.next_batch(8)
        assert len(batch) == 8
        seen.extend(e.utt_id for e in batch)
    assert len(set(seen)) == 40
    with pytest.raises(Exhausted):
        pool.next_batch(8)


def test_next_batch_partial():
    pool = PLPool(capacity=1, batch_size=8, n_stages=10, rng=np.random.default_rng(0))
    pool.refill(FakeCorpus(8), id_scorer, stage=1)
    assert len(pool.entries) == 1
    assert len(pool.next_batch(8)) == 1
    with pytest.raises(Exhausted):
        pool.next_batch(8)


def test_empty_labels_sort_last_and_are_skipped():
    def scorer(items):
        return [(() if i % 2 else (1,), 0.99 if i % 2 else 0.5, 0.0) for i, _ in enumerate(items)]

    pool = PLPool(capacity=1, batch_size=6, n_stages=1, rng=np.random.default_rng(0))
    pool.refill(FakeCorpus(6), scorer, stage=1)
    assert [math.isinf(e.score) for e in pool.entries] == [False] * 3 + [True] * 3
    batch = pool.next_batch(6)
    assert len(batch) == 3 and all(e.pl for e in batch)


def test_full_and_single_stage_curriculum_select_same_sets():
    a = PLPool(2, 8, 1, "curriculum", rng=np.random.default_rng(6))
    b = PLPool(2, 8, 1, "full", rng=np.random.default_rng(6))
    for _ in range(5):
        a.refill(FakeCorpus(35), id_scorer, stage=1)
        b.refill(FakeCorpus(35), id_scorer, stage=1)
        assert {e.utt_id for e in a.entries} == {e.utt_id for e in b.entries}


def test_dump_records():
    pool = PLPool(capacity=1, batch_size=4, n_stages=2, rng=np.random.default_rng(0))
    pool.refill(FakeCorpus(4), id_scorer, stage=1)
    recs = pool.dump_records()
    assert len(recs) == 4
    assert sum(r["selected"] for r in recs) == 2
    assert set(recs[0]) == {"utt_id", "score", "pl_length", "true_error", "selected"}
