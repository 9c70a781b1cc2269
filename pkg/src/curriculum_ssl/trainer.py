"""Supervised warmup followed by pool-driven semi-supervised training.

The student is trained on strongly augmented labeled batches plus ``mu``
batches of pseudo-labeled data fetched in order from the pool. Pseudo labels
come from the EMA teacher on clean inputs and are regenerated only when the
pool is refilled.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import model as am
from .augment import augment, weak_of
from .config import TrainConfig
from .ctc import ctc_loss_grad_batch, greedy_decode, is_feasible
from .errors import DivergenceDetected, Exhausted
from .pool import CurriculumSchedule, PLPool, current_stage
from .scoring import confidence_score, corpus_ter, crs

log = logging.getLogger(__name__)

_POOL_SELECTION = {
    "curriculum-cs": ("curriculum", "cs"),
    "curriculum-crs": ("curriculum", "crs"),
    "threshold": ("threshold", "cs"),
    "full-pool": ("full", "cs"),
    "oracle": ("oracle", "cs"),
}


class RunLog:
    """JSONL metric records, mirrored to a file when a path is given."""

    def __init__(self, path: Optional[Path] = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainState:
    params: am.ParamSet
    opt: am.OptimizerState
    ema: Optional[am.ParamSet] = None
    step: int = 0

    def checkpoint(self) -> am.Checkpoint:
        return am.Checkpoint(self.params, self.opt, self.ema, self.step)


@dataclass
class Counters:
    labeled_batches: int = 0
    unlabeled_batches: int = 0
    skipped_infeasible: int = 0
    empty_refills: int = 0


@dataclass
class TrainResult:
    state: TrainState
    runlog: RunLog
    counters: Counters
    warmup_state: Optional[TrainState] = None
    final_dev_ter: float = float("nan")
    final_dev_ter_ema: float = float("nan")
    extra: dict = field(default_factory=dict)


def layout_for(cfg: TrainConfig, corpus) -> am.Layout:
    return am.Layout(cfg.model.window, corpus.spec.feature_dim, cfg.model.hidden, corpus.spec.vocab_size)


def _streams(seed: int) -> dict:
    # warmup and SSL draw from separate streams so a cached warmup can be reused
    names = ("init", "warm_labeled", "warm_strong", "labeled", "strong", "pool", "weak")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def decode_batch(params: am.ParamSet, feats_list):
    """Greedy pseudo labels and frame paths for a list of feature matrices."""
    logps, _ = am.forward_batch(params, feats_list)
    return [(lp,) + greedy_decode(lp) for lp in logps]


def evaluate(params: am.ParamSet, split) -> float:
    """Corpus TER of greedy decoding without augmentation. Read-only."""
    ids = list(split.ids)
    feats = [split.features(u) for u in ids]
    out = []
    for start in range(0, len(ids), 256):
        for (_, pl, _), uid in zip(decode_batch(params, feats[start : start + 256]), ids[start : start + 256]):
            out.append((pl, split.transcript(uid)))
    return corpus_ter(out)


def make_scorer(ema: am.ParamSet, cfg: TrainConfig, weak_rng: np.random.Generator, need_crs: bool):
    """Score pool candidates with a frozen snapshot of the teacher weights."""
    snapshot = ema.copy()
    weak = weak_of(cfg.augment.strong())
    variant = cfg.ssl.cs_variant

    def scorer(items):
        feats = [f for _, f in items]
        clean = decode_batch(snapshot, feats)
        if need_crs:
            pert = decode_batch(snapshot, [augment(f, weak, weak_rng) for f in feats])
        out = []
        for i, (lp, pl, path) in enumerate(clean):
            cs = confidence_score(lp, path, variant)
            if need_crs:
                plp, ppl, ppath = pert[i]
                value = crs(cs, pl, confidence_score(plp, ppath, variant), ppl, cfg.ssl.lam)
            else:
                value = float("nan")
            out.append((pl, cs, value))
        return out

    return scorer


def _ctc_step(state: TrainState, sup, unsup, lr, cfg: TrainConfig, strong_rng, counters: Counters):
    """One Adam step on the summed CTC loss of labeled and pseudo-labeled items."""
    policy = cfg.augment.strong()
    items = []
    for tag, group in (("sup", sup), ("unsup", unsup)):
        for feats, target in group:
            if not is_feasible(target, len(feats)):
                counters.skipped_infeasible += 1
                log.debug("skipping infeasible %s target of length %d", tag, len(target))
                continue
            items.append((tag, augment(feats, policy, strong_rng), target))
    losses = {"sup": [], "unsup": []}
    if not items:
        return losses
    logps, cache = am.forward_batch(state.params, [f for _, f, _ in items])
    # logp is already normalised, so it serves directly as the logits input
    loss_vec, grads = ctc_loss_grad_batch(logps, [t for _, _, t in items])
    for (tag, _, _), value in zip(items, loss_vec):
        losses[tag].append(float(value))
    grad = am.backward_batch(state.params, cache, grads)
    state.params, state.opt = am.adam_step(state.params, state.opt, grad, lr)
    state.step += 1
    return losses


def _labeled_batch(corpus, cfg: TrainConfig, rng):
    ids = corpus.labeled.ids
    size = min(cfg.optim.batch_size_labeled, len(ids))
    picks = rng.choice(len(ids), size=size, replace=False)
    return [(corpus.labeled.features(ids[i]), corpus.labeled.transcript(ids[i])) for i in picks]


class _Tracker:
    """Collects losses between evaluations and writes RunLog records."""

    def __init__(self, runlog: RunLog, corpus, cfg: TrainConfig, out: Optional[Path]):
        self.runlog = runlog
        self.corpus = corpus
        self.cfg = cfg
        self.out = out
        self.sup: list[float] = []
        self.unsup: list[float] = []
        self.bad_evals = 0

    def add(self, losses):
        self.sup.extend(losses["sup"])
        self.unsup.extend(losses["unsup"])

    def record(self, state: TrainState, it: int, phase: str, lr: float, stage=None, pool=None):
        dev = evaluate(state.params, self.corpus.dev)
        dev_ema = evaluate(state.ema, self.corpus.dev) if state.ema is not None else None
        rec = {
            "iter": it,
            "phase": phase,
            "stage": stage,
            "pool_stage": pool.stage if pool is not None and pool.refills else None,
            "lr": lr,
            "sup_loss": float(np.mean(self.sup)) if self.sup else None,
            "unsup_loss": float(np.mean(self.unsup)) if self.unsup else None,
            "dev_ter": dev,
            "dev_ter_ema": dev_ema,
            "pool_mean_score": None,
            "pool_mean_true_error": None,
            "selected_count": None,
        }
        if pool is not None and pool.entries:
            finite = [e.score for e in pool.entries if math.isfinite(e.score)]
            rec["pool_mean_score"] = float(np.mean(finite)) if finite else None
            rec["pool_mean_true_error"] = float(np.mean([e.true_error for e in pool.entries]))
            rec["selected_count"] = len(pool.entries)
        self.runlog.append(rec)
        log.info("iter %d %s dev_ter=%.4f%s", it, phase, dev,
                 f" ema={dev_ema:.4f}" if dev_ema is not None else "")
        self.sup, self.unsup = [], []
        if self.out is not None and self.cfg.checkpoint_every_eval:
            am.save_checkpoint(self.out / "checkpoints" / f"iter_{it:07d}.ckpt", state.checkpoint())
        if phase == "ssl":
            self.bad_evals = self.bad_evals + 1 if dev > self.cfg.divergence_ter else 0
            if self.bad_evals >= self.cfg.divergence_patience:
                raise DivergenceDetected(
                    f"dev TER above {self.cfg.divergence_ter} for {self.bad_evals} evaluations (iter {it})"
                )
        return rec


def supervised_warmup(cfg: TrainConfig, corpus, streams=None, tracker=None, counters=None,
                      state: Optional[TrainState] = None) -> TrainState:
    """``S`` supervised steps from a fresh init (or from ``state``)."""
    streams = streams or _streams(cfg.seed)
    counters = counters or Counters()
    lay = layout_for(cfg, corpus)
    if state is None:
        seed = int(streams["init"].integers(2**63))
        state = TrainState(am.init_params(seed, lay), _opt(cfg, lay.size))
        if tracker is not None:
            tracker.record(state, 0, "init", 0.0)
    sched = am.LrSchedule(cfg.optim.peak_lr, cfg.optim.S + cfg.optim.F)
    for g in range(cfg.optim.S):
        lr = am.lr_at(g, sched)
        sup = _labeled_batch(corpus, cfg, streams["warm_labeled"])
        counters.labeled_batches += 1
        losses = _ctc_step(state, sup, [], lr, cfg, streams["warm_strong"], counters)
        if tracker is not None:
            tracker.add(losses)
            if (g + 1) % cfg.eval_every == 0 or g + 1 == cfg.optim.S:
                tracker.record(state, g + 1, "warmup", lr)
    return state


def _opt(cfg: TrainConfig, n: int) -> am.OptimizerState:
    o = cfg.optim
    return am.OptimizerState.zeros(n, beta1=o.beta1, beta2=o.beta2, eps=o.eps)


def ema_alpha(cfg: TrainConfig) -> float:
    if cfg.ssl.alpha is not None:
        return cfg.ssl.alpha
    return am.ema_alpha_from_retention(cfg.optim.F, cfg.ssl.alpha_retention)


Observer = Callable[..., None]


def semi_supervised_train(cfg: TrainConfig, corpus, state: TrainState, streams=None, tracker=None,
                          counters=None, observer: Optional[Observer] = None,
                          pool_dump: Optional[Path] = None) -> TrainState:
    """Run ``F`` pool-driven iterations after warmup.

    ``observer(event, **data)`` is called with ``"refill"`` after each pool
    refill and ``"step"`` after each optimizer step; it exists for
    instrumentation and must not mutate what it receives.
    """
    streams = streams or _streams(cfg.seed)
    counters = counters or Counters()
    mode = cfg.ssl.selection_mode
    F, S = cfg.optim.F, cfg.optim.S
    sched = am.LrSchedule(cfg.optim.peak_lr, S + F)
    cur = CurriculumSchedule.build(cfg.curriculum.K, F)
    alpha = ema_alpha(cfg)
    state.ema = state.params.copy()
    if observer:
        observer("ema_init", params=state.params, ema=state.ema)

    pool = None
    if mode != "supervised":
        selection, key = _POOL_SELECTION[mode]
        pool = PLPool(cfg.curriculum.C, cfg.optim.batch_size_unlabeled, cfg.curriculum.K,
                      selection, key, cfg.ssl.tau, rng=streams["pool"])
    chunks_per_epoch = (
        math.ceil(len(corpus.unlabeled) / pool.entry_capacity) if pool is not None else 0
    )

    def refill(it):
        stage = current_stage(it, cur)
        for _ in range(chunks_per_epoch + 1):
            scorer = make_scorer(state.ema, cfg, streams["weak"], key == "crs")
            pool.refill(corpus.unlabeled, scorer, stage)
            if observer:
                observer("refill", it=it, pool=pool)
            if pool_dump is not None:
                with pool_dump.open("a") as fh:
                    for r in pool.dump_records():
                        fh.write(json.dumps(dict(r, iter=it, refill=pool.refills), sort_keys=True) + "\n")
            if pool.entries:
                return True
            counters.empty_refills += 1
        return False

    def fetch(it):
        if pool.exhausted and not refill(it):
            return []
        try:
            return pool.next_batch()
        except Exhausted:
            return []

    for it in range(F):
        g = S + it
        lr = am.lr_at(g, sched)
        unsup_entries = []
        if pool is not None:
            for _ in range(cfg.ssl.mu):
                unsup_entries.extend(fetch(it))
                counters.unlabeled_batches += 1
        sup = _labeled_batch(corpus, cfg, streams["labeled"])
        counters.labeled_batches += 1
        unsup = [(e.features, e.pl) for e in unsup_entries]
        losses = _ctc_step(state, sup, unsup, lr, cfg, streams["strong"], counters)
        state.ema = am.ema_update(state.ema, state.params, alpha)
        if observer:
            observer("step", it=it, entries=unsup_entries, params=state.params, ema=state.ema)
        if tracker is not None:
            tracker.add(losses)
            if (g + 1) % cfg.eval_every == 0 or it + 1 == F:
                stage = current_stage(it, cur)
                tracker.record(state, g + 1, "ssl", lr, stage, pool)
    return state


def train(cfg: TrainConfig, corpus, out: Optional[Path] = None, warm_start: Optional[TrainState] = None,
          observer: Optional[Observer] = None) -> TrainResult:
    """Warmup (or ``warm_start``) then semi-supervised training.

    Writes ``runlog.jsonl``, checkpoints and the optional pool dump under
    ``out`` when it is given.
    """
    if out is not None:
        out = Path(out)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out / "runlog.jsonl" if out else None)
    tracker = _Tracker(runlog, corpus, cfg, out)
    counters = Counters()
    streams = _streams(cfg.seed)
    if warm_start is None:
        state = supervised_warmup(cfg, corpus, streams, tracker, counters)
    else:
        state = _clone(warm_start)
        counters.labeled_batches += cfg.optim.S
    warm = _clone(state)
    pool_dump = None
    if out is not None and cfg.dump_pool:
        pool_dump = out / "pool_dump.jsonl"
        pool_dump.write_text("")
    state = semi_supervised_train(cfg, corpus, state, streams, tracker, counters, observer, pool_dump)
    if out is not None:
        am.save_checkpoint(out / "final.ckpt", state.checkpoint())
    last = runlog.records[-1]
    return TrainResult(state, runlog, counters, warm, last["dev_ter"], last["dev_ter_ema"])


def _clone(s: TrainState) -> TrainState:
    return TrainState(s.params.copy(), am.OptimizerState(s.opt.m.copy(), s.opt.v.copy(), s.opt.step,
                                                         s.opt.beta1, s.opt.beta2, s.opt.eps),
                      s.ema.copy() if s.ema is not None else None, s.step)
