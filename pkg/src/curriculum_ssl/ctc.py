"""CTC loss with closed-form gradients, greedy decoding and sequence collapse.

Blank is token id 0; real tokens are 1..V. All dynamic programming runs in
log space. Impossible states hold ``NEG`` instead of ``-inf`` so that sums of
several impossible terms stay finite and never produce NaN.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InfeasibleTarget, NonFiniteInput

BLANK = 0
NEG = -1e30

TokenSeq = tuple  # tuple[int, ...] of ids in [1, V]


@dataclass(frozen=True)
class FramePath:
    """Per-frame argmax ids and the probability of each chosen id."""

    tokens: np.ndarray
    probs: np.ndarray

    def __len__(self):
        return len(self.tokens)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def required_frames(target: Sequence[int]) -> int:
    """Minimum number of frames that can emit ``target``.

    Each token needs one frame and every adjacent repeat needs a blank
    between the two copies.
    """
    repeats = sum(1 for a, b in zip(target[:-1], target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(target: Sequence[int], n_frames: int) -> bool:
    return required_frames(target) <= n_frames


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def _extended(target: Sequence[int]):
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(len(ext), dtype=bool)
    # s -> s+2 jumps over a blank only between two distinct tokens
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def ctc_loss_grad_batch(logits_list: Sequence[np.ndarray], targets: Sequence[Sequence[int]]):
    """Batched CTC negative log-likelihood and its gradient w.r.t. logits.

    Utterances are padded to a common frame count and extended-label length
    so the recursion is vectorised over the batch. Returns ``(losses, grads)``
    with one loss per utterance and one gradient matrix per utterance.
    """
    n = len(logits_list)
    if n != len(targets):
        raise ValueError("logits_list and targets differ in length")
    if n == 0:
        return np.zeros(0), []
    n_out = logits_list[0].shape[1]
    lens = np.array([lg.shape[0] for lg in logits_list])
    for lg, tgt in zip(logits_list, targets):
        if lg.ndim != 2 or lg.shape[1] != n_out or lg.shape[0] < 1:
            raise ValueError("logits must be T x (V+1) with T >= 1")
        if not np.all(np.isfinite(lg)):
            raise NonFiniteInput("logits contain non-finite values")
        if any(t <= BLANK or t >= n_out for t in tgt):
            raise ValueError(f"target ids must lie in [1, {n_out - 1}]")
        if not is_feasible(tgt, lg.shape[0]):
            raise InfeasibleTarget(
                f"target needs {required_frames(tgt)} frames, only {lg.shape[0]} available"
            )

    t_max = int(lens.max())
    exts = [_extended(tgt) for tgt in targets]
    s_lens = np.array([len(e) for e, _ in exts])
    s_max = int(s_lens.max())

    flat = log_softmax(np.concatenate([np.asarray(lg, dtype=np.float64) for lg in logits_list]))
    logp = np.full((n, t_max, n_out), NEG)
    frame_mask = np.arange(t_max)[None, :] < lens[:, None]
    logp[frame_mask] = flat
    ext = np.zeros((n, s_max), dtype=np.int64)
    skip = np.zeros((n, s_max), dtype=bool)
    s_valid = np.zeros((n, s_max), dtype=bool)
    for b, (e, sk) in enumerate(exts):
        ext[b, : len(e)] = e
        skip[b, : len(e)] = sk
        s_valid[b, : len(e)] = True

    b_idx = np.arange(n)[:, None]
    # emission log-probs along the extended label: (n, t_max, s_max)
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (n, t_max, s_max)), axis=2)
    emit = np.where(s_valid[:, None, :], emit, NEG)

    neg_col = np.full((n, 1), NEG)
    neg_col2 = np.full((n, 2), NEG)

    alpha = np.full((n, t_max, s_max), NEG)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        one = np.concatenate([neg_col, prev[:, :-1]], axis=1)
        two = np.concatenate([neg_col2, prev[:, :-2]], axis=1)[:, :s_max]
        two = np.where(skip, two, NEG)
        alpha[:, t] = np.maximum(_lse3(prev, one, two) + emit[:, t], NEG)

    last = lens - 1
    a_end = alpha[np.arange(n), last]
    end1 = a_end[np.arange(n), s_lens - 1]
    end2 = np.where(s_lens > 1, a_end[np.arange(n), np.maximum(s_lens - 2, 0)], NEG)
    loglik = np.logaddexp(end1, end2)

    # beta excludes the emission at its own frame
    init = np.full((n, s_max), NEG)
    init[np.arange(n), s_lens - 1] = 0.0
    has_two = s_lens > 1
    init[np.arange(n)[has_two], s_lens[has_two] - 2] = 0.0
    skip_next = np.concatenate([skip[:, 2:], np.zeros((n, 2), dtype=bool)], axis=1)[:, :s_max]

    beta = np.full((n, t_max, s_max), NEG)
    for t in range(t_max - 1, -1, -1):
        if t + 1 < t_max:
            nxt = beta[:, t + 1] + emit[:, t + 1]
            one = np.concatenate([nxt[:, 1:], neg_col], axis=1)
            two = np.concatenate([nxt[:, 2:], neg_col2], axis=1)[:, :s_max]
            two = np.where(skip_next, two, NEG)
            rec = np.maximum(_lse3(nxt, one, two), NEG)
        else:
            rec = np.full((n, s_max), NEG)
        at_end = (t == last)[:, None]
        inside = (t < last)[:, None]
        beta[:, t] = np.where(at_end, init, np.where(inside, rec, NEG))

    log_occ = alpha + beta - loglik[:, None, None]
    occ_s = np.where(s_valid[:, None, :], np.exp(np.minimum(log_occ, 0.0)), 0.0)
    occ = np.zeros((n, t_max, n_out))
    t_idx = np.arange(t_max)[None, :, None]
    np.add.at(occ, (b_idx[:, :, None], t_idx, ext[:, None, :]), occ_s)

    losses = -loglik
    grad_flat = np.exp(flat) - occ[frame_mask]
    grads = np.split(grad_flat, np.cumsum(lens)[:-1])
    return losses, grads


def ctc_loss_grad(logits: np.ndarray, target: Sequence[int]):
    """CTC loss ``-log P(target | softmax(logits))`` and its exact gradient.

    The gradient is ``softmax(logits) - occupancy`` where occupancy is the
    posterior probability of each (frame, token) under the alignment lattice.
    """
    logits = np.asarray(logits, dtype=np.float64)
    losses, grads = ctc_loss_grad_batch([logits], [tuple(int(t) for t in target)])
    return float(losses[0]), grads[0]


def collapse(path: Sequence[int]) -> TokenSeq:
    """Merge runs of identical ids, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != BLANK:
            out.append(tok)
        prev = tok
    return tuple(out)


def greedy_decode(logp: np.ndarray):
    """Best-path decode. Ties go to the lowest token id (``np.argmax`` rule)."""
    logp = np.asarray(logp)
    tokens = np.argmax(logp, axis=1)
    probs = np.exp(logp[np.arange(len(tokens)), tokens])
    path = FramePath(tokens=tokens, probs=probs)
    return collapse(tokens), path
