"""Span masking along time and channels.

Strong augmentation masks both axes and is applied to every training input.
Weak augmentation masks channels only and is used for the perturbed pass of
the robustness score.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class MaskPolicy:
    time_mask_len: int = 10
    time_mask_total_prob: float = 0.65
    chan_mask_len: int = 64
    chan_mask_prob: float = 0.5
    kind: str = "strong"

    def __post_init__(self):
        if self.time_mask_len < 1 or self.chan_mask_len < 1:
            raise ValueError("mask lengths must be >= 1")
        for name in ("time_mask_total_prob", "chan_mask_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.kind not in ("strong", "weak"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "weak" and self.time_mask_total_prob != 0:
            raise ValueError("weak policies never mask time")


# Reference policy used for full-size audio features; the toy corpus uses
# proportionally shorter spans (see config defaults).
REFERENCE_STRONG = MaskPolicy(10, 0.65, 64, 0.5, "strong")


def weak_of(strong: MaskPolicy) -> MaskPolicy:
    """Same channel masking, time masking switched off."""
    if strong.kind != "strong":
        raise ValueError("weak_of expects a strong policy")
    return replace(strong, time_mask_total_prob=0.0, kind="weak")


def span_mask(n: int, span: int, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of length n built from possibly overlapping spans.

    Spans start only where they fit entirely (``n - span + 1`` candidates).
    Each candidate fires independently at a rate chosen so the expected number
    of spans is ``prob * n / span``, i.e. ``prob`` is the expected coverage
    before overlaps.
    """
    mask = np.zeros(n, dtype=bool)
    if prob <= 0 or n == 0:
        return mask
    span = min(span, n)
    n_starts = n - span + 1
    rate = min(1.0, prob * n / (span * n_starts))
    starts = np.flatnonzero(rng.random(n_starts) < rate)
    for s in starts:
        mask[s : s + span] = True
    return mask


def expected_coverage(n: int, span: int, prob: float) -> float:
    """Exact expected masked fraction under ``span_mask``'s sampling rule."""
    if prob <= 0 or n == 0:
        return 0.0
    span = min(span, n)
    n_starts = n - span + 1
    rate = min(1.0, prob * n / (span * n_starts))
    pos = np.arange(n)
    # starts s covering position t satisfy max(0, t-span+1) <= s <= min(t, n_starts-1)
    covering = np.minimum(pos, n_starts - 1) - np.maximum(0, pos - span + 1) + 1
    return float(np.mean(1.0 - (1.0 - rate) ** covering))


def augment(feats: np.ndarray, policy: MaskPolicy, rng) -> np.ndarray:
    """Return a masked copy of ``feats``; ``rng`` is a Generator or a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    T, D = feats.shape
    tmask = span_mask(T, policy.time_mask_len, policy.time_mask_total_prob, rng)
    cmask = span_mask(D, policy.chan_mask_len, policy.chan_mask_prob, rng)
    out = np.array(feats, copy=True)
    out[tmask, :] = 0
    out[:, cmask] = 0
    return out
