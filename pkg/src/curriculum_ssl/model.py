"""Frame-wise acoustic model with hand-written backprop, Adam, LR schedule and EMA.

Each frame sees a window of ``2w+1`` neighbouring frames (zero padded at the
edges), passes through one tanh hidden layer and a linear output layer over
``V+1`` classes (blank first). Parameters live in one flat float64 vector so
the optimizer, the EMA teacher and checkpoints all handle a single array.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ctc import log_softmax
from .errors import AlphaOutOfRange, CorruptCheckpoint, DimensionMismatch, NonFiniteGradient


@dataclass(frozen=True)
class Layout:
    window: int
    feat_dim: int
    hidden: int
    vocab: int

    @property
    def in_dim(self) -> int:
        return (2 * self.window + 1) * self.feat_dim

    @property
    def n_out(self) -> int:
        return self.vocab + 1

    @property
    def shapes(self):
        return (
            ("W1", (self.in_dim, self.hidden)),
            ("b1", (self.hidden,)),
            ("W2", (self.hidden, self.n_out)),
            ("b2", (self.n_out,)),
        )

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def offsets(self):
        out = {}
        pos = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            out[name] = (pos, pos + n, shape)
            pos += n
        return out


@dataclass
class ParamSet:
    """Flat parameter vector plus its layout; named views share memory."""

    vector: np.ndarray
    layout: Layout

    def __post_init__(self):
        if self.vector.shape != (self.layout.size,):
            raise DimensionMismatch(f"expected {self.layout.size} parameters, got {self.vector.shape}")

    def view(self, name: str) -> np.ndarray:
        start, stop, shape = self.layout.offsets()[name]
        return self.vector[start:stop].reshape(shape)

    @property
    def W1(self):
        return self.view("W1")

    @property
    def b1(self):
        return self.view("b1")

    @property
    def W2(self):
        return self.view("W2")

    @property
    def b2(self):
        return self.view("b2")

    def copy(self) -> "ParamSet":
        return ParamSet(self.vector.copy(), self.layout)


def init_params(seed: int, layout: Layout) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    p = ParamSet(np.zeros(layout.size), layout)
    lim1 = 1.0 / np.sqrt(layout.in_dim)
    lim2 = 1.0 / np.sqrt(layout.hidden)
    p.W1[...] = rng.uniform(-lim1, lim1, size=p.W1.shape)
    p.W2[...] = rng.uniform(-lim2, lim2, size=p.W2.shape)
    return p


def windowed(feats: np.ndarray, window: int) -> np.ndarray:
    """Stack each frame with its ``window`` neighbours on both sides."""
    T, D = feats.shape
    padded = np.zeros((T + 2 * window, D))
    padded[window : window + T] = feats
    view = np.lib.stride_tricks.sliding_window_view(padded, (2 * window + 1, D))[:, 0]
    return view.reshape(T, -1)


@dataclass
class _Cache:
    x: np.ndarray
    h: np.ndarray
    splits: list = field(default_factory=list)


def _check(params: ParamSet, feats: np.ndarray):
    if feats.ndim != 2 or feats.shape[1] != params.layout.feat_dim or feats.shape[0] < 1:
        raise DimensionMismatch(
            f"features must be T x {params.layout.feat_dim} with T >= 1, got {feats.shape}"
        )


def _windowed_batch(feats_list, window: int) -> np.ndarray:
    """``windowed`` applied to every utterance, stacked, in one pass."""
    if window == 0:
        return np.concatenate([np.asarray(f, dtype=np.float64) for f in feats_list])
    D = feats_list[0].shape[1]
    lens = [len(f) for f in feats_list]
    gap = np.zeros((window, D))
    parts = [gap]
    for f in feats_list:
        parts.extend((np.asarray(f, dtype=np.float64), gap))
    padded = np.concatenate(parts)
    starts = np.cumsum([0] + [n + window for n in lens[:-1]])
    rows = np.concatenate([s + np.arange(n) for s, n in zip(starts, lens)])
    return np.concatenate([padded[rows + j] for j in range(2 * window + 1)], axis=1)


def forward_batch(params: ParamSet, feats_list: Sequence[np.ndarray]):
    """Log-posteriors for every utterance, plus a cache for ``backward_batch``."""
    for f in feats_list:
        _check(params, f)
    x = _windowed_batch(feats_list, params.layout.window)
    h = np.tanh(x @ params.W1 + params.b1)
    logits = h @ params.W2 + params.b2
    logp = log_softmax(logits)
    splits = np.cumsum([len(f) for f in feats_list])[:-1].tolist()
    return np.split(logp, splits), _Cache(x, h, splits)


def backward_batch(params: ParamSet, cache: _Cache, grad_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Parameter gradient (flat) given gradients w.r.t. each utterance's logits."""
    g = np.concatenate(grad_logits)
    if g.shape != (cache.h.shape[0], params.layout.n_out):
        raise DimensionMismatch("grad_logits do not match the cached forward pass")
    out = ParamSet(np.zeros(params.layout.size), params.layout)
    out.W2[...] = cache.h.T @ g
    out.b2[...] = g.sum(axis=0)
    dz = (g @ params.W2.T) * (1.0 - cache.h**2)
    out.W1[...] = cache.x.T @ dz
    out.b1[...] = dz.sum(axis=0)
    return out.vector


def forward(params: ParamSet, feats: np.ndarray) -> np.ndarray:
    return forward_batch(params, [feats])[0][0]


def backward(params: ParamSet, feats: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
    _, cache = forward_batch(params, [feats])
    return backward_batch(params, cache, [grad_logits])


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: ParamSet, state: OptimizerState, grad: np.ndarray, lr: float):
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    if grad.shape != params.vector.shape or state.m.shape != grad.shape:
        raise DimensionMismatch("gradient, parameters and moments must share a shape")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains non-finite values")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new = params.vector - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamSet(new, params.layout), replace(state, m=m, v=v, step=step)


@dataclass(frozen=True)
class LrSchedule:
    """Warm up linearly, hold the peak, then decay linearly to a floor."""

    peak_lr: float
    total_iters: int
    warmup_frac: float = 0.10
    decay_start_frac: float = 0.50
    floor_frac: float = 0.05

    def __post_init__(self):
        if not 0 < self.warmup_frac < self.decay_start_frac < 1:
            raise ValueError("need 0 < warmup_frac < decay_start_frac < 1")
        if not 0 < self.floor_frac < 1:
            raise ValueError("floor_frac must lie in (0, 1)")


def lr_at(it: int, sched: LrSchedule) -> float:
    total = sched.total_iters
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    warm_end = sched.warmup_frac * total
    decay_start = sched.decay_start_frac * total
    if it < warm_end:
        return sched.peak_lr * it / warm_end
    if it < decay_start:
        return sched.peak_lr
    frac = (it - decay_start) / (total - decay_start)
    return sched.peak_lr * (1.0 - frac * (1.0 - sched.floor_frac))


def ema_update(ema: ParamSet, student: ParamSet, alpha: float) -> ParamSet:
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha}")
    if ema.layout != student.layout:
        raise DimensionMismatch("EMA and student layouts differ")
    return ParamSet(alpha * ema.vector + (1.0 - alpha) * student.vector, ema.layout)


def ema_alpha_from_retention(total_iters: int, retention: float = 0.3) -> float:
    """Decay such that ``alpha ** total_iters == retention``."""
    if total_iters < 1:
        raise ValueError("total_iters must be >= 1")
    if not 0.0 < retention < 1.0:
        raise ValueError("retention must lie in (0, 1)")
    return retention ** (1.0 / total_iters)


# Checkpoint: fixed little-endian header, then float64 vectors
# (params, adam m, adam v, and the EMA vector when present).
CKPT_MAGIC = b"CSSLCKPT"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sI4IQQdddB")


@dataclass
class Checkpoint:
    params: ParamSet
    opt: OptimizerState
    ema: Optional[ParamSet] = None
    step: int = 0


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    lay = ckpt.params.layout
    o = ckpt.opt
    head = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, lay.window, lay.feat_dim, lay.hidden, lay.vocab,
                        ckpt.step, o.step, o.beta1, o.beta2, o.eps, int(ckpt.ema is not None))
    parts = [head, ckpt.params.vector, o.m, o.v]
    if ckpt.ema is not None:
        parts.append(ckpt.ema.vector)
    return b"".join(p if isinstance(p, bytes) else np.asarray(p, dtype="<f8").tobytes() for p in parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint("file shorter than header")
    magic, version, w, d, h, v, step, opt_step, b1, b2, eps, has_ema = _HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    lay = Layout(w, d, h, v)
    n_vec = 4 if has_ema else 3
    body = data[_HEADER.size :]
    if len(body) != n_vec * lay.size * 8:
        raise CorruptCheckpoint("payload size does not match the header dims")
    vecs = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n_vec, lay.size)
    opt = OptimizerState(vecs[1].copy(), vecs[2].copy(), opt_step, b1, b2, eps)
    ema = ParamSet(vecs[3].copy(), lay) if has_ema else None
    return Checkpoint(ParamSet(vecs[0].copy(), lay), opt, ema, step)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
