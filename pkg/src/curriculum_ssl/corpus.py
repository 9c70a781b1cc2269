"""Synthetic sequence-recognition corpus with easy and domain-shifted strata.

Every token has a prototype vector on the unit sphere. An utterance is a
random token string where each token is rendered as a few copies of its
prototype plus Gaussian noise. The hard stratum uses rotated prototypes and
stronger noise.

On disk, each split is a ``<split>.bin`` file of concatenated blobs
(``u32 T, u32 D`` header, then ``T*D`` little-endian float32, row-major) and a
``<split>.jsonl`` manifest with one record per utterance. ``corpus.json``
holds the generating spec and SHA-256 checksums of every file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ChecksumMismatch, CorruptManifest, PrototypeRejectionExceeded

SPLITS = ("labeled", "unlabeled", "dev", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
_BLOB_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 8
    feature_dim: int = 16
    tokens_min: int = 3
    tokens_max: int = 10
    frames_min: int = 2
    frames_max: int = 5
    noise_easy: float = 0.15
    noise_hard: float = 0.7
    hard_fraction: float = 0.5
    labeled_hard_fraction: float = 0.0
    shift_strength: float = 0.5
    min_proto_dist: float = 0.8
    n_labeled: int = 200
    n_unlabeled: int = 4000
    n_dev: int = 500
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise ValueError("need 1 <= tokens_min <= tokens_max")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        if not self.noise_easy < self.noise_hard:
            raise ValueError("noise_easy must be below noise_hard")
        for name in ("hard_fraction", "labeled_hard_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("n_labeled", "n_unlabeled", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def count(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    transcript: Optional[tuple]
    stratum: str


def make_prototypes(spec: CorpusSpec, max_tries: int = 10_000):
    """Easy and hard prototype matrices, both (V+1) x D with row 0 unused."""
    rng = np.random.default_rng([spec.seed, 1000])
    for _ in range(max_tries):
        p = rng.normal(size=(spec.vocab_size, spec.feature_dim))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        if d[np.triu_indices(spec.vocab_size, 1)].min() >= spec.min_proto_dist:
            break
    else:
        raise PrototypeRejectionExceeded(
            f"no prototype set with min distance {spec.min_proto_dist} in {max_tries} tries"
        )
    q, r = np.linalg.qr(rng.normal(size=(spec.feature_dim, spec.feature_dim)))
    q *= np.sign(np.diag(r))
    hard = (1.0 - spec.shift_strength) * p + spec.shift_strength * (p @ q.T)
    hard /= np.linalg.norm(hard, axis=1, keepdims=True)
    pad = np.zeros((1, spec.feature_dim))
    return np.vstack([pad, p]), np.vstack([pad, hard])


def _token_string(rng, spec: CorpusSpec) -> tuple:
    # no adjacent repeats: the features carry no boundary between two copies
    n = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
    toks = [int(rng.integers(1, spec.vocab_size + 1))]
    while len(toks) < n:
        nxt = int(rng.integers(1, spec.vocab_size))
        toks.append(nxt if nxt < toks[-1] else nxt + 1)
    return tuple(toks)


def _render(spec: CorpusSpec, split: str, index: int, protos) -> Utterance:
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])
    hard_frac = spec.labeled_hard_fraction if split == "labeled" else spec.hard_fraction
    hard = bool(rng.random() < hard_frac)
    toks = _token_string(rng, spec)
    durs = rng.integers(spec.frames_min, spec.frames_max + 1, size=len(toks))
    table = protos[1] if hard else protos[0]
    sigma = spec.noise_hard if hard else spec.noise_easy
    frames = np.repeat(table[list(toks)], durs, axis=0)
    feats = (frames + sigma * rng.normal(size=frames.shape)).astype(np.float32)
    return Utterance(f"{split}-{index:06d}", feats, toks, "hard" if hard else "easy")


class Split:
    """One split's utterances, with features decoded lazily from a buffer."""

    def __init__(self, name: str, records: list[dict], loader):
        self.name = name
        self.records = records
        self.ids = [r["utt_id"] for r in records]
        self._by_id = {r["utt_id"]: r for r in records}
        self._loader = loader
        self._cache: dict = {}

    def __len__(self):
        return len(self.ids)

    def features(self, utt_id: str) -> np.ndarray:
        f = self._cache.get(utt_id)
        if f is None:
            f = self._cache[utt_id] = self._loader(self._by_id[utt_id])
        return f

    def transcript(self, utt_id: str) -> tuple:
        t = self._by_id[utt_id]["transcript"]
        return tuple(t) if t is not None else None

    def stratum(self, utt_id: str) -> str:
        return self._by_id[utt_id]["stratum"]

    def __iter__(self) -> Iterator[Utterance]:
        for uid in self.ids:
            yield Utterance(uid, self.features(uid), self.transcript(uid), self.stratum(uid))


class UnlabeledView:
    """Unlabeled split whose transcripts are reachable only via ``oracle_transcript``."""

    def __init__(self, split: Split):
        self._split = split
        self.ids = split.ids

    def __len__(self):
        return len(self.ids)

    def features(self, utt_id: str) -> np.ndarray:
        return self._split.features(utt_id)

    def stratum(self, utt_id: str) -> str:
        return self._split.stratum(utt_id)

    def oracle_transcript(self, utt_id: str) -> tuple:
        return self._split.transcript(utt_id)

    def __iter__(self) -> Iterator[Utterance]:
        for uid in self.ids:
            yield Utterance(uid, self.features(uid), None, self.stratum(uid))


class Corpus:
    def __init__(self, spec: CorpusSpec, splits: dict, checksums: Optional[dict] = None):
        self.spec = spec
        self._splits = splits
        self.labeled = splits["labeled"]
        self.unlabeled = UnlabeledView(splits["unlabeled"])
        self.dev = splits["dev"]
        self.test = splits["test"]
        self.checksums = checksums or {}

    def split(self, name: str):
        return self.unlabeled if name == "unlabeled" else self._splits[name]


def _blob(feats: np.ndarray) -> bytes:
    T, D = feats.shape
    return _BLOB_HEADER.pack(T, D) + np.ascontiguousarray(feats, dtype="<f4").tobytes()


def _decode(buf: bytes, offset: int, n_frames: int, dim: int) -> np.ndarray:
    T, D = _BLOB_HEADER.unpack_from(buf, offset)
    if T != n_frames or D != dim:
        raise CorruptManifest(f"blob at {offset} has shape {T}x{D}, manifest says {n_frames}x{dim}")
    start = offset + _BLOB_HEADER.size
    arr = np.frombuffer(buf, dtype="<f4", count=T * D, offset=start)
    return arr.reshape(T, D).astype(np.float32)


def _serialise(name: str, utts: list[Utterance]):
    blobs = []
    records = []
    offset = 0
    for u in utts:
        b = _blob(u.features)
        records.append({
            "utt_id": u.utt_id,
            "file": f"{name}.bin",
            "offset": offset,
            "n_frames": int(u.features.shape[0]),
            "transcript": list(u.transcript) if u.transcript is not None else None,
            "stratum": u.stratum,
        })
        blobs.append(b)
        offset += len(b)
    manifest = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    return b"".join(blobs), manifest.encode(), records


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _split_from_bytes(name: str, buf: bytes, records: list[dict], dim: int) -> Split:
    return Split(name, records, lambda r: _decode(buf, r["offset"], r["n_frames"], dim))


def generate(spec: CorpusSpec, out: Optional[Path] = None) -> Corpus:
    """Build the corpus deterministically from ``spec``; write it when ``out`` is given.

    The returned corpus is decoded from the same bytes that go to disk, so a
    later ``load_manifest`` gives bit-identical features.
    """
    protos = make_prototypes(spec)
    splits = {}
    files = {}
    payloads = {}
    for name in SPLITS:
        utts = [_render(spec, name, i, protos) for i in range(spec.count(name))]
        data, manifest, records = _serialise(name, utts)
        splits[name] = _split_from_bytes(name, data, records, spec.feature_dim)
        files[name] = {
            "features": f"{name}.bin",
            "features_sha256": _sha256(data),
            "manifest": f"{name}.jsonl",
            "manifest_sha256": _sha256(manifest),
        }
        payloads[name] = (data, manifest)
    meta = {"format": "curriculum-ssl-corpus", "version": 1, "spec": spec.to_dict(), "splits": files}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name, (data, manifest) in payloads.items():
            (out / files[name]["features"]).write_bytes(data)
            (out / files[name]["manifest"]).write_bytes(manifest)
        (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return Corpus(spec, splits, files)


def load_manifest(path) -> Corpus:
    """Open a corpus directory (or its ``corpus.json``), verifying every checksum."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    meta_path = root / "corpus.json"
    try:
        meta = json.loads(meta_path.read_text())
        spec = CorpusSpec.from_dict(meta["spec"])
        files = meta["splits"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptManifest(f"cannot read {meta_path}: {exc}") from exc
    splits = {}
    for name in SPLITS:
        try:
            entry = files[name]
            data = (root / entry["features"]).read_bytes()
            manifest = (root / entry["manifest"]).read_bytes()
        except (OSError, KeyError) as exc:
            raise CorruptManifest(f"split {name}: {exc}") from exc
        if _sha256(data) != entry["features_sha256"]:
            raise ChecksumMismatch(f"{entry['features']} does not match its checksum")
        if _sha256(manifest) != entry["manifest_sha256"]:
            raise ChecksumMismatch(f"{entry['manifest']} does not match its checksum")
        try:
            records = [json.loads(line) for line in manifest.decode().splitlines() if line.strip()]
        except ValueError as exc:
            raise CorruptManifest(f"{entry['manifest']}: {exc}") from exc
        splits[name] = _split_from_bytes(name, data, records, spec.feature_dim)
    return Corpus(spec, splits, files)


def nearest_prototype_ter(corpus: Corpus, split: str = "dev") -> dict:
    """Per-stratum TER of a decoder that labels each frame by its nearest prototype.

    The decoder knows the true prototypes of each stratum, so it measures how
    separable the data is rather than how well a model learned it.
    """
    from .ctc import collapse
    from .scoring import corpus_ter

    easy, hard = make_prototypes(corpus.spec)
    pairs = {"easy": [], "hard": []}
    sp = corpus.split(split)
    for u in sp:
        table = hard[1:] if u.stratum == "hard" else easy[1:]
        d = ((u.features[:, None, :] - table[None]) ** 2).sum(-1)
        hyp = collapse(np.argmin(d, axis=1) + 1)
        ref = u.transcript if u.transcript is not None else sp.oracle_transcript(u.utt_id)
        pairs[u.stratum].append((hyp, ref))
    return {k: corpus_ter(v) for k, v in pairs.items() if v}
