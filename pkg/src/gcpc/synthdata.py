"""Synthetic phone-sequence corpora and the GCDS dataset file format.

Each utterance is a uniform random phone string; every phone holds for a
geometric number of frames and each frame is the phone's mean vector plus
isotropic Gaussian noise.  Tokens are the frame labels with runs collapsed.
"""
from __future__ import annotations

import io
import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

SPLITS = ("pretrain", "train", "test")
MAGIC = b"GCDS"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class CorpusConfig:
    n_phones: int = 8
    dim: int = 16
    mean_norm: float = 2.0
    mean_duration: float = 4.0
    min_phones: int = 3
    max_phones: int = 8
    sigma: float = 0.5
    n_pretrain: int = 2000
    n_train: int = 1000
    n_test: int = 200

    def validate(self) -> None:
        if self.n_phones < 2 or self.dim < 2:
            raise ValueError("need n_phones >= 2 and dim >= 2")
        if self.n_phones > self.dim:
            raise ValueError("orthonormal phone means need n_phones <= dim")
        if self.sigma < 0 or self.mean_duration < 1 or self.mean_norm <= 0:
            raise ValueError("sigma >= 0, mean_duration >= 1, mean_norm > 0 required")
        if not 1 <= self.min_phones <= self.max_phones:
            raise ValueError("need 1 <= min_phones <= max_phones")
        if min(self.n_pretrain, self.n_train, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    def split_size(self, split: str) -> int:
        return {"pretrain": self.n_pretrain, "train": self.n_train, "test": self.n_test}[split]


@dataclass
class PhoneInventory:
    means: np.ndarray               # (P, d)
    stop_prob: np.ndarray           # (P,) geometric parameter per phone
    sigma: float

    @property
    def n_phones(self) -> int:
        return self.means.shape[0]


@dataclass
class Utterance:
    frames: np.ndarray              # (T, d) float64
    frame_labels: np.ndarray        # (T,) int
    tokens: np.ndarray              # (U,) int
    split: str

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Utterance) and self.split == other.split
                and _bits_equal(self.frames, other.frames)
                and np.array_equal(self.frame_labels, other.frame_labels)
                and np.array_equal(self.tokens, other.tokens))


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    inventory: PhoneInventory
    utterances: list[Utterance] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Corpus) and self.config == other.config and self.seed == other.seed
                and _bits_equal(self.inventory.means, other.inventory.means)
                and _bits_equal(self.inventory.stop_prob, other.inventory.stop_prob)
                and self.inventory.sigma == other.inventory.sigma
                and self.utterances == other.utterances)


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def collapse_runs(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        return labels.astype(np.int64)
    keep = np.ones(labels.size, dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    return labels[keep].astype(np.int64)


def make_inventory(config: CorpusConfig, seed: int) -> PhoneInventory:
    rng = np.random.default_rng([seed, 0x1A7E])
    q, r = np.linalg.qr(rng.normal(size=(config.dim, config.n_phones)))
    q = q * np.sign(np.diag(r))
    means = config.mean_norm * q.T
    stop = np.full(config.n_phones, 1.0 / config.mean_duration)
    return PhoneInventory(means=means, stop_prob=stop, sigma=config.sigma)


def generate_utterance(inv: PhoneInventory, config: CorpusConfig, rng: np.random.Generator,
                       split: str) -> Utterance:
    n = int(rng.integers(config.min_phones, config.max_phones + 1))
    phones = rng.integers(0, inv.n_phones, size=n)
    durations = rng.geometric(inv.stop_prob[phones])
    labels = np.repeat(phones, durations).astype(np.int64)
    noise = rng.normal(size=(labels.size, inv.means.shape[1]))
    frames = inv.means[labels] + inv.sigma * noise
    return Utterance(frames=frames, frame_labels=labels, tokens=collapse_runs(labels), split=split)


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Deterministic in (config, seed); every utterance gets its own seed stream."""
    config.validate()
    if config.n_pretrain + config.n_train + config.n_test < 1:
        raise ValueError("corpus needs at least one utterance")
    inv = make_inventory(config, seed)
    utts = []
    for split_id, split in enumerate(SPLITS):
        for i in range(config.split_size(split)):
            rng = np.random.default_rng([seed, split_id, i])
            utts.append(generate_utterance(inv, config, rng, split))
    return Corpus(config=config, seed=seed, inventory=inv, utterances=utts)


# ---------------------------------------------------------------- statistics

def corpus_stats(corpus: Corpus) -> dict:
    per_phone: Counter = Counter()
    lengths: Counter = Counter()
    splits: Counter = Counter()
    for u in corpus.utterances:
        per_phone.update(int(x) for x in u.frame_labels)
        lengths[u.n_frames] += 1
        splits[u.split] += 1
    return {
        "frames_per_phone": dict(sorted(per_phone.items())),
        "total_frames": sum(u.n_frames for u in corpus.utterances),
        "length_histogram": dict(sorted(lengths.items())),
        "split_sizes": {s: splits.get(s, 0) for s in SPLITS},
    }


# ---------------------------------------------------------------- file format
#
# "GCDS" | u32 version | u32 header_len | header JSON (config, seed)
# | u32 P | u32 d | f64 means[P*d] | f64 stop_prob[P] | f64 sigma
# | u32 n_utts | per utterance:
#     u8 split | u32 T | f64 frames[T*d] | u16 labels[T] | u32 U | u16 tokens[U]
# All little-endian.

def write_corpus(corpus: Corpus, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = json.dumps({"config": asdict(corpus.config), "seed": corpus.seed}, sort_keys=True).encode()
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    inv = corpus.inventory
    P, d = inv.means.shape
    buf.write(struct.pack("<II", P, d))
    buf.write(inv.means.astype("<f8").tobytes())
    buf.write(inv.stop_prob.astype("<f8").tobytes())
    buf.write(struct.pack("<d", inv.sigma))
    buf.write(struct.pack("<I", len(corpus.utterances)))
    for u in corpus.utterances:
        if u.frames.shape[1] != d:
            raise ValueError("utterance feature dim differs from inventory")
        buf.write(struct.pack("<BI", SPLITS.index(u.split), u.n_frames))
        buf.write(u.frames.astype("<f8").tobytes())
        buf.write(u.frame_labels.astype("<u2").tobytes())
        buf.write(struct.pack("<I", len(u.tokens)))
        buf.write(u.tokens.astype("<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size, what), dtype=dtype).copy()


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a GCDS dataset", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    (hlen,) = r.unpack("<I", "header length")
    at = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode())
        config = CorpusConfig(**header["config"])
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt header: {exc}", at) from exc
    P, d = r.unpack("<II", "inventory shape")
    means = r.array("<f8", P * d, "phone means").astype(np.float64).reshape(P, d)
    stop = r.array("<f8", P, "duration parameters").astype(np.float64)
    (sigma,) = r.unpack("<d", "sigma")
    (n,) = r.unpack("<I", "utterance count")
    utts = []
    for _ in range(n):
        at = r.pos
        split_id, T = r.unpack("<BI", "utterance header")
        if split_id >= len(SPLITS):
            raise FormatError(f"unknown split id {split_id}", at)
        frames = r.array("<f8", T * d, "frames").astype(np.float64).reshape(T, d)
        labels = r.array("<u2", T, "frame labels").astype(np.int64)
        (U,) = r.unpack("<I", "token count")
        tokens = r.array("<u2", U, "tokens").astype(np.int64)
        utts.append(Utterance(frames=frames, frame_labels=labels, tokens=tokens, split=SPLITS[split_id]))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last utterance", r.pos)
    inv = PhoneInventory(means=means, stop_prob=stop, sigma=sigma)
    return Corpus(config=config, seed=seed, inventory=inv, utterances=utts)
