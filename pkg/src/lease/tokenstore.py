"""Paired token datasets: in-memory model, LSTK/LSFT binary files, synthetic data.

Every image is a pair of position-aligned sequences: generative tokens (the
model input) and discriminative tokens (nearest k-means centroid of a
teacher feature at the same patch). Files are little-endian and hold only
real tokens; the [MASK] and [CLS] ids live above ``v_max`` in memory only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from lease.errors import DataError, FormatError

DATASET_MAGIC = b"LSTK"
FEATURE_MAGIC = b"LSFT"
VERSION = 1
# Set on files emitted by the sampler: disc tokens are placeholders (all zero).
GENERATED_FLAG = 1 << 16

MAX_GEN_VOCAB = 65534
MAX_DISC_VOCAB = 65535

_HEADER = struct.Struct("<4sIIIIIB3x")
_FEATURE_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class TokenPairSample:
    gen_tokens: np.ndarray
    disc_tokens: np.ndarray
    label: int | None = None


@dataclass(frozen=True)
class TokenDatasetHeader:
    magic: bytes
    version: int
    num_samples: int
    seq_len: int
    gen_vocab: int
    disc_vocab: int
    has_labels: bool

    @property
    def generated(self) -> bool:
        return bool(self.version & GENERATED_FLAG)

    def pack(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, self.num_samples, self.seq_len,
                            self.gen_vocab, self.disc_vocab, int(self.has_labels))


@dataclass
class TokenDataset:
    """Array-backed dataset: ``gen`` and ``disc`` are (N, SS) uint16 arrays."""

    gen: np.ndarray
    disc: np.ndarray
    v_max: int
    K: int
    labels: np.ndarray | None = None
    generated: bool = False
    _validated: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.gen = np.ascontiguousarray(self.gen, dtype=np.uint16) if _fits_u16(self.gen) \
            else np.asarray(self.gen)
        self.disc = np.ascontiguousarray(self.disc, dtype=np.uint16) if _fits_u16(self.disc) \
            else np.asarray(self.disc)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def seq_len(self) -> int:
        return int(self.gen.shape[1])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def num_classes(self) -> int:
        if self.labels is None or len(self.labels) == 0:
            return 0
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return int(self.gen.shape[0])

    def __getitem__(self, i: int) -> TokenPairSample:
        label = None if self.labels is None else int(self.labels[i])
        return TokenPairSample(self.gen[i].copy(), self.disc[i].copy(), label)

    def __iter__(self) -> Iterator[TokenPairSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def header(self) -> TokenDatasetHeader:
        version = VERSION | (GENERATED_FLAG if self.generated else 0)
        return TokenDatasetHeader(DATASET_MAGIC, version, len(self), self.seq_len,
                                  self.v_max, self.K, self.has_labels)

    def validate(self) -> None:
        if self.gen.ndim != 2 or self.disc.shape != self.gen.shape:
            raise DataError(f"gen/disc shapes differ or are not 2-D: {self.gen.shape} vs {self.disc.shape}")
        if not (1 <= self.v_max <= MAX_GEN_VOCAB):
            raise DataError(f"v_max={self.v_max} outside [1, {MAX_GEN_VOCAB}]")
        if not (1 <= self.K <= MAX_DISC_VOCAB):
            raise DataError(f"K={self.K} outside [1, {MAX_DISC_VOCAB}]")
        if self.gen.size:
            if self.gen.min() < 0 or self.gen.max() >= self.v_max:
                raise DataError(f"generative token outside [0, {self.v_max - 1}]")
            if self.disc.min() < 0 or self.disc.max() >= self.K:
                raise DataError(f"discriminative token outside [0, {self.K - 1}]")
        if self.labels is not None:
            if self.labels.shape != (len(self),):
                raise DataError("labels must have one entry per sample")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 2**32):
                raise DataError("labels must fit in u32")

    @classmethod
    def from_samples(cls, samples: Sequence[TokenPairSample], v_max: int, K: int,
                     seq_len: int | None = None) -> "TokenDataset":
        if not samples:
            ss = seq_len or 0
            return cls(np.zeros((0, ss), np.uint16), np.zeros((0, ss), np.uint16), v_max, K)
        lengths = {len(s.gen_tokens) for s in samples} | {len(s.disc_tokens) for s in samples}
        if len(lengths) != 1:
            raise DataError(f"inconsistent sequence lengths {sorted(lengths)}")
        has_labels = [s.label is not None for s in samples]
        if any(has_labels) and not all(has_labels):
            raise DataError("either all samples carry labels or none do")
        gen = np.array([np.asarray(s.gen_tokens, dtype=np.int64) for s in samples])
        disc = np.array([np.asarray(s.disc_tokens, dtype=np.int64) for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64) if all(has_labels) else None
        return cls(gen, disc, v_max, K, labels)

    def subset(self, idx) -> "TokenDataset":
        labels = None if self.labels is None else self.labels[idx]
        return TokenDataset(self.gen[idx], self.disc[idx], self.v_max, self.K, labels, self.generated)


def _fits_u16(a) -> bool:
    a = np.asarray(a)
    return a.size == 0 or (np.issubdtype(a.dtype, np.integer) and a.min() >= 0 and a.max() < 2**16)


def _record_dtype(seq_len: int, has_labels: bool) -> np.dtype:
    fields = [("label", "<u4")] if has_labels else []
    fields += [("gen", "<u2", (seq_len,)), ("disc", "<u2", (seq_len,))]
    return np.dtype(fields)


def write_dataset(dataset: TokenDataset | Sequence[TokenPairSample], path,
                  v_max: int | None = None, K: int | None = None) -> None:
    """Write a dataset (or a list of samples plus vocab sizes) as an LSTK file."""
    if not isinstance(dataset, TokenDataset):
        if v_max is None or K is None:
            raise DataError("v_max and K are required when writing a list of samples")
        dataset = TokenDataset.from_samples(list(dataset), v_max, K)
    dataset.validate()
    rec = np.zeros(len(dataset), dtype=_record_dtype(dataset.seq_len, dataset.has_labels))
    if dataset.has_labels:
        rec["label"] = dataset.labels
    rec["gen"] = dataset.gen
    rec["disc"] = dataset.disc
    with open(path, "wb") as f:
        f.write(dataset.header.pack())
        f.write(rec.tobytes())


def read_header(buf: bytes) -> TokenDatasetHeader:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} < {_HEADER.size} bytes")
    magic, version, n, ss, v_max, K, has_labels = _HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version & 0xFFFF != VERSION:
        raise FormatError(f"unsupported version {version & 0xFFFF}")
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels byte must be 0 or 1, got {has_labels}")
    if v_max > MAX_GEN_VOCAB or K > MAX_DISC_VOCAB:
        raise FormatError("vocabulary sizes exceed 16-bit storage")
    return TokenDatasetHeader(magic, version, n, ss, v_max, K, bool(has_labels))


def read_dataset(path) -> TokenDataset:
    buf = Path(path).read_bytes()
    header = read_header(buf)
    dtype = _record_dtype(header.seq_len, header.has_labels)
    expected = _HEADER.size + header.num_samples * dtype.itemsize
    if len(buf) < expected:
        raise FormatError(f"truncated file: {len(buf)} bytes, header promises {expected}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after last sample")
    rec = np.frombuffer(buf, dtype=dtype, count=header.num_samples, offset=_HEADER.size)
    gen = rec["gen"].reshape(header.num_samples, header.seq_len)
    disc = rec["disc"].reshape(header.num_samples, header.seq_len)
    labels = rec["label"].astype(np.int64) if header.has_labels else None
    return TokenDataset(gen.copy(), disc.copy(), header.gen_vocab, header.disc_vocab, labels,
                        generated=header.generated)


def write_features(features: np.ndarray, path) -> None:
    """Write an (N, SS, D) feature dump as LSFT (f32, row-major)."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise DataError(f"features must be (N, SS, D), got shape {features.shape}")
    n, ss, d = features.shape
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, VERSION, n, ss, d))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _FEATURE_HEADER.size:
        raise FormatError("truncated feature header")
    magic, version, n, ss, d = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = _FEATURE_HEADER.size + 4 * n * ss * d
    if len(buf) != expected:
        raise FormatError(f"feature file is {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=_FEATURE_HEADER.size)
    return data.reshape(n, ss, d).copy()


def assign_disc_tokens(features: np.ndarray, codebook) -> np.ndarray:
    """Nearest-centroid token for every (sample, position); returns (N, SS) int64."""
    from lease.codebook import nearest_centroid

    features = np.asarray(features)
    if features.ndim != 3:
        raise DataError(f"features must be (N, SS, D), got shape {features.shape}")
    n, ss, d = features.shape
    if d != codebook.D:
        raise DataError(f"feature dim {d} does not match codebook dim {codebook.D}")
    return nearest_centroid(features.reshape(n * ss, d), codebook.centroids).reshape(n, ss)


def synth_dataset(num_classes: int, samples_per_class: int, seq_len: int, v_max: int, K: int,
                  class_noise: float, gen_map_noise: float, seed: int) -> TokenDataset:
    """Class-prototype token pairs.

    Each class draws one disc prototype sequence. A sample copies each prototype
    position with probability ``1 - class_noise`` (else uniform over K); each gen
    token is ``disc % v_max`` with probability ``1 - gen_map_noise`` (else uniform
    over v_max).
    """
    if not (1 <= num_classes <= K):
        raise DataError(f"need 1 <= classes <= K, got classes={num_classes}, K={K}")
    if v_max < 2 or K > MAX_DISC_VOCAB or v_max > MAX_GEN_VOCAB:
        raise DataError(f"invalid vocab sizes v_max={v_max}, K={K}")
    for name, p in (("class_noise", class_noise), ("gen_map_noise", gen_map_noise)):
        if not 0.0 <= p <= 1.0:
            raise DataError(f"{name}={p} outside [0, 1]")
    if seq_len < 1 or samples_per_class < 0:
        raise DataError("seq_len must be >= 1 and samples_per_class >= 0")

    rng = np.random.default_rng(seed)
    prototypes = rng.integers(0, K, size=(num_classes, seq_len))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    n = len(labels)
    disc = prototypes[labels]
    noisy = rng.random((n, seq_len)) < class_noise
    disc = np.where(noisy, rng.integers(0, K, size=(n, seq_len)), disc)
    gen = disc % v_max
    remap = rng.random((n, seq_len)) < gen_map_noise
    gen = np.where(remap, rng.integers(0, v_max, size=(n, seq_len)), gen)
    return TokenDataset(gen, disc, v_max, K, labels)


def synth_features(dataset: TokenDataset, dim: int, noise: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fake teacher features: a hidden centroid per disc token plus Gaussian noise.

    Returns ``(features, hidden_centroids)`` so k-means on the features recovers
    the disc vocabulary up to relabelling.
    """
    rng = np.random.default_rng(seed)
    hidden = rng.standard_normal((dataset.K, dim))
    feats = hidden[dataset.disc.astype(np.int64)]
    feats = feats + noise * rng.standard_normal(feats.shape)
    return feats.astype(np.float32), hidden
