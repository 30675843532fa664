"""Discriminative codebook: k-means construction, centroid neighbors and their weights.

Centroids are L2-normalised once after clustering, so a dot product between
two rows is their cosine similarity. The neighbor table and the per-anchor
soft targets depend only on the codebook and the temperature, so both are
computed once and reused for every training step.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lease.errors import DataError, FormatError, NumericError

CODEBOOK_MAGIC = b"LSCB"
NEIGHBOR_MAGIC = b"LSNN"
VERSION = 1

_CB_HEADER = struct.Struct("<4sIIIB3x")
_NN_HEADER = struct.Struct("<4sIII")
_NN_ENTRY = np.dtype([("idx", "<u2"), ("sim", "<f4")])

# Points per chunk for exact distance scans; bounds memory at chunk * K * D floats.
_CHUNK = 2048


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D) float32
    normalized: bool = False

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1 or self.centroids.shape[1] < 1:
            raise DataError(f"centroids must be a non-empty (K, D) matrix, got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise NumericError("codebook contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(self.centroids.astype(np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-6:
                raise DataError("codebook flagged normalized but has non-unit rows")

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def D(self) -> int:
        return int(self.centroids.shape[1])


@dataclass
class NeighborTable:
    indices: np.ndarray  # (K, K_sel) int64, excludes the anchor itself
    similarities: np.ndarray  # (K, K_sel) float64 in memory, f32 on disk; non-increasing per row

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.similarities = np.asarray(self.similarities, dtype=np.float64)
        if self.indices.shape != self.similarities.shape or self.indices.ndim != 2:
            raise DataError("neighbor indices and similarities must share a (K, K_sel) shape")

    @property
    def K(self) -> int:
        return int(self.indices.shape[0])

    @property
    def K_sel(self) -> int:
        return int(self.indices.shape[1])


@dataclass
class KMeansResult:
    codebook: Codebook
    inertia: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid (squared Euclidean), lowest index on ties."""
    return _assign(points, centroids)[0]


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    idx = np.empty(len(points), dtype=np.int64)
    dist = np.empty(len(points), dtype=np.float64)
    for lo in range(0, len(points), _CHUNK):
        block = points[lo:lo + _CHUNK]
        # explicit differences keep exact ties exact (the expanded form does not)
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        am = np.argmin(d2, axis=1)
        idx[lo:lo + _CHUNK] = am
        dist[lo:lo + _CHUNK] = d2[np.arange(len(block)), am]
    return idx, dist


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point duplicates a chosen centre
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_fit(features: np.ndarray, K: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``history`` holds the inertia after each assignment step; it never
    increases. Empty clusters are reseeded at the point farthest from its
    own centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"features must be (N, D), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("k-means input contains non-finite values")
    n = len(x)
    if K < 1 or n < K:
        raise DataError(f"need 1 <= K <= N, got K={K}, N={n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, K, rng)
    history: list[float] = []
    assign = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new_assign, d2 = _assign(x, centroids)
        counts = np.bincount(new_assign, minlength=K)
        for k in np.flatnonzero(counts == 0):
            donors = np.where(counts[new_assign] > 1, d2, -1.0)
            far = int(np.argmax(donors))
            counts[new_assign[far]] -= 1
            new_assign[far] = k
            counts[k] = 1
            d2[far] = 0.0
            centroids[k] = x[far]
        history.append(float(d2.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        centroids = sums / counts[:, None]

    _, d2 = _assign(x, centroids)
    inertia = float(d2.sum())
    return KMeansResult(Codebook(centroids, normalized=False), inertia, history, it, converged)


def normalize(codebook: Codebook) -> Codebook:
    c = codebook.centroids.astype(np.float64)
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms[:, 0] == 0).tolist()
        raise DataError(f"zero-norm centroids cannot be normalized: {bad[:10]}")
    return Codebook(c / norms, normalized=True)


def build_neighbor_table(codebook: Codebook, K_sel: int) -> NeighborTable:
    """Top-``K_sel`` cosine neighbors of every centroid, excluding itself."""
    if not codebook.normalized:
        raise DataError("neighbor retrieval requires a normalized codebook")
    K = codebook.K
    if not 1 <= K_sel <= K - 1:
        raise DataError(f"K_sel={K_sel} outside [1, {K - 1}]")
    c = codebook.centroids.astype(np.float64)
    sims = np.clip(c @ c.T, -1.0, 1.0)
    np.fill_diagonal(sims, -np.inf)
    # stable sort on negated similarity: equal values keep ascending index order
    order = np.argsort(-sims, axis=1, kind="stable")[:, :K_sel]
    top = np.take_along_axis(sims, order, axis=1)
    return NeighborTable(order, top)


def neighbor_weights(anchor: int, table: NeighborTable, tau: float) -> np.ndarray:
    """Soft targets over ``[anchor] + neighbors``; the anchor enters with similarity 1."""
    if tau <= 0:
        raise DataError(f"tau must be positive, got {tau}")
    logits = np.concatenate([[1.0], table.similarities[anchor].astype(np.float64)]) / tau
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def target_table(table: NeighborTable, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Precomputed (K, K_sel+1) target indices and weights for every anchor."""
    if tau <= 0:
        raise DataError(f"tau must be positive, got {tau}")
    K = table.K
    idx = np.concatenate([np.arange(K)[:, None], table.indices], axis=1)
    logits = np.concatenate([np.ones((K, 1)), table.similarities.astype(np.float64)], axis=1) / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return idx, w / w.sum(axis=1, keepdims=True)


def random_codebook(K: int, D: int, seed: int) -> Codebook:
    """Normalized Gaussian centroids, for synthetic runs without teacher features."""
    rng = np.random.default_rng(seed)
    return normalize(Codebook(rng.standard_normal((K, D)), normalized=False))


def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "wb") as f:
        f.write(_CB_HEADER.pack(CODEBOOK_MAGIC, VERSION, codebook.K, codebook.D, int(codebook.normalized)))
        f.write(codebook.centroids.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    buf = Path(path).read_bytes()
    if len(buf) < _CB_HEADER.size:
        raise FormatError("truncated codebook header")
    magic, version, K, D, normalized = _CB_HEADER.unpack_from(buf)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = _CB_HEADER.size + 4 * K * D
    if len(buf) != expected:
        raise FormatError(f"codebook file is {len(buf)} bytes, expected {expected}")
    c = np.frombuffer(buf, dtype="<f4", offset=_CB_HEADER.size).reshape(K, D)
    return Codebook(c.copy(), normalized=bool(normalized))


def save_neighbors(table: NeighborTable, path) -> None:
    if table.K > 65535:
        raise DataError("neighbor indices must fit in u16")
    rec = np.zeros((table.K, table.K_sel), dtype=_NN_ENTRY)
    rec["idx"] = table.indices
    rec["sim"] = table.similarities
    with open(path, "wb") as f:
        f.write(_NN_HEADER.pack(NEIGHBOR_MAGIC, VERSION, table.K, table.K_sel))
        f.write(rec.tobytes())


def load_neighbors(path) -> NeighborTable:
    buf = Path(path).read_bytes()
    if len(buf) < _NN_HEADER.size:
        raise FormatError("truncated neighbor-table header")
    magic, version, K, K_sel = _NN_HEADER.unpack_from(buf)
    if magic != NEIGHBOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NEIGHBOR_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = _NN_HEADER.size + _NN_ENTRY.itemsize * K * K_sel
    if len(buf) != expected:
        raise FormatError(f"neighbor file is {len(buf)} bytes, expected {expected}")
    rec = np.frombuffer(buf, dtype=_NN_ENTRY, offset=_NN_HEADER.size).reshape(K, K_sel)
    return NeighborTable(rec["idx"].astype(np.int64), rec["sim"].copy())


def neighbor_path_for(codebook_path) -> Path:
    """Conventional sidecar location of a codebook's neighbor table."""
    return Path(codebook_path).with_suffix(".lsnn")
