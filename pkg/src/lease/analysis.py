"""Statistics relating the generative and discriminative token streams.

All quantities come from the patch-aligned co-occurrence matrix (rows are
generative tokens, columns discriminative ones). Entropies are in nats.
Tokens that never occur are reported as absent (NaN), never as zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lease.errors import DataError
from lease.tokenstore import TokenDataset

DIRECTIONS = ("GEN|DISC", "DISC|GEN")


@dataclass
class CooccurrenceMatrix:
    counts: np.ndarray  # (v_max, K) int64

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def joint(self, smoothing: float = 0.0) -> np.ndarray:
        c = self.counts.astype(np.float64) + smoothing
        return c / c.sum()


@dataclass
class EntropyResult:
    direction: str
    per_token: np.ndarray  # NaN where the conditioning token never occurs
    value: float

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.per_token)


@dataclass
class PMIResult:
    values: np.ndarray  # NaN at zero-count cells
    top: list[tuple[int, int, float]]


def cooccurrence(dataset: TokenDataset) -> CooccurrenceMatrix:
    g = dataset.gen.astype(np.int64).ravel()
    d = dataset.disc.astype(np.int64).ravel()
    flat = np.bincount(g * dataset.K + d, minlength=dataset.v_max * dataset.K)
    return CooccurrenceMatrix(flat.reshape(dataset.v_max, dataset.K).astype(np.int64))


def conditional_entropy(matrix: CooccurrenceMatrix, direction: str = "GEN|DISC",
                        smoothing: float = 0.0) -> EntropyResult:
    """Per-token H(X | Y=y) and the marginal-weighted scalar H(X|Y)."""
    if direction not in DIRECTIONS:
        raise DataError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if matrix.total == 0:
        raise DataError("conditional entropy of an empty co-occurrence matrix")
    c = matrix.counts.astype(np.float64) + smoothing
    # orient so that rows index the conditioning variable Y
    c = c.T if direction == "GEN|DISC" else c
    marg = c.sum(axis=1)
    per = np.full(len(marg), np.nan)
    seen = marg > 0
    p = c[seen] / marg[seen, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    per[seen] = -plogp.sum(axis=1)
    per[seen] = np.maximum(per[seen], 0.0)
    value = float(np.sum(marg[seen] / marg.sum() * per[seen]))
    return EntropyResult(direction, per, value)


def pmi(matrix: CooccurrenceMatrix, top_pairs: int = 40) -> PMIResult:
    """ln p(g,d) / (p(g) p(d)) on non-zero cells, plus the global top pairs.

    Ranking is global across all cells: descending PMI, ties by (g, d).
    """
    if matrix.total == 0:
        raise DataError("PMI of an empty co-occurrence matrix")
    c = matrix.counts.astype(np.float64)
    n = c.sum()
    rows = c.sum(axis=1, keepdims=True)
    cols = c.sum(axis=0, keepdims=True)
    vals = np.full(c.shape, np.nan)
    nz = c > 0
    vals[nz] = np.log((c * n)[nz] / (rows * cols)[nz])
    g, d = np.nonzero(nz)
    v = vals[g, d]
    order = np.lexsort((d, g, -v))[:top_pairs]
    top = [(int(g[i]), int(d[i]), float(v[i])) for i in order]
    return PMIResult(vals, top)


def class_token_distribution(dataset: TokenDataset, which: str = "disc", top_k: int = 20) -> np.ndarray:
    """Per-class token frequencies sorted descending, truncated, then averaged over classes."""
    if dataset.labels is None:
        raise DataError("class token distribution needs a labeled dataset")
    if which not in ("gen", "disc"):
        raise DataError(f"which must be 'gen' or 'disc', got {which!r}")
    tokens = dataset.gen if which == "gen" else dataset.disc
    vocab = dataset.v_max if which == "gen" else dataset.K
    curves = []
    for c in np.unique(dataset.labels):
        freq = np.bincount(tokens[dataset.labels == c].astype(np.int64).ravel(), minlength=vocab)
        prob = np.sort(freq / freq.sum())[::-1]
        curve = np.zeros(top_k)
        curve[:min(top_k, vocab)] = prob[:top_k]
        curves.append(curve)
    if not curves:
        return np.zeros(top_k)
    return np.mean(curves, axis=0)


# report -------------------------------------------------------------------------

def write_report(path, dataset: TokenDataset, top_pairs: int = 40, top_k: int = 20) -> dict:
    """Emit the ``[entropy]``/``[pmi-top]``/``[class-curves]`` report and CSV sidecars."""
    mat = cooccurrence(dataset)
    h_gd = conditional_entropy(mat, "GEN|DISC")
    h_dg = conditional_entropy(mat, "DISC|GEN")
    p = pmi(mat, top_pairs)
    lines = ["[entropy]",
             f"H_gen_given_disc={h_gd.value:.6f}",
             f"H_disc_given_gen={h_dg.value:.6f}",
             f"disc_tokens_present={int(h_gd.present.sum())}",
             f"gen_tokens_present={int(h_dg.present.sum())}",
             f"total_positions={mat.total}",
             "", "[pmi-top]"]
    for rank, (g, d, v) in enumerate(p.top):
        lines.append(f"rank={rank} gen={g} disc={d} pmi={v:.6f}")
    curves = {}
    if dataset.labels is not None:
        lines += ["", "[class-curves]"]
        for which in ("gen", "disc"):
            curve = class_token_distribution(dataset, which, top_k)
            curves[which] = curve
            lines.append(f"{which}=" + ",".join(f"{x:.6f}" for x in curve))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    stem = path.with_suffix("")
    _write_hist(Path(f"{stem}.h_gen_given_disc.csv"), h_gd.per_token)
    _write_hist(Path(f"{stem}.h_disc_given_gen.csv"), h_dg.per_token)
    for which, curve in curves.items():
        _write_hist(Path(f"{stem}.curve_{which}.csv"), curve)
    return parse_report(path.read_text())


def _write_hist(path: Path, values: np.ndarray) -> None:
    rows = ["rank,value"] + [f"{i},{v:.9g}" for i, v in enumerate(values) if not np.isnan(v)]
    path.write_text("\n".join(rows) + "\n")


def parse_report(text: str) -> dict:
    """Parse a report into ``{section: [dict, ...]}`` (single-line sections become one dict)."""
    out: dict[str, list[dict]] = {}
    section = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            out[section] = []
            continue
        if section is None:
            raise DataError(f"report line outside any section: {line!r}")
        rec = {}
        for item in line.split():
            key, sep, val = item.partition("=")
            if not sep:
                raise DataError(f"malformed report item {item!r}")
            rec[key] = _parse_value(val)
        out[section].append(rec)
    merged = {}
    for name, recs in out.items():
        if name in ("entropy", "class-curves"):
            merged[name] = {k: v for r in recs for k, v in r.items()}
        else:
            merged[name] = recs
    return merged


def _parse_value(val: str):
    if "," in val:
        return [float(x) for x in val.split(",")]
    try:
        return int(val)
    except ValueError:
        return float(val)
