"""Variable-ratio masking and the half-length encoder input.

Sentinel ids sit just above the generative vocabulary: ``v_max`` is [MASK]
and ``v_max + 1`` is [CLS], so embedding tables have ``v_max + 2`` rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lease.errors import DataError


def mask_id(v_max: int) -> int:
    return v_max


def cls_id(v_max: int) -> int:
    return v_max + 1


@dataclass(frozen=True)
class MaskRatioConfig:
    min: float = 0.5
    max: float = 1.0
    mode: float = 0.55
    std: float = 0.25

    def __post_init__(self):
        if not (self.min <= self.mode <= self.max):
            raise DataError(f"need min <= mode <= max, got {self.min}, {self.mode}, {self.max}")
        if not self.std > 0:
            raise DataError(f"std must be positive, got {self.std}")
        if not (0.5 <= self.min and self.max <= 1.0):
            # fewer than half masked would leave more visible tokens than retained slots
            raise DataError("masking ratios must lie within [0.5, 1.0]")


@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    masked: np.ndarray  # (SS,) bool
    retained: np.ndarray  # (SS/2,) strictly increasing positions
    retained_masked_count: int

    @property
    def seq_len(self) -> int:
        return len(self.masked)

    @property
    def unmasked_retained(self) -> np.ndarray:
        return self.retained[~self.masked[self.retained]]


def sample_ratios(config: MaskRatioConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws from Normal(mode, std^2) truncated to [min, max] by rejection."""
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        need = n - filled
        # acceptance is ~0.41 for the default config; oversample to limit rounds
        draw = rng.normal(config.mode, config.std, size=max(16, int(need * 2.6)))
        ok = draw[(draw >= config.min) & (draw <= config.max)][:need]
        out[filled:filled + len(ok)] = ok
        filled += len(ok)
    return out


def sample_ratio(config: MaskRatioConfig, rng: np.random.Generator) -> float:
    return float(sample_ratios(config, rng, 1)[0])


def masked_count(seq_len: int, ratio: float) -> int:
    # tolerance absorbs float noise such as 0.7 * 10 = 7.000000000000001
    n = math.ceil(ratio * seq_len - 1e-9)
    return min(max(n, seq_len // 2), seq_len)


def build_plans(batch: int, seq_len: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Masks and retained positions for a batch sharing one ratio.

    Returns ``(masked, retained)`` with shapes (B, SS) and (B, SS/2). A random
    permutation is split so its head is masked; its last SS/2 entries are all
    visible positions plus a uniform subset of masked ones.
    """
    if seq_len % 2:
        raise DataError(f"sequence length must be even, got {seq_len}")
    if not 0.5 <= ratio <= 1.0:
        raise DataError(f"ratio {ratio} outside [0.5, 1.0]")
    n_masked = masked_count(seq_len, ratio)
    order = np.argsort(rng.random((batch, seq_len)), axis=1)
    masked = np.zeros((batch, seq_len), dtype=bool)
    np.put_along_axis(masked, order[:, :n_masked], True, axis=1)
    retained = np.sort(order[:, seq_len // 2:], axis=1)
    return masked, retained


def build_plan(seq_len: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    masked, retained = build_plans(1, seq_len, ratio, rng)
    masked, retained = masked[0], retained[0]
    n_unmasked = seq_len - int(masked.sum())
    return MaskPlan(float(ratio), masked, retained, seq_len // 2 - n_unmasked)


def apply_plan(tokens: np.ndarray, plan: MaskPlan, v_max: int) -> np.ndarray:
    """Encoder input ``[CLS] + retained tokens`` with [MASK] at masked slots."""
    tokens = np.asarray(tokens)
    if tokens.shape != plan.masked.shape:
        raise DataError(f"token length {tokens.shape} does not match plan length {plan.masked.shape}")
    return apply_plans(tokens[None], plan.masked[None], plan.retained[None], v_max)[0]


def apply_plans(tokens: np.ndarray, masked: np.ndarray, retained: np.ndarray, v_max: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != masked.shape:
        raise DataError(f"token shape {tokens.shape} does not match mask shape {masked.shape}")
    kept = np.take_along_axis(tokens, retained, axis=1)
    kept_masked = np.take_along_axis(masked, retained, axis=1)
    body = np.where(kept_masked, mask_id(v_max), kept)
    cls = np.full((len(tokens), 1), cls_id(v_max), dtype=np.int64)
    return np.concatenate([cls, body], axis=1)
