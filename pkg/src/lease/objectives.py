"""Masked-token reconstruction, codebook contrast, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from lease.codebook import Codebook, NeighborTable, target_table
from lease.errors import DataError, NumericError


@dataclass
class LossReport:
    L_R: float
    L_C: float
    total: float
    N_u: int
    masked_loss_positions: int
    lam: float = 0.1

    def __post_init__(self):
        vals = (self.L_R, self.L_C, self.total)
        if not all(np.isfinite(v) for v in vals):
            raise NumericError(f"non-finite loss: L_R={self.L_R} L_C={self.L_C} total={self.total}")


class CodebookTargets:
    """Centroids plus the precomputed soft target rows of every anchor, as tensors."""

    def __init__(self, codebook: Codebook, table: NeighborTable, tau: float = 0.1,
                 dtype: torch.dtype = torch.float32):
        if not codebook.normalized:
            raise DataError("contrast requires a normalized codebook")
        if table.K != codebook.K:
            raise DataError(f"neighbor table K={table.K} does not match codebook K={codebook.K}")
        idx, w = target_table(table, tau)
        self.tau = tau
        self.centroids = torch.as_tensor(codebook.centroids, dtype=dtype)
        self.index = torch.as_tensor(idx, dtype=torch.long)
        self.weights = torch.as_tensor(w, dtype=dtype)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def to(self, dtype: torch.dtype) -> "CodebookTargets":
        out = object.__new__(CodebookTargets)
        out.tau = self.tau
        out.centroids = self.centroids.to(dtype)
        out.index = self.index
        out.weights = self.weights.to(dtype)
        return out


def smoothed_targets(targets: torch.Tensor, v_max: int, label_smoothing: float, dtype) -> torch.Tensor:
    # torch convention: the true class gets 1 - eps + eps / V, so rows sum to 1
    q = torch.full((*targets.shape, v_max), label_smoothing / v_max, dtype=dtype)
    return q.scatter_add(-1, targets[..., None],
                         torch.full((*targets.shape, 1), 1.0 - label_smoothing, dtype=dtype))


def recon_loss(logits: torch.Tensor, targets, mask, label_smoothing: float = 0.0) -> torch.Tensor:
    """Cross-entropy at masked positions: mean over masked slots per sample, then over the batch."""
    if logits.dim() == 2:
        return recon_loss(logits[None], torch.as_tensor(np.asarray(targets))[None],
                          torch.as_tensor(np.asarray(mask))[None], label_smoothing)
    if not 0.0 <= label_smoothing < 1.0:
        raise DataError(f"label_smoothing must lie in [0, 1), got {label_smoothing}")
    targets = torch.as_tensor(np.asarray(targets) if not isinstance(targets, torch.Tensor) else targets).long()
    mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).bool()
    if logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise DataError("logits, targets and mask disagree on (B, SS)")
    counts = mask.sum(dim=1)
    if torch.any(counts == 0):
        raise DataError("reconstruction loss needs at least one masked position per sample")
    logp = torch.log_softmax(logits, dim=-1)
    q = smoothed_targets(targets, logits.shape[-1], label_smoothing, logits.dtype)
    ce = -(q * logp).sum(dim=-1)
    per_sample = (ce * mask).sum(dim=1) / counts
    return per_sample.mean()


def contrast_loss(z: torch.Tensor, anchors, targets: CodebookTargets, alpha: float = 0.1,
                  valid=None) -> tuple[torch.Tensor, int]:
    """Codebook contrast over unmasked tokens.

    ``z`` is (..., N, D) unit vectors and ``anchors`` their disc tokens. Each
    token's soft target covers its anchor centroid and neighbors; every
    centroid in the codebook enters the softmax denominator. Returns the loss
    (mean per sample, then over samples with at least one unmasked token) and
    the total unmasked count.
    """
    if alpha <= 0:
        raise DataError(f"alpha must be positive, got {alpha}")
    if z.dim() == 2:
        z = z[None]
        anchors = torch.as_tensor(np.asarray(anchors))[None] if not isinstance(anchors, torch.Tensor) else anchors[None]
        valid = None if valid is None else torch.as_tensor(np.asarray(valid))[None]
    anchors = anchors.long() if isinstance(anchors, torch.Tensor) else torch.as_tensor(np.asarray(anchors)).long()
    if valid is None:
        valid = torch.ones(anchors.shape, dtype=torch.bool)
    valid = valid.bool() if isinstance(valid, torch.Tensor) else torch.as_tensor(np.asarray(valid)).bool()
    if z.shape[-1] != targets.centroids.shape[1]:
        raise DataError(f"z dim {z.shape[-1]} does not match codebook dim {targets.centroids.shape[1]}")
    n_u = valid.sum(dim=1)
    total_u = int(n_u.sum())
    if total_u == 0:
        return z.sum() * 0.0, 0
    logits = (z @ targets.centroids.to(z.dtype).T) / alpha
    logp = torch.log_softmax(logits, dim=-1)
    idx = targets.index[anchors]
    w = targets.weights.to(z.dtype)[anchors]
    per_token = -(w * torch.gather(logp, -1, idx)).sum(dim=-1)
    has = n_u > 0
    per_sample = (per_token * valid).sum(dim=1)[has] / n_u[has]
    return per_sample.mean(), total_u


def total_loss(L_R, L_C, lam: float):
    if lam < 0:
        raise DataError(f"lambda must be non-negative, got {lam}")
    return L_R + lam * L_C
