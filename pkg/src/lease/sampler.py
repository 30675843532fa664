"""Iterative masked decoding in token space, and the class-conditional decoder fine-tune.

Decoding follows the MaskGIT recipe: every step predicts all still-masked
positions, scores the sampled tokens by log-probability plus Gumbel noise
(annealed to zero over the steps), and fixes the most confident ones so the
cumulative count tracks a cosine curve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from lease.codebook import Codebook
from lease.errors import DataError
from lease.masking import cls_id, mask_id
from lease.net import LeaseModel, build_canvas, load_model, save_model
from lease.objectives import recon_loss
from lease.tokenstore import TokenDataset
from lease.trainer import (AdamWState, TrainConfig, _epoch_rng, _no_decay_names, adamw_step,
                           clip_grad_norm, cosine_lr, make_batch)


@dataclass(frozen=True)
class DecodeSchedule:
    steps: int = 8
    temperature: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise DataError(f"need at least one decoding step, got {self.steps}")
        if self.temperature < 0:
            raise DataError(f"temperature must be >= 0, got {self.temperature}")

    def keep_count(self, step: int, seq_len: int) -> int:
        """Tokens fixed after ``step`` (1-based) steps."""
        frac = math.cos(math.pi / 2 * (self.steps - step) / self.steps)
        return min(seq_len, math.ceil(seq_len * frac - 1e-9))


class ConditionalHead(nn.Module):
    """Learned class table plus a projection of every centroid into the decoder width."""

    def __init__(self, num_classes: int, centroids: np.ndarray, embed_dim: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.class_table = nn.Parameter(torch.randn(num_classes, embed_dim, generator=g))
        self.centroid_proj = nn.Linear(centroids.shape[1], embed_dim, bias=False)
        with torch.no_grad():
            self.centroid_proj.weight.copy_(torch.randn(embed_dim, centroids.shape[1], generator=g) * 0.02)
        self.register_buffer("centroids", torch.as_tensor(np.asarray(centroids), dtype=torch.float32))

    @property
    def num_classes(self) -> int:
        return self.class_table.shape[0]

    def tail(self, labels: torch.Tensor) -> torch.Tensor:
        """(B, 1 + K, E): the class token followed by all projected centroids."""
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"class id outside [0, {self.num_classes - 1}]")
        cls_tok = self.class_table[labels][:, None]
        cents = self.centroid_proj(self.centroids)[None].expand(len(labels), -1, -1)
        return torch.cat([cls_tok, cents], dim=1)

    def load_class_embeddings(self, path) -> None:
        """Replace the learned table with external vectors from a .npy of shape (C, E)."""
        table = np.load(path)
        if table.shape != tuple(self.class_table.shape):
            raise DataError(f"class embeddings {table.shape} != expected {tuple(self.class_table.shape)}")
        with torch.no_grad():
            self.class_table.copy_(torch.as_tensor(table))


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-12)))


@torch.no_grad()
def iterative_decode(model: LeaseModel, schedule: DecodeSchedule, rngs: list[np.random.Generator],
                     cond: ConditionalHead | None = None, labels=None, trace: list | None = None,
                     init: np.ndarray | None = None) -> np.ndarray:
    """Generate ``len(rngs)`` sequences; ``trace`` (if given) collects the token state after each step.

    ``init`` (n, SS) seeds inpainting: entries other than MASK are fixed from the
    start and count toward the schedule.
    """
    model.eval()
    cfg = model.config
    n, SS, V = len(rngs), cfg.seq_len, cfg.v_max
    if init is None:
        tokens = np.full((n, SS), mask_id(V), dtype=np.int64)
    else:
        tokens = np.array(init, dtype=np.int64).reshape(n, SS)
        if tokens.min() < 0 or tokens.max() > mask_id(V):
            raise DataError(f"inpainting tokens must lie in [0, {V}] ({V} = MASK)")
    fixed = tokens != mask_id(V)
    tail = None
    if cond is not None:
        tail = cond.tail(torch.as_tensor(np.broadcast_to(np.asarray(labels), (n,)).copy()))
    positions = torch.arange(SS).expand(n, SS)
    cls = torch.full((n, 1), cls_id(V), dtype=torch.long)
    T = schedule.temperature
    for s in range(1, schedule.steps + 1):
        latents = model.encode(torch.cat([cls, torch.from_numpy(tokens)], dim=1), positions)
        logits = model.decode(latents[:, 1:], tail).double().numpy()
        noise_scale = T * (1.0 - s / schedule.steps)
        target = schedule.keep_count(s, SS)
        for i, rng in enumerate(rngs):
            lg = logits[i]
            logp = lg - lg.max(axis=1, keepdims=True)
            logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
            if T == 0:
                sampled = np.argmax(lg, axis=1)
            else:
                sampled = np.argmax(lg / T + _gumbel(rng, lg.shape), axis=1)
            conf = logp[np.arange(SS), sampled]
            if noise_scale > 0:
                conf = conf + noise_scale * _gumbel(rng, SS)
            conf = np.where(fixed[i], -np.inf, conf)
            n_new = target - int(fixed[i].sum())
            if n_new > 0:
                pick = np.argsort(-conf, kind="stable")[:n_new]
                tokens[i, pick] = sampled[pick]
                fixed[i, pick] = True
        if trace is not None:
            trace.append(tokens.copy())
    return tokens


def _rngs(rng: np.random.Generator | int, n: int) -> list[np.random.Generator]:
    seed_seq = np.random.SeedSequence(rng) if isinstance(rng, (int, np.integer)) else \
        np.random.SeedSequence(int(rng.integers(2**63)))
    return [np.random.default_rng(s) for s in seed_seq.spawn(n)]


def generate_unconditional(model: LeaseModel | str, schedule: DecodeSchedule, rng=0, n: int = 1) -> np.ndarray:
    if not isinstance(model, LeaseModel):
        model = load_model(model)[0]
    return iterative_decode(model, schedule, _rngs(rng, n))


def generate_conditional(model: LeaseModel, cond: ConditionalHead, class_id: int,
                         schedule: DecodeSchedule, rng=0, n: int = 1) -> np.ndarray:
    if not 0 <= class_id < cond.num_classes:
        raise DataError(f"class id {class_id} outside [0, {cond.num_classes - 1}]")
    return iterative_decode(model, schedule, _rngs(rng, n), cond, np.full(n, class_id))


def finetune_conditional_decoder(model: LeaseModel, dataset: TokenDataset, codebook: Codebook,
                                 cfg: TrainConfig, class_count: int | None = None,
                                 class_embeddings=None) -> tuple[ConditionalHead, list[dict]]:
    """Reconstruction-only fine-tune of decoder + class table + centroid projection.

    The encoder runs under ``no_grad`` and its weights are never touched.
    """
    if dataset.labels is None:
        raise DataError("conditional fine-tune needs a labeled dataset")
    if codebook.K != dataset.K:
        raise DataError(f"dataset K={dataset.K} does not match codebook K={codebook.K}")
    class_count = class_count or dataset.num_classes
    if dataset.labels.max() >= class_count:
        raise DataError("labels exceed class_count")
    cond = ConditionalHead(class_count, codebook.centroids, model.config.embed_dim, seed=cfg.seed)
    if class_embeddings is not None:
        cond.load_class_embeddings(class_embeddings)

    dec_names = set(model.decoder_parameter_names())
    params = {n: p for n, p in model.named_parameters() if n in dec_names}
    params.update({f"cond.{n}": p for n, p in cond.named_parameters()})
    no_decay = {n for n in _no_decay_names(model) if n in dec_names}
    opt = AdamWState()
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.total_epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    step = 0
    metrics = []
    for epoch in range(cfg.total_epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        torch.manual_seed(cfg.seed * 1_000_003 + epoch)
        model.train()
        order = rng.permutation(len(dataset))
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = make_batch(dataset, idx, rng, cfg.mask)
            with torch.no_grad():
                latents = model.encode(batch.enc_input, batch.retained)
            canvas, m = build_canvas(latents, batch.retained, batch.masked, model.config.seq_len)
            logits = model.decode(canvas, cond.tail(torch.from_numpy(dataset.labels[idx])))
            loss = recon_loss(logits, batch.gen, m, cfg.label_smoothing)
            grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()), allow_unused=True)))
            grads = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in grads.items()}
            clip_grad_norm(grads, cfg.grad_clip)
            lr = cosine_lr(step, warmup, total_steps, cfg.lr)
            adamw_step(params, grads, opt, lr, cfg.betas, cfg.weight_decay, no_decay=frozenset(no_decay))
            step += 1
            total += float(loss.detach())
        metrics.append({"epoch": epoch, "step": step, "L_R": total / steps_per_epoch})
    model.eval()
    return cond, metrics


def save_conditional(path, model: LeaseModel, cond: ConditionalHead, meta: dict | None = None) -> None:
    extra = {f"cond.{k}": v for k, v in cond.state_dict().items()}
    save_model(path, model, {**(meta or {}), "conditional": True, "num_classes": cond.num_classes}, extra)


def load_conditional(path) -> tuple[LeaseModel, ConditionalHead | None]:
    """Model plus its conditional head, or ``None`` when the checkpoint is unconditional."""
    model, meta, extra = load_model(path)
    if not meta.get("conditional"):
        return model, None
    centroids = extra["cond.centroids"]
    cond = ConditionalHead(int(meta["num_classes"]), centroids, model.config.embed_dim)
    cond.load_state_dict({k[len("cond."):]: torch.from_numpy(v) for k, v in extra.items() if k.startswith("cond.")})
    return model, cond
