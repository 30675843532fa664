"""Pretraining loop and frozen-feature evaluation.

Randomness is derived per epoch from ``(seed, epoch)`` so a run resumed from
an epoch-boundary checkpoint replays the same batches, masks and dropout as
an uninterrupted one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from lease.codebook import Codebook, NeighborTable
from lease.errors import DataError, NumericError
from lease.masking import MaskRatioConfig, apply_plans, build_plans, sample_ratio
from lease.net import LeaseModel, ModelConfig, build_canvas, load_model, save_model
from lease.objectives import CodebookTargets, LossReport, contrast_loss, recon_loss, total_loss
from lease.tokenstore import TokenDataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    batch_size: int = 64
    warmup_epochs: int = 2
    total_epochs: int = 30
    grad_clip: float = 3.0
    label_smoothing: float = 0.1
    lam: float = 0.1
    tau: float = 0.1
    alpha: float = 0.1
    K_sel: int = 5
    seed: int = 0
    # lr = base_lr * batch_size / lr_batch_ref
    lr_batch_ref: int = 256
    contrast_on: str = "encoder"  # encoder | decoder | both
    log_every: int = 0
    mask: MaskRatioConfig = field(default_factory=MaskRatioConfig)

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskRatioConfig(**self.mask)
        self.betas = tuple(self.betas)
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise DataError("need 0 <= warmup_epochs <= total_epochs")
        if self.batch_size < 1 or self.base_lr <= 0 or self.grad_clip <= 0:
            raise DataError("batch_size, base_lr and grad_clip must be positive")
        if self.lam < 0 or self.tau <= 0 or self.alpha <= 0 or self.K_sel < 1:
            raise DataError("need lam >= 0, tau > 0, alpha > 0, K_sel >= 1")
        if self.contrast_on not in ("encoder", "decoder", "both"):
            raise DataError(f"contrast_on must be encoder, decoder or both, got {self.contrast_on!r}")

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / self.lr_batch_ref

    @classmethod
    def paper(cls) -> "TrainConfig":
        return cls(base_lr=1.5e-4, batch_size=4096, warmup_epochs=40, total_epochs=1600)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        values = dict(base_lr=4e-3, batch_size=64, warmup_epochs=3, total_epochs=30)
        values.update(overrides)
        return cls(**values)


# Linear-probe preset kept for reference; the desk probe is plain softmax regression.
PAPER_LINEAR_PROBE = dict(optimizer="LARS", base_lr=0.1, weight_decay=0.0, momentum=0.9,
                          batch_size=4096, schedule="cosine", warmup_epochs=0, epochs=90)


def cosine_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamWState,
               lr: float, betas=(0.9, 0.95), weight_decay: float = 0.05, eps: float = 1e-8,
               no_decay: frozenset[str] = frozenset()) -> AdamWState:
    """In-place AdamW with decoupled weight decay and bias correction."""
    for name, g in grads.items():
        if not torch.all(torch.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if weight_decay and name not in no_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return state


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total


def _no_decay_names(model: torch.nn.Module) -> frozenset[str]:
    # biases and LayerNorm gains are exempt, as in the MAE recipe
    return frozenset(n for n, p in model.named_parameters() if p.dim() < 2)


@dataclass
class StepBatch:
    gen: torch.Tensor  # (B, SS) targets
    enc_input: torch.Tensor  # (B, 1 + SS/2)
    retained: torch.Tensor  # (B, SS/2)
    masked: torch.Tensor  # (B, SS)
    anchors: torch.Tensor  # (B, SS/2) disc tokens at retained positions
    visible: torch.Tensor  # (B, SS/2) retained and unmasked
    ratio: float


def make_batch(dataset: TokenDataset, idx: np.ndarray, rng: np.random.Generator,
               mask_config: MaskRatioConfig) -> StepBatch:
    gen = dataset.gen[idx].astype(np.int64)
    disc = dataset.disc[idx].astype(np.int64)
    ratio = sample_ratio(mask_config, rng)
    masked, retained = build_plans(len(idx), dataset.seq_len, ratio, rng)
    enc_input = apply_plans(gen, masked, retained, dataset.v_max)
    visible = ~np.take_along_axis(masked, retained, axis=1)
    anchors = np.take_along_axis(disc, retained, axis=1)
    t = torch.from_numpy
    return StepBatch(t(gen), t(enc_input), t(retained), t(masked), t(anchors), t(visible), ratio)


def lease_losses(model: LeaseModel, batch: StepBatch, targets: CodebookTargets | None,
                 cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, int]:
    """Forward one batch; returns ``(L_R, L_C, total, N_u)`` as differentiable tensors."""
    latents = model.encode(batch.enc_input, batch.retained)
    canvas, m = build_canvas(latents, batch.retained, batch.masked, model.config.seq_len)
    want_dec = cfg.contrast_on in ("decoder", "both")
    out = model.decode(canvas, return_hidden=want_dec)
    logits, hidden = out if want_dec else (out, None)
    L_R = recon_loss(logits, batch.gen, m, cfg.label_smoothing)
    L_C = torch.zeros((), dtype=logits.dtype)
    n_u = int(batch.visible.sum())
    if targets is not None:
        if cfg.contrast_on in ("encoder", "both"):
            z = model.project(latents[:, 1:])
            lc, n_u = contrast_loss(z, batch.anchors, targets, cfg.alpha, batch.visible)
            L_C = L_C + lc
        if want_dec:
            dec_at_retained = torch.gather(hidden, 1, batch.retained[:, :, None].expand(-1, -1, hidden.shape[-1]))
            z = model.project(dec_at_retained, model.dec_contrast_head)
            lc, n_u = contrast_loss(z, batch.anchors, targets, cfg.alpha, batch.visible)
            L_C = L_C + lc
    return L_R, L_C, total_loss(L_R, L_C, cfg.lam), n_u


def format_metrics(rec: dict) -> str:
    return (f"step={rec['step']} epoch={rec['epoch']} lr={rec['lr']!r} L_R={rec['L_R']!r} "
            f"L_C={rec['L_C']!r} total={rec['total']!r} N_u={rec['N_u']}")


def parse_metrics(line: str) -> dict:
    out = {}
    for item in line.split():
        key, _, val = item.partition("=")
        out[key] = int(val) if key in ("step", "epoch", "N_u") else float(val)
    return out


@dataclass
class TrainResult:
    model: LeaseModel
    optimizer: AdamWState
    metrics: list[dict]
    epochs_done: int
    checkpoint: Path | None = None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(dataset: TokenDataset, codebook: Codebook | None, table: NeighborTable | None,
          model_config: ModelConfig, cfg: TrainConfig, *, checkpoint_path=None, log_path=None,
          resume_from=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Pretrain with reconstruction plus ``cfg.lam`` times codebook contrast.

    ``stop_after_epoch`` ends early (the schedule still targets
    ``cfg.total_epochs``); with ``resume_from`` it lets tests split a run in two.
    """
    if dataset.seq_len != model_config.seq_len or dataset.v_max != model_config.v_max:
        raise DataError("dataset seq_len/v_max do not match the model config")
    if codebook is not None and dataset.K != codebook.K:
        raise DataError(f"dataset K={dataset.K} does not match codebook K={codebook.K}")
    if codebook is not None and codebook.D != model_config.contrast_dim:
        raise DataError(f"codebook dim {codebook.D} does not match contrast_dim {model_config.contrast_dim}")
    if cfg.contrast_on != "encoder" and not model_config.decoder_contrast:
        raise DataError("decoder contrast needs ModelConfig(decoder_contrast=True)")
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")

    targets = None
    if codebook is not None and table is not None:
        targets = CodebookTargets(codebook, table, cfg.tau)
    elif cfg.lam > 0:
        raise DataError("lambda > 0 needs a codebook and neighbor table")

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.total_epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs

    start_epoch = 0
    opt = AdamWState()
    if resume_from is not None:
        model, meta, extra = load_model(resume_from)
        opt.step = int(meta["opt_step"])
        opt.m = {k[len("opt.m."):]: torch.from_numpy(v) for k, v in extra.items() if k.startswith("opt.m.")}
        opt.v = {k[len("opt.v."):]: torch.from_numpy(v) for k, v in extra.items() if k.startswith("opt.v.")}
        start_epoch = int(meta["epochs_done"])
    else:
        model = LeaseModel(model_config, seed=cfg.seed)
    params = dict(model.named_parameters())
    no_decay = _no_decay_names(model)
    metrics: list[dict] = []
    log_file = open(log_path, "a" if resume_from is not None else "w") if log_path else None

    last_epoch = cfg.total_epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.total_epochs)
    step = opt.step
    try:
        for epoch in range(start_epoch, last_epoch):
            rng = _epoch_rng(cfg.seed, epoch)
            torch.manual_seed(cfg.seed * 1_000_003 + epoch)
            model.train()
            order = rng.permutation(len(dataset))
            sums = np.zeros(3)
            n_u_epoch = 0
            lr = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = make_batch(dataset, idx, rng, cfg.mask)
                L_R, L_C, total, n_u = lease_losses(model, batch, targets, cfg)
                if not torch.isfinite(total):
                    raise NumericError(f"non-finite loss at step {step} (epoch {epoch}, ratio {batch.ratio:.3f}): "
                                       f"L_R={float(L_R)} L_C={float(L_C)}")
                grads = dict(zip(params, torch.autograd.grad(total, list(params.values()), allow_unused=True)))
                grads = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in grads.items()}
                clip_grad_norm(grads, cfg.grad_clip)
                lr = cosine_lr(step, warmup_steps, total_steps, cfg.lr)
                adamw_step(params, grads, opt, lr, cfg.betas, cfg.weight_decay, no_decay=no_decay)
                step += 1
                sums += (float(L_R.detach()), float(L_C.detach()), float(total.detach()))
                n_u_epoch += n_u
                if cfg.log_every and step % cfg.log_every == 0:
                    rec = dict(step=step, epoch=epoch, lr=lr, L_R=float(L_R.detach()), L_C=float(L_C.detach()),
                               total=float(total.detach()), N_u=n_u, kind="step")
                    if log_file:
                        log_file.write(format_metrics(rec) + "\n")
            mean = sums / steps_per_epoch
            rec = dict(step=step, epoch=epoch, lr=lr, L_R=float(mean[0]), L_C=float(mean[1]), total=float(mean[2]),
                       N_u=n_u_epoch, kind="epoch")
            metrics.append(rec)
            if log_file:
                log_file.write(format_metrics(rec) + "\n")
                log_file.flush()
            log.info(format_metrics(rec))
    finally:
        if log_file:
            log_file.close()

    model.eval()
    epochs_done = max(start_epoch, last_epoch)
    if checkpoint_path is not None:
        save_training_checkpoint(checkpoint_path, model, opt, epochs_done, cfg)
    return TrainResult(model, opt, metrics, epochs_done, Path(checkpoint_path) if checkpoint_path else None)


def save_training_checkpoint(path, model: LeaseModel, opt: AdamWState, epochs_done: int, cfg: TrainConfig):
    extra = {f"opt.m.{k}": v for k, v in opt.m.items()}
    extra.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    cfg_dict = asdict(cfg)
    meta = {"opt_step": opt.step, "epochs_done": epochs_done, "train_config": cfg_dict}
    save_model(path, model, meta, extra)


# evaluation ---------------------------------------------------------------------

@torch.no_grad()
def pooled_features(model: LeaseModel | str | Path, dataset: TokenDataset, pooling: str = "mean",
                    batch_size: int = 256) -> np.ndarray:
    """Frozen encoder features of the unmasked ``[CLS] + SS`` sequence."""
    if pooling not in ("cls", "mean"):
        raise DataError(f"unknown pooling {pooling!r}; use 'cls' or 'mean'")
    if not isinstance(model, LeaseModel):
        model = load_model(model)[0]
    model.eval()
    out = []
    for lo in range(0, len(dataset), batch_size):
        lat = model.features(torch.from_numpy(dataset.gen[lo:lo + batch_size].astype(np.int64)))
        out.append(lat[:, 0] if pooling == "cls" else lat[:, 1:].mean(dim=1))
    if not out:
        return np.zeros((0, model.config.embed_dim), dtype=np.float32)
    return torch.cat(out).numpy()


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return perm[n_test:], perm[:n_test]


def few_shot_split(labels: np.ndarray, shots_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``shots_per_class`` random training samples per class; everything else is test."""
    rng = np.random.default_rng(seed)
    train = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) <= shots_per_class:
            raise DataError(f"class {c} has {len(members)} samples, need more than {shots_per_class}")
        train.append(rng.choice(members, shots_per_class, replace=False))
    train = np.sort(np.concatenate(train))
    return train, np.setdiff1d(np.arange(len(labels)), train)


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, num_classes: int, epochs: int = 100,
                           lr: float = 1.0, l2: float = 1e-4) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Full-batch L-BFGS multinomial logistic regression on standardized inputs.

    Returns ``(weight, bias, mean, std)``.
    """
    mean = x.mean(axis=0)
    std = x.std(axis=0) + 1e-8
    xt = torch.as_tensor((x - mean) / std, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.long)
    W = torch.zeros(x.shape[1], num_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([W, b], lr=lr, max_iter=epochs, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(xt @ W + b, yt) + l2 * (W ** 2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    return W.detach().numpy(), b.detach().numpy(), mean, std


def linear_probe(features: np.ndarray, labels: np.ndarray, epochs: int = 100, lr: float = 1.0,
                 test_fraction: float = 0.2, seed: int = 0, shots_per_class: int | None = None) -> float:
    """Held-out top-1 accuracy of a softmax-regression probe on frozen features.

    The split is random (``test_fraction``) or, with ``shots_per_class``, a
    stratified few-shot split whose remainder is the test set.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DataError("linear probe needs at least two classes")
    if shots_per_class is None:
        train_idx, test_idx = split_indices(len(labels), test_fraction, seed)
    else:
        train_idx, test_idx = few_shot_split(labels, shots_per_class, seed)
    num_classes = int(labels.max()) + 1
    W, b, mean, std = fit_softmax_regression(features[train_idx], labels[train_idx], num_classes, epochs, lr)
    pred = np.argmax(((features[test_idx] - mean) / std) @ W + b, axis=1)
    return float(np.mean(pred == labels[test_idx]))


def knn_eval(train_features, train_labels, test_features, test_labels, k: int = 20) -> float:
    """Cosine k-NN majority vote (ties go to the smaller class id)."""
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if k < 1 or k > len(train_labels):
        raise DataError(f"k={k} outside [1, {len(train_labels)}]")

    def unit(a):
        return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)

    sims = unit(test_features) @ unit(train_features).T
    nn_idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train_labels[nn_idx]
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    counts = np.zeros((len(test_labels), num_classes), dtype=np.int64)
    np.add.at(counts, (np.arange(len(test_labels))[:, None], votes), 1)
    pred = np.argmax(counts, axis=1)  # argmax picks the first (smallest) class on ties
    return float(np.mean(pred == test_labels))
