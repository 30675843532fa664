"""Transformer encoder/decoder over token ids, plus canvas assembly and the LSCK container.

The encoder sees ``[CLS] + retained tokens`` with positional embeddings looked
up by the ORIGINAL patch index (slot 0 of the table is reserved for [CLS]).
The decoder sees a full-length canvas: retained latents at their positions,
the [CLS] latent everywhere else.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from lease.errors import DataError, FormatError

CHECKPOINT_MAGIC = b"LSCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    embed_dim: int = 64
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    seq_len: int = 16
    v_max: int = 64
    contrast_dim: int = 32
    dropout: float = 0.1
    decoder_contrast: bool = False

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise DataError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for name in ("embed_dim", "enc_layers", "dec_layers", "heads", "seq_len", "v_max", "contrast_dim"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.mlp_ratio <= 0 or not 0.0 <= self.dropout < 1.0:
            raise DataError("mlp_ratio must be positive and dropout in [0, 1)")

    @classmethod
    def paper(cls, seq_len: int = 256, v_max: int = 1024, contrast_dim: int = 768) -> "ModelConfig":
        """ViT-Base encoder with the MAGE-style 8-layer decoder. Not runnable at desk scale."""
        return cls(embed_dim=768, enc_layers=12, dec_layers=8, heads=12, mlp_ratio=4.0,
                   seq_len=seq_len, v_max=v_max, contrast_dim=contrast_dim, dropout=0.5)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, T, 3, h, C // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // h)
        att = self.drop(att.softmax(dim=-1))
        out = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.drop(self.proj(out))


class Block(nn.Module):
    """Pre-norm transformer block; zero output projections make it the identity."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        h = self.drop(F.gelu(self.fc1(self.norm2(x))))
        return x + self.drop(self.fc2(h))


class LeaseModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        E, SS = config.embed_dim, config.seq_len
        self.token_embed = nn.Embedding(config.v_max + 2, E)
        self.enc_pos = nn.Parameter(torch.zeros(1 + SS, E))
        self.enc_blocks = nn.ModuleList(
            Block(E, config.heads, config.mlp_ratio, config.dropout) for _ in range(config.enc_layers))
        self.dec_pos = nn.Parameter(torch.zeros(SS, E))
        self.dec_blocks = nn.ModuleList(
            Block(E, config.heads, config.mlp_ratio, config.dropout) for _ in range(config.dec_layers))
        self.dec_norm = nn.LayerNorm(E)
        self.head = nn.Linear(E, config.v_max)
        self.contrast_head = nn.Linear(E, config.contrast_dim, bias=False)
        if config.decoder_contrast:
            self.dec_contrast_head = nn.Linear(E, config.contrast_dim, bias=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)

    # parameter groups -------------------------------------------------------
    def encoder_parameter_names(self) -> list[str]:
        prefixes = ("token_embed.", "enc_pos", "enc_blocks.", "contrast_head.")
        return [n for n, _ in self.named_parameters() if n.startswith(prefixes)]

    def decoder_parameter_names(self) -> list[str]:
        prefixes = ("dec_pos", "dec_blocks.", "dec_norm.", "head.")
        return [n for n, _ in self.named_parameters() if n.startswith(prefixes)]

    # forward pieces ----------------------------------------------------------
    def encode(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Latents ``(e_0, ..., e_L)`` for ``[CLS] + L`` tokens at original ``positions``."""
        tokens, positions = _as_long(tokens), _as_long(positions)
        if tokens.dim() == 1:
            return self.encode(tokens[None], positions[None])[0]
        cfg = self.config
        if tokens.shape[1] != positions.shape[1] + 1:
            raise DataError("encoder input must be [CLS] plus one token per position id")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= cfg.v_max + 2):
            raise DataError(f"token id outside [0, {cfg.v_max + 1}]")
        if positions.numel() and (positions.min() < 0 or positions.max() >= cfg.seq_len):
            raise DataError(f"position id outside [0, {cfg.seq_len - 1}]")
        slots = torch.cat([torch.zeros_like(positions[:, :1]), positions + 1], dim=1)
        x = self.token_embed(tokens) + self.enc_pos[slots]
        for blk in self.enc_blocks:
            x = blk(x)
        return x

    def decode(self, canvas: torch.Tensor, tail: torch.Tensor | None = None,
               return_hidden: bool = False):
        """Logits (B, SS, v_max). ``tail`` tokens are appended after positional encoding."""
        if canvas.dim() == 2:
            out = self.decode(canvas[None], None if tail is None else tail[None], return_hidden)
            return tuple(o[0] for o in out) if return_hidden else out[0]
        SS, E = self.config.seq_len, self.config.embed_dim
        if canvas.shape[1:] != (SS, E):
            raise DataError(f"canvas must be (B, {SS}, {E}), got {tuple(canvas.shape)}")
        x = canvas + self.dec_pos
        if tail is not None:
            x = torch.cat([x, tail], dim=1)
        for blk in self.dec_blocks:
            x = blk(x)
        h = self.dec_norm(x[:, :SS])
        logits = self.head(h)
        return (logits, h) if return_hidden else logits

    def project(self, latents: torch.Tensor, head: nn.Linear | None = None) -> torch.Tensor:
        """Unit-norm contrast embeddings from (..., E) latents via a bias-free linear map."""
        h = (head or self.contrast_head)(latents)
        norm = h.norm(dim=-1, keepdim=True)
        h = torch.where(norm == 0, h + 1e-12, h)
        return h / h.norm(dim=-1, keepdim=True)

    def features(self, tokens: torch.Tensor) -> torch.Tensor:
        """Latents of the full unmasked sequence ``[CLS] + all SS tokens``."""
        tokens = _as_long(tokens)
        B, SS = tokens.shape
        cls = torch.full((B, 1), self.config.v_max + 1, dtype=torch.long)
        pos = torch.arange(SS).expand(B, SS)
        return self.encode(torch.cat([cls, tokens], dim=1), pos)


def build_canvas(latents: torch.Tensor, retained: torch.Tensor, masked, seq_len: int):
    """Scatter retained latents into an SS-slot canvas filled with ``e_0``.

    Returns ``(canvas, m)`` where ``m`` marks every originally masked position.
    """
    retained = _as_long(retained)
    if latents.dim() == 2:
        canvas, m = build_canvas(latents[None], retained[None], torch.as_tensor(masked)[None], seq_len)
        return canvas[0], m[0]
    B, T, E = latents.shape
    if retained.shape != (B, T - 1):
        raise DataError(f"latents {tuple(latents.shape)} do not match retained {tuple(retained.shape)}")
    canvas = latents[:, :1].expand(B, seq_len, E)
    idx = retained[:, :, None].expand(B, T - 1, E)
    canvas = canvas.scatter(1, idx, latents[:, 1:])
    return canvas, torch.as_tensor(np.asarray(masked), dtype=torch.bool)


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter (zeros if unused)."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}


def _as_long(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.long()
    return torch.as_tensor(np.asarray(x), dtype=torch.long)


# LSCK container ---------------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, tensors: dict[str, torch.Tensor | np.ndarray],
                    meta: dict | None = None) -> None:
    blob = json.dumps({"model": asdict(config), "meta": meta or {}}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic, expected {CHECKPOINT_MAGIC!r}")
    version, blob_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(take(blob_len))
        config = ModelConfig(**header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint config: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return config, tensors, header["meta"]


def model_from_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> LeaseModel:
    model = LeaseModel(config)
    state = model.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {missing[:5]}")
    model.load_state_dict({k: torch.from_numpy(tensors[k]) for k in state})
    return model


def save_model(path, model: LeaseModel, meta: dict | None = None,
               extra: dict[str, torch.Tensor] | None = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update(extra or {})
    save_checkpoint(path, model.config, tensors, meta)


def load_model(path) -> tuple[LeaseModel, dict, dict[str, np.ndarray]]:
    """Model, metadata, and any non-model tensors (optimizer state, conditional head)."""
    config, tensors, meta = load_checkpoint(path)
    model = model_from_tensors(config, tensors)
    own = set(model.state_dict())
    return model, meta, {k: v for k, v in tensors.items() if k not in own}
