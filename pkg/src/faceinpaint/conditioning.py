"""Toy text and vision encoders producing condition tokens, plus condition dropout.

The text encoder is an embedding table over a closed vocabulary with one
context-mixing linear layer, preceded by a learned start token that gives
attention somewhere to go where the prompt is irrelevant; the vision encoder is a non-overlapping patch
projection. Both are small enough to train jointly with the denoiser.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ParameterError, ShapeError

PAD, UNK = "<pad>", "<unk>"
_WORD = re.compile(r"[a-z]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Closed word list; unknown words map to ``<unk>``."""

    def __init__(self, words):
        words = [w for w in words if w not in (PAD, UNK)]
        self.itos = [PAD, UNK] + sorted(set(words))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in tokenize(text)]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def from_itos(cls, itos) -> "Vocabulary":
        """Rebuild a vocabulary from its saved index order."""
        vocab = cls.__new__(cls)
        vocab.itos = list(itos)
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        if vocab.itos[:2] != [PAD, UNK]:
            raise ParameterError("vocabulary must start with <pad>, <unk>")
        return vocab

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_itos(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class TextCondition:
    tokens: torch.Tensor    # (B, n_t, c_t), rows past ``lengths`` are padding
    lengths: torch.Tensor   # (B,) number of valid rows
    pooled: torch.Tensor    # (B, c_t) mean of valid rows
    is_null: torch.Tensor   # (B,) bool
    starts: torch.Tensor | None = None   # (B,) first content row; rows before it are the start token

    @property
    def key_mask(self) -> torch.Tensor:
        """(B, n_t) bool, True for valid token rows."""
        n = self.tokens.shape[1]
        return torch.arange(n, device=self.tokens.device)[None, :] < self.lengths[:, None]

    @property
    def content_starts(self) -> torch.Tensor:
        return self.starts if self.starts is not None else torch.zeros_like(self.lengths)

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class VisionCondition:
    tokens: torch.Tensor    # (B, n_v, c_v)
    is_null: torch.Tensor   # (B,) bool

    def __len__(self) -> int:
        return self.tokens.shape[0]


def masked_mean(tokens: torch.Tensor, lengths: torch.Tensor, starts: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of rows ``starts <= j < lengths`` per sample."""
    starts = torch.zeros_like(lengths) if starts is None else starts
    j = torch.arange(tokens.shape[1], device=tokens.device)[None, :]
    w = ((j >= starts[:, None]) & (j < lengths[:, None])).to(tokens.dtype).unsqueeze(-1)
    return (tokens * w).sum(1) / (lengths - starts).to(tokens.dtype).clamp(min=1).unsqueeze(-1)


class TextEncoder(nn.Module):
    def __init__(self, vocab: Vocabulary, dim: int = 64, max_len: int = 16):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        self.embed = nn.Embedding(len(vocab), dim)
        self.pos = nn.Parameter(torch.zeros(max_len, dim))
        self.mix = nn.Linear(2 * dim, dim)
        self.null = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.bos = nn.Parameter(torch.randn(1, dim) * 0.5)
        nn.init.normal_(self.embed.weight, std=0.5)
        nn.init.normal_(self.mix.weight, std=0.02)
        nn.init.zeros_(self.mix.bias)

    def lookup(self, ids: list[int]) -> torch.Tensor:
        """Embedding plus position rows before context mixing, (n, dim)."""
        idx = torch.tensor(ids, dtype=torch.long, device=self.pos.device)
        return self.embed(idx) + self.pos[: len(ids)]

    def forward(self, captions: list[str]) -> TextCondition:
        id_lists = [self.vocab.encode(c) for c in captions]
        for c, ids in zip(captions, id_lists):
            if len(ids) > self.max_len:
                raise ParameterError(f"caption has {len(ids)} tokens > max_len={self.max_len}: {c!r}")
        B = len(captions)
        rows, lengths, starts = [], [], []
        for ids in id_lists:
            if ids:
                x = self.lookup(ids)
                ctx = x.mean(0, keepdim=True).expand_as(x)
                x = x + self.mix(torch.cat([x, ctx], dim=-1))
                x = torch.cat([self.bos, x])
            else:
                x = self.null
            lengths.append(x.shape[0])
            starts.append(1 if ids else 0)
            rows.append(x)
        n = max(x.shape[0] for x in rows)
        tokens = torch.stack([nn.functional.pad(x, (0, 0, 0, n - x.shape[0])) for x in rows])
        lengths_t = torch.tensor(lengths, dtype=torch.long, device=tokens.device)
        starts_t = torch.tensor(starts, dtype=torch.long, device=tokens.device)
        return TextCondition(tokens=tokens, lengths=lengths_t,
                             pooled=masked_mean(tokens, lengths_t, starts_t),
                             is_null=torch.zeros(B, dtype=torch.bool, device=tokens.device),
                             starts=starts_t)

    def null_condition(self, batch: int) -> TextCondition:
        tokens = self.null.unsqueeze(0).expand(batch, 1, self.dim)
        lengths = torch.ones(batch, dtype=torch.long, device=tokens.device)
        return TextCondition(tokens=tokens, lengths=lengths, pooled=tokens[:, 0],
                             is_null=torch.ones(batch, dtype=torch.bool, device=tokens.device),
                             starts=torch.zeros(batch, dtype=torch.long, device=tokens.device))


class ImageEncoder(nn.Module):
    """Linear projection of non-overlapping ``patch x patch`` patches, raster order."""

    def __init__(self, channels: int = 3, patch: int = 8, dim: int = 64):
        super().__init__()
        self.patch = patch
        self.dim = dim
        self.proj = nn.Linear(channels * patch * patch, dim)

    def patches(self, image: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, n_v, C*P*P), each patch flattened channel-major."""
        B, C, H, W = image.shape
        P = self.patch
        if H % P or W % P:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {P}")
        x = image.reshape(B, C, H // P, P, W // P, P)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(B, (H // P) * (W // P), C * P * P)

    def forward(self, image: torch.Tensor) -> VisionCondition:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        tokens = self.proj(self.patches(image))
        return VisionCondition(tokens=tokens,
                               is_null=torch.zeros(image.shape[0], dtype=torch.bool, device=image.device))

    def null_condition(self, batch: int, n_v: int, like: torch.Tensor | None = None) -> VisionCondition:
        dtype = like.dtype if like is not None else self.proj.weight.dtype
        tokens = torch.zeros(batch, n_v, self.dim, dtype=dtype, device=self.proj.weight.device)
        return VisionCondition(tokens=tokens, is_null=torch.ones(batch, dtype=torch.bool, device=tokens.device))


def broadcast_pooled(cond: TextCondition, n_z: int) -> torch.Tensor:
    """Replicate the pooled text token over ``n_z`` spatial positions: (B, n_z, c_t)."""
    if n_z < 1:
        raise ParameterError(f"n_z must be >= 1, got {n_z}")
    return cond.pooled.unsqueeze(1).expand(-1, n_z, -1)


def drop_conditions(text: TextCondition, vision: VisionCondition, p: float,
                    rng: np.random.Generator, text_null: TextCondition | None = None
                    ) -> tuple[TextCondition, VisionCondition]:
    """Independently replace each sample's text / vision condition by its null with prob ``p``.

    ``text_null`` holds the learned null text embedding (batch 1 or B). The null
    vision condition is all-zero tokens.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"drop probability must be in [0, 1], got {p}")
    B = len(text)
    drop_t = torch.from_numpy(rng.random(B) < p)
    drop_v = torch.from_numpy(rng.random(B) < p)
    if drop_t.any():
        if text_null is None:
            raise ParameterError("text_null is required when text may be dropped")
        null_row = text_null.tokens[:, :1].expand(B, 1, -1)
        tokens = text.tokens.clone()
        tokens[drop_t] = 0.0
        tokens[drop_t, :1] = null_row[drop_t].to(tokens.dtype)
        lengths = torch.where(drop_t, torch.ones_like(text.lengths), text.lengths)
        starts = torch.where(drop_t, torch.zeros_like(text.lengths), text.content_starts)
        text = TextCondition(tokens=tokens, lengths=lengths, pooled=masked_mean(tokens, lengths, starts),
                             is_null=text.is_null | drop_t, starts=starts)
    if drop_v.any():
        tokens = vision.tokens.clone()
        tokens[drop_v] = 0.0
        vision = replace(vision, tokens=tokens, is_null=vision.is_null | drop_v)
    return text, vision
