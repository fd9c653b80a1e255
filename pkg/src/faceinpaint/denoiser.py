"""U-shaped noise predictor with adapter attention layers and a reference branch.

The reference branch mirrors the encoder. It reads the masked image, the mask
and the noisy latent, and its features enter the backbone skip connections
through 1x1 projections that start at exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .ca2 import CA2Block
from .conditioning import TextCondition, VisionCondition
from .errors import NumericError, ShapeError


@dataclass
class DenoiserConfig:
    channels: int = 3
    widths: tuple = (64, 128, 128)   # one per resolution; last is the bottleneck
    time_dim: int = 128
    text_dim: int = 64
    vision_dim: int = 64
    attn_dim: int = 64
    score_hidden: int = 64
    groups: int = 8
    score_axis: str = "class"

    @property
    def n_attention_layers(self) -> int:
        return 2 * len(self.widths) - 1


@dataclass
class LayerRecord:
    A_txt: torch.Tensor     # (B, h*w, n_t)
    score: torch.Tensor     # (B, h*w)
    hw: tuple
    lengths: torch.Tensor   # (B,) valid text tokens
    starts: torch.Tensor | None = None   # (B,) first content token; earlier rows are excluded from means


@dataclass
class AttentionRecord:
    layers: list = field(default_factory=list)
    t: int | None = None

    def __len__(self) -> int:
        return len(self.layers)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionLayer(nn.Module):
    def __init__(self, c: int, cfg: DenoiserConfig):
        super().__init__()
        self.norm = nn.GroupNorm(cfg.groups, c)
        self.ca2 = CA2Block(c, cfg.text_dim, cfg.vision_dim, d=cfg.attn_dim,
                            hidden=cfg.score_hidden, score_axis=cfg.score_axis)

    def forward(self, x, txt, vis, mask, score_override=None):
        B, C, h, w = x.shape
        Z = self.norm(x).flatten(2).transpose(1, 2)
        m_down = downsample_mask_tensor(mask, h, w).reshape(B, h * w)
        out = self.ca2(Z, txt, vis, m_down, score_override=score_override)
        y = x + out.Z_s.transpose(1, 2).reshape(B, C, h, w)
        return y, LayerRecord(A_txt=out.A_txt, score=out.score, hw=(h, w), lengths=txt.lengths,
                          starts=txt.content_starts)


def downsample_mask_tensor(mask: torch.Tensor, h2: int, w2: int) -> torch.Tensor:
    """Nearest-neighbour index sampling of a (B, 1, H, W) mask, same rule as ``masks.downsample_mask``."""
    H, W = mask.shape[-2:]
    ri = (torch.arange(h2) * H) // h2
    ci = (torch.arange(w2) * W) // w2
    return mask[..., ri[:, None], ci[None, :]]


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        W, G, td = cfg.widths, cfg.groups, cfg.time_dim
        L = len(W) - 1
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))

        self.in_conv = nn.Conv2d(cfg.channels, W[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(ResBlock(W[i - 1] if i else W[0], W[i], td, G) for i in range(L))
        self.down_attn = nn.ModuleList(AttentionLayer(W[i], cfg) for i in range(L))
        self.downsamplers = nn.ModuleList(nn.Conv2d(W[i], W[i], 3, stride=2, padding=1) for i in range(L))
        self.mid_block = ResBlock(W[L - 1], W[L], td, G)
        self.mid_attn = AttentionLayer(W[L], cfg)
        self.up_blocks = nn.ModuleList(ResBlock(W[i + 1] + W[i], W[i], td, G) for i in reversed(range(L)))
        self.up_attn = nn.ModuleList(AttentionLayer(W[i], cfg) for i in reversed(range(L)))
        self.out_norm = nn.GroupNorm(G, W[0])
        self.out_conv = nn.Conv2d(W[0], cfg.channels, 3, padding=1)

        # reference branch: encoder copy without attention
        self.ref_in = nn.Conv2d(2 * cfg.channels + 1, W[0], 3, padding=1)
        self.ref_blocks = nn.ModuleList(ResBlock(W[i - 1] if i else W[0], W[i], td, G) for i in range(L))
        self.ref_down = nn.ModuleList(nn.Conv2d(W[i], W[i], 3, stride=2, padding=1) for i in range(L))
        self.ref_mid = ResBlock(W[L - 1], W[L], td, G)
        self.zero_proj = nn.ModuleList(nn.Conv2d(W[i], W[i], 1) for i in range(L + 1))
        self.reset_zero_proj()

    def reset_zero_proj(self) -> None:
        for p in self.zero_proj:
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)

    @property
    def attention_layers(self) -> list:
        return [*self.down_attn, self.mid_attn, *self.up_attn]

    def _temb(self, t, batch: int, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=like.device).reshape(-1).expand(batch)
        return self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(like.dtype))

    def reference_forward(self, masked_image: torch.Tensor, mask: torch.Tensor, z_t: torch.Tensor, t) -> list:
        """Feature pyramid of the reference branch, one tensor per skip level plus bottleneck."""
        if mask.shape[-2:] != masked_image.shape[-2:] or z_t.shape != masked_image.shape:
            raise ShapeError(f"reference inputs disagree: image {tuple(masked_image.shape)}, "
                             f"mask {tuple(mask.shape)}, z_t {tuple(z_t.shape)}")
        temb = self._temb(t, z_t.shape[0], z_t)
        h = self.ref_in(torch.cat([masked_image, mask.to(z_t.dtype), z_t], dim=1))
        feats = []
        for block, down in zip(self.ref_blocks, self.ref_down):
            h = block(h, temb)
            feats.append(h)
            h = down(h)
        feats.append(self.ref_mid(h, temb))
        return feats

    def forward(self, z_t: torch.Tensor, t, txt: TextCondition, vis: VisionCondition,
                mask: torch.Tensor, ref: list | None = None, score_override=None,
                record_t: int | None = None) -> tuple[torch.Tensor, AttentionRecord]:
        """Predict noise; returns ``(eps_pred, AttentionRecord)``.

        ``mask`` is (B, 1, H, W). ``ref`` is the output of ``reference_forward``
        or ``None`` (treated as zeros).
        """
        B = z_t.shape[0]
        if mask.shape[-2:] != z_t.shape[-2:]:
            raise ShapeError(f"mask {tuple(mask.shape)} does not match latent {tuple(z_t.shape)}")
        temb = self._temb(t, B, z_t)
        rec = AttentionRecord(t=record_t)
        L = len(self.cfg.widths) - 1

        def inject(h, level):
            if ref is None:
                return h
            if ref[level].shape != h.shape:
                raise ShapeError(f"reference level {level} shape {tuple(ref[level].shape)} != {tuple(h.shape)}")
            return h + self.zero_proj[level](ref[level])

        def attend(layer, h, name):
            h, lr = layer(h, txt, vis, mask, score_override)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations after {name}")
            rec.layers.append(lr)
            return h

        h = self.in_conv(z_t)
        skips = []
        for i in range(L):
            h = self.down_blocks[i](h, temb)
            h = attend(self.down_attn[i], h, f"down_attn.{i}")
            skips.append(inject(h, i))
            h = self.downsamplers[i](h)
        h = self.mid_block(h, temb)
        h = attend(self.mid_attn, h, "mid_attn")
        h = inject(h, L)
        for j, i in enumerate(reversed(range(L))):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up_blocks[j](torch.cat([h, skips[i]], dim=1), temb)
            h = attend(self.up_attn[j], h, f"up_attn.{j}")
        eps = self.out_conv(F.silu(self.out_norm(h)))
        return eps, rec
