"""Score-modulated dual text/vision cross-attention.

A per-pixel textual-importance score decides how much of the vision attention
survives inside the edit mask. Text and vision attention share one query
projection; the suppressed vision output is added to the text output.

Functional forms (``predict_score`` .. ``ca2_forward``) operate on batched
token matrices ``(B, n, c)``; ``CA2Block`` wraps them around a feature map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import TextCondition, VisionCondition, broadcast_pooled
from .errors import MaskError, ParameterError, ShapeError


@dataclass
class CA2Output:
    Z_s: torch.Tensor       # (B, n_z, c_z) after output projection
    A_txt: torch.Tensor     # (B, n_z, n_t) text attention, rows sum to 1 over valid tokens
    score: torch.Tensor     # (B, n_z)
    A_vis: torch.Tensor     # (B, n_z, n_v) before suppression


def predict_score(Z: torch.Tensor, f_s_txt: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
                  w2: torch.Tensor, b2: torch.Tensor, axis: str = "class") -> torch.Tensor:
    """Two-layer MLP over ``[Z, f_s_txt]`` followed by a softmax.

    ``axis="class"``: two logits per pixel, softmax over them, probability of
    class 1. ``axis="spatial"``: softmax of the logit difference over the
    ``n_z`` positions.
    """
    if Z.shape[:-1] != f_s_txt.shape[:-1]:
        raise ShapeError(f"Z rows {tuple(Z.shape[:-1])} != pooled-text rows {tuple(f_s_txt.shape[:-1])}")
    h = F.silu(torch.cat([Z, f_s_txt], dim=-1) @ w1 + b1)
    logits = h @ w2 + b2
    if axis == "class":
        return torch.softmax(logits, dim=-1)[..., 1]
    if axis == "spatial":
        return torch.softmax(logits[..., 1] - logits[..., 0], dim=-1)
    raise ParameterError(f"score softmax axis must be 'class' or 'spatial', got {axis!r}")


def attention_probs(Q: torch.Tensor, K: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    logits = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, :], float("-inf"))
    return torch.softmax(logits, dim=-1)


def visual_attention(Z: torch.Tensor, f_vis: torch.Tensor, w_q: torch.Tensor, w_k_vis: torch.Tensor,
                     w_v_vis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(A_vis, V_vis)``; ``A_vis = softmax(Q K_vis^T / sqrt(d))``."""
    if f_vis.shape[-1] != w_k_vis.shape[0]:
        raise ShapeError(f"vision token dim {f_vis.shape[-1]} != key projection input {w_k_vis.shape[0]}")
    A = attention_probs(Z @ w_q, f_vis @ w_k_vis)
    return A, f_vis @ w_v_vis


def suppress_attention(A_vis: torch.Tensor, score: torch.Tensor, m_down: torch.Tensor) -> torch.Tensor:
    """Scale row ``i`` by ``1 - score_i * M_i``; rows are not renormalised."""
    m_flat = m_down.reshape(*score.shape[:-1], -1) if m_down.ndim > 1 else m_down
    if m_flat.shape[-1] != score.shape[-1] or A_vis.shape[-2] != score.shape[-1]:
        raise ShapeError(f"score length {score.shape[-1]}, mask pixels {m_flat.shape[-1]}, "
                         f"attention rows {A_vis.shape[-2]} must agree")
    if not torch.all((m_flat == 0) | (m_flat == 1)):
        raise MaskError("downsampled mask is not binary")
    return A_vis * (1.0 - score * m_flat.to(score.dtype)).unsqueeze(-1)


class CA2Block(nn.Module):
    """One adapter layer: its own projections and its own score predictor."""

    def __init__(self, c_z: int, c_t: int, c_v: int, d: int = 64, hidden: int = 64,
                 score_axis: str = "class"):
        super().__init__()
        self.d = d
        self.score_axis = score_axis
        self.w_q = nn.Linear(c_z, d, bias=False)
        self.w_k_txt = nn.Linear(c_t, d, bias=False)
        self.w_v_txt = nn.Linear(c_t, d, bias=False)
        self.w_k_vis = nn.Linear(c_v, d, bias=False)
        self.w_v_vis = nn.Linear(c_v, d, bias=False)
        self.score1 = nn.Linear(c_z + c_t, hidden)
        self.score2 = nn.Linear(hidden, 2)
        self.out = nn.Linear(d, c_z)

    def zero_vision(self) -> None:
        nn.init.zeros_(self.w_k_vis.weight)
        nn.init.zeros_(self.w_v_vis.weight)

    def score(self, Z: torch.Tensor, txt: TextCondition) -> torch.Tensor:
        f_s = broadcast_pooled(txt, Z.shape[1]).to(Z.dtype)
        return predict_score(Z, f_s, self.score1.weight.T, self.score1.bias,
                             self.score2.weight.T, self.score2.bias, axis=self.score_axis)

    def forward(self, Z: torch.Tensor, txt: TextCondition, vis: VisionCondition,
                m_down: torch.Tensor, score_override=None) -> CA2Output:
        """Fuse text and suppressed vision attention for token matrix ``Z`` (B, n_z, c_z).

        ``m_down`` is the (B, n_z) mask at this layer's resolution.
        ``score_override`` replaces the predicted score by a constant or tensor.
        """
        Q = self.w_q(Z)
        A_txt = attention_probs(Q, self.w_k_txt(txt.tokens), txt.key_mask)
        F_txt = A_txt @ self.w_v_txt(txt.tokens)

        if score_override is None:
            score = self.score(Z, txt)
        else:
            score = torch.as_tensor(score_override, dtype=Z.dtype, device=Z.device).expand(Z.shape[:2])

        A_vis = attention_probs(Q, self.w_k_vis(vis.tokens))
        V_vis = self.w_v_vis(vis.tokens)
        # null vision contributes exactly zero values
        V_vis = V_vis * (~vis.is_null).to(V_vis.dtype)[:, None, None]
        A_s = suppress_attention(A_vis, score, m_down)
        Z_s = self.out(F_txt + A_s @ V_vis)
        return CA2Output(Z_s=Z_s, A_txt=A_txt, score=score, A_vis=A_vis)


def ca2_forward(Z: torch.Tensor, txt: TextCondition, vis: VisionCondition, m_down: torch.Tensor,
                block: CA2Block, score_override=None) -> CA2Output:
    return block(Z, txt, vis, m_down, score_override=score_override)
