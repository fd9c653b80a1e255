"""Noise schedule, forward process, DDIM stepping and latent blending.

All functions are pure. Latents are torch tensors shaped ``(C, H, W)`` or
``(B, C, H, W)``; the schedule itself is held in float64 numpy arrays so that
scalar coefficients keep full precision regardless of the tensor dtype.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import MaskError, NumericError, OrderingError, ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray        # (T,)   beta[t-1] is the variance added at step t
    alpha_bar: np.ndarray   # (T+1,) alpha_bar[0] == 1
    rho: np.ndarray         # (T+1,) guidance scale per timestep

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ParameterError(f"timestep t={t} outside [0, {self.T}]")
        return t

    def inference_timesteps(self, steps: int) -> list[int]:
        """Descending timesteps for a ``steps``-step sampler by uniform stride."""
        if not 1 <= steps <= self.T:
            raise ParameterError(f"steps={steps} must lie in [1, {self.T}]")
        ts = np.linspace(self.T, 0, steps + 1).round().astype(int)
        return [int(t) for t in ts]


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 2e-2,
                  kind: str = "linear", rho: str = "sqrt_one_minus_alpha_bar") -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_min:
        raise ParameterError(f"beta_min must be > 0, got {beta_min}")
    if not beta_min <= beta_max:
        raise ParameterError(f"beta_max must be >= beta_min, got {beta_max} < {beta_min}")
    if not beta_max < 1.0:
        raise ParameterError(f"beta_max must be < 1, got {beta_max}")
    T = int(T)
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ParameterError(f"kind must be 'linear' or 'cosine', got {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    if rho == "sqrt_one_minus_alpha_bar":
        rho_arr = np.sqrt(1.0 - alpha_bar)
    elif rho == "one":
        rho_arr = np.ones_like(alpha_bar)
    else:
        raise ParameterError(f"unknown rho policy {rho!r}")
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, rho=rho_arr)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def _coef(s: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar at ``t`` broadcastable against ``like``; ``t`` may be int or per-batch tensor."""
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        ab = torch.as_tensor(s.alpha_bar, dtype=torch.float64)[t.long().cpu()]
        return ab.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(s.alpha_bar[s.check_t(t)], dtype=torch.float64)


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Forward-diffuse ``z0`` to timestep ``t`` with the given noise."""
    _same_shape(z0, eps, "q_sample")
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        ab = _coef(s, t, z0)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    ab = s.alpha_bar[s.check_t(t)]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def one_step_prediction(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int,
                        s: NoiseSchedule) -> torch.Tensor:
    """Closed-form clean-latent estimate from a noisy latent and predicted noise."""
    _same_shape(z_t, eps_pred, "one_step_prediction")
    t = s.check_t(t)
    if not (torch.isfinite(z_t).all() and torch.isfinite(eps_pred).all()):
        raise NumericError(f"non-finite input to one_step_prediction at t={t}")
    if t == 0:
        return z_t
    ab = s.alpha_bar[t]
    return z_t / math.sqrt(ab) - math.sqrt(1.0 - ab) * eps_pred / math.sqrt(ab)


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              s: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    t, t_prev = s.check_t(t), s.check_t(t_prev)
    if t_prev >= t:
        raise OrderingError(f"t_prev={t_prev} must be < t={t}")
    z0_hat = one_step_prediction(z_t, eps_hat, t, s)
    ab_prev = s.alpha_bar[t_prev]
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def check_binary(mask: torch.Tensor, what: str = "mask") -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise MaskError(f"{what} has values outside {{0, 1}}")


def blend_latents(z_gen_t: torch.Tensor, z0: torch.Tensor, t: int, mask: torch.Tensor,
                  eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Keep generated content inside ``mask``; forward-diffused original outside.

    ``mask`` is ``(H, W)``, ``(1, H, W)`` or ``(B, 1, H, W)`` matching the latent's
    spatial size.
    """
    _same_shape(z_gen_t, z0, "blend_latents")
    if mask.shape[-2:] != z0.shape[-2:]:
        raise ShapeError(f"mask spatial shape {tuple(mask.shape[-2:])} != latent {tuple(z0.shape[-2:])}")
    check_binary(mask)
    m = mask.to(z0.dtype)
    known = q_sample(z0, t, eps, s)
    return torch.where(m.bool(), z_gen_t, known)
