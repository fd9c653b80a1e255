"""Low-frequency alignment guidance for the boundary region of an edit mask.

Pipeline per sampling step: average the text attention maps, keep masked
pixels whose mean attention is at most ``mean - std`` (the region the prompt
barely touches), low-pass the one-step clean prediction and the original image
in the Fourier domain, and push the noise estimate along the gradient of their
squared difference on those pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from .denoiser import AttentionRecord
from .diffusion import NoiseSchedule, one_step_prediction
from .errors import NumericError, ParameterError, PreconditionError, ShapeError


@dataclass
class GuidanceConfig:
    lam: float = 1.0
    window: str = "centered"        # or "literal"
    stats: str = "masked"           # or "global"
    sign: str = "descent"           # or "literal"
    t_min: int = 0                  # guidance applied for t_min < t <= t_max
    t_max: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ParameterError("guidance strength must be finite")
        if self.window not in ("centered", "literal"):
            raise ParameterError(f"unknown window mode {self.window!r}")
        if self.stats not in ("masked", "global"):
            raise ParameterError(f"unknown statistics mode {self.stats!r}")
        if self.sign not in ("descent", "literal"):
            raise ParameterError(f"unknown sign convention {self.sign!r}")

    def active(self, t: int) -> bool:
        return self.lam != 0 and t > self.t_min and (self.t_max is None or t <= self.t_max)


def mean_text_attention(rec: AttentionRecord, size: tuple[int, int]) -> torch.Tensor:
    """Average every layer's per-token text attention map at ``size``: (B, H, W).

    Maps are bilinearly resized. The token mean runs over content tokens only:
    padding and the start token (rows before ``starts``) are excluded.
    """
    if len(rec) == 0:
        raise PreconditionError("attention record is empty")
    total = None
    for layer in rec.layers:
        A = layer.A_txt
        B, n_z, n_t = A.shape
        h, w = layer.hw
        maps = A.transpose(1, 2).reshape(B, n_t, h, w)
        if (h, w) != tuple(size):
            maps = F.interpolate(maps, size=size, mode="bilinear", align_corners=False)
        starts = layer.starts if layer.starts is not None else torch.zeros_like(layer.lengths)
        j = torch.arange(n_t, device=A.device)[None, :]
        valid = ((j >= starts[:, None]) & (j < layer.lengths[:, None])).to(A.dtype)
        count = (layer.lengths - starts).to(A.dtype)
        m = (maps * valid[:, :, None, None]).sum(1) / count[:, None, None]
        total = m if total is None else total + m
    return total / len(rec)


def boundary_indices(A_bar, M, mode: str = "masked") -> np.ndarray:
    """Boolean (H, W) set of masked pixels with mean attention at or below ``mu - sigma``.

    ``mode="masked"`` takes the statistics over masked pixels only;
    ``mode="global"`` divides by ``H*W`` with zeros outside the mask.
    Comparisons within rounding distance of the threshold are settled in exact
    rational arithmetic, so ties such as ``mu - sigma == min`` for two pixels
    resolve the same way at every scale of ``A_bar``.
    """
    A = np.asarray(A_bar, dtype=np.float64)
    M = np.asarray(M).astype(bool)
    if A.shape != M.shape:
        raise ShapeError(f"attention {A.shape} and mask {M.shape} differ")
    if not M.any():
        raise PreconditionError("mask is empty: no region to edit")
    if mode not in ("masked", "global"):
        raise ParameterError(f"unknown statistics mode {mode!r}")
    vals = A[M]
    if vals.max() == vals.min():
        return M.copy()
    pop = vals if mode == "masked" else np.where(M, A, 0.0).ravel()
    mu, sigma = pop.mean(), pop.std()
    gamma = mu - sigma
    idx = M & (A <= gamma)
    near = M & (np.abs(A - gamma) <= 1e-9 * max(np.abs(pop).max(), 1e-300))
    if near.any():
        exact = [Fraction(float(v)) for v in pop]
        mu_q = sum(exact, Fraction(0)) / len(exact)
        var_q = sum(((v - mu_q) ** 2 for v in exact), Fraction(0)) / len(exact)
        for i, j in zip(*np.nonzero(near)):
            d = mu_q - Fraction(float(A[i, j]))
            idx[i, j] = d >= 0 and d * d >= var_q
    return idx


def fourier_window(h: int, w: int, mode: str = "centered") -> np.ndarray:
    """Binary pass-band on the fft-shifted grid (DC at ``(h//2, w//2)``).

    ``literal``: ``h/2 < i < 3h/4`` and ``w/2 < j < 3w/4``. ``centered``: the
    same extent moved onto DC, ``3h/8 < i < 5h/8`` and ``3w/8 < j < 5w/8``.
    """
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    if mode == "literal":
        win = (2 * i > h) & (4 * i < 3 * h) & (2 * j > w) & (4 * j < 3 * w)
    elif mode == "centered":
        win = (8 * i > 3 * h) & (8 * i < 5 * h) & (8 * j > 3 * w) & (8 * j < 5 * w)
    else:
        raise ParameterError(f"unknown window mode {mode!r}")
    if not win.any():
        raise ParameterError(f"{mode} window is empty on a {h}x{w} grid")
    return win.astype(np.uint8)


def lowpass(z: torch.Tensor, window, check_residue: bool = True) -> torch.Tensor:
    """Keep the spectrum of ``z`` inside ``window`` (fft-shifted layout); differentiable."""
    win = torch.as_tensor(np.asarray(window), dtype=z.dtype, device=z.device)
    if win.shape != z.shape[-2:]:
        raise ShapeError(f"window {tuple(win.shape)} does not match spatial size {tuple(z.shape[-2:])}")
    spec = torch.fft.fftshift(torch.fft.fft2(z), dim=(-2, -1))
    out = torch.fft.ifft2(torch.fft.ifftshift(spec * win, dim=(-2, -1)))
    if check_residue:
        tol = (1e-9 if z.dtype == torch.float64 else 1e-4) * max(1.0, float(z.detach().abs().max()))
        resid = float(out.imag.detach().abs().max())
        if resid > tol:
            raise NumericError(f"imaginary residue {resid:.3e} after low-pass; window is not conjugate-symmetric")
    return out.real


def guidance_value(z0_lp: torch.Tensor, zhat_lp: torch.Tensor, idx) -> torch.Tensor:
    """Mean over boundary pixels of the squared channel-vector distance.

    Inputs are (C, H, W) or (B, C, H, W); ``idx`` is a boolean (H, W) or
    (B, H, W) set. Returns a scalar or (B,) tensor; an empty set gives 0.
    """
    if z0_lp.shape != zhat_lp.shape:
        raise ShapeError(f"{tuple(z0_lp.shape)} vs {tuple(zhat_lp.shape)}")
    idx = torch.as_tensor(np.asarray(idx) if not isinstance(idx, torch.Tensor) else idx).bool()
    sq = ((zhat_lp - z0_lp) ** 2).sum(-3)          # (..., H, W)
    w = idx.to(sq.dtype).to(sq.device)
    count = w.sum((-2, -1))
    return (sq * w).sum((-2, -1)) / count.clamp(min=1)


def guided_epsilon(eps_pred: torch.Tensor, grad_g: torch.Tensor, t: int, cfg: GuidanceConfig,
                   s: NoiseSchedule) -> torch.Tensor:
    """Steer the noise estimate by the guidance gradient scaled by ``lam * rho_t``.

    ``sign="descent"`` adds the gradient, which lowers the guidance value of the
    resulting clean estimate; ``sign="literal"`` subtracts it.
    """
    if eps_pred.shape != grad_g.shape:
        raise ShapeError(f"{tuple(eps_pred.shape)} vs {tuple(grad_g.shape)}")
    if cfg.lam == 0:
        return eps_pred
    k = cfg.lam * float(s.rho[s.check_t(t)])
    return eps_pred + k * grad_g if cfg.sign == "descent" else eps_pred - k * grad_g


def guidance_objective(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, z0_lp: torch.Tensor,
                       idx, window, s: NoiseSchedule, check_residue: bool = True) -> torch.Tensor:
    """g(z0', lowpass(one_step_prediction(z_t, eps))) per sample."""
    zhat = one_step_prediction(z_t, eps_pred, t, s)
    return guidance_value(z0_lp, lowpass(zhat, window, check_residue), idx)


def guidance_gradient(z_t: torch.Tensor, eps_fn, t: int, z0_lp: torch.Tensor, idx, window,
                      s: NoiseSchedule, check_residue: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient of the summed guidance value w.r.t. ``z_t``, differentiating through ``eps_fn``.

    Returns ``(grad, eps_pred)`` with ``eps_pred`` detached.
    """
    with torch.enable_grad():
        z = z_t.detach().requires_grad_(True)
        eps = eps_fn(z)
        g = guidance_objective(z, eps, t, z0_lp, idx, window, s, check_residue)
        (grad,) = torch.autograd.grad(g.sum(), z)
    return grad, eps.detach()


def cad(edited, original, M) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative amplitude difference of masked images versus radius on the shifted spectrum.

    Returns ``(radii, curve)`` with ``radii = 0..R`` and ``curve[r]`` the sum of
    ``|FFT(edited*M)| - |FFT(original*M)|`` over bins at distance ``< r`` from
    DC, summed over channels. ``R`` exceeds the largest bin distance, so
    ``curve[R]`` covers the whole spectrum.
    """
    e = np.asarray(edited, dtype=np.float64)
    o = np.asarray(original, dtype=np.float64)
    if e.shape != o.shape:
        raise ShapeError(f"{e.shape} vs {o.shape}")
    if e.ndim == 2:
        e, o = e[None], o[None]
    m = np.asarray(M, dtype=np.float64)
    amp = lambda x: np.abs(np.fft.fftshift(np.fft.fft2(x * m), axes=(-2, -1)))
    diff = (amp(e) - amp(o)).sum(0)
    H, W = diff.shape
    ii, jj = np.mgrid[0:H, 0:W]
    dist = np.hypot(ii - H // 2, jj - W // 2)
    R = int(np.floor(dist.max())) + 1
    ring = np.floor(dist).astype(int)
    per_ring = np.bincount(ring.ravel(), weights=diff.ravel(), minlength=R)
    curve = np.concatenate([[0.0], np.cumsum(per_ring)[:R]])
    return np.arange(R + 1), curve
