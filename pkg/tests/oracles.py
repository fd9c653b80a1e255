"""Independent reference computations shared by the tests."""
import itertools
import math
from fractions import Fraction

import numpy as np
import torch


def central_difference(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Elementwise central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            v = flat[k].item()
            flat[k] = v + h
            fp = float(f(x))
            flat[k] = v - h
            fm = float(f(x))
            flat[k] = v
            gflat[k] = (fp - fm) / (2 * h)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def naive_dft2(x: np.ndarray) -> np.ndarray:
    H, W = x.shape
    out = np.zeros((H, W), complex)
    for u in range(H):
        for v in range(W):
            s = 0j
            for i in range(H):
                for j in range(W):
                    s += x[i, j] * np.exp(-2j * math.pi * (u * i / H + v * j / W))
            out[u, v] = s
    return out


def naive_idft2(X: np.ndarray) -> np.ndarray:
    H, W = X.shape
    out = np.zeros((H, W), complex)
    for i in range(H):
        for j in range(W):
            s = 0j
            for u in range(H):
                for v in range(W):
                    s += X[u, v] * np.exp(2j * math.pi * (u * i / H + v * j / W))
            out[i, j] = s / (H * W)
    return out


def lowpass_oracle(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Naive DFT, shift by explicit index arithmetic, mask, unshift, naive inverse DFT."""
    H, W = x.shape
    X = naive_dft2(x)
    shifted = np.zeros_like(X)
    for u, v in itertools.product(range(H), range(W)):
        shifted[(u + H // 2) % H, (v + W // 2) % W] = X[u, v]
    shifted *= window
    back = np.zeros_like(X)
    for u, v in itertools.product(range(H), range(W)):
        back[u, v] = shifted[(u + H // 2) % H, (v + W // 2) % W]
    return naive_idft2(back)


def boundary_oracle(A: np.ndarray, M: np.ndarray, mode: str = "masked") -> np.ndarray:
    """Exact rational recomputation: a <= mu - sigma  <=>  mu - a >= 0 and (mu - a)^2 >= var."""
    H, W = A.shape
    masked = [Fraction(float(A[i, j])) for i in range(H) for j in range(W) if M[i, j]]
    if max(masked) == min(masked):
        return M.astype(bool)
    if mode == "masked":
        pop = masked
    else:
        pop = [Fraction(float(A[i, j])) if M[i, j] else Fraction(0) for i in range(H) for j in range(W)]
    mu = sum(pop, Fraction(0)) / len(pop)
    var = sum(((v - mu) ** 2 for v in pop), Fraction(0)) / len(pop)
    out = np.zeros(A.shape, bool)
    for i in range(H):
        for j in range(W):
            d = mu - Fraction(float(A[i, j]))
            out[i, j] = bool(M[i, j]) and d >= 0 and d * d >= var
    return out
