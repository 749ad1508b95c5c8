"""Scalar/vector target transforms shared by the data and model layers.

numpy versions operate on arrays (dataset preparation, metric computation);
torch versions are differentiable and used inside training losses and
decoding heads. Each transform has an exact inverse.
"""

from __future__ import annotations

import numpy as np
import torch


def log1p_signed(x: np.ndarray) -> np.ndarray:
    """sign(x) * ln(1 + |x|), elementwise; odd, monotone, 0 -> 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def expm1_signed(y: np.ndarray) -> np.ndarray:
    """Inverse of `log1p_signed`."""
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.expm1(np.abs(y))


def expm1_signed_torch(y: torch.Tensor) -> torch.Tensor:
    return torch.sign(y) * torch.expm1(torch.abs(y))


def sqrt_signed(v: np.ndarray, sigma: float) -> np.ndarray:
    """Scale a vector field by 1/sigma, then replace its magnitude by its sqrt.

    Direction is preserved: w = v / sigma maps to w / sqrt(|w|), with 0 -> 0.
    Compresses heavy-tailed magnitudes while keeping the sign structure.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    w = np.asarray(v, dtype=np.float64) / sigma
    norm = np.linalg.norm(w, axis=-1, keepdims=True)
    return w / np.sqrt(np.maximum(norm, 1e-300))


def sqrt_signed_inverse(y: np.ndarray, sigma: float) -> np.ndarray:
    """Inverse of `sqrt_signed`: w = y * |y|, v = sigma * w."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=np.float64)
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    return sigma * y * norm


def sqrt_signed_torch(v: torch.Tensor, sigma: float) -> torch.Tensor:
    """`sqrt_signed` on tensors, differentiable (norm floored at 1e-12)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    w = v / sigma
    norm = torch.linalg.norm(w, dim=-1, keepdim=True)
    return w * torch.rsqrt(torch.clamp(norm, min=1e-12))
