"""Positional machinery: 3D sincos feature embeddings and 3D rotary attention.

Both operate on network-space coordinates (the [0, 1000]-scaled frame) and
share one frequency ladder: n channels per axis rotate at angular rates
omega_i = max_wavelength^(-i / n), a geometric decay from 1 rad per network
unit down to 1/max_wavelength. Angles and their sin/cos are always evaluated
in float64 and cast to the working dtype afterwards, so half-precision
activations never degrade positional information and the rotary relative-
position identity holds to float32 roundoff even at coordinates ~1000.
"""

from __future__ import annotations

import numpy as np
import torch

DEFAULT_MAX_WAVELENGTH = 10_000.0


def _as_torch_positions(positions) -> torch.Tensor:
    if isinstance(positions, np.ndarray):
        positions = torch.from_numpy(np.ascontiguousarray(positions))
    if positions.ndim == 1:
        positions = positions.unsqueeze(0)
    if positions.ndim != 2 or positions.shape[-1] != 3:
        raise ValueError(f"positions must have shape [n, 3], got {tuple(positions.shape)}")
    if not torch.isfinite(positions).all():
        raise ValueError("positions contain non-finite values")
    return positions.to(torch.float64)


def _frequency_ladder(num: int, max_wavelength: float) -> torch.Tensor:
    # omega_i = max_wavelength^(-i/num); omega_0 = 1 exactly.
    i = torch.arange(num, dtype=torch.float64)
    return torch.pow(torch.tensor(float(max_wavelength), dtype=torch.float64), -i / num)


def sincos_embed(
    positions,
    dim: int,
    max_wavelength: float = DEFAULT_MAX_WAVELENGTH,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Fixed sinusoidal features of 3D positions.

    The embedding allots dim/3 channels per coordinate axis, interleaved as
    (sin, cos) pairs over the shared frequency ladder, and concatenates the
    axes: [axis0 pairs | axis1 pairs | axis2 pairs]. `dim` must be divisible
    by 6 so each axis gets whole pairs.
    """
    if dim <= 0 or dim % 6 != 0:
        raise ValueError(f"embedding dim must be a positive multiple of 6, got {dim}")
    if max_wavelength <= 0:
        raise ValueError("max_wavelength must be positive")
    pos = _as_torch_positions(positions)
    num_freq = dim // 6
    omega = _frequency_ladder(num_freq, max_wavelength)
    angles = pos[:, :, None] * omega[None, None, :]  # [n, 3, num_freq], float64
    paired = torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1)  # [n, 3, nf, 2]
    return paired.reshape(pos.shape[0], dim).to(dtype)


def rope_rotate(
    x: torch.Tensor,
    positions,
    max_wavelength: float = DEFAULT_MAX_WAVELENGTH,
) -> torch.Tensor:
    """Rotate head channels by position-dependent angles (3D rotary embedding).

    `x` has shape [..., n, head_dim]; the leading dims usually index heads.
    head_dim is split into three contiguous per-axis groups of
    2 * (head_dim // 6) channels; within a group, consecutive channel pairs
    (x_{2i}, x_{2i+1}) are rotated by angle = position_axis * omega_i:

        x_2i'   =  cos * x_2i - sin * x_2i+1
        x_2i+1' =  sin * x_2i + cos * x_2i+1

    Channels past 6 * (head_dim // 6) pass through unrotated (partial
    rotation), which keeps arbitrary head sizes usable. The attention dot
    product of two rotated vectors depends on positions only through their
    difference.
    """
    if x.ndim < 2:
        raise ValueError("x must have shape [..., n, head_dim]")
    head_dim = x.shape[-1]
    pairs_per_axis = head_dim // 6
    if pairs_per_axis == 0:
        raise ValueError(f"head_dim must be at least 6 to rotate, got {head_dim}")
    pos = _as_torch_positions(positions)
    n = pos.shape[0]
    if x.shape[-2] != n:
        raise ValueError(
            f"positions count {n} does not match token count {x.shape[-2]}"
        )
    omega = _frequency_ladder(pairs_per_axis, max_wavelength)
    angles = pos[:, :, None] * omega[None, None, :]  # [n, 3, pairs], float64
    # Rotation math runs at >= 32-bit even for half-precision activations.
    work_dtype = x.dtype if x.dtype in (torch.float32, torch.float64) else torch.float32
    cos = torch.cos(angles).reshape(n, 3 * pairs_per_axis).to(work_dtype)
    sin = torch.sin(angles).reshape(n, 3 * pairs_per_axis).to(work_dtype)

    rot_dim = 6 * pairs_per_axis
    head, tail = x[..., :rot_dim].to(work_dtype), x[..., rot_dim:]
    even = head[..., 0::2]  # [..., n, 3*pairs]
    odd = head[..., 1::2]
    rot_even = cos * even - sin * odd
    rot_odd = sin * even + cos * odd
    rotated = torch.stack((rot_even, rot_odd), dim=-1).reshape(head.shape).to(x.dtype)
    return torch.cat((rotated, tail), dim=-1) if tail.shape[-1] else rotated
