"""Linear probability paths and sinusoidal embeddings."""
from __future__ import annotations

import math

import numpy as np
import torch


def _check_shapes(z0, z1):
    if tuple(z0.shape) != tuple(z1.shape):
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(z1.shape)}")


def interpolate(z0, z1, t):
    """Point ``(1 - t) z0 + t z1`` on the straight path; works for arrays and tensors.

    ``t`` may be a scalar or broadcast against the leading (batch) axis.
    """
    _check_shapes(z0, z1)
    if np.isscalar(t) and not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1 - t) * z0 + t * z1


def target_velocity(z0, z1):
    """Constant velocity ``z1 - z0`` of the straight path."""
    _check_shapes(z0, z1)
    return z1 - z0


def embedding_frequencies(dim: int) -> np.ndarray:
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even number, got {dim}")
    return np.geomspace(1.0, 10000.0, dim // 2)


def timestep_embed(t, dim: int):
    """``[sin(t w_k), cos(t w_k)]`` with ``w_k`` log-spaced over ``[1, 1e4]``.

    Accepts a scalar, a numpy vector or a torch tensor of times; the output
    has a trailing axis of size ``dim`` and matches the input library.
    """
    freqs = embedding_frequencies(dim)
    if isinstance(t, torch.Tensor):
        w = torch.as_tensor(freqs, dtype=t.dtype, device=t.device)
        arg = t[..., None] * w
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
    arg = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def positional_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style encoding of integer frame positions, shape ``(..., dim)``."""
    half = dim // 2
    inv = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    arg = positions.to(torch.float64)[..., None] * inv
    enc = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
    if dim % 2:
        enc = torch.cat([enc, torch.zeros(*enc.shape[:-1], 1, dtype=enc.dtype)], dim=-1)
    return enc
