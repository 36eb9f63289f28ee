"""Toy velocity-field network with AdaLN conditioning.

Tokens are per-frame latent vectors projected to ``width``. Every block
applies adaptive layer normalisation driven by ``concat(t_emb, speaker)``
before its token mixer and MLP. Content features enter either as extra
tokens prepended along time or through a per-block single-head
cross-attention read.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .paths import positional_encoding, timestep_embed

LN_EPS = 1e-5


class ConditioningMode(str, Enum):
    PREPEND = "prepend"
    CROSS_ATTENTION = "cross_attention"


class TokenMixer(str, Enum):
    SELF_ATTENTION = "self_attention"
    TEMPORAL_CONV = "temporal_conv"


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 64
    content_dim: int = 64
    speaker_dim: int = 16
    blocks: int = 4
    width: int = 128
    conditioning: ConditioningMode = ConditioningMode.PREPEND
    mixer: TokenMixer = TokenMixer.SELF_ATTENTION
    time_dim: int = 64
    kernel_size: int = 3
    mlp_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "conditioning", ConditioningMode(self.conditioning))
        object.__setattr__(self, "mixer", TokenMixer(self.mixer))
        for name in ("latent_dim", "content_dim", "blocks", "width", "time_dim",
                     "kernel_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.speaker_dim < 0:
            raise ValueError("speaker_dim must be nonnegative")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")


def adaln_modulate(hidden: torch.Tensor, t_emb: torch.Tensor, speaker: torch.Tensor,
                   affine: nn.Linear) -> torch.Tensor:
    """Normalise each frame of ``hidden`` then scale by ``1 + gamma`` and shift by ``beta``.

    Parameters
    ----------
    hidden : (batch, frames, width)
    t_emb : (batch, time_dim)
    speaker : (batch, speaker_dim)
    affine : linear map from ``time_dim + speaker_dim`` to ``2 * width``
    """
    width = hidden.shape[-1]
    gamma, beta = affine(torch.cat([t_emb, speaker], dim=-1)).split(width, dim=-1)
    normed = F.layer_norm(hidden, (width,), eps=LN_EPS)
    return normed * (1 + gamma[:, None, :]) + beta[:, None, :]


class AdaLN(nn.Module):
    def __init__(self, cond_dim: int, width: int):
        super().__init__()
        self.affine = nn.Linear(cond_dim, 2 * width)
        nn.init.zeros_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)

    def forward(self, hidden, t_emb, speaker):
        return adaln_modulate(hidden, t_emb, speaker, self.affine)


class Attention(nn.Module):
    """Single-head scaled dot-product attention."""

    def __init__(self, width: int):
        super().__init__()
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x, context=None):
        context = x if context is None else context
        scores = self.q(x) @ self.k(context).transpose(1, 2) / math.sqrt(x.shape[-1])
        return self.out(torch.softmax(scores, dim=-1) @ self.v(context))


class TemporalConv(nn.Module):
    def __init__(self, width: int, kernel_size: int):
        super().__init__()
        self.conv = nn.Conv1d(width, width, kernel_size, padding=kernel_size // 2)

    def forward(self, x, context=None):
        return F.gelu(self.conv(x.transpose(1, 2))).transpose(1, 2)


class Block(nn.Module):
    def __init__(self, config: ModelConfig, cond_dim: int):
        super().__init__()
        w = config.width
        self.norm_mix = AdaLN(cond_dim, w)
        if config.mixer is TokenMixer.SELF_ATTENTION:
            self.mix = Attention(w)
        else:
            self.mix = TemporalConv(w, config.kernel_size)
        self.cross = None
        if config.conditioning is ConditioningMode.CROSS_ATTENTION:
            self.norm_cross = AdaLN(cond_dim, w)
            self.cross = Attention(w)
        self.norm_mlp = AdaLN(cond_dim, w)
        self.mlp = nn.Sequential(nn.Linear(w, config.mlp_ratio * w), nn.GELU(),
                                 nn.Linear(config.mlp_ratio * w, w))

    def forward(self, h, t_emb, speaker, context=None):
        h = h + self.mix(self.norm_mix(h, t_emb, speaker))
        if self.cross is not None:
            h = h + self.cross(self.norm_cross(h, t_emb, speaker), context)
        return h + self.mlp(self.norm_mlp(h, t_emb, speaker))


class VelocityModel(nn.Module):
    """Predicts ``v(z_t, t, content, speaker)`` with the same ``(batch, D, L)`` shape as ``z_t``.

    The output head modulates the residual stream without normalising it, so
    fields that are affine in ``z_t`` with a time-dependent slope are
    representable exactly. The head is zero-initialised: a fresh model
    predicts zero velocity everywhere.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        w = config.width
        cond_dim = config.width + config.speaker_dim
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.latent_in = nn.Linear(config.latent_dim, w)
        self.content_in = nn.Linear(config.content_dim, w)
        self.blocks = nn.ModuleList(Block(config, cond_dim) for _ in range(config.blocks))
        self.head_mod = nn.Linear(cond_dim, 2 * w)
        self.head = nn.Linear(w, config.latent_dim)
        for layer in (self.head_mod, self.head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    # -- flat parameter view ------------------------------------------------

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """``(name, shape, offset)`` of each parameter in the flat vector."""
        out, offset = [], 0
        for name, p in self.named_parameters():
            out.append((name, tuple(p.shape), offset))
            offset += p.numel()
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).cpu().numpy().copy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat)
        if flat.shape != (self.parameter_count(),):
            raise ValueError(f"expected {self.parameter_count()} parameters, got {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.as_tensor(flat[offset:offset + n], dtype=p.dtype).reshape(p.shape))
                offset += n

    # -- forward ------------------------------------------------------------

    def condition(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embed(t, self.config.time_dim))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, content: torch.Tensor,
                speaker: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        """
        Parameters
        ----------
        z_t : (batch, D, L) noisy latents
        t : (batch,) times in [0, 1]
        content : (batch, L, content_dim) frame-aligned content features
        speaker : (batch, speaker_dim)
        positions : optional (L,) integer frame positions, default ``0..L-1``
        """
        cfg = self.config
        batch, dim, length = z_t.shape
        if dim != cfg.latent_dim:
            raise ValueError(f"latent dim {dim} does not match model ({cfg.latent_dim})")
        if content.shape[0] != batch or content.shape[-1] != cfg.content_dim:
            raise ValueError(f"content shape {tuple(content.shape)} incompatible with model")
        if content.shape[1] != length:
            raise ValueError("content must be resampled to the latent length")
        if speaker.shape != (batch, cfg.speaker_dim):
            raise ValueError(f"speaker shape {tuple(speaker.shape)} != ({batch}, {cfg.speaker_dim})")
        t = t.to(z_t.dtype).reshape(batch)
        if positions is None:
            positions = torch.arange(length)
        pe = positional_encoding(positions, cfg.width).to(z_t.dtype)
        t_emb = self.condition(t)

        h = self.latent_in(z_t.transpose(1, 2)) + pe
        ctx = self.content_in(content) + pe
        if cfg.conditioning is ConditioningMode.PREPEND:
            h = torch.cat([ctx, h], dim=1)
            ctx = None
        for block in self.blocks:
            h = block(h, t_emb, speaker, ctx)
        if cfg.conditioning is ConditioningMode.PREPEND:
            h = h[:, length:]
        gamma, beta = self.head_mod(torch.cat([t_emb, speaker], dim=-1)).split(cfg.width, dim=-1)
        h = h * (1 + gamma[:, None, :]) + beta[:, None, :]
        return self.head(h).transpose(1, 2)
