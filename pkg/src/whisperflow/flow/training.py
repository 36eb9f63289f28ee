"""Conditional flow-matching loss, Adam training loop and Euler sampler."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch

from .model import VelocityModel
from .paths import interpolate, target_velocity


class FlowMode(str, Enum):
    GAUSSIAN_PRIOR = "gaussian_prior"
    PAIRED_SOURCE = "paired_source"


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    mode: FlowMode = FlowMode.GAUSSIAN_PRIOR
    crop_frames: int | None = 32

    def __post_init__(self):
        object.__setattr__(self, "mode", FlowMode(self.mode))
        if self.learning_rate <= 0 or self.eps <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate, eps and batch_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.crop_frames is not None and self.crop_frames < 1:
            raise ValueError("crop_frames must be positive")


@dataclass(frozen=True)
class FlowExample:
    """One training pair.

    ``z1`` is the ``D x L`` target, ``z0`` the paired ``D x L`` source (only
    used in paired mode), ``content`` is ``L x C`` and ``speaker`` a vector.
    """
    z1: np.ndarray
    content: np.ndarray
    speaker: np.ndarray
    z0: np.ndarray | None = None

    def __post_init__(self):
        for name in ("z1", "content", "speaker", "z0"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64)
                if not np.all(np.isfinite(value)):
                    raise ValueError(f"{name} contains non-finite values")
                object.__setattr__(self, name, value)
        if self.content.shape[0] != self.z1.shape[1]:
            raise ValueError("content must have one row per latent frame")
        if self.z0 is not None and self.z0.shape != self.z1.shape:
            raise ValueError("z0 and z1 shapes differ")

    @property
    def length(self) -> int:
        return self.z1.shape[1]


@dataclass
class Batch:
    z1: torch.Tensor        # (B, D, L)
    content: torch.Tensor   # (B, L, C)
    speaker: torch.Tensor   # (B, S)
    z0: torch.Tensor | None = None
    positions: torch.Tensor | None = None

    def __len__(self):
        return self.z1.shape[0]


def stack_batch(examples: Sequence[FlowExample], starts: Sequence[int] | None = None,
                length: int | None = None, dtype=torch.float32) -> Batch:
    """Crop every example to ``[start, start + length)`` and stack."""
    if not examples:
        raise ValueError("empty batch")
    length = examples[0].length if length is None else length
    starts = [0] * len(examples) if starts is None else starts

    def take(arrays):
        return torch.as_tensor(np.stack(arrays), dtype=dtype)

    z1 = take([e.z1[:, s:s + length] for e, s in zip(examples, starts)])
    content = take([e.content[s:s + length] for e, s in zip(examples, starts)])
    speaker = take([e.speaker for e in examples])
    z0 = None
    if all(e.z0 is not None for e in examples):
        z0 = take([e.z0[:, s:s + length] for e, s in zip(examples, starts)])
    if z1.shape[-1] != length:
        raise ValueError("crop extends past the end of an example")
    # positions only matter for attention; all crops in a batch share them
    positions = torch.arange(starts[0], starts[0] + length) if len(set(starts)) == 1 else None
    return Batch(z1, content, speaker, z0, positions)


def cfm_loss(model: VelocityModel, batch: Batch, mode: FlowMode,
             generator: torch.Generator | None = None,
             t: torch.Tensor | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between predicted and straight-path target velocity.

    ``t`` is drawn uniformly per sequence and, in Gaussian-prior mode, ``z0``
    from a standard normal, both from ``generator`` unless supplied.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    mode = FlowMode(mode)
    z1 = batch.z1
    if mode is FlowMode.PAIRED_SOURCE:
        if batch.z0 is None:
            raise ValueError("paired mode needs z0 for every example")
        z0 = batch.z0
    else:
        z0 = noise if noise is not None else torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    if t is None:
        t = torch.rand(len(batch), generator=generator, dtype=z1.dtype)
    zt = interpolate(z0, z1, t[:, None, None])
    pred = model(zt, t, batch.content, batch.speaker, batch.positions)
    return torch.mean((pred - target_velocity(z0, z1)) ** 2)


def loss_and_grad(model: VelocityModel, batch: Batch, mode: FlowMode,
                  t: torch.Tensor, noise: torch.Tensor | None = None) -> tuple[float, np.ndarray]:
    """Loss value and flat parameter gradient (layout order) for fixed ``t`` and noise."""
    model.zero_grad()
    loss = cfm_loss(model, batch, mode, t=t, noise=noise)
    loss.backward()
    grad = torch.cat([p.grad.reshape(-1) for p in model.parameters()])
    return float(loss.detach()), grad.detach().cpu().numpy().copy()


@dataclass
class CropSampler:
    """Seeded batch sampler over fixed-length random crops."""
    examples: Sequence[FlowExample]
    batch_size: int
    crop_frames: int | None
    rng: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self):
        if not self.examples:
            raise ValueError("empty dataset")

    def next(self) -> Batch:
        idx = self.rng.integers(0, len(self.examples), size=self.batch_size)
        chosen = [self.examples[i] for i in idx]
        shortest = min(e.length for e in chosen)
        length = shortest if self.crop_frames is None else min(self.crop_frames, shortest)
        # one shared offset keeps positional encodings consistent inside a batch
        start = int(self.rng.integers(0, shortest - length + 1))
        return stack_batch(chosen, [start] * len(chosen), length)


@dataclass(frozen=True)
class TrainResult:
    model: VelocityModel
    losses: list[tuple[int, float]]


def train(model: VelocityModel, examples: Sequence[FlowExample], config: TrainConfig,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on the flow-matching loss; deterministic given ``config.seed``.

    The loss recorded for step ``k`` is the batch loss before the ``k``-th
    update. A non-finite loss raises :class:`TrainingDivergedError`.
    """
    if config.steps == 0:
        return TrainResult(model, [])
    torch.manual_seed(config.seed)
    sampler = CropSampler(examples, config.batch_size, config.crop_frames,
                          np.random.default_rng(config.seed))
    generator = torch.Generator().manual_seed(config.seed)
    optimiser = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=config.betas, eps=config.eps)
    dtype = next(model.parameters()).dtype
    losses = []
    model.train()
    for step in range(config.steps):
        batch = sampler.next()
        if dtype != batch.z1.dtype:
            batch = _cast(batch, dtype)
        loss = cfm_loss(model, batch, config.mode, generator)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        optimiser.zero_grad()
        loss.backward()
        optimiser.step()
        losses.append((step, value))
        if callback is not None:
            callback(step, value)
    model.eval()
    return TrainResult(model, losses)


def _cast(batch: Batch, dtype) -> Batch:
    conv = lambda x: None if x is None else x.to(dtype)
    return replace(batch, z1=conv(batch.z1), content=conv(batch.content),
                   speaker=conv(batch.speaker), z0=conv(batch.z0))


VelocityFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def euler_integrate(velocity: VelocityModel | VelocityFn, z0: torch.Tensor, steps: int = 10,
                    content: torch.Tensor | None = None, speaker: torch.Tensor | None = None,
                    positions: torch.Tensor | None = None) -> torch.Tensor:
    """``z_{k+1} = z_k + v(z_k, k / N) / N`` for ``k = 0 .. N-1``.

    ``velocity`` is either a :class:`VelocityModel` (called with the
    conditioning) or a plain function ``v(z, t)`` with ``t`` of shape ``(batch,)``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    z = z0
    batch = z0.shape[0]
    with torch.no_grad():
        for k in range(steps):
            t = torch.full((batch,), k / steps, dtype=z0.dtype)
            if isinstance(velocity, VelocityModel):
                v = velocity(z, t, content, speaker, positions)
            else:
                v = velocity(z, t)
            z = z + v / steps
    return z


def sample(model: VelocityModel, content: torch.Tensor, speaker: torch.Tensor, length: int,
           seed: int = 0, steps: int = 10) -> torch.Tensor:
    """Draw ``z0 ~ N(0, I)`` from ``seed`` and integrate to ``t = 1``; returns ``(batch, D, L)``."""
    dtype = next(model.parameters()).dtype
    generator = torch.Generator().manual_seed(seed)
    z0 = torch.randn((content.shape[0], model.config.latent_dim, length),
                     generator=generator, dtype=dtype)
    model.eval()
    return euler_integrate(model, z0, steps, content.to(dtype), speaker.to(dtype))
