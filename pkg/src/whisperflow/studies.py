"""Closed-form oracle experiments for the flow-matching engine.

Each study trains (or probes) a small velocity model on a problem whose
answer is known analytically and returns the measured error next to its
threshold. Results carry ``rows()`` for CSV emission so that two runs with
the same seeds can be compared byte for byte.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .flow.model import ConditioningMode, ModelConfig, TokenMixer, VelocityModel
from .flow.training import (Batch, FlowExample, FlowMode, TrainConfig, euler_integrate,
                            loss_and_grad, sample, train)


@dataclass(frozen=True)
class Check:
    """One measured quantity compared against an acceptance bound."""
    name: str
    value: float
    threshold: float
    passed: bool

    def row(self) -> list[str]:
        return [self.name, repr(float(self.value)), repr(float(self.threshold)),
                "pass" if self.passed else "fail"]


CHECK_HEADER = ["check", "value", "threshold", "status"]


def _toy_model(latent_dim: int, content_dim: int, width: int, blocks: int,
               conditioning=ConditioningMode.PREPEND, seed: int = 0) -> VelocityModel:
    torch.manual_seed(seed)
    return VelocityModel(ModelConfig(latent_dim=latent_dim, content_dim=content_dim,
                                     speaker_dim=0, blocks=blocks, width=width, time_dim=32,
                                     conditioning=conditioning))


def _predict(model: VelocityModel, z: np.ndarray, t: float, content: np.ndarray) -> np.ndarray:
    """Velocity at single-frame points ``z`` (n x D) with per-point content (n x C)."""
    n = z.shape[0]
    zt = torch.as_tensor(z[:, :, None], dtype=torch.float32)
    c = torch.as_tensor(content[:, None, :], dtype=torch.float32)
    with torch.no_grad():
        v = model(zt, torch.full((n,), float(t)), c, torch.zeros(n, 0))
    return v[:, :, 0].numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Delta target: a single fixed z1 under a Gaussian prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeltaTargetConfig:
    target: tuple[float, float] = (1.0, -0.5)
    steps: int = 3000
    batch_size: int = 256
    width: int = 64
    blocks: int = 2
    learning_rate: float = 3e-4
    grid: int = 10
    extent: float = 3.0
    times: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    threshold: float = 0.15


@dataclass(frozen=True)
class DeltaTargetResult:
    errors: np.ndarray          # (times, grid points) relative L2 errors
    median: float
    final_loss: float
    config: DeltaTargetConfig

    @property
    def passed(self) -> bool:
        return self.median <= self.config.threshold

    def rows(self) -> list[list[str]]:
        out = [["t", "median_relative_error"]]
        for t, e in zip(self.config.times, self.errors):
            out.append([repr(float(t)), repr(float(np.median(e)))])
        out.append(["all", repr(self.median)])
        return out


def optimal_delta_velocity(z: np.ndarray, target: np.ndarray, t: float) -> np.ndarray:
    """Minimiser of the flow-matching loss when every sample has the same endpoint."""
    return (target - z) / (1.0 - t)


def delta_target_study(config: DeltaTargetConfig = DeltaTargetConfig(),
                       seed: int = 0) -> DeltaTargetResult:
    target = np.asarray(config.target, dtype=np.float64)
    examples = [FlowExample(target[:, None], np.zeros((1, 1)), np.zeros(0))]
    model = _toy_model(target.size, 1, config.width, config.blocks, seed=seed)
    result = train(model, examples, TrainConfig(learning_rate=config.learning_rate,
                                                steps=config.steps, batch_size=config.batch_size,
                                                seed=seed, crop_frames=None))
    axis = np.linspace(-config.extent, config.extent, config.grid)
    grid = np.array([[a, b] for a in axis for b in axis])
    content = np.zeros((grid.shape[0], 1))
    errors = []
    for t in config.times:
        v = _predict(model, grid, t, content)
        ref = optimal_delta_velocity(grid, target, t)
        errors.append(np.linalg.norm(v - ref, axis=1) / np.linalg.norm(ref, axis=1))
    errors = np.asarray(errors)
    tail = [loss for _, loss in result.losses[-100:]]
    return DeltaTargetResult(errors, float(np.median(errors)), float(np.mean(tail)), config)


def monte_carlo_delta_velocity(target: np.ndarray, t: float, centres: np.ndarray,
                               half_width: float, samples: int, seed: int = 0) -> np.ndarray:
    """Empirical ``E[z1 - z0 | z_t in box]`` for a fixed endpoint, one row per box centre.

    Independent check of the closed-form field: draw ``z0 ~ N(0, I)``, form
    ``z_t`` and average the target velocity over the points that land in an
    axis-aligned box around each centre.
    """
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((samples, target.size))
    zt = (1 - t) * z0 + t * target
    vel = target - z0
    out = np.full(centres.shape, np.nan)
    for i, c in enumerate(centres):
        inside = np.all(np.abs(zt - c) <= half_width, axis=1)
        if inside.any():
            out[i] = vel[inside].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# Gaussian transport N(0, I) -> N(mu, sigma^2 I)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransportConfig:
    mean: tuple[float, float] = (3.0, 3.0)
    std: float = 0.5
    train_samples: int = 4096
    samples: int = 4096
    euler_steps: int = 10
    steps: int = 3000
    batch_size: int = 256
    width: int = 64
    blocks: int = 2
    learning_rate: float = 3e-4
    mean_tolerance: float = 0.1
    std_tolerance: float = 0.15


@dataclass(frozen=True)
class TransportResult:
    sample_mean: np.ndarray
    sample_std: np.ndarray
    exact_field_std: float
    config: TransportConfig

    @property
    def mean_error(self) -> np.ndarray:
        return np.abs(self.sample_mean - np.asarray(self.config.mean))

    @property
    def std_ratio(self) -> np.ndarray:
        return self.sample_std / self.config.std

    @property
    def passed(self) -> bool:
        return bool(np.all(self.mean_error <= self.config.mean_tolerance)
                    and np.all(np.abs(self.std_ratio - 1) <= self.config.std_tolerance))

    def rows(self) -> list[list[str]]:
        out = [["dim", "mean", "mean_error", "std", "std_ratio"]]
        for d in range(self.sample_mean.size):
            out.append([str(d), repr(float(self.sample_mean[d])), repr(float(self.mean_error[d])),
                        repr(float(self.sample_std[d])), repr(float(self.std_ratio[d]))])
        out.append(["exact_field_std", repr(self.exact_field_std), "", "", ""])
        return out


def gaussian_transport_velocity(z: torch.Tensor, t: torch.Tensor, mean: torch.Tensor,
                                std: float) -> torch.Tensor:
    """Exact marginal field from ``N(0, I)`` to ``N(mean, std^2 I)`` on straight paths.

    With ``s(t)^2 = (1 - t)^2 + t^2 std^2`` the point ``z`` is the image of
    ``x0 = (z - t mean) / s(t)`` and moves with ``mean + x0 * s'(t)``.
    """
    t = t.reshape(-1, *([1] * (z.dim() - 1)))
    s2 = (1 - t) ** 2 + t ** 2 * std ** 2
    ds = (t * std ** 2 - (1 - t)) / torch.sqrt(s2)
    return mean + (z - t * mean) / torch.sqrt(s2) * ds


def exact_field_euler_std(std: float, steps: int) -> float:
    """Std reached by ``steps`` Euler steps of the exact transport field from unit variance.

    The field is affine in ``z`` so the Euler map scales the spread of ``z``
    by ``1 + ds/s / N`` each step; no sampling is involved.
    """
    spread = 1.0
    for k in range(steps):
        t = k / steps
        s2 = (1 - t) ** 2 + t ** 2 * std ** 2
        spread *= 1 + (t * std ** 2 - (1 - t)) / s2 / steps
    return spread


def gaussian_transport_study(config: TransportConfig = TransportConfig(),
                             seed: int = 0) -> TransportResult:
    rng = np.random.default_rng(seed)
    mean = np.asarray(config.mean, dtype=np.float64)
    targets = mean[None, :, None] + config.std * rng.standard_normal(
        (config.train_samples, mean.size, 1))
    examples = [FlowExample(z, np.zeros((1, 1)), np.zeros(0)) for z in targets]
    model = _toy_model(mean.size, 1, config.width, config.blocks, seed=seed)
    train(model, examples, TrainConfig(learning_rate=config.learning_rate, steps=config.steps,
                                       batch_size=config.batch_size, seed=seed, crop_frames=None))
    out = sample(model, torch.zeros(config.samples, 1, 1), torch.zeros(config.samples, 0), 1,
                 seed=seed + 1, steps=config.euler_steps)[:, :, 0].numpy().astype(np.float64)
    return TransportResult(out.mean(axis=0), out.std(axis=0),
                           exact_field_euler_std(config.std, config.euler_steps), config)


# ---------------------------------------------------------------------------
# Two-mode conditional task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwoModeConfig:
    mode: float = 2.0
    std: float = 0.5
    dim: int = 2
    train_samples: int = 2048
    samples: int = 1000
    steps: int = 1500
    batch_size: int = 256
    width: int = 64
    blocks: int = 2
    learning_rate: float = 3e-4
    conditioning: ConditioningMode = ConditioningMode.PREPEND
    threshold: float = 0.95


@dataclass(frozen=True)
class TwoModeResult:
    accuracy: float
    per_condition: tuple[float, float]
    config: TwoModeConfig

    @property
    def passed(self) -> bool:
        return self.accuracy >= self.config.threshold

    def rows(self) -> list[list[str]]:
        return [["condition", "fraction_nearer_conditioned_mode"],
                ["0", repr(self.per_condition[0])], ["1", repr(self.per_condition[1])],
                ["all", repr(self.accuracy)]]


def _token(c: np.ndarray) -> np.ndarray:
    """One-hot condition token, shape ``(n, 2)``."""
    return np.stack([1.0 - c, c], axis=1)


def two_mode_study(config: TwoModeConfig = TwoModeConfig(), seed: int = 0) -> TwoModeResult:
    rng = np.random.default_rng(seed)
    cond = np.arange(config.train_samples) % 2
    centres = np.where(cond == 1, config.mode, -config.mode)
    targets = centres[:, None] + config.std * rng.standard_normal((config.train_samples, config.dim))
    tokens = _token(cond.astype(np.float64))
    examples = [FlowExample(z[:, None], tok[None, :], np.zeros(0)) for z, tok in zip(targets, tokens)]
    model = _toy_model(config.dim, 2, config.width, config.blocks, config.conditioning, seed)
    train(model, examples, TrainConfig(learning_rate=config.learning_rate, steps=config.steps,
                                       batch_size=config.batch_size, seed=seed, crop_frames=None))
    c = np.arange(config.samples) % 2
    content = torch.as_tensor(_token(c.astype(np.float64))[:, None, :], dtype=torch.float32)
    out = sample(model, content, torch.zeros(config.samples, 0), 1, seed=seed + 1)[:, :, 0].numpy()
    near_pos = np.linalg.norm(out - config.mode, axis=1) < np.linalg.norm(out + config.mode, axis=1)
    hit = np.where(c == 1, near_pos, ~near_pos)
    return TwoModeResult(float(hit.mean()), (float(hit[c == 0].mean()), float(hit[c == 1].mean())),
                         config)


# ---------------------------------------------------------------------------
# Gradient check against central finite differences
# ---------------------------------------------------------------------------

VARIANTS = tuple((c, m) for c in ConditioningMode for m in TokenMixer)


@dataclass(frozen=True)
class GradientCheckResult:
    conditioning: ConditioningMode
    mixer: TokenMixer
    max_relative_error: float
    parameters: int
    threshold: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.threshold


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor * max|a|)`` elementwise.

    The scale-relative floor keeps gradients that vanish by symmetry from
    dividing round-off by zero.
    """
    scale = floor * max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return np.abs(analytic - numeric) / denom


def gradient_check(conditioning: ConditioningMode, mixer: TokenMixer, width: int = 8,
                   blocks: int = 1, eps: float = 1e-4, seed: int = 0,
                   mode: FlowMode = FlowMode.GAUSSIAN_PRIOR) -> GradientCheckResult:
    """Reverse-mode gradient of the flow-matching loss vs central differences, in float64.

    Every parameter (including the zero-initialised ones) is redrawn from
    ``N(0, 0.5^2)`` so that no gradient vanishes trivially.
    """
    torch.manual_seed(seed)
    cfg = ModelConfig(latent_dim=3, content_dim=4, speaker_dim=2, blocks=blocks, width=width,
                      conditioning=conditioning, mixer=mixer, time_dim=8)
    model = VelocityModel(cfg).double()
    rng = np.random.default_rng(seed)
    theta = 0.5 * rng.standard_normal(model.parameter_count())
    model.set_flat(theta)
    length, batch_size = 5, 2
    g = torch.Generator().manual_seed(seed)
    batch = Batch(z1=torch.randn(batch_size, 3, length, generator=g, dtype=torch.float64),
                  content=torch.randn(batch_size, length, 4, generator=g, dtype=torch.float64),
                  speaker=torch.randn(batch_size, 2, generator=g, dtype=torch.float64),
                  z0=torch.randn(batch_size, 3, length, generator=g, dtype=torch.float64))
    t = torch.rand(batch_size, generator=g, dtype=torch.float64)
    noise = torch.randn(batch_size, 3, length, generator=g, dtype=torch.float64)
    _, analytic = loss_and_grad(model, batch, mode, t, noise)
    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        model.set_flat(theta + step)
        plus, _ = loss_and_grad(model, batch, mode, t, noise)
        model.set_flat(theta - step)
        minus, _ = loss_and_grad(model, batch, mode, t, noise)
        numeric[i] = (plus - minus) / (2 * eps)
    model.set_flat(theta)
    err = relative_errors(analytic, numeric)
    return GradientCheckResult(ConditioningMode(conditioning), TokenMixer(mixer),
                               float(err.max()), theta.size)


# ---------------------------------------------------------------------------
# Euler exactness on constant fields
# ---------------------------------------------------------------------------

def constant_field_error(steps: int = 10, seed: int = 0) -> float:
    """Max abs error of Euler integration of ``v = c`` against ``z0 + c``."""
    rng = np.random.default_rng(seed)
    # c / steps and every partial sum are dyadic, hence exact in float64;
    # arbitrary fields agree only to round-off
    c = torch.as_tensor(rng.integers(-8, 8, size=(2, 3, 4)) * steps / 4.0, dtype=torch.float64)
    z0 = torch.as_tensor(rng.integers(-8, 8, size=(2, 3, 4)) / 4.0, dtype=torch.float64)
    out = euler_integrate(lambda z, t: c, z0, steps)
    return float(torch.max(torch.abs(out - (z0 + c))))


@dataclass
class OracleReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def rows(self) -> list[list[str]]:
        return [CHECK_HEADER] + [c.row() for c in self.checks]


def oracle_check(seed: int = 0, delta: DeltaTargetConfig = DeltaTargetConfig(),
                 transport: TransportConfig = TransportConfig()) -> OracleReport:
    """Delta-target field, Gaussian transport, constant-field Euler and gradient checks."""
    report = OracleReport()
    const = constant_field_error()
    report.checks.append(Check("constant_field_euler_error", const, 0.0, const == 0.0))
    d = delta_target_study(delta, seed)
    report.checks.append(Check("delta_target_median_relative_error", d.median,
                               delta.threshold, d.passed))
    g = gaussian_transport_study(transport, seed)
    for k in range(g.sample_mean.size):
        report.checks.append(Check(f"transport_mean_error_{k}", g.mean_error[k],
                                   transport.mean_tolerance,
                                   bool(g.mean_error[k] <= transport.mean_tolerance)))
        dev = abs(g.std_ratio[k] - 1)
        report.checks.append(Check(f"transport_std_deviation_{k}", dev, transport.std_tolerance,
                                   bool(dev <= transport.std_tolerance)))
    for cond, mixer in VARIANTS:
        r = gradient_check(cond, mixer, seed=seed)
        report.checks.append(Check(f"gradient_{cond.value}_{mixer.value}", r.max_relative_error,
                                   r.threshold, r.passed))
    return report
