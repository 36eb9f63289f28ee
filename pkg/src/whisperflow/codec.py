"""Deterministic log-mel codec standing in for a learned waveform autoencoder.

``encode`` maps a waveform to a ``D x L`` log-mel latent. ``decode`` inverts
the mel projection (clamped pseudo-inverse, optionally refined by nonnegative
least squares and a harmonic-comb fit on voiced frames) and recovers phase
with Griffin-Lim.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .signal import (LOG_FLOOR, FrameConfig, MelConfig, Waveform, Window, griffin_lim,
                     make_window, mel_center_frequencies, mel_filterbank, mel_spectrogram,
                     peak_locked_phase)


@dataclass(frozen=True)
class CodecConfig:
    n_mels: int = 64
    frame_length: int = 1024
    hop: int = 256
    fmin: float = 0.0
    fmax: float | None = None
    griffin_lim_iterations: int = 60
    log: bool = True
    sample_rate: int = 16000
    # "pinv": clamped pseudo-inverse only; "nnls": refined by nonnegative
    # least squares; "harmonic": nnls plus harmonic-comb fit on voiced frames
    inversion: str = "harmonic"
    nnls_iterations: int = 100
    gl_momentum: float = 0.99
    phase_init: str = "peak_locked"
    voicing_threshold: float = 0.6
    floor_share: float = 0.1
    floor_penalty: float = 0.0
    edge_floor: float = 0.1

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")
        if self.inversion not in ("pinv", "nnls", "harmonic"):
            raise ValueError(f"unknown inversion {self.inversion!r}")
        if self.phase_init not in ("random", "peak_locked"):
            raise ValueError(f"unknown phase_init {self.phase_init!r}")
        self.frame_config  # validates hop/frame_length

    @property
    def frame_config(self) -> FrameConfig:
        return FrameConfig(self.frame_length, self.hop, Window.HANN, self.frame_length)

    @property
    def mel_config(self) -> MelConfig:
        return MelConfig(self.n_mels, self.fmin, self.fmax)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def n_frames(self, n_samples: int) -> int:
        return self.frame_config.n_frames(n_samples)


@dataclass(frozen=True)
class LatentSequence:
    data: np.ndarray  # D x L
    frame_rate: float
    normalizer: "Normalizer | None" = field(default=None, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"latents must be a D x L matrix with D >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("latents contain non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


@lru_cache(maxsize=8)
def _filterbank(n_mels, fft_size, sample_rate, fmin, fmax):
    fb = mel_filterbank(n_mels, fft_size, sample_rate, fmin, fmax)
    return fb, np.linalg.pinv(fb)


def _bank(config: CodecConfig):
    fmax = config.mel_config.resolved_fmax(config.sample_rate)
    return _filterbank(config.n_mels, config.frame_length, config.sample_rate, config.fmin, fmax)


def encode(waveform: Waveform, config: CodecConfig = CodecConfig()) -> LatentSequence:
    if waveform.sample_rate != config.sample_rate:
        raise ValueError(f"codec expects {config.sample_rate} Hz audio, got {waveform.sample_rate}")
    if len(waveform) < config.frame_length:
        raise ValueError(f"need at least {config.frame_length} samples, got {len(waveform)}")
    mel = mel_spectrogram(waveform, config.frame_config, config.mel_config, log=config.log)
    return LatentSequence(mel.data.T, config.frame_rate)


def _mel_power(latents: LatentSequence, config: CodecConfig) -> np.ndarray:
    if latents.dim != config.n_mels:
        raise ValueError(f"latent dimension {latents.dim} does not match n_mels={config.n_mels}")
    mel = np.exp(latents.data.T) - LOG_FLOOR if config.log else latents.data.T
    return np.maximum(mel, 0.0)


def latents_to_magnitude(latents: LatentSequence, config: CodecConfig) -> np.ndarray:
    """Clamped pseudo-inverse of the mel projection, frames x bins."""
    _, fb_pinv = _bank(config)
    return np.maximum(_mel_power(latents, config) @ fb_pinv.T, 0.0)


def _nnls_refine(magnitude: np.ndarray, mel: np.ndarray, basis: np.ndarray,
                 iterations: int, penalty: np.ndarray | float = 0.0) -> np.ndarray:
    """Multiplicative updates for ``min ||coef @ basis.T - mel||^2 / 2 + penalty . coef``.

    Coefficients stay nonnegative. ``magnitude`` rows are the starting
    coefficients; a small positive offset lets coefficients clamped to zero
    grow back.
    """
    coef = magnitude + 1e-3 * magnitude.mean(axis=1, keepdims=True) + 1e-12
    gram = basis.T @ basis
    numer = mel @ basis
    for _ in range(iterations):
        coef *= numer / np.maximum(coef @ gram + penalty, 1e-30)
    return coef


@lru_cache(maxsize=4)
def _window_kernel(frame_length: int, fft_size: int, span: int = 4, res: int = 64):
    """|DFT| of the Hann window sampled at fractional bin offsets in [-span, span]."""
    offsets = np.arange(-span * res, span * res + 1) / res
    n = np.arange(frame_length)
    w = make_window(Window.HANN, frame_length)
    kern = np.abs(np.exp(-2j * np.pi * np.outer(offsets, n) / fft_size) @ w)
    return offsets, kern / kern.max()


def _harmonic_basis(f0: float, config: CodecConfig) -> np.ndarray:
    """bins x harmonics matrix of window-kernel shaped partials at k * f0."""
    offsets, kern = _window_kernel(config.frame_length, config.frame_length)
    n_bins = config.frame_length // 2 + 1
    bin_hz = config.sample_rate / config.frame_length
    fmax = config.mel_config.resolved_fmax(config.sample_rate)
    centres = np.arange(1, int(fmax // f0) + 1) * f0 / bin_hz
    dist = np.arange(n_bins)[:, None] - centres[None, :]
    return np.interp(dist, offsets, kern, left=0.0, right=0.0)


F0_CANDIDATES = np.geomspace(60.0, 400.0, 400)
_F0_BAND_HZ = 1200.0


@lru_cache(maxsize=4)
def _comb_templates(config: CodecConfig):
    fb, _ = _bank(config)
    centres = mel_center_frequencies(config.n_mels, config.fmin,
                                     config.mel_config.resolved_fmax(config.sample_rate))
    bands = np.nonzero(centres < _F0_BAND_HZ)[0]
    templates = []
    for f0 in F0_CANDIDATES:
        comb = _harmonic_basis(f0, config).sum(axis=1)
        t = np.log(fb[bands] @ comb + 1e-3)
        templates.append((t - t.mean()) / (np.linalg.norm(t - t.mean()) + 1e-12))
    return bands, np.asarray(templates)


def estimate_f0(mel: np.ndarray, config: CodecConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame F0 and comb-match score from linear mel frames.

    The score is the correlation between the frame's low-band log-mel
    pattern and the best harmonic-comb template.
    """
    bands, templates = _comb_templates(config)
    low = np.log(mel[:, bands] + 1e-3 * mel.max(axis=1, keepdims=True) + 1e-12)
    low = low - low.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(low, axis=1, keepdims=True)
    scores = (low / np.maximum(norms, 1e-12)) @ templates.T
    best = scores.argmax(axis=1)
    f0 = F0_CANDIDATES[best]
    score = scores[np.arange(len(best)), best]
    return f0, np.where(norms[:, 0] > 1e-9, score, 0.0)


def _smooth_f0(f0: np.ndarray, voiced: np.ndarray, width: int = 5) -> np.ndarray:
    out = f0.copy()
    idx = np.nonzero(voiced)[0]
    half = width // 2
    for i in idx:
        near = idx[(idx >= i - half) & (idx <= i + half)]
        out[i] = np.exp(np.median(np.log(f0[near])))
    return out


@dataclass(frozen=True)
class MagnitudeEstimate:
    """Inverted magnitudes plus the harmonic part and F0 track behind them.

    ``harmonic`` is zero and ``f0`` is NaN on frames treated as unvoiced.
    """
    magnitude: np.ndarray  # frames x bins
    harmonic: np.ndarray   # frames x bins
    f0: np.ndarray         # frames


def estimate_magnitude(latents: LatentSequence, config: CodecConfig) -> MagnitudeEstimate:
    magnitude = latents_to_magnitude(latents, config)
    harmonic = np.zeros_like(magnitude)
    f0_track = np.full(len(magnitude), np.nan)
    if config.inversion == "pinv":
        return MagnitudeEstimate(magnitude, harmonic, f0_track)
    mel = _mel_power(latents, config)
    fb, _ = _bank(config)
    magnitude = _nnls_refine(magnitude, mel, fb, config.nnls_iterations)
    if config.inversion == "nnls":
        return MagnitudeEstimate(magnitude, harmonic, f0_track)
    f0, score = estimate_f0(mel, config)
    voiced = score >= config.voicing_threshold
    f0 = _smooth_f0(f0, voiced)
    for i in np.nonzero(voiced)[0]:
        # partials plus a nonnegative broadband floor, fitted jointly
        basis = _harmonic_basis(float(f0[i]), config)
        start = magnitude[i] @ basis / np.maximum(basis.sum(axis=0), 1e-12)
        init = np.concatenate([start, config.floor_share * magnitude[i]])
        basis_mel = np.hstack([fb @ basis, fb])
        # shrink the floor where the frame is loud, leaving quiet bands free
        drive = mel[i] @ fb
        penalty = np.zeros(len(init))
        penalty[basis.shape[1]:] = config.floor_penalty * drive * drive / max(drive.max(), 1e-30)
        coef = _nnls_refine(init[None, :], mel[i:i + 1], basis_mel, config.nnls_iterations,
                            penalty)[0]
        harmonic[i] = basis @ coef[:basis.shape[1]]
        magnitude[i] = harmonic[i] + coef[basis.shape[1]:]
        f0_track[i] = f0[i]
    return MagnitudeEstimate(magnitude, harmonic, f0_track)


def mel_to_magnitude(latents: LatentSequence, config: CodecConfig) -> np.ndarray:
    """Linear STFT magnitudes (frames x bins) consistent with the latents."""
    return estimate_magnitude(latents, config).magnitude


def harmonic_phase(estimate: MagnitudeEstimate, config: CodecConfig,
                   fallback: np.ndarray) -> np.ndarray:
    """Phases of an ideal harmonic signal following the F0 track.

    The fundamental's phase at each frame centre accumulates ``2 pi f0 hop /
    sr``; a bin dominated by harmonic ``h`` gets ``h`` times that phase
    minus ``pi k``, the linear-phase term of a window centred in the frame.
    Bins not dominated by a partial keep ``fallback``.
    """
    phase = fallback.copy()
    n_bins = phase.shape[1]
    bin_hz = config.sample_rate / config.frame_length
    k = np.arange(n_bins)
    fundamental = 0.0
    previous = np.nan
    for m, f0 in enumerate(estimate.f0):
        if np.isnan(f0):
            previous = np.nan
            continue
        step = f0 if np.isnan(previous) else 0.5 * (f0 + previous)
        fundamental = fundamental + 2 * np.pi * step * config.hop / config.sample_rate
        previous = f0
        h = np.maximum(np.round(k * bin_hz / f0), 1.0)
        dominant = estimate.harmonic[m] >= estimate.magnitude[m] - estimate.harmonic[m]
        phase[m, dominant] = (h * fundamental - np.pi * k)[dominant]
    return phase


def decode(latents: LatentSequence, config: CodecConfig = CodecConfig(), seed: int = 0) -> Waveform:
    """Waveform of ``(L - 1) * hop + frame_length`` samples; deterministic per seed."""
    if latents.dim != config.n_mels:
        raise ValueError(f"latent dimension {latents.dim} does not match n_mels={config.n_mels}")
    if latents.length == 0:
        return Waveform(np.zeros(0), config.sample_rate)
    estimate = estimate_magnitude(latents, config)
    magnitude = estimate.magnitude
    phase = None
    if config.phase_init == "peak_locked":
        phase = peak_locked_phase(magnitude, config.frame_config, seed)
        phase = harmonic_phase(estimate, config, phase)
    return griffin_lim(magnitude, config.frame_config, config.griffin_lim_iterations, seed,
                       config.sample_rate, initial_phase=phase, momentum=config.gl_momentum,
                       edge_floor=config.edge_floor)


# --------------------------------------------------------------------------
# Normalisation
# --------------------------------------------------------------------------

STD_FLOOR = 1e-6
_NRM_MAGIC = b"NRM1"


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    floored: tuple[int, ...] = ()

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data) - self.mean[:, None]) / self.std[:, None]

    def unapply(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data) * self.std[:, None] + self.mean[:, None]

    def save(self, path: str | os.PathLike) -> None:
        d = self.mean.size
        blob = _NRM_MAGIC + struct.pack("<I", d)
        blob += self.mean.astype("<f4").tobytes() + self.std.astype("<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(blob)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Normalizer":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != _NRM_MAGIC or len(blob) < 8:
            raise ValueError(f"{path}: not an NRM1 normaliser file")
        (d,) = struct.unpack("<I", blob[4:8])
        if len(blob) != 8 + 8 * d:
            raise ValueError(f"{path}: expected {8 + 8 * d} bytes, found {len(blob)}")
        mean = np.frombuffer(blob[8:8 + 4 * d], "<f4").astype(np.float64)
        std = np.frombuffer(blob[8 + 4 * d:], "<f4").astype(np.float64)
        return cls(mean, std, tuple(int(i) for i in np.nonzero(std <= STD_FLOOR)[0]))


def fit_normalizer(corpus: list[LatentSequence] | list[np.ndarray]) -> Normalizer:
    """Per-dimension mean/std pooled over every frame of the corpus.

    Sums run in corpus order with float64 accumulation so the statistics
    are reproducible bit for bit. Dimensions with zero spread get std 1e-6
    and are listed in ``floored``.
    """
    mats = [c.data if isinstance(c, LatentSequence) else np.asarray(c, dtype=np.float64)
            for c in corpus]
    if not mats:
        raise ValueError("cannot fit a normaliser on an empty corpus")
    d = mats[0].shape[0]
    if any(m.shape[0] != d for m in mats):
        raise ValueError("all latents must share the same dimension")
    count = sum(m.shape[1] for m in mats)
    if count == 0:
        raise ValueError("corpus has no frames")
    total = np.zeros(d)
    for m in mats:
        total += m.sum(axis=1)
    mean = total / count
    sq = np.zeros(d)
    for m in mats:
        sq += ((m - mean[:, None]) ** 2).sum(axis=1)
    std = np.sqrt(sq / count)
    floored = tuple(int(i) for i in np.nonzero(std <= STD_FLOOR)[0])
    std = np.maximum(std, STD_FLOOR)
    return Normalizer(mean, std, floored)
