"""Synthetic whisper generation from voiced speech.

Three LPC source-filter pipelines turn a voiced waveform into a whispered
one of exactly the same length, so (normal, whisper) pairs are aligned
sample for sample:

* ``LPC_DEVOICE`` swaps the excitation for flat white noise.
* ``GLOTTAL_REMOVE`` keeps only the smoothed magnitude envelope of the LPC
  residual and re-excites with noise of that colour.
* ``FORMANT_WIDEN`` broadens every resonance by a fixed bandwidth before
  noise excitation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter

from .signal import Waveform, autocorrelation, make_window, Window

REFLECTION_CLAMP = 0.999
POLE_RADIUS_CLAMP = 0.998


class WhisperizeMethod(str, enum.Enum):
    LPC_DEVOICE = "lpc_devoice"
    GLOTTAL_REMOVE = "glottal_remove"
    FORMANT_WIDEN = "formant_widen"


ALL_METHODS = tuple(WhisperizeMethod)


@dataclass(frozen=True)
class LpcModel:
    """All-pole model with prediction ``x[n] ~ sum_k a[k-1] * x[n-k]``."""

    coefficients: np.ndarray
    gain: float
    clamped_reflections: int = 0

    def __post_init__(self):
        a = np.asarray(self.coefficients, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise ValueError("LPC coefficients must be finite")
        if self.gain < 0:
            raise ValueError("LPC gain must be nonnegative")
        object.__setattr__(self, "coefficients", a)

    @property
    def order(self) -> int:
        return self.coefficients.size

    @property
    def denominator(self) -> np.ndarray:
        """Coefficients of ``A(z) = 1 - sum_k a_k z^-k``."""
        return np.concatenate([[1.0], -self.coefficients])


@dataclass(frozen=True)
class WhisperizeConfig:
    frame_length: int = 512
    hop: int = 128
    lpc_order: int = 16
    delta_bandwidth: float = 300.0
    enabled_methods: tuple[WhisperizeMethod, ...] = ALL_METHODS
    seed: int = 0
    # forward-backward one-pole smoothing across residual spectrum bins
    residual_smoothing: float = 0.9
    # Gaussian lag-window bandwidth (Hz) applied before Levinson-Durbin
    lag_window_hz: float = 90.0

    def __post_init__(self):
        methods = tuple(WhisperizeMethod(m) for m in self.enabled_methods)
        object.__setattr__(self, "enabled_methods", methods)
        if not methods:
            raise ValueError("enabled_methods must not be empty")
        if not 0 < self.lpc_order < self.frame_length:
            raise ValueError("need 0 < lpc_order < frame_length")
        if self.delta_bandwidth <= 0:
            raise ValueError("delta_bandwidth must be positive")
        if not 0 < self.hop <= self.frame_length:
            raise ValueError("need 0 < hop <= frame_length")


# --------------------------------------------------------------------------
# LPC analysis / synthesis
# --------------------------------------------------------------------------

def levinson_durbin(r: np.ndarray, order: int) -> tuple[np.ndarray, float, np.ndarray, int]:
    """Solve the Yule-Walker equations for autocorrelation ``r``.

    Returns ``(a, error, reflections, clamped)``. Reflection coefficients
    reaching ``|k| >= 0.999`` are clamped there and counted.
    """
    a = np.zeros(order)
    ks = np.zeros(order)
    err = float(r[0])
    clamped = 0
    for i in range(order):
        acc = r[i + 1] - np.dot(a[:i], r[i:0:-1])
        k = acc / err if err > 0 else 0.0
        if abs(k) >= REFLECTION_CLAMP:
            k = np.copysign(REFLECTION_CLAMP, k)
            clamped += 1
        prev = a[:i].copy()
        a[:i] = prev - k * prev[::-1]
        a[i] = k
        ks[i] = k
        err *= 1.0 - k * k
    return a, max(err, 0.0), ks, clamped


def lpc_analyze(frame: np.ndarray, order: int) -> LpcModel:
    frame = np.asarray(frame, dtype=np.float64)
    if not 0 < order < len(frame):
        raise ValueError(f"order must lie in (0, {len(frame)}), got {order}")
    r = autocorrelation(frame, order)
    if r[0] <= 0:
        return LpcModel(np.zeros(order), 0.0)
    a, err, _, clamped = levinson_durbin(r, order)
    return LpcModel(a, float(np.sqrt(err / len(frame))), clamped)


def lag_windowed_lpc(frame: np.ndarray, order: int, sample_rate: int,
                     bandwidth: float) -> LpcModel:
    """LPC on a Gaussian lag-windowed autocorrelation.

    Broadens every estimated resonance by roughly ``bandwidth`` Hz so poles
    do not lock onto individual harmonics of high-pitched voices.
    """
    r = autocorrelation(frame, order)
    if r[0] <= 0:
        return LpcModel(np.zeros(order), 0.0)
    k = np.arange(order + 1)
    r = r * np.exp(-0.5 * (2 * np.pi * bandwidth * k / sample_rate) ** 2)
    r[0] *= 1.0 + 1e-9
    a, err, _, clamped = levinson_durbin(r, order)
    return LpcModel(a, float(np.sqrt(err / len(frame))), clamped)


def lpc_residual(frame: np.ndarray, model: LpcModel) -> np.ndarray:
    return lfilter(model.denominator, [1.0], np.asarray(frame, dtype=np.float64))


def lpc_synthesize(excitation: np.ndarray, model: LpcModel) -> np.ndarray:
    return lfilter([1.0], model.denominator, np.asarray(excitation, dtype=np.float64))


class RootFindingError(RuntimeError):
    pass


def poles(model: LpcModel) -> np.ndarray:
    """Roots of ``z^p - a_1 z^(p-1) - ... - a_p`` (companion eigenvalues)."""
    if model.order < 1:
        raise ValueError("poles need order >= 1")
    poly = model.denominator
    roots = np.roots(poly)
    if roots.size != model.order:
        # np.roots drops roots at zero; those come from trailing zero coefficients
        roots = np.concatenate([roots, np.zeros(model.order - roots.size)])
    resid = np.abs(np.polyval(poly, roots)) / np.maximum(1.0, np.abs(roots) ** model.order)
    if not np.all(np.isfinite(roots)) or resid.max() > 1e-6:
        raise RootFindingError(
            f"root residual {resid.max():.3g} exceeds 1e-6 for coefficients {model.coefficients}"
        )
    return roots


def from_poles(roots: np.ndarray, gain: float, clamped: int = 0) -> LpcModel:
    poly = np.real(np.poly(roots))
    return LpcModel(-poly[1:], gain, clamped)


def is_minimum_phase(denominator: np.ndarray) -> bool:
    """Step-down (reverse Levinson) test: all roots strictly inside |z| = 1."""
    a = np.asarray(denominator, dtype=np.float64) / denominator[0]
    for m in range(len(a) - 1, 0, -1):
        k = a[m]
        if abs(k) >= 1.0:
            return False
        a = (a[:m] - k * a[m:0:-1]) / (1.0 - k * k)
    return True


def scale_radii(model: LpcModel, gamma: float) -> LpcModel:
    """Multiply every pole by ``gamma`` via ``a_k -> a_k * gamma**k``."""
    k = np.arange(1, model.order + 1)
    return LpcModel(model.coefficients * gamma ** k, model.gain, model.clamped_reflections)


def clamp_pole_radius(model: LpcModel, max_radius: float = POLE_RADIUS_CLAMP) -> LpcModel:
    """Pull any pole outside ``max_radius`` back onto that circle."""
    if is_minimum_phase(scale_radii(model, 1.0 / max_radius).denominator):
        return model
    roots = poles(model)
    radius = np.abs(roots)
    if radius.max(initial=0.0) <= max_radius:
        return model
    roots = np.where(radius > max_radius, roots / radius * max_radius, roots)
    return from_poles(roots, model.gain, model.clamped_reflections)


def widen_bandwidths(model: LpcModel, delta_bandwidth: float, sample_rate: int) -> LpcModel:
    """Scale every pole radius by ``exp(-pi * delta_bandwidth / sample_rate)``."""
    gamma = np.exp(-np.pi * delta_bandwidth / sample_rate)
    roots = poles(model) * gamma
    radius = np.abs(roots)
    roots = np.where(radius > POLE_RADIUS_CLAMP, roots / np.maximum(radius, 1e-300) * POLE_RADIUS_CLAMP,
                     roots)
    return from_poles(roots, model.gain, model.clamped_reflections)


# --------------------------------------------------------------------------
# Whisperisation
# --------------------------------------------------------------------------

def _smooth_bins(mag: np.ndarray, alpha: float) -> np.ndarray:
    b, a = [1.0 - alpha], [1.0, -alpha]
    zi = mag[:1] * alpha
    fwd = lfilter(b, a, mag, zi=zi)[0]
    zi = fwd[-1:] * alpha
    return lfilter(b, a, fwd[::-1], zi=zi)[0][::-1]


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _excitation(method: WhisperizeMethod, frame: np.ndarray, model: LpcModel,
                rng: np.random.Generator, smoothing: float) -> np.ndarray:
    n = len(frame)
    residual = lpc_residual(frame, model)
    target = _rms(residual)
    if method is WhisperizeMethod.GLOTTAL_REMOVE:
        # Gaussian rather than fixed-magnitude spectra: constant bin magnitudes
        # overlap-add into a line spectrum that reads as periodicity.
        shape = _smooth_bins(np.abs(np.fft.rfft(residual)), smoothing)
        noise = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * shape, n)
    else:
        noise = rng.standard_normal(n)
    level = _rms(noise)
    return noise * (target / level) if level > 0 else noise


def _frame_index(length: int, n: int, hop: int) -> np.ndarray:
    n_frames = (length - n) // hop + 1
    return np.arange(n)[None, :] + hop * np.arange(n_frames)[:, None]


def _match_frame_rms(y: np.ndarray, x: np.ndarray, window: np.ndarray, hop: int,
                     passes: int = 3) -> np.ndarray:
    """Smoothly re-gain ``y`` so windowed frame RMS tracks that of ``x``."""
    idx = _frame_index(len(x), len(window), hop)
    target = np.sqrt(np.mean((x[idx] * window) ** 2, axis=1))
    weight = np.bincount(idx.ravel(), weights=np.tile(window, len(idx)), minlength=len(y))
    for _ in range(passes):
        current = np.sqrt(np.mean((y[idx] * window) ** 2, axis=1))
        gains = np.divide(target, current, out=np.zeros_like(target), where=current > 0)
        curve = np.bincount(idx.ravel(), weights=(gains[:, None] * window).ravel(),
                            minlength=len(y))
        y = y * np.divide(curve, weight, out=np.zeros_like(curve), where=weight > 1e-12)
    return y


def whisperize(waveform: Waveform, method: WhisperizeMethod | str,
               config: WhisperizeConfig = WhisperizeConfig(), seed: int | None = None) -> Waveform:
    """Whisperise ``waveform`` with one method; output length equals input length."""
    method = WhisperizeMethod(method)
    n, hop, order = config.frame_length, config.hop, config.lpc_order
    x = waveform.samples
    if len(x) < n:
        raise ValueError(f"input has {len(x)} samples, needs at least frame_length={n}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    sr = waveform.sample_rate
    window = make_window(Window.HANN, n)
    gamma = np.exp(-np.pi * config.delta_bandwidth / sr)

    pad = n - hop
    tail = (-(len(x) + 2 * pad - n)) % hop
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + tail)])
    n_frames = (len(xp) - n) // hop + 1

    out = np.zeros(len(xp))
    norm = np.zeros(len(xp))
    w2 = window ** 2
    for m in range(n_frames):
        sl = slice(m * hop, m * hop + n)
        frame = xp[sl] * window
        norm[sl] += w2
        frame_level = _rms(frame)
        if frame_level == 0.0:
            continue
        model = clamp_pole_radius(lag_windowed_lpc(frame, order, sr, config.lag_window_hz))
        exc = _excitation(method, frame, model, rng, config.residual_smoothing)
        if method is WhisperizeMethod.FORMANT_WIDEN:
            # same result as widen_bandwidths; radii are already <= the clamp
            model = scale_radii(model, gamma)
        y = lpc_synthesize(exc, model) * window
        level = _rms(y)
        if level > 0:
            out[sl] += y * (frame_level / level) * window
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-12)
    out = _match_frame_rms(out, xp, window, hop)

    y = out[pad:pad + len(x)]
    peak = np.max(np.abs(x))
    y = np.clip(y, -4.0 * peak, 4.0 * peak)
    return Waveform(y, sr)


def whisperize_random(waveform: Waveform, config: WhisperizeConfig = WhisperizeConfig(),
                      rng: np.random.Generator | None = None) -> tuple[Waveform, WhisperizeMethod]:
    """Pick one enabled method uniformly at random and apply it.

    The same generator also seeds the excitation noise, so a given
    generator state fully determines ``(output, method)``.
    """
    if not config.enabled_methods:
        raise ValueError("no whisperize methods enabled")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    method = config.enabled_methods[int(rng.integers(len(config.enabled_methods)))]
    noise_seed = int(rng.integers(2 ** 63 - 1))
    return whisperize(waveform, method, config, seed=noise_seed), method


def with_methods(config: WhisperizeConfig, *methods: WhisperizeMethod) -> WhisperizeConfig:
    return replace(config, enabled_methods=tuple(methods))
