"""Audio I/O and spectral primitives.

Everything here is a pure function of its inputs. Randomness (Griffin-Lim
phase initialisation) is driven by an explicit seed.
"""
from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-5
# Fraction of the peak squared-window overlap below which istft stops dividing.
_WOLA_FLOOR = 1e-3


class WavError(ValueError):
    """Base class for WAV decoding problems."""


class MalformedWavError(WavError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedEncodingError(WavError):
    """The WAV sample encoding is neither PCM16 nor IEEE float32."""


class NonColaError(ValueError):
    """The window/hop pair does not satisfy constant overlap-add."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


class Window(str, enum.Enum):
    HANN = "hann"
    RECTANGULAR = "rectangular"


@dataclass(frozen=True)
class FrameConfig:
    frame_length: int = 1024
    hop: int = 256
    window: Window = Window.HANN
    fft_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "window", Window(self.window))
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", self.frame_length)
        if not 0 < self.hop <= self.frame_length <= self.fft_size:
            raise ValueError(
                f"need 0 < hop <= frame_length <= fft_size, got "
                f"hop={self.hop}, frame_length={self.frame_length}, fft_size={self.fft_size}"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return make_window(self.window, self.frame_length)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            return 0
        return (n_samples - self.frame_length) // self.hop + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    data: np.ndarray  # frames x bins, complex
    config: FrameConfig
    sample_rate: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.config.n_bins:
            raise ValueError(f"expected (frames, {self.config.n_bins}) array, got {self.data.shape}")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None

    def resolved_fmax(self, sample_rate: int) -> float:
        return sample_rate / 2 if self.fmax is None else float(self.fmax)


@dataclass(frozen=True)
class MelSpectrogram:
    data: np.ndarray  # frames x n_mels
    frame_rate: float
    mel_config: MelConfig
    log: bool = True
    sample_rate: int = field(default=16000)


def make_window(kind: Window | str, length: int) -> np.ndarray:
    kind = Window(kind)
    if kind is Window.RECTANGULAR:
        return np.ones(length)
    # periodic Hann, the variant that overlap-adds to a constant
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / length)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read a PCM16 or float32 RIFF/WAVE file, averaging channels to mono."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such WAV file: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: missing RIFF/WAVE header")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None or len(fmt) < 16:
        raise MalformedWavError(f"{path}: missing or short fmt chunk")
    if data is None:
        raise MalformedWavError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedWavError(f"{path}: short WAVE_FORMAT_EXTENSIBLE header")
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels == 0 or rate == 0:
        raise MalformedWavError(f"{path}: zero channels or sample rate")

    if tag == _PCM and bits == 16:
        dtype = np.dtype("<i2")
        scale = 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
        scale = 1.0
    else:
        raise UnsupportedEncodingError(f"{path}: format tag {tag} with {bits} bits is not supported")
    if block_align != channels * dtype.itemsize:
        raise MalformedWavError(f"{path}: block_align {block_align} inconsistent with format")

    usable = len(data) - len(data) % block_align
    raw = np.frombuffer(data[:usable], dtype=dtype).astype(np.float64) * scale
    raw = raw.reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(raw)):
        raise MalformedWavError(f"{path}: non-finite samples")
    return Waveform(raw, rate)


def write_wav(path: str | os.PathLike, waveform: Waveform, encoding: str = "pcm16") -> None:
    """Write a mono WAV file. PCM16 clips to [-1, 1) before quantising."""
    if encoding == "pcm16":
        q = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
        tag, bits = _PCM, 16
    elif encoding == "float32":
        q = waveform.samples.astype("<f4")
        tag, bits = _IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    payload = q.tobytes()
    block_align = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, tag, 1, waveform.sample_rate,
        waveform.sample_rate * block_align, block_align, bits,
    )
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(header + payload)


# --------------------------------------------------------------------------
# STFT
# --------------------------------------------------------------------------

def frame_signal(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    n_frames = (len(x) - frame_length) // hop + 1
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(waveform: Waveform, config: FrameConfig) -> ComplexSpectrogram:
    x = waveform.samples
    if len(x) < config.frame_length:
        raise ValueError(
            f"waveform has {len(x)} samples, shorter than frame_length {config.frame_length}"
        )
    frames = frame_signal(x, config.frame_length, config.hop) * config.window_array()
    spec = np.fft.rfft(frames, n=config.fft_size, axis=1)
    return ComplexSpectrogram(spec, config, waveform.sample_rate)


def is_cola(window: np.ndarray, hop: int, rtol: float = 1e-10) -> bool:
    """True when shifted copies of ``window`` sum to a constant."""
    acc = np.zeros(hop)
    for start in range(0, len(window), hop):
        seg = window[start:start + hop]
        acc[:len(seg)] += seg
    return bool(np.ptp(acc) <= rtol * max(abs(acc.max()), 1.0)) and acc.max() > 0


def _overlap_add(frames: np.ndarray, window: np.ndarray, hop: int,
                 floor: float = _WOLA_FLOOR) -> np.ndarray:
    n_frames, frame_length = frames.shape
    length = (n_frames - 1) * hop + frame_length if n_frames else 0
    out = np.zeros(length)
    norm = np.zeros(length)
    w2 = window ** 2
    for m in range(n_frames):
        sl = slice(m * hop, m * hop + frame_length)
        out[sl] += frames[m] * window
        norm[sl] += w2
    if length:
        out /= np.maximum(norm, floor * norm.max())
    return out


def istft(spectrogram: ComplexSpectrogram, edge_floor: float = _WOLA_FLOOR) -> Waveform:
    """Least-squares inverse STFT.

    Exact on the fully overlapped interior for any COLA window/hop; samples
    where the squared-window overlap falls under ``edge_floor`` of its peak
    (the very first and last few samples) are damped rather than divided
    through.
    """
    cfg = spectrogram.config
    window = cfg.window_array()
    if not is_cola(window, cfg.hop):
        raise NonColaError(f"{cfg.window.value} window with hop {cfg.hop} is not COLA")
    frames = np.fft.irfft(spectrogram.data, n=cfg.fft_size, axis=1)[:, :cfg.frame_length]
    return Waveform(_overlap_add(frames, window, cfg.hop, edge_floor), spectrogram.sample_rate)


# --------------------------------------------------------------------------
# Mel features
# --------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters, unit peak, evenly spaced on the mel scale.

    A filter too narrow to cover any FFT bin is given unit weight on the bin
    nearest its centre so that every row keeps a positive sum.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    if n_mels <= 0:
        raise ValueError("n_mels must be positive")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    fb = np.zeros((n_mels, freqs.size))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
        if fb[i].sum() <= 0:
            fb[i, int(np.argmin(np.abs(freqs - mid)))] = 1.0
    return fb


def mel_spectrogram(waveform: Waveform, frame_config: FrameConfig,
                    mel_config: MelConfig = MelConfig(), log: bool = True) -> MelSpectrogram:
    spec = stft(waveform, frame_config)
    fb = mel_filterbank(mel_config.n_mels, frame_config.fft_size, waveform.sample_rate,
                        mel_config.fmin, mel_config.resolved_fmax(waveform.sample_rate))
    mel = spec.magnitude @ fb.T
    if log:
        mel = np.log(mel + LOG_FLOOR)
    return MelSpectrogram(mel, waveform.sample_rate / frame_config.hop, mel_config, log,
                          waveform.sample_rate)


# --------------------------------------------------------------------------
# Griffin-Lim
# --------------------------------------------------------------------------

def spectral_convergence(x: Waveform, magnitude: np.ndarray, config: FrameConfig) -> float:
    denom = np.linalg.norm(magnitude)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(stft(x, config).magnitude - magnitude) / denom)


def griffin_lim(magnitude: np.ndarray, config: FrameConfig, iterations: int = 60,
                seed: int = 0, sample_rate: int = 16000,
                history: list[float] | None = None,
                initial_phase: np.ndarray | None = None,
                momentum: float = 0.0, edge_floor: float = _WOLA_FLOOR) -> Waveform:
    """Recover a waveform whose STFT magnitude approximates ``magnitude``.

    The starting phase is uniform on [-pi, pi) from ``seed`` unless
    ``initial_phase`` is supplied. ``momentum > 0`` switches to the fast
    (extrapolated) variant, which usually converges further in the same
    number of iterations but loses the monotone-convergence guarantee of
    the plain algorithm. If ``history`` is given, the spectral convergence
    after every iteration is appended to it. ``edge_floor`` is passed to
    :func:`istft`; raising it keeps inconsistent spectra from being amplified
    at the signal edges, where only one or two frames overlap.
    """
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if np.any(magnitude < 0):
        raise ValueError("magnitudes must be nonnegative")
    if magnitude.ndim != 2 or magnitude.shape[1] != config.n_bins:
        raise ValueError(f"expected (frames, {config.n_bins}) magnitudes, got {magnitude.shape}")
    if initial_phase is None:
        initial_phase = np.random.default_rng(seed).uniform(-np.pi, np.pi, size=magnitude.shape)
    spec = magnitude * np.exp(1j * initial_phase)
    x = istft(ComplexSpectrogram(spec, config, sample_rate), edge_floor)
    previous = None
    for _ in range(iterations):
        projected = magnitude * np.exp(1j * np.angle(stft(x, config).data))
        target = projected
        if momentum and previous is not None:
            target = projected + momentum * (projected - previous)
        previous = projected
        x = istft(ComplexSpectrogram(target, config, sample_rate), edge_floor)
        if history is not None:
            history.append(spectral_convergence(x, magnitude, config))
    if momentum and iterations:
        # land on a consistent estimate rather than the extrapolated point
        final = magnitude * np.exp(1j * np.angle(stft(x, config).data))
        x = istft(ComplexSpectrogram(final, config, sample_rate), edge_floor)
    return x


# --------------------------------------------------------------------------
# Autocorrelation and voicing
# --------------------------------------------------------------------------

def autocorrelation(frame: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased, unnormalised autocorrelation ``r[k] = sum_n x[n] x[n+k]``."""
    x = np.asarray(frame, dtype=np.float64)
    if not 0 <= max_lag < len(x):
        raise ValueError(f"max_lag must lie in [0, {len(x) - 1}], got {max_lag}")
    n_fft = 1 << int(math.ceil(math.log2(2 * len(x))))
    spec = np.fft.rfft(x, n_fft)
    r = np.fft.irfft(spec * np.conj(spec), n_fft)[:max_lag + 1]
    return r


VOICING_FRAME = FrameConfig(frame_length=2048, hop=512, window=Window.RECTANGULAR)


def frame_voicing(waveform: Waveform, f0_min: float = 60.0, f0_max: float = 400.0,
                  frame_config: FrameConfig = VOICING_FRAME) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (peak normalised autocorrelation, energy) pairs."""
    sr = waveform.sample_rate
    if not 0 < f0_min < f0_max < sr / 2:
        raise ValueError(f"invalid F0 band [{f0_min}, {f0_max}] for sample rate {sr}")
    n = frame_config.frame_length
    lag_lo = int(math.ceil(sr / f0_max))
    lag_hi = int(math.floor(sr / f0_min))
    if lag_hi >= n:
        raise ValueError(f"frame_length {n} too short for f0_min {f0_min} Hz")
    x = waveform.samples
    if len(x) < n:
        x = np.concatenate([x, np.zeros(n - len(x))])
    frames = frame_signal(x, n, frame_config.hop) * frame_config.window_array()
    n_fft = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(frames, n_fft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n_fft, axis=1)[:, :lag_hi + 1]
    energy = acf[:, 0]
    silent = energy < 1e-6 * n
    peaks = np.zeros(len(frames))
    loud = ~silent
    if np.any(loud):
        peaks[loud] = np.clip(acf[loud, lag_lo:lag_hi + 1].max(axis=1) / energy[loud], 0.0, 1.0)
    return peaks, np.where(silent, 0.0, energy)


def voicing_ratio(waveform: Waveform, f0_min: float = 60.0, f0_max: float = 400.0,
                  frame_config: FrameConfig = VOICING_FRAME) -> float:
    """Energy-weighted mean of the per-frame peak normalised autocorrelation.

    The peak is searched over lags ``[sr/f0_max, sr/f0_min]``. Frames whose
    zero-lag energy is under ``1e-6 * frame_length`` count as silence and
    contribute nothing; an all-silent signal scores 0.
    """
    peaks, energy = frame_voicing(waveform, f0_min, f0_max, frame_config)
    total = energy.sum()
    if total <= 0:
        return 0.0
    return float(np.clip(np.sum(peaks * energy) / total, 0.0, 1.0))


def peak_locked_phase(magnitude: np.ndarray, config: FrameConfig, seed: int = 0) -> np.ndarray:
    """Phase-vocoder style starting phase for Griffin-Lim.

    Spectral peaks are tracked frame to frame and their phase advanced by
    ``hop`` times the parabolically interpolated peak frequency; bins are
    locked to their nearest peak with the phase ramp of a window centred
    mid-frame. Peaks with no predecessor within two bins start from a
    seeded uniform phase. Stationary partials therefore start coherent,
    which random initialisation cannot provide.
    """
    rng = np.random.default_rng(seed)
    n_frames, n_bins = magnitude.shape
    nfft = config.fft_size
    bins = np.arange(n_bins)
    logm = np.log(magnitude + 1e-12)
    phase = np.zeros((n_frames, n_bins))
    prev_peaks = np.zeros(0, dtype=int)
    prev_psi = prev_kappa = np.zeros(0)
    for m in range(n_frames):
        mag = magnitude[m]
        top = mag.max()
        inner = mag[1:-1]
        peaks = np.nonzero((inner > mag[:-2]) & (inner >= mag[2:]) & (inner > 1e-3 * top))[0] + 1
        if top <= 0 or peaks.size == 0:
            phase[m] = rng.uniform(-np.pi, np.pi, n_bins)
            prev_peaks = peaks[:0]
            continue
        a, b, c = logm[m, peaks - 1], logm[m, peaks], logm[m, peaks + 1]
        den = a - 2 * b + c
        safe = np.where(np.abs(den) > 1e-12, den, 1.0)
        delta = np.where(np.abs(den) > 1e-12, 0.5 * (a - c) / safe, 0.0)
        kappa = peaks + np.clip(delta, -0.5, 0.5)
        fresh = rng.uniform(-np.pi, np.pi, peaks.size)
        psi = fresh.copy()
        if prev_peaks.size:
            j = np.abs(prev_peaks[None, :] - peaks[:, None]).argmin(axis=1)
            tracked = np.abs(prev_peaks[j] - peaks) <= 2
            omega = np.pi * (prev_kappa[j] + kappa) / nfft  # mean of the two, rad/sample
            psi = np.where(tracked, prev_psi[j] + omega * config.hop, fresh)
        idx = np.searchsorted(peaks, bins)
        lo = np.clip(idx - 1, 0, peaks.size - 1)
        hi = np.clip(idx, 0, peaks.size - 1)
        near = np.where(np.abs(bins - peaks[lo]) <= np.abs(bins - peaks[hi]), lo, hi)
        phase[m] = psi[near] + np.pi * (kappa[near] - bins)
        prev_peaks, prev_psi, prev_kappa = peaks, psi, kappa
    return phase
