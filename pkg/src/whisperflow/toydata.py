"""Seeded formant-synthesised vowel utterances.

Each utterance is a glottal pulse train passed through a cascade of three
time-varying resonators whose targets move between vowels. Speakers differ
in mean F0 and in per-formant scale factors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .signal import Waveform

VOWELS = {
    # id: (F1, F2, F3) in Hz, adult male averages
    0: (730.0, 1090.0, 2440.0),   # a
    1: (270.0, 2290.0, 3010.0),   # i
    2: (300.0, 870.0, 2240.0),    # u
    3: (530.0, 1840.0, 2480.0),   # e
    4: (570.0, 840.0, 2410.0),    # o
}
BANDWIDTHS = (130.0, 150.0, 200.0)
# fixed upper resonances filling in the spectrum above F3
HIGH_FORMANTS = ((3500.0, 250.0), (4500.0, 300.0))
ASPIRATION_DB = -40.0
SPEAKER_DIM = 16
F0_RANGE = (90.0, 220.0)
FORMANT_SCALE_RANGE = (0.88, 1.15)
_BLOCK = 64


@dataclass(frozen=True)
class Speaker:
    f0: float
    formant_scale: tuple[float, float, float]

    def formants(self, vowel: int) -> np.ndarray:
        return np.asarray(VOWELS[vowel]) * np.asarray(self.formant_scale)

    def descriptor(self) -> np.ndarray:
        """Standardised (F0, 5 vowels x 3 formants) vector of length 16."""
        f0_mid = sum(F0_RANGE) / 2
        f0_half = (F0_RANGE[1] - F0_RANGE[0]) / 2
        parts = [(self.f0 - f0_mid) / f0_half]
        for v in sorted(VOWELS):
            nominal = np.asarray(VOWELS[v])
            parts.extend(((self.formants(v) - nominal) / (0.075 * nominal)).tolist())
        vec = np.zeros(SPEAKER_DIM)
        vec[:len(parts)] = parts
        return vec


@dataclass(frozen=True)
class Utterance:
    waveform: Waveform
    speaker: Speaker
    labels: list[tuple[int, int, int]]  # (vowel_id, start_sample, end_sample)


def random_speaker(rng: np.random.Generator) -> Speaker:
    f0 = float(rng.uniform(*F0_RANGE))
    scale = tuple(float(s) for s in rng.uniform(*FORMANT_SCALE_RANGE, size=3))
    return Speaker(f0, scale)


def _resonator(freq: float, bw: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / sr)
    a = np.array([1.0, -2 * r * np.cos(2 * np.pi * freq / sr), r * r])
    return np.array([a.sum()]), a  # unity gain at DC


def glottal_source(f0_track: np.ndarray, sr: int) -> np.ndarray:
    """Band-limited-ish pulse train with a -12 dB/oct glottal rolloff."""
    phase = np.cumsum(f0_track / sr)
    pulses = np.zeros_like(f0_track)
    crossings = np.nonzero(np.diff(np.floor(phase)) > 0)[0] + 1
    pulses[crossings] = 1.0
    pulses[0] = 1.0
    src = lfilter([1.0], [1.0, -1.94, 0.9409], pulses)   # double pole at 0.97
    return np.diff(src, prepend=0.0)                     # lip radiation


def synthesize(speaker: Speaker, vowels: list[int], durations: list[float],
               sr: int = 16000, transition: float = 0.04,
               rng: np.random.Generator | None = None) -> Utterance:
    """Render a vowel sequence for ``speaker``.

    Formant targets glide linearly over ``transition`` seconds at each
    segment boundary. F0 declines by 8% over the utterance.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    bounds = np.round(np.cumsum([0.0] + list(durations)) * sr).astype(int)
    n = int(bounds[-1])
    t = np.arange(n) / sr
    f0 = speaker.f0 * (1.0 - 0.08 * t / max(t[-1], 1e-9))

    # per-sample formant tracks with linear glides around boundaries
    tracks = np.zeros((3, n))
    for i, v in enumerate(vowels):
        tracks[:, bounds[i]:bounds[i + 1]] = speaker.formants(v)[:, None]
    half = int(transition * sr / 2)
    for b in bounds[1:-1]:
        lo, hi = max(b - half, 0), min(b + half, n)
        start, end = tracks[:, lo].copy(), tracks[:, hi - 1].copy()
        ramp = np.linspace(0.0, 1.0, hi - lo)
        tracks[:, lo:hi] = start[:, None] + (end - start)[:, None] * ramp[None, :]

    x = glottal_source(f0, sr)
    x = x + 0.002 * rng.standard_normal(n)
    for k in range(3):
        zi = np.zeros(2)
        y = np.empty(n)
        for start in range(0, n, _BLOCK):
            stop = min(start + _BLOCK, n)
            b, a = _resonator(tracks[k, start], BANDWIDTHS[k], sr)
            y[start:stop], zi = lfilter(b, a, x[start:stop], zi=zi)
        x = y
    for freq, bw in HIGH_FORMANTS:
        b, a = _resonator(freq, bw, sr)
        x = lfilter(b, a, x)
    x = x / max(np.sqrt(np.mean(x ** 2)), 1e-12)
    x = x + 10 ** (ASPIRATION_DB / 20) * rng.standard_normal(n)

    # 10 ms raised-cosine onset/offset
    ramp_len = min(int(0.01 * sr), n // 2)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_len) / ramp_len)
    x[:ramp_len] *= ramp
    x[n - ramp_len:] *= ramp[::-1]
    x *= 0.5 / max(np.max(np.abs(x)), 1e-12)

    labels = [(int(v), int(bounds[i]), int(bounds[i + 1])) for i, v in enumerate(vowels)]
    return Utterance(Waveform(x, sr), speaker, labels)


def random_utterance(rng: np.random.Generator, speaker: Speaker | None = None,
                     sr: int = 16000, min_segments: int = 2, max_segments: int = 5,
                     segment_range: tuple[float, float] = (0.15, 0.3)) -> Utterance:
    speaker = random_speaker(rng) if speaker is None else speaker
    count = int(rng.integers(min_segments, max_segments + 1))
    vowels = []
    for _ in range(count):
        choices = [v for v in VOWELS if not vowels or v != vowels[-1]]
        vowels.append(int(rng.choice(choices)))
    durations = rng.uniform(*segment_range, size=count).tolist()
    return synthesize(speaker, vowels, durations, sr, rng=rng)


def sustained_vowel(vowel: int = 0, f0: float = 120.0, duration: float = 1.0,
                    sr: int = 16000, seed: int = 0) -> Waveform:
    speaker = Speaker(f0, (1.0, 1.0, 1.0))
    return synthesize(speaker, [vowel], [duration], sr, rng=np.random.default_rng(seed)).waveform
