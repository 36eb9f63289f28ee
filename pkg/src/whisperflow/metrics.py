"""Proxy quality metrics: voicing and LPC spectral-envelope agreement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import Waveform, frame_signal, make_window, Window, voicing_ratio
from .whisperize import lpc_analyze

ENVELOPE_ORDER = 24
ENVELOPE_FRAME = 1024
ENVELOPE_HOP = 256
ENVELOPE_BINS = 257


def lpc_envelopes(waveform: Waveform, order: int = ENVELOPE_ORDER,
                  frame_length: int = ENVELOPE_FRAME, hop: int = ENVELOPE_HOP,
                  n_bins: int = ENVELOPE_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame LPC power envelopes in dB plus a mask of non-silent frames."""
    x = waveform.samples
    if len(x) < frame_length:
        x = np.concatenate([x, np.zeros(frame_length - len(x))])
    frames = frame_signal(x, frame_length, hop) * make_window(Window.HANN, frame_length)
    n_fft = 2 * (n_bins - 1)
    env = np.zeros((len(frames), n_bins))
    active = np.zeros(len(frames), dtype=bool)
    for i, frame in enumerate(frames):
        if np.mean(frame ** 2) < 1e-10:
            continue
        model = lpc_analyze(frame, order)
        response = np.abs(np.fft.rfft(model.denominator, n_fft)) ** 2
        env[i] = 10 * np.log10(model.gain ** 2 / np.maximum(response, 1e-300) + 1e-300)
        active[i] = True
    return env, active


def envelope_distance(a: Waveform, b: Waveform) -> tuple[float, float]:
    """Mean log-spectral distance (dB) and mean correlation of LPC envelopes.

    Frames are compared pairwise over the common length; frames silent in
    either signal are skipped. Two silent signals give ``(0.0, 1.0)``; one
    silent and one not gives ``(inf, 0.0)``.
    """
    n = min(len(a), len(b))
    ea, ma = lpc_envelopes(Waveform(a.samples[:n], a.sample_rate))
    eb, mb = lpc_envelopes(Waveform(b.samples[:n], b.sample_rate))
    both = ma & mb
    if not both.any():
        return (0.0, 1.0) if not (ma.any() or mb.any()) else (float("inf"), 0.0)
    ea, eb = ea[both], eb[both]
    lsd = np.sqrt(np.mean((ea - eb) ** 2, axis=1))
    ca = ea - ea.mean(axis=1, keepdims=True)
    cb = eb - eb.mean(axis=1, keepdims=True)
    denom = np.sqrt((ca ** 2).sum(axis=1) * (cb ** 2).sum(axis=1))
    corr = np.divide((ca * cb).sum(axis=1), denom, out=np.ones(len(ca)), where=denom > 0)
    return float(lsd.mean()), float(corr.mean())


@dataclass(frozen=True)
class EvalRow:
    name: str
    voicing_in: float
    voicing_out: float
    envelope_lsd_db: float
    envelope_corr: float
    duration_ratio: float


def evaluate_pair(name: str, reference: Waveform, converted: Waveform) -> EvalRow:
    lsd, corr = envelope_distance(reference, converted)
    ratio = len(converted) / len(reference) if len(reference) else 1.0
    return EvalRow(name, voicing_ratio(reference), voicing_ratio(converted), lsd, corr, ratio)
