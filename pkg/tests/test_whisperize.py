"""Tests for LPC analysis/synthesis and the three whisperisation pipelines."""
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import lfilter

from whisperflow.metrics import envelope_distance
from whisperflow.signal import Waveform, frame_signal, make_window, voicing_ratio
from whisperflow.toydata import sustained_vowel
from whisperflow.whisperize import (
    ALL_METHODS, LpcModel, WhisperizeConfig, WhisperizeMethod, is_minimum_phase,
    levinson_durbin, lpc_analyze, lpc_residual, lpc_synthesize, poles, scale_radii,
    whisperize, whisperize_random, widen_bandwidths, with_methods,
)

SR = 16000


def ar1(n, coef=0.5, seed=0):
    e = np.random.default_rng(seed).standard_normal(n)
    return lfilter([1.0], [1.0, -coef], e), e


# ---------------------------------------------------------------------------
# LPC analysis
# ---------------------------------------------------------------------------

class TestLpcAnalyze:
    def test_ar1_coefficient(self):
        x, _ = ar1(20000)
        model = lpc_analyze(x, 1)
        oracle = np.dot(x[:-1], x[1:]) / np.dot(x, x)
        assert abs(model.coefficients[0] - 0.5) <= 0.05
        assert np.isclose(model.coefficients[0], oracle, rtol=1e-12)

    def test_zero_frame(self):
        model = lpc_analyze(np.zeros(64), 8)
        assert model.order == 8
        assert np.all(model.coefficients == 0) and model.gain == 0

    def test_white_noise_gain(self):
        x = np.random.default_rng(1).standard_normal(8000)
        model = lpc_analyze(x, 16)
        assert abs(model.gain ** 2 / np.var(x) - 1) <= 0.1

    def test_matches_normal_equations(self):
        x = np.random.default_rng(2).standard_normal(400)
        x = lfilter([1.0], [1.0, -1.2, 0.6], x)
        p = 6
        r = np.array([np.dot(x[:len(x) - k], x[k:]) for k in range(p + 1)])
        toeplitz = r[np.abs(np.arange(p)[:, None] - np.arange(p)[None, :])]
        oracle = np.linalg.solve(toeplitz, r[1:])
        model = lpc_analyze(x, p)
        assert np.allclose(model.coefficients, oracle, atol=1e-9)
        err = r[0] - np.dot(oracle, r[1:])
        assert np.isclose(model.gain ** 2, err / len(x))

    def test_singular_recursion_clamped(self):
        a, err, ks, clamped = levinson_durbin(np.ones(4), 3)
        assert clamped >= 1
        assert np.all(np.abs(ks) <= 0.999)
        assert np.all(np.isfinite(a)) and err >= 0

    def test_order_out_of_range(self):
        with pytest.raises(ValueError):
            lpc_analyze(np.ones(8), 8)


# ---------------------------------------------------------------------------
# Inverse filtering and synthesis
# ---------------------------------------------------------------------------

class TestResidualSynthesis:
    def test_identity_filter(self):
        x = np.random.default_rng(0).standard_normal(50)
        assert np.array_equal(lpc_residual(x, LpcModel(np.zeros(4), 1.0)), x)

    def test_ar1_whitening(self):
        x, _ = ar1(8000, seed=3)
        e = lpc_residual(x, lpc_analyze(x, 1))
        r = np.array([np.dot(e, e), np.dot(e[:-1], e[1:])])
        assert abs(r[1] / r[0]) <= 0.1

    def test_zero_excitation(self):
        assert np.all(lpc_synthesize(np.zeros(32), LpcModel([0.5, -0.2], 1.0)) == 0)

    def test_impulse_response(self):
        imp = np.zeros(6)
        imp[0] = 1
        assert np.allclose(lpc_synthesize(imp, LpcModel([0.5], 1.0)),
                           [1, 0.5, 0.25, 0.125, 0.0625, 0.03125])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), order=st.integers(1, 16))
    def test_inverse_pair(self, seed, order):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(256) * make_window("hann", 256)
        model = lpc_analyze(x, order)
        y = lpc_synthesize(lpc_residual(x, model), model)
        assert np.max(np.abs(y - x)) <= 1e-9

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), order=st.integers(1, 20))
    def test_analysis_is_stable(self, seed, order):
        x = np.random.default_rng(seed).standard_normal(128)
        model = lpc_analyze(x, order)
        assert is_minimum_phase(model.denominator)


# ---------------------------------------------------------------------------
# Poles and bandwidth widening
# ---------------------------------------------------------------------------

class TestPoles:
    def test_first_order(self):
        assert np.allclose(poles(LpcModel([0.5], 1.0)), [0.5])

    def test_double_root(self):
        roots = poles(LpcModel([1.0, -0.25], 1.0))
        assert np.allclose(roots, [0.5, 0.5], atol=1e-6)

    def test_conjugate_pairs(self):
        x = np.random.default_rng(4).standard_normal(512)
        roots = poles(lpc_analyze(lfilter([1.0], [1.0, -1.6, 0.9], x), 10))
        complex_roots = roots[np.abs(roots.imag) > 1e-9]
        assert np.allclose(np.sort_complex(complex_roots),
                           np.sort_complex(np.conj(complex_roots)))

    def test_residual_polynomial(self):
        model = LpcModel([1.2, -0.5, 0.1], 1.0)
        roots = poles(model)
        assert np.max(np.abs(np.polyval(model.denominator, roots))) <= 1e-6

    def test_zero_order(self):
        with pytest.raises(ValueError):
            poles(LpcModel(np.zeros(0), 1.0))


class TestWiden:
    def test_zero_delta(self):
        model = LpcModel([1.2, -0.5, 0.1], 0.3)
        out = widen_bandwidths(model, 0.0, SR)
        assert np.allclose(out.coefficients, model.coefficients, atol=1e-9)
        assert out.gain == 0.3

    def test_single_pole_radius(self):
        out = widen_bandwidths(LpcModel([0.95], 1.0), 100.0, SR)
        assert np.isclose(out.coefficients[0], 0.95 * np.exp(-np.pi * 100 / SR))
        assert abs(out.coefficients[0] - 0.93153) < 5e-6

    def test_shortcut_matches_recomposition(self):
        x = np.random.default_rng(5).standard_normal(1024)
        model = lpc_analyze(lfilter([1.0], [1.0, -1.3, 0.8], x), 12)
        out = widen_bandwidths(model, 300.0, SR)
        shortcut = scale_radii(model, np.exp(-np.pi * 300 / SR))
        assert np.max(np.abs(out.coefficients - shortcut.coefficients)) <= 1e-9
        assert is_minimum_phase(out.denominator)


# ---------------------------------------------------------------------------
# Whisperisation pipelines
# ---------------------------------------------------------------------------

def first_formant_bandwidth(x, f1):
    frames = frame_signal(x.samples, 512, 256) * make_window("hann", 512)
    widths = []
    for frame in frames[2:-2]:
        roots = poles(lpc_analyze(frame, 16))
        roots = roots[roots.imag > 0]
        freq = np.angle(roots) * SR / (2 * np.pi)
        r = np.abs(roots[np.argmin(np.abs(freq - f1))])
        widths.append(-SR / np.pi * np.log(r))
    return float(np.median(widths))


@pytest.fixture(scope="module")
def vowels():
    return {v: sustained_vowel(v, 120.0, 1.0) for v in range(5)}


class TestWhisperize:
    def test_devoice_example(self):
        x = sustained_vowel(3, 120.0, 3.0)
        assert voicing_ratio(x) >= 0.8
        y = whisperize(x, WhisperizeMethod.LPC_DEVOICE, seed=1)
        assert len(y) == len(x)
        assert voicing_ratio(y) <= 0.15

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_silence(self, method):
        y = whisperize(Waveform(np.zeros(4000), SR), method)
        assert len(y) == 4000 and np.all(y.samples == 0)

    def test_formant_widen_bandwidth(self, vowels):
        delta = WhisperizeConfig().delta_bandwidth
        for v, f1 in [(0, 730.0), (3, 530.0), (4, 570.0)]:
            x = vowels[v]
            y = whisperize(x, WhisperizeMethod.FORMANT_WIDEN, seed=1)
            assert first_formant_bandwidth(y, f1) - first_formant_bandwidth(x, f1) >= 0.5 * delta

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_devoicing_property(self, vowels, method):
        for v, x in vowels.items():
            assert voicing_ratio(x) >= 0.6
            assert voicing_ratio(whisperize(x, method, seed=v)) <= 0.25

    def test_envelope_preserved(self, vowels):
        for v, x in vowels.items():
            y = whisperize(x, WhisperizeMethod.LPC_DEVOICE, seed=v)
            assert envelope_distance(x, y)[0] <= 3.0

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_energy_and_peak(self, vowels, method):
        x = vowels[0]
        y = whisperize(x, method, seed=2)
        fx = frame_signal(x.samples, 512, 128)
        fy = frame_signal(y.samples, 512, 128)
        rx = np.sqrt(np.mean(fx ** 2, axis=1))
        ry = np.sqrt(np.mean(fy ** 2, axis=1))
        loud = rx > 1e-3 * rx.max()
        ratio = ry[loud] / rx[loud]
        assert np.all((ratio >= 0.8) & (ratio <= 1.25))
        assert np.max(np.abs(y.samples)) <= 4 * np.max(np.abs(x.samples))

    def test_methods_differ(self, vowels):
        x = vowels[0]
        a = whisperize(x, WhisperizeMethod.LPC_DEVOICE, seed=0).samples
        b = whisperize(x, WhisperizeMethod.GLOTTAL_REMOVE, seed=0).samples
        assert not np.allclose(a, b)

    def test_too_short(self):
        with pytest.raises(ValueError):
            whisperize(Waveform(np.zeros(100), SR), WhisperizeMethod.LPC_DEVOICE)

    @settings(max_examples=10, deadline=None)
    @given(length=st.integers(512, 3000), method=st.sampled_from(ALL_METHODS),
           seed=st.integers(0, 100))
    def test_length_preserved(self, length, method, seed):
        x = np.random.default_rng(seed).uniform(-0.5, 0.5, length)
        assert len(whisperize(Waveform(x, SR), method, seed=seed)) == length


class TestWhisperizeRandom:
    def test_method_frequencies(self):
        x = Waveform(np.zeros(512), SR)
        rng = np.random.default_rng(0)
        counts = Counter(whisperize_random(x, rng=rng)[1] for _ in range(3000))
        for method in ALL_METHODS:
            assert 0.28 <= counts[method] / 3000 <= 0.39

    def test_single_method(self, vowels):
        cfg = with_methods(WhisperizeConfig(), WhisperizeMethod.FORMANT_WIDEN)
        rng = np.random.default_rng(1)
        for _ in range(5):
            assert whisperize_random(vowels[1], cfg, rng)[1] is WhisperizeMethod.FORMANT_WIDEN

    def test_deterministic(self, vowels):
        a, ma = whisperize_random(vowels[2], rng=np.random.default_rng(9))
        b, mb = whisperize_random(vowels[2], rng=np.random.default_rng(9))
        assert ma is mb and np.array_equal(a.samples, b.samples)

    def test_empty_method_set(self):
        with pytest.raises(ValueError):
            WhisperizeConfig(enabled_methods=())
