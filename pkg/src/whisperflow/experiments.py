"""Corpus-level experiments: training drivers and the property studies.

The functions here sit between the command-line tools and the library
modules. Each study returns its measurements as CSV rows (deterministic
given the seed) plus a list of :class:`~whisperflow.studies.Check` items
comparing them with their acceptance bounds. Wall-clock measurements are
kept out of the CSV rows so that repeated runs compare byte for byte.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import CodecConfig, LatentSequence, decode, encode
from .flow.alignment import dtw_align, fit_length, misalign, warp_along_path
from .flow.model import ConditioningMode, ModelConfig, TokenMixer, VelocityModel
from .flow.training import (FlowExample, FlowMode, TrainConfig, TrainResult, cfm_loss,
                            stack_batch, train)
from .layers import cca_score, one_hot, select_layer
from .metrics import envelope_distance
from .pipeline import (CorpusItem, LatentCorpus, convert_latent, encode_corpus, flow_examples,
                       utterance_rng)
from .signal import Waveform, voicing_ratio
from .studies import Check
from .toydata import sustained_vowel
from .whisperize import ALL_METHODS, WhisperizeConfig, WhisperizeMethod, whisperize

MISALIGN_STREAM = 2
CONVERT_STREAM = 3
VOWEL_STREAM = 4
VALIDATION_TIMES = 10


# ---------------------------------------------------------------------------
# Training on a latent corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowSettings:
    """Architecture and optimiser settings for a corpus-level flow model."""
    blocks: int = 6
    width: int = 128
    conditioning: ConditioningMode = ConditioningMode.CROSS_ATTENTION
    mixer: TokenMixer = TokenMixer.SELF_ATTENTION
    time_dim: int = 64
    kernel_size: int = 3
    mlp_ratio: int = 2
    learning_rate: float = 1e-3
    steps: int = 8000
    batch_size: int = 16
    crop_frames: int | None = 32
    paired: bool = False

    def __post_init__(self):
        object.__setattr__(self, "conditioning", ConditioningMode(self.conditioning))
        object.__setattr__(self, "mixer", TokenMixer(self.mixer))

    @property
    def mode(self) -> FlowMode:
        return FlowMode.PAIRED_SOURCE if self.paired else FlowMode.GAUSSIAN_PRIOR

    def model_config(self, latents: LatentCorpus) -> ModelConfig:
        return ModelConfig(latent_dim=latents.normal[0].shape[0],
                           content_dim=latents.whisper[0].shape[0],
                           speaker_dim=len(latents.speakers[0]), blocks=self.blocks,
                           width=self.width, conditioning=self.conditioning, mixer=self.mixer,
                           time_dim=self.time_dim, kernel_size=self.kernel_size,
                           mlp_ratio=self.mlp_ratio)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, steps=self.steps,
                           batch_size=self.batch_size, seed=seed, mode=self.mode,
                           crop_frames=self.crop_frames)


def split_indices(count: int, train: int) -> tuple[list[int], list[int]]:
    """First ``train`` utterances for training, the rest held out."""
    if not 0 < train < count:
        raise ValueError(f"need 0 < train ({train}) < count ({count})")
    return list(range(train)), list(range(train, count))


def train_flow(latents: LatentCorpus, indices: Sequence[int], settings: FlowSettings,
               seed: int, sources: Sequence[np.ndarray] | None = None,
               callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Initialise a model from ``seed`` and train it on the given utterances."""
    torch.manual_seed(seed)
    model = VelocityModel(settings.model_config(latents))
    examples = flow_examples(latents, indices, paired=settings.paired, sources=sources)
    return train(model, examples, settings.train_config(seed), callback)


def validation_loss(model: VelocityModel, examples: Sequence[FlowExample], mode: FlowMode,
                    seed: int = 0, times: int = VALIDATION_TIMES) -> float:
    """Mean flow-matching loss over full-length examples on a fixed grid of ``t``.

    Each example is evaluated at ``times`` evenly spaced interior points of
    ``[0, 1]``; Gaussian-prior noise comes from a generator seeded per example.
    """
    grid = torch.linspace(0.5 / times, 1 - 0.5 / times, times, dtype=torch.float32)
    values = []
    model.eval()
    with torch.no_grad():
        for k, ex in enumerate(examples):
            batch = stack_batch([ex] * times)
            g = torch.Generator().manual_seed(seed * 1_000_003 + k)
            values.append(float(cfm_loss(model, batch, mode, g, t=grid)))
    return float(np.mean(values))


def conversion_seed(seed: int, index: int) -> int:
    return int(utterance_rng(seed, index, CONVERT_STREAM).integers(2 ** 31))


def convert_held_out(model: VelocityModel, latents: LatentCorpus, indices: Sequence[int],
                     seed: int, steps: int = 10, paired: bool = False) -> list[Waveform]:
    """Decode converted latents for corpus utterances (whisper latent as input)."""
    out = []
    for i in indices:
        z = convert_latent(model, latents.whisper[i], latents.speakers[i],
                           conversion_seed(seed, i), steps, paired)
        lat = LatentSequence(latents.normal_norm.unapply(z), latents.codec.frame_rate)
        out.append(decode(lat, latents.codec, seed=conversion_seed(seed, i)))
    return out


# ---------------------------------------------------------------------------
# Misalignment study: paired training on aligned, warped and re-aligned pairs
# ---------------------------------------------------------------------------

CONDITIONS = ("aligned", "dtw", "misaligned")


@dataclass(frozen=True)
class MisalignmentConfig:
    flow: FlowSettings = FlowSettings(blocks=2, width=64, conditioning=ConditioningMode.PREPEND,
                                      mixer=TokenMixer.TEMPORAL_CONV, steps=1500, paired=True)
    train: int = 40
    euler_steps: int = 10
    ratio_threshold: float = 1.5

    def __post_init__(self):
        if not self.flow.paired:
            object.__setattr__(self, "flow", replace(self.flow, paired=True))


def condition_sources(latents: LatentCorpus, indices: Sequence[int], condition: str,
                      seed: int) -> list[np.ndarray] | None:
    """Source latents paired with each target under one training condition.

    ``aligned`` keeps the whisper latents (alignment by construction).
    ``misaligned`` time-warps each whisper latent with a random 3-segment
    warp and pairs it with the target frame by frame (crop or edge-pad).
    ``dtw`` warps the same misaligned latent back onto the target's time
    axis along the DTW path between the two.
    """
    if condition == "aligned":
        return None
    warped = [misalign(latents.whisper[i], rng=utterance_rng(seed, i, MISALIGN_STREAM))
              for i in indices]
    lengths = [latents.normal[i].shape[1] for i in indices]
    if condition == "misaligned":
        return [fit_length(w, n) for w, n in zip(warped, lengths)]
    if condition == "dtw":
        return [warp_along_path(w, dtw_align(latents.normal[i].T, w.T).path, n)
                for w, i, n in zip(warped, indices, lengths)]
    raise ValueError(f"unknown condition {condition!r}")


MISALIGNMENT_HEADER = ["condition", "val_loss", "val_loss_aligned_pairs", "voicing_out",
                       "final_train_loss"]


@dataclass
class MisalignmentResult:
    val_loss: dict[str, float]
    aligned_pair_loss: dict[str, float]
    voicing: dict[str, float]
    final_train_loss: dict[str, float]
    models: dict[str, VelocityModel] = field(repr=False)
    config: MisalignmentConfig

    @property
    def ratio(self) -> float:
        return self.val_loss["misaligned"] / self.val_loss["aligned"]

    def checks(self) -> list[Check]:
        v = self.val_loss
        return [
            Check("aligned_below_dtw", v["dtw"] - v["aligned"], 0.0, v["aligned"] < v["dtw"]),
            Check("dtw_below_misaligned", v["misaligned"] - v["dtw"], 0.0,
                  v["dtw"] < v["misaligned"]),
            Check("misaligned_over_aligned", self.ratio, self.config.ratio_threshold,
                  self.ratio >= self.config.ratio_threshold),
        ]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks())

    def rows(self) -> list[list[str]]:
        return [MISALIGNMENT_HEADER] + [
            [c, repr(self.val_loss[c]), repr(self.aligned_pair_loss[c]), repr(self.voicing[c]),
             repr(self.final_train_loss[c])] for c in CONDITIONS]


def misalignment_study(items: Sequence[CorpusItem],
                       config: MisalignmentConfig = MisalignmentConfig(), seed: int = 0,
                       jobs: int = 1, codec: CodecConfig = CodecConfig()) -> MisalignmentResult:
    """Train one paired model per condition and compare held-out losses.

    The validation loss of a condition is measured on held-out pairs
    prepared the same way as its training pairs; the loss on the aligned
    held-out pairs and the voicing of converted held-out whispers are
    reported alongside.
    """
    train_idx, val_idx = split_indices(len(items), config.train)
    latents = encode_corpus(items, train_idx, codec, jobs)
    aligned_val = flow_examples(latents, val_idx, paired=True)
    out = {k: {} for k in ("val", "aligned", "voicing", "final", "models")}
    for condition in CONDITIONS:
        sources = condition_sources(latents, train_idx, condition, seed)
        result = train_flow(latents, train_idx, config.flow, seed, sources)
        val = flow_examples(latents, val_idx, paired=True,
                            sources=condition_sources(latents, val_idx, condition, seed))
        model = result.model
        out["val"][condition] = validation_loss(model, val, FlowMode.PAIRED_SOURCE, seed)
        out["aligned"][condition] = validation_loss(model, aligned_val, FlowMode.PAIRED_SOURCE,
                                                    seed)
        converted = convert_held_out(model, latents, val_idx, seed, config.euler_steps,
                                     paired=True)
        out["voicing"][condition] = float(np.mean([voicing_ratio(w) for w in converted]))
        out["final"][condition] = float(np.mean([v for _, v in result.losses[-100:]]))
        out["models"][condition] = model
    return MisalignmentResult(out["val"], out["aligned"], out["voicing"], out["final"],
                              out["models"], config)


# ---------------------------------------------------------------------------
# End-to-end conversion quality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConversionCriteria:
    """Per-utterance quality bar and the share of utterances that must meet it."""
    voicing_min: float = 0.5
    envelope_corr_min: float = 0.7
    min_fraction: float = 0.8

    def good(self, voicing_out: float, envelope_corr: float) -> bool:
        return voicing_out >= self.voicing_min and envelope_corr >= self.envelope_corr_min

    def required(self, total: int) -> int:
        return int(np.ceil(self.min_fraction * total - 1e-9))

    def check(self, rows) -> Check:
        count = sum(self.good(r.voicing_out, r.envelope_corr) for r in rows)
        need = self.required(len(rows))
        return Check("held_out_converted_ok", count, need, count >= need)


# ---------------------------------------------------------------------------
# Whisperisation properties on sustained vowels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhisperizeStudyConfig:
    count: int = 20
    duration: float = 1.0
    f0_range: tuple[float, float] = (90.0, 220.0)
    voiced_min: float = 0.7
    whisper_max: float = 0.25
    envelope_max_db: float = 3.0
    realtime_min: float = 10.0


def toy_vowels(count: int, seed: int, duration: float = 1.0,
               f0_range: tuple[float, float] = (90.0, 220.0)) -> list[Waveform]:
    """``count`` sustained vowels cycling through the five vowel types with seeded F0."""
    out = []
    for k in range(count):
        rng = utterance_rng(seed, k, VOWEL_STREAM)
        f0 = float(rng.uniform(*f0_range))
        out.append(sustained_vowel(k % 5, f0, duration, seed=int(rng.integers(2 ** 31))))
    return out


WHISPERIZE_HEADER = ["method", "length_ratio_min", "length_ratio_max", "voicing_in_min",
                     "voicing_out_mean", "voicing_out_max", "envelope_lsd_db_mean"]


@dataclass
class WhisperizeStudyResult:
    rows_by_method: dict[WhisperizeMethod, list[float]]
    voicing_in: list[float]
    realtime_factor: float
    config: WhisperizeStudyConfig

    def checks(self) -> list[Check]:
        cfg = self.config
        out = [Check("voicing_in_min", min(self.voicing_in), cfg.voiced_min,
                     min(self.voicing_in) >= cfg.voiced_min)]
        for method, (rmin, rmax, _, mean_out, max_out, lsd) in self.rows_by_method.items():
            exact = rmin == 1.0 and rmax == 1.0
            out.append(Check(f"{method.value}_length_ratio", rmax if rmax != 1.0 else rmin, 1.0,
                             exact))
            out.append(Check(f"{method.value}_voicing_out_max", max_out, cfg.whisper_max,
                             max_out <= cfg.whisper_max))
        lsd = self.rows_by_method[WhisperizeMethod.LPC_DEVOICE][5]
        out.append(Check("lpc_devoice_envelope_lsd_db", lsd, cfg.envelope_max_db,
                         lsd <= cfg.envelope_max_db))
        return out

    def timing_check(self) -> Check:
        return Check("realtime_factor", self.realtime_factor, self.config.realtime_min,
                     self.realtime_factor >= self.config.realtime_min)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks()) and self.timing_check().passed

    def rows(self) -> list[list[str]]:
        return [WHISPERIZE_HEADER] + [[m.value] + [repr(float(v)) for v in vals]
                                      for m, vals in self.rows_by_method.items()]


def whisperize_study(config: WhisperizeStudyConfig = WhisperizeStudyConfig(), seed: int = 0,
                     whisper_config: WhisperizeConfig = WhisperizeConfig()) -> WhisperizeStudyResult:
    """Length, devoicing and envelope checks for every method, plus throughput.

    The real-time factor is audio seconds processed per second of
    single-threaded wall time, summed over all methods.
    """
    vowels = toy_vowels(config.count, seed, config.duration, config.f0_range)
    voicing_in = [voicing_ratio(x) for x in vowels]
    rows, elapsed, audio = {}, 0.0, 0.0
    for method in ALL_METHODS:
        ratios, v_out, lsd = [], [], []
        for k, x in enumerate(vowels):
            noise_seed = int(utterance_rng(seed, k, VOWEL_STREAM + 1 + ALL_METHODS.index(method))
                             .integers(2 ** 31))
            t0 = time.perf_counter()
            y = whisperize(x, method, whisper_config, seed=noise_seed)
            elapsed += time.perf_counter() - t0
            audio += x.duration
            ratios.append(len(y) / len(x))
            v_out.append(voicing_ratio(y))
            lsd.append(envelope_distance(x, y)[0])
        rows[method] = [min(ratios), max(ratios), min(voicing_in), float(np.mean(v_out)),
                        max(v_out), float(np.mean(lsd))]
    return WhisperizeStudyResult(rows, voicing_in, audio / elapsed, config)


# ---------------------------------------------------------------------------
# Codec roundtrip
# ---------------------------------------------------------------------------

@dataclass
class CodecStudyResult:
    errors: list[float]
    voicing: list[float]
    threshold: float

    def checks(self) -> list[Check]:
        worst = max(self.errors)
        return [Check("log_mel_l1_max", worst, self.threshold, worst <= self.threshold)]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks())

    def rows(self) -> list[list[str]]:
        return [["vowel", "log_mel_l1", "voicing_out"]] + [
            [str(k), repr(e), repr(v)] for k, (e, v) in enumerate(zip(self.errors, self.voicing))]


def codec_study(count: int = 20, seed: int = 0, codec: CodecConfig = CodecConfig(),
                threshold: float = 0.1) -> CodecStudyResult:
    """Mean absolute log-mel difference of ``encode(decode(encode(x)))`` against ``encode(x)``."""
    errors, voicing = [], []
    for k, x in enumerate(toy_vowels(count, seed)):
        z = encode(x, codec)
        y = decode(z, codec, seed=seed)
        back = encode(y, codec)
        n = min(z.length, back.length)
        errors.append(float(np.mean(np.abs(z.data[:, :n] - back.data[:, :n]))))
        voicing.append(voicing_ratio(y))
    return CodecStudyResult(errors, voicing, threshold)


# ---------------------------------------------------------------------------
# Layer selection fixtures
# ---------------------------------------------------------------------------

def brute_force_layer(invariance: Sequence[float], cca: Sequence[float]) -> int:
    """Exhaustive argmax of the normalised product in plain Python, lowest index on ties."""
    def normalise(v):
        lo, hi = min(v), max(v)
        return [0.0 if hi == lo else (x - lo) / (hi - lo) for x in v]
    inv, cc = normalise(list(invariance)), normalise(list(cca))
    best, best_value = 0, None
    for layer in range(len(inv)):
        value = inv[layer] * cc[layer]
        if best_value is None or value > best_value:
            best, best_value = layer, value
    return best


def layer_profile(rng: np.random.Generator, layers: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Random per-layer invariance and CCA profiles, sometimes with repeated layers.

    A quarter of the profiles copy one layer's scores onto another so the
    tie-break rule is exercised.
    """
    inv = rng.uniform(-1.0, 1.0, size=layers)
    cca = rng.uniform(0.0, 1.0, size=layers)
    if rng.uniform() < 0.25:
        src, dst = rng.choice(layers, size=2, replace=False)
        inv[dst], cca[dst] = inv[src], cca[src]
    return inv, cca


@dataclass
class LayerStudyResult:
    selected: list[int]
    expected: list[int]
    cca_identical: float
    cca_noisy: float
    cca_null: float
    cca_null_p95: float

    def checks(self) -> list[Check]:
        matches = sum(a == b for a, b in zip(self.selected, self.expected))
        return [
            Check("select_matches_brute_force", matches, len(self.expected),
                  matches == len(self.expected)),
            Check("cca_identical_views", self.cca_identical, 0.999, self.cca_identical >= 0.999),
            Check("cca_noisy_one_hot", self.cca_noisy, 0.9, self.cca_noisy >= 0.9),
            Check("cca_permutation_null", self.cca_null, self.cca_null_p95,
                  self.cca_null <= self.cca_null_p95),
        ]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks())

    def rows(self) -> list[list[str]]:
        return [["fixture", "selected", "brute_force"]] + [
            [str(k), str(a), str(b)] for k, (a, b) in enumerate(zip(self.selected, self.expected))]


def layer_study(fixtures: int = 100, layers: int = 6, seed: int = 0,
                permutations: int = 100) -> LayerStudyResult:
    selected, expected = [], []
    for k in range(fixtures):
        inv, cca = layer_profile(np.random.default_rng([seed, k]), layers)
        selected.append(select_layer(inv, cca).best)
        expected.append(brute_force_layer(inv.tolist(), cca.tolist()))
    rng = np.random.default_rng([seed, fixtures])
    labels = rng.integers(0, 6, size=120)
    identical = cca_score(one_hot(labels), labels)
    labels = rng.integers(0, 8, size=300)
    noisy = cca_score(one_hot(labels) + 0.1 * rng.normal(size=(300, 8)), labels)
    labels = rng.integers(0, 20, size=500)
    x = rng.normal(size=(500, 32))
    null = cca_score(x, labels)
    perm = [cca_score(x, rng.permutation(labels)) for _ in range(permutations)]
    return LayerStudyResult(selected, expected, identical, noisy, null,
                            float(np.percentile(perm, 95)))
