"""Toy corpus generation, paired-latent preparation, conversion and evaluation.

Every per-utterance random stream is derived from ``(seed, utterance index,
stream id)`` so results do not depend on processing order or on how many
utterances are generated.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import CodecConfig, LatentSequence, Normalizer, decode, encode, fit_normalizer
from .flow.alignment import resample_frames
from .flow.model import VelocityModel
from .flow.training import FlowExample, euler_integrate, sample
from .layers import read_fmat, write_fmat
from .metrics import EvalRow, evaluate_pair
from .signal import Waveform, read_wav, write_wav
from .toydata import random_utterance
from .whisperize import WhisperizeConfig, WhisperizeMethod, whisperize_random

SYNTH_STREAM = 0
WHISPER_STREAM = 1


def utterance_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def utterance_id(index: int) -> str:
    return f"utt{index:04d}"


@dataclass(frozen=True)
class CorpusItem:
    utt_id: str
    normal: Waveform
    speaker: np.ndarray
    labels: tuple[tuple[int, int, int], ...]
    whisper: Waveform | None = None
    method: WhisperizeMethod | None = None


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def synth_corpus(count: int, seed: int, sample_rate: int = 16000, jobs: int = 1) -> list[CorpusItem]:
    """``count`` formant-synthesised vowel-sequence utterances with speaker descriptors."""
    def make(i):
        utt = random_utterance(utterance_rng(seed, i, SYNTH_STREAM), sr=sample_rate)
        return CorpusItem(utterance_id(i), utt.waveform, utt.speaker.descriptor(),
                          tuple(utt.labels))
    return _map(make, range(count), jobs)


def whisperize_corpus(items: Sequence[CorpusItem], config: WhisperizeConfig, seed: int,
                      jobs: int = 1) -> list[CorpusItem]:
    """Attach a synthetic whisper (and the method used) to every item."""
    def run(pair):
        i, item = pair
        out, method = whisperize_random(item.normal, config, utterance_rng(seed, i, WHISPER_STREAM))
        if len(out) != len(item.normal):
            raise RuntimeError(f"{item.utt_id}: whisper length {len(out)} != {len(item.normal)}")
        return replace(item, whisper=out, method=method)
    return _map(run, list(enumerate(items)), jobs)


# ---------------------------------------------------------------------------
# On-disk corpus layout
# ---------------------------------------------------------------------------
#   normal/<id>.wav      float32 WAV of the voiced utterance
#   content/<id>.fmat    frames x n_mels log-mel of the voiced utterance
#   speakers.csv         utt_id, s0 .. s15
#   labels.csv           utt_id, vowel, start_sample, end_sample
#   whisper/<id>.wav     float32 WAV of the synthetic whisper
#   methods.csv          utt_id, method

def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_rows(path: Path, header_prefix: str) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != header_prefix:
        raise ValueError(f"{path}: missing header")
    return rows[1:]


def save_corpus(items: Sequence[CorpusItem], out_dir: str | os.PathLike,
                codec: CodecConfig = CodecConfig()) -> None:
    out = Path(out_dir)
    (out / "normal").mkdir(parents=True, exist_ok=True)
    (out / "content").mkdir(exist_ok=True)
    for item in items:
        write_wav(out / "normal" / f"{item.utt_id}.wav", item.normal, encoding="float32")
        write_fmat(out / "content" / f"{item.utt_id}.fmat", encode(item.normal, codec).data.T)
    dim = len(items[0].speaker) if items else 0
    _write_rows(out / "speakers.csv", ["utt_id"] + [f"s{k}" for k in range(dim)],
                [[it.utt_id] + [repr(float(v)) for v in it.speaker] for it in items])
    _write_rows(out / "labels.csv", ["utt_id", "vowel", "start", "end"],
                [[it.utt_id, v, s, e] for it in items for v, s, e in it.labels])
    if items and all(it.whisper is not None for it in items):
        save_whispers(items, out)


def save_whispers(items: Sequence[CorpusItem], out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    (out / "whisper").mkdir(parents=True, exist_ok=True)
    for item in items:
        write_wav(out / "whisper" / f"{item.utt_id}.wav", item.whisper, encoding="float32")
    _write_rows(out / "methods.csv", ["utt_id", "method"],
                [[it.utt_id, it.method.value] for it in items])


def load_corpus(corpus_dir: str | os.PathLike, require_whisper: bool = False) -> list[CorpusItem]:
    root = Path(corpus_dir)
    if not (root / "speakers.csv").is_file():
        raise FileNotFoundError(f"{root}: not a corpus directory (no speakers.csv)")
    speakers = {r[0]: np.array([float(v) for v in r[1:]]) for r in _read_rows(root / "speakers.csv", "utt_id")}
    labels: dict[str, list] = {k: [] for k in speakers}
    for r in _read_rows(root / "labels.csv", "utt_id"):
        labels[r[0]].append((int(r[1]), int(r[2]), int(r[3])))
    methods = {}
    if (root / "methods.csv").is_file():
        methods = {r[0]: WhisperizeMethod(r[1]) for r in _read_rows(root / "methods.csv", "utt_id")}
    elif require_whisper:
        raise FileNotFoundError(f"{root}: no whispers yet (run the whisperize command)")
    items = []
    for utt in sorted(speakers):
        whisper = read_wav(root / "whisper" / f"{utt}.wav") if utt in methods else None
        items.append(CorpusItem(utt, read_wav(root / "normal" / f"{utt}.wav"), speakers[utt],
                                tuple(labels[utt]), whisper, methods.get(utt)))
    return items


def read_content(corpus_dir: str | os.PathLike, utt_id: str) -> np.ndarray:
    return read_fmat(Path(corpus_dir) / "content" / f"{utt_id}.fmat")


# ---------------------------------------------------------------------------
# Latents and conditioning
# ---------------------------------------------------------------------------

@dataclass
class LatentCorpus:
    """Normalised normal/whisper latents of a paired corpus.

    ``normal[i]`` and ``whisper[i]`` are ``D x L`` with the same ``L``
    (alignment by construction); normalisers are fitted on the training
    indices only.
    """
    ids: list[str]
    normal: list[np.ndarray]
    whisper: list[np.ndarray]
    speakers: list[np.ndarray]
    normal_norm: Normalizer
    whisper_norm: Normalizer
    codec: CodecConfig = field(default_factory=CodecConfig)

    def __len__(self):
        return len(self.ids)


def encode_corpus(items: Sequence[CorpusItem], train_indices: Sequence[int],
                  codec: CodecConfig = CodecConfig(), jobs: int = 1) -> LatentCorpus:
    if any(it.whisper is None for it in items):
        raise ValueError("every item needs a whisper")
    zn = _map(lambda it: encode(it.normal, codec).data, items, jobs)
    zw = _map(lambda it: encode(it.whisper, codec).data, items, jobs)
    nn_ = fit_normalizer([zn[i] for i in train_indices])
    nw = fit_normalizer([zw[i] for i in train_indices])
    return LatentCorpus([it.utt_id for it in items], [nn_.apply(z) for z in zn],
                        [nw.apply(z) for z in zw], [np.asarray(it.speaker) for it in items],
                        nn_, nw, codec)


def content_features(whisper_latent: np.ndarray, length: int) -> np.ndarray:
    """Frame-aligned ``length x C`` content matrix from a ``C x L'`` whisper latent."""
    return resample_frames(whisper_latent, length, axis=1).T


def flow_examples(latents: LatentCorpus, indices: Sequence[int], paired: bool = False,
                  sources: Sequence[np.ndarray] | None = None,
                  conditioned: bool | None = None) -> list[FlowExample]:
    """Training pairs with normal-speech latents as targets.

    Gaussian-prior examples condition on whisper content and the speaker
    descriptor. Paired examples use the whisper latent as ``z0`` and by
    default get all-zero content and speaker inputs, so the velocity must
    be inferred from the interpolated point alone.
    ``sources`` overrides the whisper latents (for misaligned or re-aligned
    variants); they are resampled to the target length when needed.
    """
    conditioned = (not paired) if conditioned is None else conditioned
    out = []
    for k, i in enumerate(indices):
        z1 = latents.normal[i]
        src = latents.whisper[i] if sources is None else sources[k]
        src = resample_frames(src, z1.shape[1], axis=1) if src.shape[1] != z1.shape[1] else src
        content = src.T if conditioned else np.zeros((z1.shape[1], src.shape[0]))
        speaker = latents.speakers[i] if conditioned else np.zeros_like(latents.speakers[i])
        out.append(FlowExample(z1, content, speaker, src if paired else None))
    return out


# ---------------------------------------------------------------------------
# Conversion and evaluation
# ---------------------------------------------------------------------------

def _tensor(x: np.ndarray, model: VelocityModel) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x)[None], dtype=next(model.parameters()).dtype)


def convert_latent(model: VelocityModel, whisper_latent: np.ndarray, speaker: np.ndarray,
                   seed: int, steps: int = 10, paired: bool = False) -> np.ndarray:
    """Normalised normal-speech latent (D x L) for one normalised whisper latent.

    Paired models integrate from the whisper latent itself without
    conditioning; Gaussian-prior models start from seeded noise.
    """
    length = whisper_latent.shape[1]
    content = content_features(whisper_latent, length)
    if paired:
        content, speaker = np.zeros_like(content), np.zeros_like(speaker)
    content, spk = _tensor(content, model), _tensor(speaker, model)
    model.eval()
    if paired:
        z = euler_integrate(model, _tensor(whisper_latent, model), steps, content, spk)
    else:
        z = sample(model, content, spk, length, seed=seed, steps=steps)
    return z[0].detach().cpu().numpy().astype(np.float64)


def convert_waveform(model: VelocityModel, whisper: Waveform, speaker: np.ndarray,
                     normal_norm: Normalizer, whisper_norm: Normalizer,
                     codec: CodecConfig = CodecConfig(), seed: int = 0, steps: int = 10,
                     paired: bool = False) -> Waveform:
    """Convert one whisper; the output is trimmed or zero-padded to the input length."""
    zw = whisper_norm.apply(encode(whisper, codec).data)
    z = convert_latent(model, zw, speaker, seed, steps, paired)
    y = decode(LatentSequence(normal_norm.unapply(z), codec.frame_rate), codec, seed=seed)
    samples = np.zeros(len(whisper))
    n = min(len(whisper), len(y))
    samples[:n] = y.samples[:n]
    return Waveform(samples, y.sample_rate)


EVAL_HEADER = ["name", "voicing_in", "voicing_out", "envelope_lsd_db", "envelope_corr",
               "duration_ratio"]


@dataclass(frozen=True)
class EvalReport:
    rows: list[EvalRow]

    def means(self) -> EvalRow:
        cols = np.array([[r.voicing_in, r.voicing_out, r.envelope_lsd_db, r.envelope_corr,
                          r.duration_ratio] for r in self.rows])
        return EvalRow("mean", *(float(v) for v in cols.mean(axis=0)))

    def csv_rows(self) -> list[list[str]]:
        out = [EVAL_HEADER]
        for r in list(self.rows) + ([self.means()] if self.rows else []):
            out.append([r.name, repr(r.voicing_in), repr(r.voicing_out), repr(r.envelope_lsd_db),
                        repr(r.envelope_corr), repr(r.duration_ratio)])
        return out


def evaluate(names: Sequence[str], references: Sequence[Waveform],
             outputs: Sequence[Waveform], jobs: int = 1) -> EvalReport:
    if not (len(names) == len(references) == len(outputs)):
        raise ValueError("reference and converted lists differ in length")
    rows = _map(lambda k: evaluate_pair(names[k], references[k], outputs[k]),
                range(len(names)), jobs)
    return EvalReport(rows)


def write_csv(path: str | os.PathLike, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
