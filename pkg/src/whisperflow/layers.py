"""Layer-wise invariance and content analysis of encoder features.

Per-layer features of normal, real-whisper and synthetic-whisper renditions
of the same utterances are pooled to word vectors. A layer is scored by how
closely synthetic whisper matches real whisper (invariance), how closely
normal speech matches real whisper (modality), and how well the features
predict word identity (CCA). The selected layer maximises the product of
min-max normalised invariance and CCA.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

FMAT_MAGIC = b"FMAT"
CCA_RIDGE = 1e-4
MODALITIES = ("normal", "real_whisper", "synth_whisper")


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WordSpan:
    word_id: int
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")


@dataclass(frozen=True)
class Triplet:
    """Features (one frames x dim matrix per layer) and spans for each modality."""
    utterance_id: str
    normal: list[np.ndarray]
    real_whisper: list[np.ndarray]
    synth_whisper: list[np.ndarray]
    spans: dict[str, list[WordSpan]]

    def __post_init__(self):
        counts = {len(self.normal), len(self.real_whisper), len(self.synth_whisper)}
        if len(counts) != 1:
            raise ValueError(f"{self.utterance_id}: layer counts differ across modalities")
        ids = {tuple(s.word_id for s in self.spans[m]) for m in MODALITIES}
        if len(ids) != 1:
            raise ValueError(f"{self.utterance_id}: word sequences differ across modalities")

    @property
    def layers(self) -> int:
        return len(self.normal)

    def pooled(self, modality: str, layer: int) -> np.ndarray:
        return word_pool(getattr(self, modality)[layer], self.spans[modality])


@dataclass(frozen=True)
class LayerScore:
    layer: int
    invariance: float
    modality: float
    cca: float
    combined: float


@dataclass(frozen=True)
class LayerSelection:
    best: int
    scores: list[LayerScore]
    tie: bool
    degenerate: tuple[str, ...]


# ----------------------------------------------------------------------------
# Pooling and correlation
# ----------------------------------------------------------------------------

def word_pool(features: np.ndarray, spans: Sequence[WordSpan]) -> np.ndarray:
    """Mean feature vector over each span's frames, ``words x dim``."""
    features = np.asarray(features, dtype=np.float64)
    rows = []
    for span in spans:
        if span.end > features.shape[0]:
            raise ValueError(f"span [{span.start}, {span.end}) exceeds {features.shape[0]} frames")
        rows.append(features[span.start:span.end].mean(axis=0))
    return np.asarray(rows).reshape(len(rows), features.shape[1])


def pearson_flagged(a, b) -> tuple[float, bool]:
    """Centered correlation plus a flag set when either input has zero variance (r = 0)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two values")
    ca, cb = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(ca @ ca), np.sqrt(cb @ cb)
    if na == 0 or nb == 0:
        return 0.0, True
    return float(np.clip((ca @ cb) / (na * nb), -1.0, 1.0)), False


def pearson(a, b) -> float:
    return pearson_flagged(a, b)[0]


def _mean_word_correlation(triplets: Sequence[Triplet], layer: int, first: str, second: str) -> float:
    rs = []
    for trip in triplets:
        pa, pb = trip.pooled(first, layer), trip.pooled(second, layer)
        rs.extend(pearson(x, y) for x, y in zip(pa, pb))
    if not rs:
        raise ValueError("no matched words")
    return float(np.mean(rs))


def invariance_score(triplets: Sequence[Triplet], layer: int) -> float:
    """Mean per-word correlation between synthetic and real whisper features."""
    return _mean_word_correlation(triplets, layer, "synth_whisper", "real_whisper")


def modality_score(triplets: Sequence[Triplet], layer: int) -> float:
    """Mean per-word correlation between normal and real whisper features."""
    return _mean_word_correlation(triplets, layer, "normal", "real_whisper")


# ----------------------------------------------------------------------------
# CCA
# ----------------------------------------------------------------------------

def _inv_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return (vecs / np.sqrt(np.maximum(vals, 1e-300))) @ vecs.T


def canonical_correlations(x: np.ndarray, y: np.ndarray, ridge: float = CCA_RIDGE) -> np.ndarray:
    """Regularised canonical correlations of two views, descending.

    The ridge is added to each view's covariance scaled by that view's mean
    variance, which makes the result independent of the views' overall scale.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("views need the same number of rows")
    xc, yc = x - x.mean(0), y - y.mean(0)
    n = x.shape[0] - 1
    cxx, cyy, cxy = xc.T @ xc / n, yc.T @ yc / n, xc.T @ yc / n
    sx, sy = np.trace(cxx) / len(cxx), np.trace(cyy) / len(cyy)
    if sx <= 0 or sy <= 0:
        raise ValueError("degenerate view: zero variance")
    cxx += ridge * sx * np.eye(len(cxx))
    cyy += ridge * sy * np.eye(len(cyy))
    m = _inv_sqrt(cxx) @ cxy @ _inv_sqrt(cyy)
    return np.linalg.svd(m, compute_uv=False)


def one_hot(labels: Sequence[int]) -> np.ndarray:
    classes, idx = np.unique(np.asarray(labels), return_inverse=True)
    out = np.zeros((len(idx), len(classes)))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def cca_score(word_vectors: np.ndarray, word_ids: Sequence[int], k: int | None = None,
              ridge: float = CCA_RIDGE) -> float:
    """Mean of the top-``k`` canonical correlations between features and one-hot labels.

    ``k`` defaults to ``min(10, labels - 1)``; the result is clamped to [0, 1].
    """
    x = np.asarray(word_vectors, dtype=np.float64)
    labels = np.asarray(word_ids)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise ValueError("CCA needs at least two distinct labels")
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise ValueError("word_vectors must be words x dim with one label per row")
    if x.shape[0] <= min(x.shape[1], n_labels):
        raise ValueError("need more words than the smaller view's dimension")
    k = min(10, n_labels - 1) if k is None else k
    corr = canonical_correlations(x, one_hot(labels), ridge)
    return float(np.clip(corr[:k].mean(), 0.0, 1.0))


def layer_cca(triplets: Sequence[Triplet], layer: int, modality: str = "normal",
              frame_level: bool = False) -> float:
    """CCA score for one layer on word-pooled (default) or per-frame features."""
    xs, ys = [], []
    for trip in triplets:
        spans = trip.spans[modality]
        if frame_level:
            feats = getattr(trip, modality)[layer]
            for s in spans:
                xs.append(feats[s.start:s.end])
                ys.extend([s.word_id] * (s.end - s.start))
        else:
            xs.append(trip.pooled(modality, layer))
            ys.extend(s.word_id for s in spans)
    return cca_score(np.concatenate(xs), ys)


# ----------------------------------------------------------------------------
# Selection
# ----------------------------------------------------------------------------

def minmax_normalize(values) -> tuple[np.ndarray, bool]:
    """Rescale to [0, 1]; a constant vector maps to zeros with the degenerate flag set."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two layers")
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v), True
    return (v - lo) / (hi - lo), False


def select_layer(invariance, cca, modality=None) -> LayerSelection:
    """Argmax of normalised invariance times normalised CCA; ties go to the lower layer."""
    inv = np.asarray(invariance, dtype=np.float64)
    cc = np.asarray(cca, dtype=np.float64)
    if inv.shape != cc.shape or inv.ndim != 1:
        raise ValueError("invariance and cca must be equal-length vectors")
    mod = np.full(inv.shape, np.nan) if modality is None else np.asarray(modality, dtype=np.float64)
    if mod.shape != inv.shape:
        raise ValueError("modality must match the other score vectors")
    inv_n, inv_flat = minmax_normalize(inv)
    cca_n, cca_flat = minmax_normalize(cc)
    combined = inv_n * cca_n
    best = int(np.argmax(combined))  # first maximum = lowest layer index
    tie = int(np.sum(combined == combined[best])) > 1
    degenerate = tuple(name for name, flat in (("invariance", inv_flat), ("cca", cca_flat)) if flat)
    scores = [LayerScore(i, float(inv[i]), float(mod[i]), float(cc[i]), float(combined[i]))
              for i in range(len(inv))]
    return LayerSelection(best, scores, tie, degenerate)


def score_layers(triplets: Sequence[Triplet], frame_level_cca: bool = False) -> LayerSelection:
    if not triplets:
        raise ValueError("no triplets")
    layers = triplets[0].layers
    if any(t.layers != layers for t in triplets):
        raise ValueError("triplets disagree on layer count")
    if layers < 2:
        raise ValueError("layer selection needs at least two layers")
    inv = [invariance_score(triplets, l) for l in range(layers)]
    mod = [modality_score(triplets, l) for l in range(layers)]
    cc = [layer_cca(triplets, l, frame_level=frame_level_cca) for l in range(layers)]
    return select_layer(inv, cc, mod)


# ----------------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------------

def write_fmat(path: str | os.PathLike, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("FMAT holds a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(FMAT_MAGIC + struct.pack("<II", *m.shape) + np.ascontiguousarray(m).tobytes())


def read_fmat(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != FMAT_MAGIC:
        raise FeatureFormatError(f"{path}: bad FMAT magic")
    rows, cols = struct.unpack_from("<II", blob, 4)
    expected = rows * cols * 4
    if len(blob) - 12 != expected:
        raise FeatureFormatError(f"{path}: header says {rows}x{cols} but body has "
                                 f"{len(blob) - 12} bytes")
    m = np.frombuffer(blob, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(m)):
        raise FeatureFormatError(f"{path}: non-finite values")
    return m


def read_alignment(path: str | os.PathLike) -> list[WordSpan]:
    """``word_id,start,end`` rows; an optional header line is skipped."""
    spans = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            if lineno == 0 and not row[0].strip().lstrip("-").isdigit():
                continue
            if len(row) != 3:
                raise FeatureFormatError(f"{path}:{lineno + 1}: expected 3 fields")
            try:
                word, start, end = (int(v) for v in row)
            except ValueError as exc:
                raise FeatureFormatError(f"{path}:{lineno + 1}: {exc}") from None
            if min(word, start, end) < 0:
                raise FeatureFormatError(f"{path}:{lineno + 1}: negative value")
            try:
                span = WordSpan(word, start, end)
            except ValueError as exc:
                raise FeatureFormatError(f"{path}:{lineno + 1}: {exc}") from None
            if spans and span.start < spans[-1].start:
                raise FeatureFormatError(f"{path}:{lineno + 1}: spans are not monotone")
            spans.append(span)
    return spans


def write_alignment(path: str | os.PathLike, spans: Sequence[WordSpan]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["word_id", "start", "end"])
        for s in spans:
            writer.writerow([s.word_id, s.start, s.end])


def write_scores(path: str | os.PathLike, scores: Sequence[LayerScore]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "invariance", "modality", "cca", "combined"])
        for s in scores:
            writer.writerow([s.layer, repr(s.invariance), repr(s.modality), repr(s.cca),
                             repr(s.combined)])


def load_triplets(feature_dir: str | os.PathLike, alignment_dir: str | os.PathLike) -> list[Triplet]:
    """Read ``<features>/<utt>/<modality>/layer_<k>.fmat`` and ``<alignments>/<utt>/<modality>.csv``."""
    feature_dir, alignment_dir = Path(feature_dir), Path(alignment_dir)
    if not feature_dir.is_dir():
        raise FileNotFoundError(f"feature directory {feature_dir} not found")
    if not alignment_dir.is_dir():
        raise FileNotFoundError(f"alignment directory {alignment_dir} not found")
    triplets = []
    for utt in sorted(p.name for p in feature_dir.iterdir() if p.is_dir()):
        feats, spans = {}, {}
        for modality in MODALITIES:
            mdir = feature_dir / utt / modality
            files = sorted(mdir.glob("layer_*.fmat"), key=lambda p: int(p.stem.split("_")[1]))
            if not files:
                raise FeatureFormatError(f"{mdir}: no layer_<k>.fmat files")
            indices = [int(p.stem.split("_")[1]) for p in files]
            if indices != list(range(len(files))):
                raise FeatureFormatError(f"{mdir}: layer files must be numbered 0..{len(files) - 1}")
            feats[modality] = [read_fmat(p) for p in files]
            spans[modality] = read_alignment(alignment_dir / utt / f"{modality}.csv")
            frames = min(f.shape[0] for f in feats[modality])
            if spans[modality] and max(sp.end for sp in spans[modality]) > frames:
                raise FeatureFormatError(f"{utt}/{modality}: span beyond {frames} frames")
        triplets.append(Triplet(utt, feats["normal"], feats["real_whisper"],
                                feats["synth_whisper"], spans))
    if not triplets:
        raise FeatureFormatError(f"{feature_dir}: no utterance directories")
    return triplets
