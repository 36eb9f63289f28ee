"""Dynamic time warping and synthetic temporal misalignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# step order doubles as tie-break priority: diagonal first
_STEPS = ((1, 1), (1, 0), (0, 1))


@dataclass(frozen=True)
class DtwResult:
    path: list[tuple[int, int]]
    cost: float


def frame_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every frame of ``a`` and of ``b`` (frames x dim each)."""
    # explicit differences keep identical frames at exactly zero cost
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def dtw_align(seq_a: np.ndarray, seq_b: np.ndarray) -> DtwResult:
    """Minimum-cost monotone path from ``(0, 0)`` to ``(LA - 1, LB - 1)``.

    Inputs are ``frames x dim``. Steps are (1,1), (1,0) and (0,1); among
    equal-cost predecessors the diagonal wins, then the step along ``a``.
    """
    a = np.atleast_2d(np.asarray(seq_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(seq_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("DTW needs nonempty sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"frame dims differ: {a.shape[1]} vs {b.shape[1]}")
    cost = frame_costs(a, b)
    la, lb = cost.shape
    acc = np.full((la + 1, lb + 1), np.inf)
    acc[0, 0] = 0.0
    # row-wise recursion; the horizontal term is a running minimum
    for i in range(1, la + 1):
        diag_up = np.minimum(acc[i - 1, :-1], acc[i - 1, 1:])
        row = acc[i]
        c = cost[i - 1]
        for j in range(1, lb + 1):
            row[j] = c[j - 1] + min(diag_up[j - 1], row[j - 1])
    i, j = la, lb
    path = [(la - 1, lb - 1)]
    while (i, j) != (1, 1):
        best = None
        for di, dj in _STEPS:
            pi, pj = i - di, j - dj
            if pi < 1 or pj < 1:
                continue
            if best is None or acc[pi, pj] < acc[best]:
                best = (pi, pj)
        i, j = best
        path.append((i - 1, j - 1))
    path.reverse()
    return DtwResult(path, float(acc[la, lb]))


def path_cost(seq_a: np.ndarray, seq_b: np.ndarray, path) -> float:
    cost = frame_costs(np.atleast_2d(seq_a), np.atleast_2d(seq_b))
    return float(sum(cost[i, j] for i, j in path))


@dataclass(frozen=True)
class Warp:
    """Piecewise-linear map from output time to source time.

    ``boundaries`` are source-time segment edges starting at 0; segment
    ``k`` is read at ``rates[k]`` source frames per output frame.
    """
    boundaries: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.boundaries) != len(self.rates) + 1:
            raise ValueError("need one more boundary than rates")
        if self.boundaries[0] != 0:
            raise ValueError("warp must start at 0")
        if any(r <= 0 for r in self.rates):
            raise ValueError("warp rates must be positive (monotone warp)")
        if any(b1 <= b0 for b0, b1 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("warp boundaries must be strictly increasing")

    @classmethod
    def uniform(cls, rate: float, length: int) -> "Warp":
        return cls((0.0, float(length)), (float(rate),))

    @classmethod
    def random(cls, length: int, rng: np.random.Generator, segments: int = 3,
               rate_range: tuple[float, float] = (0.7, 1.4)) -> "Warp":
        cuts = np.sort(rng.uniform(0.2, 0.8, size=segments - 1)) * length
        rates = rng.uniform(*rate_range, size=segments)
        return cls((0.0, *cuts.tolist(), float(length)), tuple(rates.tolist()))

    def output_knots(self) -> np.ndarray:
        seg = np.diff(self.boundaries) / np.asarray(self.rates)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def source_time(self, out_t: np.ndarray) -> np.ndarray:
        return np.interp(out_t, self.output_knots(), self.boundaries)

    def source_indices(self, length: int) -> np.ndarray:
        """Nearest source frame for each output frame covering source frames ``0..length-1``."""
        knots = self.output_knots()
        end = float(np.interp(length - 1, self.boundaries, knots)) if self.boundaries[-1] >= length - 1 \
            else knots[-1] + (length - 1 - self.boundaries[-1]) / self.rates[-1]
        count = int(np.floor(end + 1e-9)) + 1
        out_t = np.arange(count, dtype=np.float64)
        src = self.source_time(out_t)
        # extend the last segment beyond its boundary if needed
        beyond = out_t > knots[-1]
        src[beyond] = self.boundaries[-1] + (out_t[beyond] - knots[-1]) * self.rates[-1]
        return np.clip(np.floor(src + 0.5).astype(int), 0, length - 1)


def misalign(z: np.ndarray, warp: Warp | None = None,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Resample ``z`` (D x L) along time under ``warp`` by nearest frame.

    Without an explicit warp a random 3-segment warp with rates in
    ``[0.7, 1.4]`` is drawn from ``rng``.
    """
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError("z must be a nonempty D x L matrix")
    if warp is None:
        if rng is None:
            raise ValueError("need a warp or an rng")
        warp = Warp.random(z.shape[1], rng)
    return z[:, warp.source_indices(z.shape[1])]


def fit_length(x: np.ndarray, length: int) -> np.ndarray:
    """Crop or edge-pad the last axis to ``length`` frames.

    This is the naive pairing of two recordings of unequal duration: frames
    are matched by index with no attempt at alignment.
    """
    x = np.asarray(x)
    if length < 1 or x.shape[-1] == 0:
        raise ValueError("need a nonempty input and a positive length")
    if x.shape[-1] >= length:
        return x[..., :length]
    pad = np.repeat(x[..., -1:], length - x.shape[-1], axis=-1)
    return np.concatenate([x, pad], axis=-1)


def resample_frames(x: np.ndarray, length: int, axis: int = -1) -> np.ndarray:
    """Nearest-frame resampling of ``x`` along ``axis`` to ``length`` frames."""
    n = x.shape[axis]
    if n == 0 or length < 1:
        raise ValueError("cannot resample an empty sequence or to zero length")
    idx = np.clip(np.floor((np.arange(length) + 0.5) * n / length).astype(int), 0, n - 1)
    return np.take(x, idx, axis=axis)


def warp_along_path(source: np.ndarray, path, length: int) -> np.ndarray:
    """Map ``source`` (D x LB) onto ``length`` frames of sequence A via a DTW path.

    Each A frame takes the mean of the B frames it is matched to.
    """
    out = np.zeros((source.shape[0], length))
    counts = np.zeros(length)
    for i, j in path:
        out[:, i] += source[:, j]
        counts[i] += 1
    if np.any(counts == 0):
        raise ValueError("path does not cover every frame")
    return out / counts


def path_rates(path, boundaries_out: np.ndarray) -> np.ndarray:
    """Average source frames advanced per output frame inside each output segment.

    ``path`` pairs (source index, output index); ``boundaries_out`` are
    output-time segment edges.
    """
    src = np.array([p[0] for p in path], dtype=float)
    out = np.array([p[1] for p in path], dtype=float)
    rates = []
    for lo, hi in zip(boundaries_out[:-1], boundaries_out[1:]):
        inside = (out >= lo) & (out <= hi)
        o, s = out[inside], src[inside]
        if o.max() - o.min() < 1:
            rates.append(np.nan)
            continue
        rates.append((s[o == o.max()].mean() - s[o == o.min()].mean()) / (o.max() - o.min()))
    return np.asarray(rates)
