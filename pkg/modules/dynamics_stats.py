import re
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import find_peaks

from modules.checkpoint_store import SeriesSlice
from modules.errors import AnalysisError
from modules.workers import chunk_bounds, map_ordered, pairwise_sum

logger = logging.getLogger(__name__)

MODE_HEIGHT_FRACTION = 0.05
DEFAULT_QUANTILE = 0.001


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def centers(self) -> np.ndarray:
        edges = self.edges.astype(np.float64)
        return (edges[:-1] + edges[1:]) / 2


@dataclass
class RangePolicy:
    kind: str = "quantile"
    p: float = DEFAULT_QUANTILE
    low: Optional[float] = None
    high: Optional[float] = None
    clipped_low: int = 0
    clipped_high: int = 0
    degenerate: bool = False

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "p": self.p if self.kind == "quantile" else None,
            "low": self.low,
            "high": self.high,
            "clipped_low": self.clipped_low,
            "clipped_high": self.clipped_high,
            "degenerate": self.degenerate,
        }


def parse_range_policy(text: Union[str, RangePolicy, None]) -> RangePolicy:
    """Accepts 'global-minmax', 'quantile' or 'quantile(p)'."""
    if isinstance(text, RangePolicy):
        return RangePolicy(kind=text.kind, p=text.p)
    if text is None or text == "quantile":
        return RangePolicy()
    if text == "global-minmax":
        return RangePolicy(kind="global-minmax")
    match = re.fullmatch(r"quantile\(\s*([0-9.eE+-]+)\s*(?:,\s*[0-9.eE+-]+\s*)?\)", text.strip())
    if match:
        p = float(match.group(1))
        if not 0.0 <= p < 0.5:
            raise AnalysisError(f"quantile p must lie in [0, 0.5), got {p}")
        return RangePolicy(kind="quantile", p=p)
    raise AnalysisError(f"unknown range policy {text!r}")


@dataclass
class DensityMovie:
    steps: List[int]
    histograms: List[Histogram]
    range_policy: RangePolicy

    @property
    def edges(self) -> np.ndarray:
        return self.histograms[0].edges

    def __len__(self) -> int:
        return len(self.steps)

    def count_matrix(self) -> np.ndarray:
        return np.stack([h.counts for h in self.histograms])


@dataclass
class MsdCurve:
    steps: List[int]
    values: np.ndarray
    kind: str = "cumulative"
    lag: Optional[int] = None

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class BimodalityReport:
    mode_count: int
    mode_locations: List[float]
    mode_masses: List[float]
    bimodality_coefficient: float


@dataclass
class DiffusionFit:
    alpha: float
    slope: float
    intercept: float
    r2: float
    fit_range: Tuple[int, int] = field(default=(0, 0))

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha if np.isfinite(self.alpha) else None,
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "fit_range": list(self.fit_range),
        }


def _row_means(values: np.ndarray, bounds, workers) -> np.ndarray:
    parts = map_ordered(lambda b: values[:, b[0]:b[1]].astype(np.float64).sum(axis=1), bounds, workers)
    return pairwise_sum(parts) / values.shape[1]


def msd(slice: SeriesSlice, workers: Optional[int] = None, chunk: Optional[int] = None) -> MsdCurve:
    """
    MSD(tau) = 1/(K-1) * sum_k w_hat[tau, k]^2 with
    w_hat[tau, k] = sum_{t <= tau} (w[t, k] - mean_k w[t, .]).
    Chunks over k are reduced in a fixed pairwise order, so the result does not
    depend on the worker count.
    """
    values = slice.values
    T, K = values.shape
    if T < 1:
        raise AnalysisError(f"[{slice.tensor}] msd needs at least one checkpoint")
    if K < 2:
        raise AnalysisError(f"[{slice.tensor}] msd needs K >= 2, got K={K} (variance undefined)")

    bounds = chunk_bounds(K, chunk)
    means = _row_means(values, bounds, workers)

    def partial(b):
        demeaned = values[:, b[0]:b[1]].astype(np.float64) - means[:, None]
        integrated = np.cumsum(demeaned, axis=0)
        return np.einsum("tk,tk->t", integrated, integrated)

    total = pairwise_sum(map_ordered(partial, bounds, workers))
    curve = (total / (K - 1)).astype(np.float32)
    logger.info(f"[{slice.tensor}] msd over T={T} K={K}: max={float(curve.max()):.6g}")
    return MsdCurve(steps=list(slice.steps), values=curve)


def msd_windowed(slice: SeriesSlice, lag: int = 10, workers: Optional[int] = None,
                 chunk: Optional[int] = None) -> MsdCurve:
    """
    Lag-window displacement: variance over k of w[tau, k] - w[max(tau - lag, 0), k].
    Rises while weights travel and falls back once they settle.
    """
    if lag < 1:
        raise AnalysisError(f"lag must be >= 1, got {lag}")
    values = slice.values
    T, K = values.shape
    if K < 2:
        raise AnalysisError(f"[{slice.tensor}] msd needs K >= 2, got K={K} (variance undefined)")

    bounds = chunk_bounds(K, chunk)
    means = _row_means(values, bounds, workers)
    origin = np.maximum(np.arange(T) - lag, 0)
    shift = means - means[origin]

    def partial(b):
        block = values[:, b[0]:b[1]].astype(np.float64)
        displaced = block - block[origin] - shift[:, None]
        return np.einsum("tk,tk->t", displaced, displaced)

    total = pairwise_sum(map_ordered(partial, bounds, workers))
    curve = (total / (K - 1)).astype(np.float32)
    logger.info(f"[{slice.tensor}] windowed msd lag={lag} over T={T} K={K}: max={float(curve.max()):.6g}")
    return MsdCurve(steps=list(slice.steps), values=curve, kind="windowed", lag=lag)


def msd_exponent(curve: MsdCurve, fit_range: Optional[Tuple[int, int]] = None) -> DiffusionFit:
    """
    Fits MSD against tau = 1..T. alpha is the log-log slope (1 diffusive, < 1 sub-diffusive);
    slope, intercept and r2 come from the linear fit.
    """
    lo, hi = fit_range or (0, len(curve))
    y = np.asarray(curve.values, dtype=np.float64)[lo:hi]
    tau = np.arange(lo + 1, lo + 1 + len(y), dtype=np.float64)
    if len(y) < 2:
        raise AnalysisError("msd_exponent needs at least two points")

    slope, intercept = np.polyfit(tau, y, 1)
    residual = y - (slope * tau + intercept)
    spread = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(residual ** 2) / spread if spread > 0 else 1.0

    positive = y > 0
    alpha = float("nan")
    if positive.sum() >= 2:
        alpha = float(np.polyfit(np.log(tau[positive]), np.log(y[positive]), 1)[0])
    return DiffusionFit(alpha=alpha, slope=float(slope), intercept=float(intercept), r2=float(r2),
                        fit_range=(lo, lo + len(y)))


def _choose_range(values: np.ndarray, policy: RangePolicy) -> Tuple[float, float]:
    if policy.kind == "quantile":
        low, high = np.quantile(values, [policy.p, 1.0 - policy.p])
        if high > low:
            return float(low), float(high)
        logger.warning(f"Quantile range collapsed at p={policy.p}; falling back to global min-max")
    elif policy.kind != "global-minmax":
        raise AnalysisError(f"unknown range policy {policy.kind!r}")
    return float(values.min()), float(values.max())


def density_movie(slice: SeriesSlice, bins: int = 64,
                  range_policy: Union[str, RangePolicy, None] = None) -> DensityMovie:
    if bins < 2:
        raise AnalysisError(f"bins must be >= 2, got {bins}")
    policy = parse_range_policy(range_policy)
    values = slice.values
    low, high = _choose_range(values, policy)

    if not high > low:
        logger.warning(f"[{slice.tensor}] degenerate value range at {low}; using a single bin")
        policy.degenerate = True
        bins = 1
        low, high = low - 0.5, low + 0.5

    policy.low, policy.high = low, high
    edges = np.linspace(low, high, bins + 1).astype(np.float32)
    scale = bins / (high - low)

    histograms = []
    for row in values:
        row = row.astype(np.float64)
        policy.clipped_low += int(np.count_nonzero(row < low))
        policy.clipped_high += int(np.count_nonzero(row > high))
        index = np.clip(np.floor((row - low) * scale), 0, bins - 1).astype(np.int64)
        counts = np.bincount(index, minlength=bins)
        histograms.append(Histogram(edges=edges, counts=counts, total=int(counts.sum())))

    if policy.clipped_low or policy.clipped_high:
        logger.info(f"[{slice.tensor}] clipped {policy.clipped_low} low / {policy.clipped_high} high values into end bins")
    return DensityMovie(steps=list(slice.steps), histograms=histograms, range_policy=policy)


def _bimodality_coefficient(h: Histogram) -> float:
    weights = h.counts.astype(np.float64) / h.total
    centers = h.centers
    mean = np.dot(weights, centers)
    dev = centers - mean
    var = np.dot(weights, dev ** 2)
    if var <= 0:
        return 0.0
    skew = np.dot(weights, dev ** 3) / var ** 1.5
    kurt = np.dot(weights, dev ** 4) / var ** 2
    return float((skew ** 2 + 1.0) / kurt)


def bimodality(h: Histogram, smoothing_window: int = 5) -> BimodalityReport:
    if h.total <= 0:
        raise AnalysisError("bimodality needs a histogram with positive total")
    if smoothing_window < 1 or smoothing_window % 2 == 0:
        raise AnalysisError(f"smoothing_window must be a positive odd integer, got {smoothing_window}")

    counts = h.counts.astype(np.float64)
    n = len(counts)
    # a window wider than the histogram would lengthen the "same" convolution
    window = min(smoothing_window, n if n % 2 else n - 1)
    smoothed = np.convolve(counts, np.ones(window) / window, mode="same")
    # zero guards let end bins count as maxima
    padded = np.concatenate([[0.0], smoothed, [0.0]])
    peaks, _ = find_peaks(padded, height=MODE_HEIGHT_FRACTION * smoothed.max())
    peaks = peaks - 1

    half = window // 2
    centers = h.centers
    located = []
    for p in peaks:
        lo, hi = max(p - half, 0), min(p + half + 1, len(counts))
        located.append(lo + int(np.argmax(counts[lo:hi])))

    # basins split at the smoothed minimum between neighbouring modes
    cuts = [0]
    for a, b in zip(peaks, peaks[1:]):
        cuts.append(a + int(np.argmin(smoothed[a:b + 1])))
    cuts.append(len(counts))
    masses = []
    for i in range(len(peaks)):
        left = cuts[i] if i == 0 else cuts[i] + 1
        masses.append(float(counts[left:cuts[i + 1] + (1 if i < len(peaks) - 1 else 0)].sum() / h.total))

    return BimodalityReport(
        mode_count=len(peaks),
        mode_locations=[float(centers[i]) for i in located],
        mode_masses=masses,
        bimodality_coefficient=_bimodality_coefficient(h),
    )


def bimodality_series(movie: DensityMovie, smoothing_window: int = 5) -> List[BimodalityReport]:
    return [bimodality(h, smoothing_window) for h in movie.histograms]


def weight_summary(slice: SeriesSlice) -> pd.DataFrame:
    values = slice.values.astype(np.float64)
    return pd.DataFrame({
        "step": slice.steps,
        "mean": values.mean(axis=1),
        "std": values.std(axis=1, ddof=1) if slice.K > 1 else np.zeros(slice.T),
        "min": values.min(axis=1),
        "max": values.max(axis=1),
        "abs_mean": np.abs(values).mean(axis=1),
    })
