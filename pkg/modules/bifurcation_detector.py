import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from modules.artifacts import write_json
from modules.dynamics_stats import BimodalityReport, DensityMovie, MsdCurve
from modules.errors import AnalysisError

logger = logging.getLogger(__name__)

DIFFUSIVE = "diffusive"
PEAKED = "peaked"
STATIONARY = "stationary"

ZERO_MODE_FRACTION = 0.25


class DetectorConfig(BaseModel):
    """Thresholds for the early-stop verdict. Defaults are configuration, not ground truth."""
    drop_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    persistence: int = Field(3, ge=1)
    stationarity_window: int = Field(5, ge=1)
    stationarity_eps: float = Field(1e-3, gt=0.0)


@dataclass
class StopSignal:
    status: str
    peak_step: Optional[int]
    stop_step: Optional[int]
    msd_peak_value: float
    evidence: List[Tuple[int, float]] = field(default_factory=list)

    def to_json(self, cfg: DetectorConfig) -> dict:
        return {
            "status": self.status,
            "peak_step": self.peak_step,
            "stop_step": self.stop_step,
            "msd_peak_value": float(self.msd_peak_value),
            "config": cfg.model_dump(),
            "evidence": [{"step": int(s), "w1": float(d)} for s, d in self.evidence],
        }


def detect_peak(curve: MsdCurve, theta: float = 0.5, m: int = 3) -> Optional[Tuple[int, int]]:
    """
    Running maximum of the prefix, accepted once `m` consecutive later values sit below
    theta times it with no new maximum in between. A slow decay still counts.
    """
    values = np.asarray(curve.values, dtype=np.float64)
    if len(values) < m + 1:
        return None

    best = 0
    run = 0
    for j in range(1, len(values)):
        if values[j] > values[best]:
            best, run = j, 0
        elif values[j] < theta * values[best]:
            run += 1
            if run >= m:
                logger.info(f"MSD peak at index {best} (step {curve.steps[best]}), value {values[best]:.6g}")
                return best, curve.steps[best]
        else:
            run = 0
    return None


def wasserstein_steps(movie: DensityMovie) -> np.ndarray:
    """
    1-Wasserstein distance between consecutive normalized histograms on the shared grid,
    expressed in units of the histogram range: mean |CDF_t - CDF_{t-1}| over bins.
    """
    counts = movie.count_matrix().astype(np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    cdf = np.cumsum(counts / np.where(totals > 0, totals, 1.0), axis=1)
    return np.abs(np.diff(cdf, axis=0)).mean(axis=1)


def stationarity(movie: DensityMovie, w: int = 5, eps: float = 1e-3,
                 start_index: int = 0) -> Optional[int]:
    """
    First step after which the consecutive-histogram distance stays below `eps` for `w`
    transitions. Transition j joins steps j and j+1; the reported step is the last one
    of the quiet window. Only windows starting at or after `start_index` are considered.
    """
    if len(movie) < w + 1:
        return None
    distances = wasserstein_steps(movie)
    quiet = distances < eps
    run = 0
    for j in range(max(start_index, 0), len(distances)):
        run = run + 1 if quiet[j] else 0
        if run >= w:
            return movie.steps[j + 1]
    return None


def early_stop(curve: MsdCurve, movie: DensityMovie, cfg: Optional[DetectorConfig] = None) -> StopSignal:
    cfg = cfg or DetectorConfig()
    if list(curve.steps) != list(movie.steps):
        raise AnalysisError("[early_stop] MSD curve and density movie have mismatched step vectors")

    peak_value = float(np.max(curve.values)) if len(curve) else 0.0
    evidence: List[Tuple[int, float]] = []
    if len(movie) > 1:
        evidence = list(zip(movie.steps[1:], wasserstein_steps(movie).tolist()))

    peak = detect_peak(curve, cfg.drop_fraction, cfg.persistence)
    if peak is None:
        logger.info(f"Verdict: {DIFFUSIVE} (no MSD peak, max={peak_value:.6g})")
        return StopSignal(DIFFUSIVE, None, None, peak_value, evidence)

    peak_index, peak_step = peak
    stop_step = stationarity(movie, cfg.stationarity_window, cfg.stationarity_eps, start_index=peak_index)
    if stop_step is None:
        logger.info(f"Verdict: {PEAKED} at step {peak_step}, density not yet stationary")
        return StopSignal(PEAKED, peak_step, None, float(curve.values[peak_index]), evidence)

    logger.info(f"Verdict: {STATIONARY}; peak at {peak_step}, stop at {stop_step}")
    return StopSignal(STATIONARY, peak_step, stop_step, float(curve.values[peak_index]), evidence)


def write_report(signal: StopSignal, cfg: DetectorConfig, path) -> None:
    write_json(path, signal.to_json(cfg))


@dataclass
class TernaryQuantization:
    levels: Tuple[float, float, float]
    assignments: np.ndarray
    rmse: float

    def reconstruct(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float32)[self.assignments + 1]

    def to_json(self) -> dict:
        counts = {str(a): int(np.count_nonzero(self.assignments == a)) for a in (-1, 0, 1)}
        return {"levels": list(self.levels), "rmse": self.rmse, "assignment_counts": counts}


def quantize_ternary(weights: Sequence[float], report: BimodalityReport) -> TernaryQuantization:
    """
    Map every weight onto {mu_minus, 0, mu_plus}; assignments are -1, 0, +1.
    Thresholds sit at half of each mode location.
    """
    if report.mode_count not in (1, 2):
        raise AnalysisError(f"quantize_ternary refuses mode_count={report.mode_count}: levels are ambiguous")

    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    # a mode this close to zero is the zero level itself
    dead_band = ZERO_MODE_FRACTION * float(np.sqrt(np.mean(w ** 2))) if w.size else 0.0
    negatives = [loc for loc in report.mode_locations if loc < -dead_band]
    positives = [loc for loc in report.mode_locations if loc > dead_band]
    mu_minus = float(min(negatives)) if negatives else 0.0
    mu_plus = float(max(positives)) if positives else 0.0

    assignments = np.zeros(w.shape, dtype=np.int8)
    if mu_plus > 0:
        assignments[w > mu_plus / 2] = 1
    if mu_minus < 0:
        assignments[w < mu_minus / 2] = -1

    levels = (mu_minus, 0.0, mu_plus)
    recon = np.asarray(levels)[assignments + 1]
    rmse = float(np.sqrt(np.mean((w - recon) ** 2))) if w.size else 0.0
    logger.info(f"Ternary levels {levels}, rmse={rmse:.4g}")
    return TernaryQuantization(levels=levels, assignments=assignments, rmse=rmse)
