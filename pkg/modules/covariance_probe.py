import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from modules.checkpoint_store import CheckpointReader, CheckpointSeries
from modules.errors import AnalysisError
from modules.workers import map_ordered

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_BATCHES = (16, 32, 64)


@dataclass
class RankCurve:
    steps: List[int]
    tolerances: List[float]
    ranks: np.ndarray
    batch: int
    seed: int


def isotropic_probe(d: int, batch: int, seed: int) -> np.ndarray:
    """
    Seeded Gaussian batch of d-vectors, centered over the batch and whitened so every
    non-zero singular value equals sqrt(batch - 1).
    """
    generator = np.random.default_rng(seed)
    draws = generator.standard_normal((batch, d))
    centered = draws - draws.mean(axis=0, keepdims=True)
    u, _, vt = np.linalg.svd(centered, full_matrices=False)
    r = min(batch - 1, d)
    return np.sqrt(batch - 1) * (u[:, :r] @ vt[:r])


def singular_rank(images: np.ndarray, tolerances: Sequence[float]) -> List[int]:
    """Count singular values >= tol * sigma_max of the batch-centered image matrix."""
    centered = images - images.mean(axis=0, keepdims=True)
    sigma = np.linalg.svd(centered, compute_uv=False)
    sigma_max = sigma[0] if sigma.size else 0.0
    if sigma_max <= 0.0:
        return [0 for _ in tolerances]
    return [int(np.count_nonzero(sigma >= tol * sigma_max)) for tol in tolerances]


def probe_rank(series: CheckpointSeries, tensor: str = "W_U", B: int = 64,
               tolerances: Sequence[float] = DEFAULT_TOLERANCES, seed: int = 0,
               workers: Optional[int] = None) -> RankCurve:
    if B < 2:
        raise AnalysisError(f"batch size must be >= 2, got {B}")
    if tensor not in series.tensor_meta:
        raise AnalysisError(f"unknown tensor {tensor!r}")
    _, shape = series.tensor_meta[tensor]
    if len(shape) != 2:
        raise AnalysisError(f"[{tensor}] probe needs a 2-D (d, v) tensor, got shape {list(shape)}")

    tolerances = [float(t) for t in tolerances]
    probe = isotropic_probe(shape[0], B, seed)

    def rank_at(entry) -> List[int]:
        reader = CheckpointReader(entry.path)
        weights = reader[tensor].astype(np.float64)
        ranks = singular_rank(probe @ weights, tolerances)
        reader.close()
        logger.debug(f"[{tensor}] step {entry.step}: ranks {ranks}")
        return ranks

    ranks = np.asarray(map_ordered(rank_at, series.entries, workers), dtype=np.int64)
    logger.info(f"[{tensor}] probed {len(series)} checkpoints with B={B}, seed={seed}")
    return RankCurve(steps=series.steps, tolerances=tolerances, ranks=ranks, batch=B, seed=seed)


def probe_rank_batches(series: CheckpointSeries, tensor: str = "W_U",
                       batches: Sequence[int] = DEFAULT_BATCHES,
                       tolerances: Sequence[float] = DEFAULT_TOLERANCES, seed: int = 0,
                       workers: Optional[int] = None) -> Dict[int, RankCurve]:
    return {b: probe_rank(series, tensor, b, tolerances, seed, workers) for b in batches}


def rank_series_derivative(curve: RankCurve) -> np.ndarray:
    """Forward differences per tolerance; row i spans steps[i] -> steps[i + 1]."""
    if len(curve.steps) < 2:
        raise AnalysisError("rank derivative needs at least two checkpoints")
    dstep = np.diff(np.asarray(curve.steps, dtype=np.float64))
    return np.diff(curve.ranks.astype(np.float64), axis=0) / dstep[:, None]
