from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from modules.covariance_probe import RankCurve, rank_series_derivative
from modules.dynamics_stats import BimodalityReport, DensityMovie, MsdCurve
from modules.perplexity_eval import PerplexityCurve


def msd_frame(curve: MsdCurve) -> pd.DataFrame:
    return pd.DataFrame({"step": curve.steps, "msd": np.asarray(curve.values, dtype=np.float64)})


def density_frame(movie: DensityMovie) -> pd.DataFrame:
    """
    Long format, one row per (step, bin). Edges are shared by every step.
    """
    edges = movie.edges.astype(np.float64)
    bins = len(edges) - 1
    counts = movie.count_matrix()
    return pd.DataFrame({
        "step": np.repeat(movie.steps, bins),
        "bin_index": np.tile(np.arange(bins), len(movie)),
        "bin_left": np.tile(edges[:-1], len(movie)),
        "bin_right": np.tile(edges[1:], len(movie)),
        "count": counts.reshape(-1),
    })


def bimodality_frame(steps: Sequence[int], reports: Sequence[BimodalityReport]) -> pd.DataFrame:
    return pd.DataFrame({
        "step": list(steps),
        "mode_count": [r.mode_count for r in reports],
        "bimodality_coefficient": [r.bimodality_coefficient for r in reports],
    })


def rank_frame(curve: Optional[RankCurve]) -> pd.DataFrame:
    if curve is None:
        return pd.DataFrame(columns=["step", "tolerance", "rank"])
    tolerances = len(curve.tolerances)
    return pd.DataFrame({
        "step": np.repeat(curve.steps, tolerances),
        "tolerance": np.tile(curve.tolerances, len(curve.steps)),
        "rank": curve.ranks.reshape(-1),
    })


def rank_derivative_frame(curve: Optional[RankCurve]) -> pd.DataFrame:
    """Each row is anchored at the left checkpoint of its interval."""
    if curve is None or len(curve.steps) < 2:
        return pd.DataFrame(columns=["step", "tolerance", "d_rank_d_step"])
    deriv = rank_series_derivative(curve)
    tolerances = len(curve.tolerances)
    return pd.DataFrame({
        "step": np.repeat(curve.steps[:-1], tolerances),
        "tolerance": np.tile(curve.tolerances, len(curve.steps) - 1),
        "d_rank_d_step": deriv.reshape(-1),
    })


def ppl_frame(curves: List[PerplexityCurve]) -> pd.DataFrame:
    frames = [
        pd.DataFrame({
            "step": c.steps,
            "protocol": c.protocol,
            "ppl_mean": c.ppl_mean,
            "ppl_median": c.ppl_median,
            "log_ppl_mean": c.log_ppl_mean,
            "n_sentences": c.n_sentences,
        })
        for c in curves
    ]
    columns = ["step", "protocol", "ppl_mean", "ppl_median", "log_ppl_mean", "n_sentences"]
    return pd.concat(frames, ignore_index=True)[columns] if frames else pd.DataFrame(columns=columns)
