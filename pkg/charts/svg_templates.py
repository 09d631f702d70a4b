import io
import logging
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from modules.covariance_probe import RankCurve
from modules.dynamics_stats import DensityMovie, MsdCurve
from modules.errors import AnalysisError
from modules.perplexity_eval import PerplexityCurve

logger = logging.getLogger(__name__)

# fixed ids and text-as-text keep the SVG bytes stable between runs
plt.rcParams.update({
    "svg.hashsalt": "weightdyn",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def plot_line_chart(ax, x: Sequence[float], y: Sequence[float], title: str, ylabel: str,
                    peak_x: Optional[float] = None):
    """
    Simple line chart; a dashed vertical line marks `peak_x` when given.
    """
    ax.plot(x, y, marker="o" if len(x) == 1 else None, linewidth=1.5, color="tab:blue")
    if peak_x is not None:
        ax.axvline(peak_x, linestyle="--", color="darkred", linewidth=1.2, label=f"peak @ {peak_x}")
        ax.legend(loc="upper left", fontsize=7)
    ax.set_title(title)
    ax.set_xlabel("training step")
    ax.set_ylabel(ylabel)
    return ax


def plot_heatmap(ax, movie: DensityMovie, title: str):
    """
    Density heatmap: steps on x, value bins on y, log-scaled counts.
    """
    counts = movie.count_matrix().astype(np.float64).T
    edges = movie.edges.astype(np.float64)
    steps = np.asarray(movie.steps, dtype=np.float64)
    if len(steps) > 1:
        half = np.diff(steps).min() / 2
    else:
        half = 0.5
    ax.imshow(np.log1p(counts), aspect="auto", origin="lower", cmap="viridis", interpolation="nearest",
              extent=(steps[0] - half, steps[-1] + half, edges[0], edges[-1]))
    ax.set_title(title)
    ax.set_xlabel("training step")
    ax.set_ylabel("weight value")
    ax.grid(False)
    return ax


def plot_multi_line_chart(ax, x: Sequence[float], series: Sequence[Sequence[float]], labels: Sequence[str],
                          title: str, ylabel: str):
    """
    Multi-line chart from several y-series.
    """
    for y, label in zip(series, labels):
        ax.plot(x, y, linewidth=1.2, label=label, marker="o" if len(x) == 1 else None)
    ax.set_title(title)
    ax.set_xlabel("training step")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best", fontsize=6, ncol=2)
    return ax


def plot_perplexity(ax, curves: List[PerplexityCurve], log_scale: bool):
    for curve in curves:
        ax.plot(curve.steps, curve.ppl_mean, linewidth=1.5, label=curve.protocol,
                marker="o" if len(curve.steps) == 1 else None)
    if log_scale:
        ax.set_yscale("log")
        ax.axhline(1.0, linestyle=":", color="black", linewidth=1.0, label="PPL = 1")
    ax.set_title("perplexity (log scale)" if log_scale else "perplexity (linear scale)")
    ax.set_xlabel("training step")
    ax.set_ylabel("PPL")
    ax.legend(loc="best", fontsize=7)
    return ax


def render_svg(msd: Optional[MsdCurve] = None, movie: Optional[DensityMovie] = None,
               peak_step: Optional[int] = None, rank: Optional[RankCurve] = None,
               ppl: Optional[List[PerplexityCurve]] = None, title: str = "") -> str:
    """
    One SVG document, one row per available figure. Missing inputs drop their panel.
    """
    panels = []
    if msd is not None and len(msd):
        panels.append("msd")
    if movie is not None and len(movie):
        panels.append("density")
    if rank is not None and len(rank.steps):
        panels.append("rank")
    if ppl:
        panels.append("ppl")
    if not panels:
        raise AnalysisError("render_svg needs at least one non-empty series")

    fig, axes = plt.subplots(len(panels), 2 if "ppl" in panels else 1, squeeze=False,
                             figsize=(11, 3.2 * len(panels)))
    for row, panel in enumerate(panels):
        ax = axes[row][0]
        if panel == "msd":
            peak = peak_step if (peak_step is not None and len(msd) > 1) else None
            ylabel = "MSD" if msd.kind == "cumulative" else f"MSD (lag {msd.lag})"
            plot_line_chart(ax, msd.steps, np.asarray(msd.values, dtype=np.float64),
                            "mean square displacement", ylabel, peak_x=peak)
        elif panel == "density":
            plot_heatmap(ax, movie, "weight density")
        elif panel == "rank":
            plot_multi_line_chart(ax, rank.steps, [rank.ranks[:, j] for j in range(len(rank.tolerances))],
                                  [f"tol {t:g}" for t in rank.tolerances],
                                  f"covariance rank (B={rank.batch})", "rank")
        else:
            plot_perplexity(ax, ppl, log_scale=False)
            plot_perplexity(axes[row][1], ppl, log_scale=True)
        if axes.shape[1] == 2 and panel != "ppl":
            axes[row][1].set_visible(False)

    if title:
        fig.suptitle(title)
    fig.tight_layout()
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Rendered SVG with panels: {', '.join(panels)}")
    return buffer.getvalue()
