import math
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from modules.checkpoint_store import (
    CheckpointSeries,
    SeriesSlice,
    checkpoint_filename,
    open_series,
    write_checkpoint,
)
from modules.errors import ConfigError

logger = logging.getLogger(__name__)

SIM_TENSOR = "W_SIM"
PITCHFORK_INIT_STD = 0.01


class SdeConfig(BaseModel):
    kind: Literal["white-noise", "brownian", "ou", "pitchfork"] = "pitchfork"
    K: int = Field(10_000, ge=2)
    T: int = Field(500, ge=1)
    dt: float = Field(0.1, gt=0.0)
    sigma: float = Field(0.05, ge=0.0)
    ou_theta: float = Field(1.0, ge=0.0)
    ramp: Tuple[float, float] = (-1.0, 1.0)
    seed: int = Field(0, ge=0)
    # half the particles start at -w0_split, half at +w0_split
    w0_split: Optional[float] = None


@dataclass
class GroundTruth:
    bifurcation_step: Optional[int] = None
    terminal_modes: Optional[Tuple[float, float]] = None
    msd_slope_theory: Optional[float] = None

    def to_json(self, step_spacing: int = 1) -> dict:
        return {
            "bifurcation_step": None if self.bifurcation_step is None else self.bifurcation_step * step_spacing,
            "terminal_modes": None if self.terminal_modes is None else list(self.terminal_modes),
            "msd_slope_theory": self.msd_slope_theory,
        }


def load_sde_config(path) -> SdeConfig:
    try:
        return SdeConfig.model_validate_json(Path(path).read_text())
    except ValidationError as e:
        raise ConfigError(f"[{path}] invalid SDE config: {e}")


def counter_normal(seed: int, step: int, size: int) -> np.ndarray:
    """
    Standard normals for one integration step. The Philox key is (seed, step), so every
    step owns its stream and element k is always particle k's increment.
    """
    generator = np.random.Generator(np.random.Philox(key=(seed << 64) | step))
    return generator.standard_normal(size)


def _drift_schedule(cfg: SdeConfig) -> np.ndarray:
    a_start, a_end = cfg.ramp
    t = np.arange(cfg.T + 1, dtype=np.float64)
    return a_start + (a_end - a_start) * t / cfg.T


def _initial_state(cfg: SdeConfig) -> np.ndarray:
    if cfg.w0_split is not None:
        w = np.full(cfg.K, float(cfg.w0_split))
        w[: cfg.K // 2] *= -1.0
        return w
    if cfg.kind == "pitchfork":
        return PITCHFORK_INIT_STD * counter_normal(cfg.seed, 0, cfg.K)
    return np.zeros(cfg.K)


def _ground_truth(cfg: SdeConfig) -> GroundTruth:
    truth = GroundTruth()
    if cfg.kind == "white-noise":
        truth.msd_slope_theory = cfg.sigma ** 2
    elif cfg.kind == "pitchfork":
        a_start, a_end = cfg.ramp
        if a_start < 0 < a_end or a_end < 0 < a_start:
            truth.bifurcation_step = int(round(-a_start / (a_end - a_start) * cfg.T))
        if a_end > 0:
            root = math.sqrt(a_end)
            truth.terminal_modes = (-root, root)
    return truth


def simulate(cfg: SdeConfig) -> Tuple[SeriesSlice, GroundTruth]:
    """
    Euler-Maruyama over T steps for K uncoupled particles. Row t (steps 1..T) holds the
    state after step t; white-noise rows are independent draws.
    """
    K, T = cfg.K, cfg.T
    noise_scale = cfg.sigma * math.sqrt(cfg.dt)
    out = np.empty((T, K), dtype=np.float32)
    w = _initial_state(cfg)
    a = _drift_schedule(cfg)

    for t in range(1, T + 1):
        xi = counter_normal(cfg.seed, t, K)
        if cfg.kind == "white-noise":
            w = cfg.sigma * xi
        elif cfg.kind == "brownian":
            w = w + noise_scale * xi
        elif cfg.kind == "ou":
            w = w - cfg.ou_theta * w * cfg.dt + noise_scale * xi
        else:
            w = w + (a[t - 1] * w - w ** 3) * cfg.dt + noise_scale * xi
        out[t - 1] = w

    if not np.all(np.isfinite(out)):
        raise ConfigError(f"[{cfg.kind}] integration diverged; reduce dt")

    truth = _ground_truth(cfg)
    logger.info(f"Simulated {cfg.kind}: K={K} T={T} dt={cfg.dt} sigma={cfg.sigma} seed={cfg.seed}")
    return SeriesSlice.from_array(SIM_TENSOR, list(range(1, T + 1)), out), truth


def export_series(slice: SeriesSlice, step_spacing: int, out_dir) -> CheckpointSeries:
    if step_spacing < 1:
        raise ConfigError(f"step_spacing must be >= 1, got {step_spacing}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    values = slice.values
    for row, step in zip(values, slice.steps):
        scaled = step * step_spacing
        write_checkpoint(scaled, {SIM_TENSOR: ("f32", [slice.K], row)}, out_dir / checkpoint_filename(scaled))
    logger.info(f"Exported {slice.T} checkpoints of {SIM_TENSOR} to {out_dir}")
    return open_series(out_dir)
