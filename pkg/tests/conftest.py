from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import pytest

from modules.checkpoint_store import checkpoint_filename, open_series, write_checkpoint
from modules.toy_lm import ModelConfig, ModelParams, params_to_tensors, save_model_config, zero_params

MEMORIZED = b"abababababababab"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_series(tmp_path):
    """Write {step: {name: array}} as a WTS1 directory and open it."""

    def build(frames: Dict[int, Dict[str, np.ndarray]], name: str = "series", dtype: str = "f32"):
        directory = tmp_path / name
        directory.mkdir(parents=True, exist_ok=True)
        for step, tensors in frames.items():
            payload = {n: (dtype, list(np.shape(v)), np.asarray(v)) for n, v in tensors.items()}
            write_checkpoint(step, payload, directory / checkpoint_filename(step))
        return open_series(directory)

    return build


def bigram_memorizer(scale: float = 10.0, n_ctx: int = 16) -> ModelParams:
    """
    Embedding-only model (L=0, d=2) whose unembedding maps 'a' -> 'b' and 'b' -> 'a'
    with logit margin 2 * scale over every other byte.
    """
    config = ModelConfig(L=0, d=2, H=1, v=256, n_ctx=n_ctx)
    params = zero_params(config)
    a, b = ord("a"), ord("b")
    params["W_E"][a] = [1.0, -1.0]
    params["W_E"][b] = [-1.0, 1.0]
    params["ln_f.g"][:] = 1.0
    params["W_U"][:, b] = [scale, -scale]
    params["W_U"][:, a] = [-scale, scale]
    return params


@pytest.fixture
def memorizer():
    return bigram_memorizer()


@pytest.fixture
def uniform_v4():
    return zero_params(ModelConfig(L=1, d=4, H=2, v=4, n_ctx=8))


@pytest.fixture
def model_series(tmp_path):
    """Save params as a one-or-more checkpoint series next to its config.json."""

    def build(snapshots: Sequence[ModelParams], name: str = "model", steps: Sequence[int] = None):
        directory = tmp_path / name
        directory.mkdir(parents=True, exist_ok=True)
        steps = list(steps) if steps is not None else [100 * i for i in range(len(snapshots))]
        for step, params in zip(steps, snapshots):
            write_checkpoint(step, params_to_tensors(params), directory / checkpoint_filename(step))
        save_model_config(snapshots[0].config, directory)
        return open_series(directory)

    return build


@pytest.fixture
def repo_root() -> Path:
    return Path(__file__).resolve().parent.parent
