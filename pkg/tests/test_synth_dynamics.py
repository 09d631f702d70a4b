import json

import numpy as np
import pytest
from pydantic import ValidationError

from modules.checkpoint_store import flatten_series
from modules.dynamics_stats import msd, msd_exponent
from modules.errors import ConfigError
from modules.synth_dynamics import (
    SIM_TENSOR,
    SdeConfig,
    counter_normal,
    export_series,
    load_sde_config,
    simulate,
)


def test_noiseless_split_pitchfork_lands_on_fixed_points():
    cfg = SdeConfig(kind="pitchfork", K=10, T=1000, sigma=0.0, ramp=(1.0, 1.0), w0_split=0.1)
    slice_, truth = simulate(cfg)
    final = slice_.values[-1]
    np.testing.assert_allclose(final[:5], -1.0, atol=1e-6)
    np.testing.assert_allclose(final[5:], 1.0, atol=1e-6)
    assert truth.bifurcation_step is None
    assert truth.terminal_modes == (-1.0, 1.0)


def test_pitchfork_ground_truth():
    _, truth = simulate(SdeConfig(kind="pitchfork", K=2, T=500, sigma=0.05, ramp=(-1.0, 1.0)))
    assert truth.bifurcation_step == 250
    assert truth.terminal_modes == (-1.0, 1.0)
    assert truth.to_json(1000)["bifurcation_step"] == 250_000


def test_white_noise_msd_slope():
    slice_, truth = simulate(SdeConfig(kind="white-noise", K=10_000, T=200, sigma=1.0, seed=1))
    assert truth.msd_slope_theory == 1.0
    fit = msd_exponent(msd(slice_))
    assert fit.slope == pytest.approx(1.0, rel=0.05)
    assert fit.r2 >= 0.99


def test_ou_stationary_variance():
    cfg = SdeConfig(kind="ou", K=10_000, T=1000, dt=0.01, sigma=0.5, ou_theta=1.0, seed=2)
    slice_, _ = simulate(cfg)
    terminal = slice_.values[-1].astype(np.float64)
    assert terminal.var() == pytest.approx(cfg.sigma ** 2 / (2 * cfg.ou_theta), rel=0.05)


def test_brownian_increment_variance():
    cfg = SdeConfig(kind="brownian", K=10_000, T=50, dt=0.1, sigma=1.0, seed=4)
    slice_, _ = simulate(cfg)
    increments = np.diff(slice_.values.astype(np.float64), axis=0)
    assert increments.var(axis=1).mean() == pytest.approx(cfg.sigma ** 2 * cfg.dt, rel=0.05)
    assert increments[10].var() == pytest.approx(cfg.sigma ** 2 * cfg.dt, rel=0.05)


def test_simulation_is_deterministic():
    cfg = SdeConfig(kind="pitchfork", K=500, T=40, seed=9)
    first, _ = simulate(cfg)
    second, _ = simulate(cfg)
    assert first.values.tobytes() == second.values.tobytes()
    other, _ = simulate(cfg.model_copy(update={"seed": 10}))
    assert other.values.tobytes() != first.values.tobytes()


def test_counter_stream_is_keyed_by_step():
    head = counter_normal(3, 17, 10)
    np.testing.assert_array_equal(counter_normal(3, 17, 25)[:10], head)
    assert not np.array_equal(counter_normal(3, 18, 10), head)


def test_steps_start_at_one():
    slice_, _ = simulate(SdeConfig(kind="brownian", K=4, T=5))
    assert slice_.steps == [1, 2, 3, 4, 5]
    assert slice_.tensor == SIM_TENSOR


def test_export_round_trip(tmp_path):
    slice_, _ = simulate(SdeConfig(kind="ou", K=4, T=3, sigma=0.3))
    series = export_series(slice_, 1000, tmp_path / "sim")
    assert series.steps == [1000, 2000, 3000]
    assert len(list((tmp_path / "sim").glob("*.wts"))) == 3
    back = flatten_series(series, SIM_TENSOR)
    assert back.values.tobytes() == slice_.values.tobytes()


def test_single_step_export(tmp_path):
    slice_, _ = simulate(SdeConfig(kind="white-noise", K=8, T=1))
    series = export_series(slice_, 1, tmp_path / "one")
    assert len(series) == 1
    assert len(msd(flatten_series(series, SIM_TENSOR))) == 1


def test_export_rejects_bad_spacing(tmp_path):
    slice_, _ = simulate(SdeConfig(kind="white-noise", K=8, T=2))
    with pytest.raises(ConfigError, match="step_spacing"):
        export_series(slice_, 0, tmp_path / "bad")


def test_config_validation(tmp_path):
    with pytest.raises(ValidationError):
        SdeConfig(K=1)
    with pytest.raises(ValidationError):
        SdeConfig(kind="levy")
    path = tmp_path / "sde.json"
    path.write_text(json.dumps({"kind": "ou", "K": 100, "T": 10, "dt": -1}))
    with pytest.raises(ConfigError, match="invalid SDE config"):
        load_sde_config(path)
    path.write_text(json.dumps({"kind": "ou", "K": 100, "T": 10}))
    assert load_sde_config(path).K == 100


def test_diverging_integration_is_reported():
    cfg = SdeConfig(kind="pitchfork", K=4, T=50, dt=5.0, sigma=0.0, ramp=(1.0, 1.0), w0_split=2.0)
    with pytest.raises(ConfigError, match="diverged"):
        simulate(cfg)
