import math

import numpy as np
import pytest

from modules.errors import ConfigError, ModelInputError
from modules.toy_lm import (
    ModelConfig,
    ModelParams,
    forward,
    generate,
    init_params,
    loss_and_grad,
    param_shapes,
    params_from_checkpoint,
    softmax,
    train,
    zero_params,
)
from modules.perplexity_eval import ppl_sequence

SMALL = ModelConfig(L=1, d=8, H=2, v=256, n_ctx=8, seed=3)
PERIODIC = b"the quick brown fox jumps over the lazy dog. "


def random_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith(".b") or ".b_" in name:
            tensors[name] = 0.1 * rng.standard_normal(shape)
        else:
            tensors[name] = 0.3 * rng.standard_normal(shape)
    return ModelParams(config, tensors)


def test_zero_params_give_uniform_predictions():
    params = zero_params(ModelConfig(L=2, d=8, H=2, v=16, n_ctx=8))
    logits = forward(params, [1, 2, 3])
    assert logits.shape == (3, 16)
    np.testing.assert_array_equal(logits, 0.0)
    np.testing.assert_allclose(softmax(logits), 1.0 / 16)


def test_embedding_only_model_matches_hand_layer_norm():
    params = zero_params(ModelConfig(L=0, d=2, H=1, v=3, n_ctx=4))
    params["W_E"][0] = [1.0, 3.0]
    params["ln_f.g"][:] = 1.0
    params["W_U"][:] = [[1.0, 0.0, 2.0], [0.0, 1.0, 2.0]]
    c = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(forward(params, [0])[0], [-c, c, 0.0], atol=1e-5)


def test_logits_are_causal():
    params = random_params(ModelConfig(L=2, d=8, H=2, v=16, n_ctx=8), seed=1)
    base = forward(params, [3, 1, 4, 1, 5, 9])
    changed = forward(params, [3, 1, 4, 1, 5, 2])
    np.testing.assert_allclose(changed[:5], base[:5], atol=1e-6)
    assert not np.allclose(changed[5], base[5])


def test_batched_forward_matches_single_sequences():
    params = random_params(ModelConfig(L=1, d=8, H=2, v=16, n_ctx=8), seed=2)
    batch = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    logits = forward(params, batch)
    assert logits.shape == (2, 4, 16)
    np.testing.assert_allclose(logits[1], forward(params, batch[1]), atol=1e-10)
    np.testing.assert_allclose(softmax(logits).sum(axis=-1), 1.0)


def test_bad_tokens_are_rejected():
    params = zero_params(SMALL)
    with pytest.raises(ModelInputError, match="out of range"):
        forward(params, [0, 300])
    with pytest.raises(ModelInputError, match="too long"):
        forward(params, list(range(SMALL.n_ctx + 1)))
    with pytest.raises(ModelInputError, match="non-empty"):
        forward(params, [])
    with pytest.raises(ModelInputError, match="need"):
        loss_and_grad(params, [7])


def test_uniform_model_loss():
    params = zero_params(ModelConfig(L=1, d=4, H=2, v=16, n_ctx=8))
    loss, grads = loss_and_grad(params, [[0, 3, 5, 9], [15, 1, 1, 2]])
    assert loss == pytest.approx(math.log(16))
    assert set(grads) == set(param_shapes(params.config))


def test_gradients_match_central_differences():
    params = random_params(ModelConfig(L=1, d=8, H=2, v=16, n_ctx=16), seed=4)
    tokens = np.random.default_rng(5).integers(0, 16, size=(2, 16))
    _, grads = loss_and_grad(params, tokens)
    pick = np.random.default_rng(6)
    h = 1e-3
    for name, value in params.items():
        flat = value.reshape(-1)
        indices = pick.choice(flat.size, size=min(6, flat.size), replace=False)
        numeric, analytic = [], []
        for i in indices:
            saved = flat[i]
            flat[i] = saved + h
            up, _ = loss_and_grad(params, tokens)
            flat[i] = saved - h
            down, _ = loss_and_grad(params, tokens)
            flat[i] = saved
            numeric.append((up - down) / (2 * h))
            analytic.append(grads[name].reshape(-1)[i])
        numeric, analytic = np.asarray(numeric), np.asarray(analytic)
        scale = max(np.linalg.norm(numeric) + np.linalg.norm(analytic), 1e-8)
        assert np.linalg.norm(numeric - analytic) / scale <= 1e-3, name


def test_loss_is_invariant_to_vocabulary_relabelling():
    config = ModelConfig(L=1, d=8, H=2, v=16, n_ctx=8)
    params = random_params(config, seed=7)
    perm = np.random.default_rng(8).permutation(16)
    relabelled = params.copy()
    relabelled["W_E"][perm] = params["W_E"]
    relabelled["W_U"][:, perm] = params["W_U"]
    tokens = np.array([[1, 5, 2, 9, 14, 0, 3, 3]])
    loss, _ = loss_and_grad(params, tokens)
    permuted, _ = loss_and_grad(relabelled, perm[tokens])
    assert permuted == pytest.approx(loss, rel=1e-10)


def test_zero_step_training_saves_the_initialization(tmp_path):
    series = train(SMALL, PERIODIC, steps=0, checkpoint_every=1, out_dir=tmp_path / "run")
    assert series.steps == [0]
    saved = params_from_checkpoint(series.entries[0].path, SMALL)
    for name, value in init_params(SMALL).items():
        np.testing.assert_array_equal(saved[name], value)


def test_training_is_byte_deterministic(tmp_path):
    first = train(SMALL, PERIODIC * 2, steps=3, checkpoint_every=2, out_dir=tmp_path / "a")
    train(SMALL, PERIODIC * 2, steps=3, checkpoint_every=2, out_dir=tmp_path / "b")
    assert first.steps == [0, 2, 3]
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "config.json" in names and "train_log.csv" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_training_preconditions(tmp_path):
    with pytest.raises(ModelInputError, match="corpus too short"):
        train(SMALL, b"abc", steps=1, checkpoint_every=1, out_dir=tmp_path / "short")
    with pytest.raises(ConfigError, match="v=256"):
        train(SMALL.model_copy(update={"v": 16}), PERIODIC, steps=1, checkpoint_every=1, out_dir=tmp_path / "v")


def test_generate_edges(memorizer):
    uniform = zero_params(SMALL)
    empty = generate(uniform, [5, 6], 0)
    assert empty.tokens == [5, 6] and empty.logits.shape == (0, 256)
    assert generate(uniform, [5], 3).tokens == [5, 0, 0, 0]
    with pytest.raises(ModelInputError, match="length overflow"):
        generate(uniform, [1, 2, 3], SMALL.n_ctx)
    assert bytes(generate(memorizer, [ord("a")], 5).tokens) == b"ababab"


@pytest.mark.slow
def test_training_reduces_perplexity(tmp_path):
    corpus = PERIODIC * (10_240 // len(PERIODIC))
    config = ModelConfig(seed=0)
    series = train(config, corpus, steps=2000, checkpoint_every=1000, out_dir=tmp_path / "toy")
    probe = list(corpus[:config.n_ctx])
    before = ppl_sequence(params_from_checkpoint(series.entries[0].path, config), probe)
    after = ppl_sequence(params_from_checkpoint(series.entries[-1].path, config), probe)
    assert after < 0.2 * before
