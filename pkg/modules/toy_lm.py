"""
Minimal decoder-only transformer in numpy with hand-written backpropagation.

Pre-norm blocks with learned positional embeddings:
    z = W_E[x] + W_P[pos]
    z = z + MHSA(LN1(z));  z = z + MLP(LN2(z))      (per layer)
    logits = LN_f(z) @ W_U                          (W_U untied from W_E)
"""
import math
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from modules.artifacts import atomic_write_text, write_csv
from modules.checkpoint_store import (
    CheckpointReader,
    CheckpointSeries,
    checkpoint_filename,
    open_series,
    write_checkpoint,
)
from modules.errors import ConfigError, ModelInputError

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]

LN_EPS = 1e-5
INIT_STD = 0.02
GELU_C = math.sqrt(2.0 / math.pi)
BYTE_VOCAB = 256
CONFIG_FILENAME = "config.json"


class ModelConfig(BaseModel):
    L: int = Field(2, ge=0)
    d: int = Field(32, ge=1)
    H: int = Field(4, ge=1)
    v: int = Field(BYTE_VOCAB, ge=2)
    n_ctx: int = Field(32, ge=2)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d % self.H != 0:
            raise ValueError(f"H={self.H} must divide d={self.d}")
        return self


@dataclass
class ModelParams:
    """Named weight tensors together with the config that shaped them."""
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: t.astype(dtype) for n, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: t.copy() for n, t in self.tensors.items()})


def save_model_config(config: ModelConfig, out_dir) -> Path:
    return atomic_write_text(Path(out_dir) / CONFIG_FILENAME, config.model_dump_json(indent=2) + "\n")


def load_model_config(path) -> ModelConfig:
    path = Path(path)
    if path.is_dir():
        path = path / CONFIG_FILENAME
    try:
        return ModelConfig.model_validate_json(path.read_text())
    except ValidationError as e:
        raise ConfigError(f"[{path}] invalid model config: {e}")
    except FileNotFoundError:
        raise ConfigError(f"[{path}] model config not found")


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, v = config.d, config.v
    shapes: Dict[str, Tuple[int, ...]] = {"W_E": (v, d), "W_P": (config.n_ctx, d)}
    for l in range(config.L):
        p = f"blocks.{l}"
        shapes.update({
            f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,),
            f"{p}.attn.W_Q": (d, d), f"{p}.attn.W_K": (d, d),
            f"{p}.attn.W_V": (d, d), f"{p}.attn.W_O": (d, d),
            f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,),
            f"{p}.mlp.W_in": (d, 4 * d), f"{p}.mlp.b_in": (4 * d,),
            f"{p}.mlp.W_out": (4 * d, d), f"{p}.mlp.b_out": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "W_U": (d, v)})
    return shapes


def init_params(config: ModelConfig) -> ModelParams:
    """normal(0, 0.02) matrices, zero biases, unit norm gains."""
    rng = np.random.default_rng(config.seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b") or ".b_" in name:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = (INIT_STD * rng.standard_normal(shape)).astype(np.float32)
    return ModelParams(config, tensors)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {n: np.zeros(s, dtype=np.float32) for n, s in param_shapes(config).items()})


def params_to_tensors(params: ModelParams) -> Dict[str, tuple]:
    return {name: ("f32", list(value.shape), value) for name, value in params.items()}


def params_from_checkpoint(path, config: ModelConfig) -> ModelParams:
    reader = CheckpointReader(path)
    expected = param_shapes(config)
    missing = [n for n in expected if n not in reader]
    if missing:
        raise ConfigError(f"[{Path(path).name}] checkpoint lacks model tensors: {', '.join(missing[:5])}")
    tensors = {}
    for name, shape in expected.items():
        value = reader.read(name).astype(np.float32)
        if value.shape != shape:
            raise ConfigError(f"[{Path(path).name}] {name} has shape {value.shape}, config expects {shape}")
        tensors[name] = value
    reader.close()
    return ModelParams(config, tensors)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(GELU_C * (u + 0.044715 * u ** 3)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    th = np.tanh(GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th ** 2) * GELU_C * (1.0 + 3 * 0.044715 * u ** 2)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_back(dy, cache):
    xhat, rstd, g = cache
    lead = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=lead)
    db = np.sum(dy, axis=lead)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, H):
    N, n, d = x.shape
    return x.reshape(N, n, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    N, H, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(N, n, H * dh)


def _check_tokens(params: ModelParams, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ModelInputError("token sequence must be non-empty")
    cfg = params.config
    if ids.shape[1] > cfg.n_ctx:
        raise ModelInputError(f"sequence too long: {ids.shape[1]} > n_ctx={cfg.n_ctx}")
    if ids.min() < 0 or ids.max() >= cfg.v:
        raise ModelInputError(f"token id out of range [0, {cfg.v})")
    return ids


def _forward(params: ModelParams, ids: np.ndarray):
    H = params.config.H
    N, n = ids.shape
    caches = []
    x = params["W_E"][ids] + params["W_P"][:n][None, :, :]
    mask = np.tril(np.ones((n, n), dtype=bool))

    for l in range(params.config.L):
        p = f"blocks.{l}"
        h, ln1 = _layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = _split_heads(h @ params[f"{p}.attn.W_Q"], H)
        k = _split_heads(h @ params[f"{p}.attn.W_K"], H)
        v = _split_heads(h @ params[f"{p}.attn.W_V"], H)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = np.where(mask, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        att = softmax(scores, axis=-1)
        o = _merge_heads(att @ v)
        x = x + o @ params[f"{p}.attn.W_O"]

        h2, ln2 = _layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        u = h2 @ params[f"{p}.mlp.W_in"] + params[f"{p}.mlp.b_in"]
        act = gelu(u)
        x = x + act @ params[f"{p}.mlp.W_out"] + params[f"{p}.mlp.b_out"]
        caches.append((h, ln1, q, k, v, att, o, scale, h2, ln2, u, act))

    hf, lnf = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    logits = hf @ params["W_U"]
    return logits, (caches, hf, lnf)


def forward(params: ModelParams, tokens) -> np.ndarray:
    """Logits for every position: (len x v) for one sequence, (N x len x v) for a batch."""
    ids = _check_tokens(params, tokens)
    logits, _ = _forward(params, ids)
    return logits[0] if np.asarray(tokens).ndim == 1 else logits


def loss_and_grad(params: ModelParams, tokens) -> Tuple[float, Grads]:
    """Mean next-token cross-entropy over all predicted positions, and its gradient."""
    ids = _check_tokens(params, tokens)
    N, n = ids.shape
    if n < 2:
        raise ModelInputError("need ≥ 2 tokens")

    H = params.config.H
    logits, (caches, hf, lnf) = _forward(params, ids)
    targets = ids[:, 1:, None]
    logp = log_softmax(logits[:, :-1], axis=-1)
    count = N * (n - 1)
    loss = float(-np.take_along_axis(logp, targets, axis=-1).sum() / count)

    grads: Grads = {name: np.zeros_like(value) for name, value in params.items()}
    probs = np.exp(logp)
    np.put_along_axis(probs, targets, np.take_along_axis(probs, targets, axis=-1) - 1.0, axis=-1)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = probs / count

    grads["W_U"] = np.einsum("bnd,bnv->dv", hf, dlogits)
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_back(dlogits @ params["W_U"].T, lnf)

    for l in reversed(range(len(caches))):
        p = f"blocks.{l}"
        h, ln1, q, k, v, att, o, scale, h2, ln2, u, act = caches[l]

        grads[f"{p}.mlp.b_out"] = dx.sum(axis=(0, 1))
        grads[f"{p}.mlp.W_out"] = np.einsum("bnf,bnd->fd", act, dx)
        du = (dx @ params[f"{p}.mlp.W_out"].T) * _gelu_grad(u)
        grads[f"{p}.mlp.b_in"] = du.sum(axis=(0, 1))
        grads[f"{p}.mlp.W_in"] = np.einsum("bnd,bnf->df", h2, du)
        dln, grads[f"{p}.ln2.g"], grads[f"{p}.ln2.b"] = _layer_norm_back(du @ params[f"{p}.mlp.W_in"].T, ln2)
        dx = dx + dln

        grads[f"{p}.attn.W_O"] = np.einsum("bnd,bne->de", o, dx)
        do = _split_heads(dx @ params[f"{p}.attn.W_O"].T, H)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
        dq = _merge_heads(dscores @ k)
        dk = _merge_heads(dscores.transpose(0, 1, 3, 2) @ q)
        dv = _merge_heads(dv)
        grads[f"{p}.attn.W_Q"] = np.einsum("bnd,bne->de", h, dq)
        grads[f"{p}.attn.W_K"] = np.einsum("bnd,bne->de", h, dk)
        grads[f"{p}.attn.W_V"] = np.einsum("bnd,bne->de", h, dv)
        dh = (dq @ params[f"{p}.attn.W_Q"].T + dk @ params[f"{p}.attn.W_K"].T
              + dv @ params[f"{p}.attn.W_V"].T)
        dln, grads[f"{p}.ln1.g"], grads[f"{p}.ln1.b"] = _layer_norm_back(dh, ln1)
        dx = dx + dln

    np.add.at(grads["W_E"], ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["W_P"][:n] = dx.sum(axis=0)
    return loss, grads


class Adam:
    def __init__(self, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: ModelParams, grads: Grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in params:
            g = grads[name].astype(np.float32)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            params[name] = (params[name] - update).astype(np.float32)


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def train(config: ModelConfig, corpus: bytes, steps: int, checkpoint_every: int, out_dir,
          batch_size: int = 8, lr: float = 1e-3) -> CheckpointSeries:
    """
    Byte-level training with Adam. Checkpoints at step 0, every `checkpoint_every` steps
    and at the final step; batch offsets come from a generator seeded by config.seed.
    """
    if config.v != BYTE_VOCAB:
        raise ConfigError(f"byte-level training needs v={BYTE_VOCAB}, got v={config.v}")
    if len(corpus) < config.n_ctx + 1:
        raise ModelInputError(f"corpus too short: {len(corpus)} bytes < n_ctx + 1 = {config.n_ctx + 1}")
    if steps < 0 or checkpoint_every < 1:
        raise ConfigError("steps must be >= 0 and checkpoint_every >= 1")

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"[Training Setup Error] cannot create {out_dir}: {e}", exc_info=True)
        raise
    save_model_config(config, out_dir)

    data = encode_bytes(corpus)
    params = init_params(config)
    optimizer = Adam(params, lr=lr)
    batch_rng = np.random.default_rng([config.seed, 1])
    window = config.n_ctx
    history: List[dict] = []

    def checkpoint(step: int) -> None:
        write_checkpoint(step, params_to_tensors(params), out_dir / checkpoint_filename(step))

    checkpoint(0)
    logger.info(f"Training L={config.L} d={config.d} H={config.H} n_ctx={config.n_ctx} for {steps} steps")
    for step in range(1, steps + 1):
        starts = batch_rng.integers(0, len(data) - window + 1, size=batch_size)
        batch = np.stack([data[s:s + window] for s in starts])
        loss, grads = loss_and_grad(params, batch)
        optimizer.step(params, grads)
        history.append({"step": step, "loss": loss})
        if step % checkpoint_every == 0 or step == steps:
            checkpoint(step)
            logger.info(f"step {step}: loss={loss:.4f}")

    write_csv(out_dir / "train_log.csv", pd.DataFrame(history, columns=["step", "loss"]))
    return open_series(out_dir)


@dataclass
class Generation:
    tokens: List[int]
    logits: np.ndarray


def generate(params: ModelParams, prefix: Sequence[int], n: int) -> Generation:
    """Greedy decoding; ties go to the lowest token id."""
    cfg = params.config
    tokens = [int(t) for t in prefix]
    if len(tokens) + n > cfg.n_ctx:
        raise ModelInputError(f"length overflow: {len(tokens)} + {n} > n_ctx={cfg.n_ctx}")
    rows = []
    for _ in range(n):
        row = forward(params, tokens)[-1]
        rows.append(row)
        tokens.append(int(np.argmax(row)))
    logits = np.stack(rows) if rows else np.zeros((0, cfg.v), dtype=np.float32)
    return Generation(tokens=tokens, logits=logits)
