import re
import json
import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules.artifacts import atomic_write_text
from modules.checkpoint_store import CheckpointSeries
from modules.errors import AnalysisError, ModelInputError
from modules.toy_lm import (
    ModelConfig,
    ModelParams,
    forward,
    generate,
    load_model_config,
    log_softmax,
    params_from_checkpoint,
)
from modules.workers import map_ordered

logger = logging.getLogger(__name__)

FORWARD = "forward"
CAUSAL_UNMASK = "causal-unmask"
DEFAULT_LIMIT = 500


@dataclass
class PerplexityCurve:
    steps: List[int]
    ppl_mean: List[float]
    ppl_median: List[float]
    log_ppl_mean: List[float]
    protocol: str
    n_sentences: int


@dataclass
class UnmaskingTrace:
    sentence_length: int
    prefix_lengths: List[int] = field(default_factory=list)
    completions: List[List[int]] = field(default_factory=list)
    logprobs: List[List[float]] = field(default_factory=list)
    step: Optional[int] = None
    sentence_index: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "sentence_index": self.sentence_index,
            "sentence_length": self.sentence_length,
            "completions": [
                {"k": k, "tokens": toks, "logprobs": [round(lp, 9) for lp in lps]}
                for k, toks, lps in zip(self.prefix_lengths, self.completions, self.logprobs)
            ],
        }


def split_sentences(text: str, max_len: int) -> List[List[int]]:
    """Byte-tokenized sentences split at . ! ? or newline, truncated to max_len."""
    sentences = []
    for piece in re.findall(r"[^.!?\n]+[.!?]?", text):
        ids = list(piece.strip().encode("utf-8"))[:max_len]
        if len(ids) >= 2:
            sentences.append(ids)
    return sentences


def ppl_sequence(params: ModelParams, tokens: Sequence[int]) -> float:
    """exp of the mean negative log-likelihood of tokens 2..T given their prefixes."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or len(ids) < 2:
        raise ModelInputError("need ≥ 2 tokens")
    logits = forward(params, ids).astype(np.float64)
    logp = log_softmax(logits[:-1], axis=-1)
    nll = -logp[np.arange(len(ids) - 1), ids[1:]].mean()
    return float(math.exp(nll))


def _series_config(series: CheckpointSeries, config: Optional[ModelConfig]) -> ModelConfig:
    if config is not None:
        return config
    if series.directory is None:
        raise AnalysisError("series has no directory; pass the model config explicitly")
    return load_model_config(series.directory)


def _select(sentences: Sequence[Sequence[int]], limit: Optional[int]) -> List[List[int]]:
    if not sentences:
        raise AnalysisError("empty sentence set")
    if limit is None:
        limit = len(sentences)
    if limit < 1 or limit > len(sentences):
        raise AnalysisError(f"limit must lie in [1, {len(sentences)}], got {limit}")
    return [list(s) for s in sentences[:limit]]


def _aggregate(per_sentence: List[float]) -> Tuple[float, float, float]:
    values = np.asarray(per_sentence, dtype=np.float64)
    return float(values.mean()), float(np.median(values)), float(np.log(values).mean())


def _curve(steps, rows, protocol, n) -> PerplexityCurve:
    means, medians, logs = zip(*rows) if rows else ((), (), ())
    return PerplexityCurve(steps=list(steps), ppl_mean=list(means), ppl_median=list(medians),
                           log_ppl_mean=list(logs), protocol=protocol, n_sentences=n)


def ppl_forward_dataset(series: CheckpointSeries, sentences: Sequence[Sequence[int]],
                        limit: Optional[int] = DEFAULT_LIMIT, config: Optional[ModelConfig] = None,
                        workers: Optional[int] = None) -> PerplexityCurve:
    config = _series_config(series, config)
    chosen = _select(sentences, limit)

    def evaluate(entry):
        params = params_from_checkpoint(entry.path, config)
        row = _aggregate([ppl_sequence(params, s) for s in chosen])
        logger.debug(f"[forward] step {entry.step}: ppl_mean={row[0]:.4f}")
        return row

    rows = map_ordered(evaluate, series.entries, workers)
    logger.info(f"Forward perplexity over {len(series)} checkpoints, {len(chosen)} sentences")
    return _curve(series.steps, rows, FORWARD, len(chosen))


def unmask_sentence(params: ModelParams, sentence: Sequence[int]) -> Tuple[float, UnmaskingTrace]:
    """
    Complete every k-prefix (k = 1..t_s-1) back to length t_s and score the generated
    tokens by their own emission probabilities. Sentence score = mean over k.
    """
    t_s = len(sentence)
    if t_s < 2:
        raise ModelInputError("need ≥ 2 tokens")
    if t_s > params.config.n_ctx:
        raise ModelInputError(f"sentence of length {t_s} exceeds n_ctx={params.config.n_ctx}")

    trace = UnmaskingTrace(sentence_length=t_s)
    scores = []
    for k in range(1, t_s):
        gen = generate(params, sentence[:k], t_s - k)
        emitted = np.asarray(gen.tokens[k:], dtype=np.int64)
        logp = log_softmax(gen.logits.astype(np.float64), axis=-1)[np.arange(len(emitted)), emitted]
        scores.append(math.exp(-logp.mean()))
        trace.prefix_lengths.append(k)
        trace.completions.append(gen.tokens)
        trace.logprobs.append(logp.tolist())
    return float(np.mean(scores)), trace


def causal_unmask_eval(series: CheckpointSeries, sentences: Sequence[Sequence[int]],
                       limit: Optional[int] = DEFAULT_LIMIT, config: Optional[ModelConfig] = None,
                       workers: Optional[int] = None) -> Tuple[PerplexityCurve, List[UnmaskingTrace]]:
    config = _series_config(series, config)
    chosen = _select(sentences, limit)
    for i, s in enumerate(chosen):
        if len(s) > config.n_ctx:
            raise ModelInputError(f"sentence {i} of length {len(s)} exceeds n_ctx={config.n_ctx}")

    def evaluate(entry):
        params = params_from_checkpoint(entry.path, config)
        scores, traces = [], []
        for i, s in enumerate(chosen):
            score, trace = unmask_sentence(params, s)
            trace.step, trace.sentence_index = entry.step, i
            scores.append(score)
            traces.append(trace)
        return _aggregate(scores), traces

    results = map_ordered(evaluate, series.entries, workers)
    traces = [t for _, per_step in results for t in per_step]
    logger.info(f"Causal-unmask perplexity over {len(series)} checkpoints, {len(chosen)} sentences")
    return _curve(series.steps, [row for row, _ in results], CAUSAL_UNMASK, len(chosen)), traces


def write_traces_jsonl(traces: Sequence[UnmaskingTrace], path) -> None:
    lines = [json.dumps(t.to_json(), separators=(",", ":")) for t in traces]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
