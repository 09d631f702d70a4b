import sys
import time
import shlex
import logging
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ValidationError

import config
from charts.chart_utils import (
    bimodality_frame,
    density_frame,
    msd_frame,
    ppl_frame,
    rank_derivative_frame,
    rank_frame,
)
from charts.svg_templates import render_svg
from modules.artifacts import atomic_write_text, write_csv, write_json
from modules.bifurcation_detector import STATIONARY, DetectorConfig, early_stop, quantize_ternary, write_report
from modules.checkpoint_store import open_series, flatten_series
from modules.covariance_probe import DEFAULT_TOLERANCES, probe_rank, probe_rank_batches
from modules.dynamics_stats import (
    bimodality_series,
    density_movie,
    msd,
    msd_exponent,
    msd_windowed,
    weight_summary,
)
from modules.errors import ConfigError, SeriesError, WeightDynError
from modules.perplexity_eval import (
    DEFAULT_LIMIT,
    causal_unmask_eval,
    ppl_forward_dataset,
    split_sentences,
    write_traces_jsonl,
)
from modules.synth_dynamics import export_series, load_sde_config, simulate
from modules.toy_lm import CONFIG_FILENAME, ModelConfig, load_model_config, train

# --- Logging Setup ---
logging.basicConfig(
    level=config.LOG_LEVEL,
    format="%(asctime)s [%(levelname)s] %(message)s"
)
logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DEFAULT_TEXT = Path(__file__).resolve().parent / "data" / "eval_corpus.txt"
DEFAULT_LAG = 10
DEFAULT_BINS = 64


class UsageError(Exception):
    pass


class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config: Dict[str, Any]
    inputs: List[str]
    outputs: List[str]
    seed: int
    toolkit_version: str = config.TOOLKIT_VERSION
    wall_clock_seconds: float = 0.0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _tolerances(text: str) -> List[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not values or any(not 0.0 < t <= 1.0 for t in values):
        raise argparse.ArgumentTypeError("tolerances must lie in (0, 1]")
    return values


def _batches(text: str) -> List[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")
    if not values or any(b < 2 for b in values):
        raise argparse.ArgumentTypeError("batch sizes must be >= 2")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weightdyn", description="Temporal diagnostics for weight checkpoint series.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, series=True, out_required=True):
        if series:
            p.add_argument("--series", required=True, help="checkpoint series directory")
        p.add_argument("--out", required=out_required, help="output file or directory")
        p.add_argument("--seed", type=int, help="defaults to the config file seed, then WEIGHTDYN_SEED")
        p.add_argument("--workers", type=int, default=config.WORKERS)
        return p

    def slicing(p):
        p.add_argument("--tensor", help="defaults to W_U, or the only tensor in the series")
        p.add_argument("--stride", type=int, default=1)
        return p

    p = common(sub.add_parser("simulate", help="SDE config JSON -> series dir"), series=False)
    p.add_argument("--config", required=True)
    p.add_argument("--step-spacing", type=int, default=1000)

    p = common(sub.add_parser("train-toy", help="model config + corpus -> series dir"), series=False)
    p.add_argument("--config", help="model config JSON (defaults apply when omitted)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)

    p = slicing(common(sub.add_parser("msd", help="MSD curve -> msd.csv")))
    p.add_argument("--msd-mode", choices=["cumulative", "windowed"], default="cumulative")
    p.add_argument("--lag", type=int, default=DEFAULT_LAG)

    p = slicing(common(sub.add_parser("density", help="density movie -> density.csv + bimodality.csv")))
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--range-policy", default="quantile(0.001)")
    p.add_argument("--smoothing", type=int, default=5)

    p = slicing(common(sub.add_parser("detect", help="early-stop verdict -> report.json")))
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--range-policy", default="quantile(0.001)")
    p.add_argument("--msd-mode", choices=["cumulative", "windowed"], default="windowed")
    p.add_argument("--lag", type=int, default=DEFAULT_LAG)
    p.add_argument("--config", "--detector-config", dest="config", help="detector config JSON")

    p = common(sub.add_parser("probe-rank", help="covariance rank -> rank.csv + rank_derivative.csv"))
    p.add_argument("--tensor", default="W_U")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--batches", type=_batches, help="extra batch sizes, one rank_bB.csv each")
    p.add_argument("--tolerances", type=_tolerances, default=list(DEFAULT_TOLERANCES))

    for name, help_text in (("ppl", "forward perplexity -> ppl.csv"),
                            ("unmask", "causal-unmask perplexity -> ppl.csv + traces.jsonl")):
        p = common(sub.add_parser(name, help=help_text))
        p.add_argument("--text", default=str(DEFAULT_TEXT))
        p.add_argument("--limit", type=int, default=DEFAULT_LIMIT)
        p.add_argument("--config", help="model config JSON (defaults to the series config.json)")

    p = slicing(common(sub.add_parser("report", help="bundle every artifact into one directory")))
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--range-policy", default="quantile(0.001)")
    p.add_argument("--lag", type=int, default=DEFAULT_LAG)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--tolerances", type=_tolerances, default=list(DEFAULT_TOLERANCES))
    p.add_argument("--text", default=str(DEFAULT_TEXT))
    p.add_argument("--limit", type=int, default=DEFAULT_LIMIT)
    p.add_argument("--unmask-limit", type=int, default=8)
    p.add_argument("--config", "--detector-config", dest="config", help="detector config JSON")

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest.json")
    p.add_argument("--manifest", required=True)
    return parser


def _sibling(out: Path, name: str) -> Path:
    return out.parent / name


def _detector_config(path: Optional[str]) -> DetectorConfig:
    if not path:
        return DetectorConfig()
    try:
        return DetectorConfig.model_validate_json(Path(path).read_text())
    except ValidationError as e:
        raise ConfigError(f"[{path}] invalid detector config: {e}")


def _resolve_tensor(series, requested: Optional[str]) -> str:
    if requested:
        return requested
    if "W_U" in series.tensor_meta:
        return "W_U"
    names = sorted(series.tensor_meta)
    if len(names) == 1:
        logger.info(f"No --tensor given; using {names[0]}, the only tensor in {series.directory}")
        return names[0]
    raise SeriesError(f"[{series.directory}] --tensor is required; available: {', '.join(names)}")


def _slice(args):
    series = open_series(args.series)
    args.tensor = _resolve_tensor(series, args.tensor)
    return series, flatten_series(series, args.tensor, args.stride)


def _msd_curve(slice_, args):
    if args.msd_mode == "windowed":
        return msd_windowed(slice_, lag=args.lag, workers=args.workers)
    return msd(slice_, workers=args.workers)


def _sentences(args, n_ctx: int):
    text = Path(args.text).read_text(encoding="utf-8")
    sentences = split_sentences(text, n_ctx)
    if not sentences:
        raise ConfigError(f"[{args.text}] no usable sentences")
    return sentences


def _limit(requested: int, available: int) -> int:
    if requested > available:
        logger.warning(f"--limit {requested} exceeds {available} available sentences; using {available}")
    return max(1, min(requested, available))


def cmd_simulate(args) -> List[Path]:
    cfg = load_sde_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    slice_, truth = simulate(cfg)
    out = Path(args.out)
    export_series(slice_, args.step_spacing, out)
    write_json(out / "sde_config.json", cfg.model_dump(mode="json"))
    write_json(out / "ground_truth.json", truth.to_json(args.step_spacing))
    args.seed = cfg.seed
    return [out]


def cmd_train_toy(args) -> List[Path]:
    model_cfg = load_model_config(args.config) if args.config else ModelConfig()
    if args.seed is not None:
        model_cfg = model_cfg.model_copy(update={"seed": args.seed})
    corpus = Path(args.corpus).read_bytes()
    train(model_cfg, corpus, args.steps, args.checkpoint_every, args.out, batch_size=args.batch)
    args.seed = model_cfg.seed
    return [Path(args.out)]


def cmd_msd(args) -> List[Path]:
    _, slice_ = _slice(args)
    return [write_csv(args.out, msd_frame(_msd_curve(slice_, args)))]


def cmd_density(args) -> List[Path]:
    _, slice_ = _slice(args)
    movie = density_movie(slice_, args.bins, args.range_policy)
    out = Path(args.out)
    reports = bimodality_series(movie, args.smoothing)
    return [write_csv(out, density_frame(movie)),
            write_csv(_sibling(out, "bimodality.csv"), bimodality_frame(movie.steps, reports))]


def cmd_detect(args) -> List[Path]:
    _, slice_ = _slice(args)
    cfg = _detector_config(args.config)
    curve = _msd_curve(slice_, args)
    movie = density_movie(slice_, args.bins, args.range_policy)
    signal = early_stop(curve, movie, cfg)
    write_report(signal, cfg, args.out)
    print(signal.status)
    return [Path(args.out)]


def cmd_probe_rank(args) -> List[Path]:
    series = open_series(args.series)
    curve = probe_rank(series, args.tensor, args.batch, args.tolerances, args.seed, args.workers)
    out = Path(args.out)
    outputs = [write_csv(out, rank_frame(curve)),
               write_csv(_sibling(out, "rank_derivative.csv"), rank_derivative_frame(curve))]
    if args.batches:
        sweep = probe_rank_batches(series, args.tensor, args.batches, args.tolerances, args.seed, args.workers)
        for b, swept in sweep.items():
            outputs.append(write_csv(_sibling(out, f"{out.stem}_b{b}{out.suffix}"), rank_frame(swept)))
            outputs.append(write_csv(_sibling(out, f"rank_derivative_b{b}.csv"), rank_derivative_frame(swept)))
    return outputs


def _model_config(args, series) -> ModelConfig:
    if args.config:
        return load_model_config(args.config)
    return load_model_config(series.directory)


def cmd_ppl(args) -> List[Path]:
    series = open_series(args.series)
    model_cfg = _model_config(args, series)
    sentences = _sentences(args, model_cfg.n_ctx)
    curve = ppl_forward_dataset(series, sentences, _limit(args.limit, len(sentences)), model_cfg, args.workers)
    return [write_csv(args.out, ppl_frame([curve]))]


def cmd_unmask(args) -> List[Path]:
    series = open_series(args.series)
    model_cfg = _model_config(args, series)
    sentences = _sentences(args, model_cfg.n_ctx)
    curve, traces = causal_unmask_eval(series, sentences, _limit(args.limit, len(sentences)),
                                       model_cfg, args.workers)
    out = Path(args.out)
    traces_path = _sibling(out, "traces.jsonl")
    write_traces_jsonl(traces, traces_path)
    return [write_csv(out, ppl_frame([curve])), traces_path]


def _probe_tensor(series, preferred: str) -> Optional[str]:
    for name in (preferred, "W_U"):
        if name in series.tensor_meta and len(series.tensor_meta[name][1]) == 2:
            return name
    return None


def cmd_report(args) -> List[Path]:
    out = Path(args.out)
    series, slice_ = _slice(args)
    cfg = _detector_config(args.config)
    outputs: List[Path] = []

    curve = msd(slice_, workers=args.workers)
    detection_curve = msd_windowed(slice_, lag=args.lag, workers=args.workers)
    movie = density_movie(slice_, args.bins, args.range_policy)
    signal = early_stop(detection_curve, movie, cfg)
    outputs.append(write_csv(out / "msd.csv", msd_frame(curve)))
    outputs.append(write_csv(out / "msd_windowed.csv", msd_frame(detection_curve)))
    outputs.append(write_csv(out / "density.csv", density_frame(movie)))
    reports = bimodality_series(movie)
    outputs.append(write_csv(out / "bimodality.csv", bimodality_frame(movie.steps, reports)))
    outputs.append(write_csv(out / "summary.csv", weight_summary(slice_)))
    write_report(signal, cfg, out / "report.json")
    outputs.append(out / "report.json")
    if slice_.T >= 2:
        outputs.append(write_json(out / "diffusion_fit.json", msd_exponent(curve).to_json()))
    if signal.status == STATIONARY:
        index = movie.steps.index(signal.stop_step)
        if reports[index].mode_count in (1, 2):
            ternary = quantize_ternary(slice_.values[index], reports[index])
            outputs.append(write_json(out / "ternary.json", {"step": signal.stop_step, **ternary.to_json()}))
        else:
            logger.info(f"{reports[index].mode_count} modes at step {signal.stop_step}; no ternary levels")

    rank = None
    probe_tensor = _probe_tensor(series, args.tensor)
    if probe_tensor is not None:
        rank = probe_rank(series, probe_tensor, args.batch, args.tolerances, args.seed, args.workers)
    else:
        logger.warning(f"No 2-D tensor to probe in {args.series}; rank.csv is left empty")
    outputs.append(write_csv(out / "rank.csv", rank_frame(rank)))
    outputs.append(write_csv(out / "rank_derivative.csv", rank_derivative_frame(rank)))

    ppl_curves = []
    if (Path(args.series) / CONFIG_FILENAME).exists():
        model_cfg = load_model_config(args.series)
        sentences = _sentences(args, model_cfg.n_ctx)
        ppl_curves.append(ppl_forward_dataset(series, sentences, _limit(args.limit, len(sentences)),
                                              model_cfg, args.workers))
        if args.unmask_limit > 0:
            unmask_curve, traces = causal_unmask_eval(series, sentences, _limit(args.unmask_limit, len(sentences)),
                                                      model_cfg, args.workers)
            ppl_curves.append(unmask_curve)
            write_traces_jsonl(traces, out / "traces.jsonl")
            outputs.append(out / "traces.jsonl")
        outputs.append(write_csv(out / "ppl.csv", ppl_frame(ppl_curves)))

    svg = render_svg(msd=detection_curve, movie=movie, peak_step=signal.peak_step, rank=rank,
                     ppl=ppl_curves or None, title=f"{args.tensor} @ {args.series}")
    outputs.append(atomic_write_text(out / "plots.svg", svg))
    logger.info(f"Report for {args.series}: status={signal.status}, {len(outputs)} artifacts")
    return outputs


COMMANDS = {
    "simulate": cmd_simulate,
    "train-toy": cmd_train_toy,
    "msd": cmd_msd,
    "density": cmd_density,
    "detect": cmd_detect,
    "probe-rank": cmd_probe_rank,
    "ppl": cmd_ppl,
    "unmask": cmd_unmask,
    "report": cmd_report,
}


def _manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command in ("simulate", "train-toy", "report"):
        return out / "manifest.json"
    return out.parent / f"{out.name}.manifest.json"


def _write_manifest(args, argv: List[str], outputs: List[Path], elapsed: float) -> None:
    snapshot = {k: v for k, v in vars(args).items() if k not in ("command",)}
    inputs = [str(snapshot[k]) for k in ("series", "config", "corpus", "text") if snapshot.get(k)]
    manifest = RunManifest(
        command=args.command,
        argv=list(argv),
        config=snapshot,
        inputs=inputs,
        outputs=[str(p) for p in outputs],
        seed=args.seed,
        wall_clock_seconds=round(elapsed, 3),
    )
    write_json(_manifest_path(args), manifest.model_dump(mode="json"))


def dispatch(argv: List[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "weightdyn: error: a subcommand is required")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    if args.command == "rerun":
        try:
            recorded = RunManifest.model_validate_json(Path(args.manifest).read_text())
        except (OSError, ValidationError) as e:
            logger.error(f"[Manifest Error] {args.manifest}: {e}")
            return EXIT_DATA
        logger.info(f"Replaying: {shlex.join(recorded.argv)}")
        return dispatch(recorded.argv)

    if args.seed is None and args.command not in ("simulate", "train-toy"):
        args.seed = config.DEFAULT_SEED

    if getattr(args, "workers", 1) < 1:
        print(f"{parser.prog}: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    started = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](args)
    except (WeightDynError, OSError) as e:
        logger.error(f"[{args.command} Error] {e}", exc_info=True)
        return EXIT_DATA

    _write_manifest(args, argv, outputs, time.perf_counter() - started)
    logger.info(f"{args.command} finished in {time.perf_counter() - started:.2f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(dispatch(sys.argv[1:]))
