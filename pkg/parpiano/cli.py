"""Command-line entry point: ``python app.py <subcommand> ...``."""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import pandas as pd
from pydantic import ValidationError

from .checkpoint import load_checkpoint
from .config import (
    ABLATIONS,
    COMPACT_LADDER,
    LATENCY_PRESETS,
    ModelConfig,
    RuntimeSettings,
    SynthSpec,
    TrainConfig,
    compact_config,
    latency_ms,
    lookahead_frames,
    parse_widths,
    stream_latency_ms,
    tiny_config,
)
from .engine import StreamSession, measure_step_time, transcribe_audio
from .errors import CheckpointError, ConfigurationError, DataError, ParPianoError
from .files import pcm16_to_float, read_notes, read_wav, write_notes
from .metrics import breakdown, compute_metrics
from .models import NoteMetrics
from .network import ParModel, count_params
from .synth import write_dataset
from .table import format_metrics_table, metrics_frame
from .trainer import run_ablation_suite, run_size_suite, train

logger = logging.getLogger("parpiano")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
NOTE_SUFFIXES = (".json", ".csv", ".mid", ".midi")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------
# Model selection
# ------------------------------

def _model_config(args, fallback=ModelConfig) -> ModelConfig:
    """Model from --variant/--size/--widths/--ablation; fallback when neither variant nor size is given."""
    size = getattr(args, "size", None)
    if size == "tiny":
        config = tiny_config()
    elif size:
        config = compact_config(size)
    elif getattr(args, "variant", None) == "Compact":
        config = compact_config("base")
    elif getattr(args, "variant", None) == "PAR":
        config = ModelConfig()
    else:
        config = fallback()
    update = {"seed": getattr(args, "seed", 0)}
    if getattr(args, "widths", None):
        update["filter_widths"] = parse_widths(args.widths)
    for name in getattr(args, "ablation", None) or []:
        config = config.with_ablation(name)
    return ModelConfig.model_validate({**config.model_dump(), **update})


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=["PAR", "Compact"])
    p.add_argument("--size", choices=list(COMPACT_LADDER) + ["tiny"], help="compact ladder size (implies Compact)")
    p.add_argument("--widths", help="six odd conv time widths, e.g. 3,1,3,1,1,1")


# ------------------------------
# Subcommands
# ------------------------------

def cmd_synth_data(args) -> int:
    spec = SynthSpec(
        seed=args.seed,
        n_pieces=args.n_pieces,
        piece_seconds=args.seconds,
        max_polyphony=args.polyphony,
        note_rate=args.note_rate,
        pedal_prob=args.pedal_prob,
    )
    manifest = write_dataset(spec, args.out)
    print(json.dumps({"out": args.out, "pieces": len(manifest.pieces)}))
    return EXIT_OK


def cmd_train(args) -> int:
    fields: Dict = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise DataError(f"config file not found: {args.config}")
        with open(args.config) as f:
            fields = json.load(f)
    fields.update({"dataset_dir": args.data, "output_dir": args.out, "seed": args.seed})
    if not args.config or args.size or args.widths or args.ablation:
        fields["model"] = _model_config(args, fallback=tiny_config).model_dump()
    for key in ("max_iters", "batch_size", "lr", "validate_every", "crop_seconds", "max_valid_pieces"):
        value = getattr(args, key)
        if value is not None:
            fields[key] = value
    config = TrainConfig.model_validate(fields)
    report = train(config, progress=not args.quiet)
    print(report.model_dump_json(indent=2, exclude={"losses"}))
    return EXIT_OK


def _note_files(path: str) -> Dict[str, str]:
    if os.path.isfile(path):
        return {os.path.splitext(os.path.basename(path))[0]: path}
    if not os.path.isdir(path):
        raise DataError(f"no such file or directory: {path}")
    found = {}
    for name in sorted(os.listdir(path)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in NOTE_SUFFIXES and not name.endswith(".pedal.json") and name != "manifest.json":
            found[stem] = os.path.join(path, name)
    return found


def cmd_eval(args) -> int:
    refs, ests = _note_files(args.ref), _note_files(args.est)
    if os.path.isfile(args.ref) and os.path.isfile(args.est):
        pairs = [(next(iter(refs)), next(iter(refs.values())), next(iter(ests.values())))]
    else:
        pairs = [(stem, refs[stem], ests[stem]) for stem in refs if stem in ests]
        missing = sorted(set(refs) - set(ests))
        if missing:
            logger.warning("%d reference pieces have no estimate: %s", len(missing), ", ".join(missing[:5]))
    if not pairs:
        raise DataError("no matching reference/estimate note files")

    def score(item) -> Tuple[str, NoteMetrics]:
        stem, ref_path, est_path = item
        return stem, compute_metrics(read_notes(ref_path), read_notes(est_path), scale_velocity=not args.raw_velocity)

    with ThreadPoolExecutor(max_workers=RuntimeSettings.from_env().threads) as pool:
        per_piece = dict(pool.map(score, pairs))

    df = metrics_frame(per_piece)
    print(format_metrics_table(df).to_string(index=False))
    if args.csv:
        df.to_csv(args.csv, index=False)
    if args.breakdown:
        frames = []
        for stem, ref_path, est_path in pairs:
            part = breakdown(read_notes(ref_path), read_notes(est_path), axis=args.breakdown)
            part.insert(0, "piece", stem)
            frames.append(part)
        out = pd.concat(frames, ignore_index=True)
        if args.breakdown_csv:
            out.to_csv(args.breakdown_csv, index=False)
        else:
            print(out.to_string(index=False))
    return EXIT_OK


def _load_model(path: str) -> ParModel:
    if not os.path.isfile(path):
        raise CheckpointError(f"model file not found: {path}")
    return load_checkpoint(path)


def cmd_transcribe(args) -> int:
    model = _load_model(args.model)
    if args.latency_config and parse_widths(args.latency_config) != tuple(model.config.filter_widths):
        raise ConfigurationError(
            f"checkpoint was built with widths {model.config.filter_widths}, not {args.latency_config}"
        )
    if not os.path.isfile(args.input):
        raise DataError(f"audio file not found: {args.input}")
    notes = transcribe_audio(model, read_wav(args.input))
    write_notes(args.output, notes)
    logger.info("wrote %d notes to %s (latency %.0f ms)", len(notes), args.output, latency_ms(model.config))
    return EXIT_OK


def cmd_live(args) -> int:
    session = StreamSession(_load_model(args.model))
    logger.info("live session: events trail the audio by %.0f ms", session.stream_latency_ms)
    source = sys.stdin.buffer
    carry = b""

    def emit(events):
        for event in events:
            sys.stdout.write(event.model_dump_json() + "\n")
        sys.stdout.flush()

    while True:
        data = source.read(args.chunk_bytes)
        if not data:
            break
        data = carry + data
        usable = len(data) - len(data) % 2
        carry = data[usable:]
        emit(session.push(pcm16_to_float(data[:usable])))
    emit(session.finalize())
    return EXIT_OK


def cmd_bench_latency(args) -> int:
    widths_list = [parse_widths(args.widths)] if args.widths else LATENCY_PRESETS
    rows = []
    for widths in widths_list:
        config = _model_config(args).model_copy(update={"filter_widths": widths})
        row = {
            "widths": ",".join(map(str, widths)),
            "latency_ms": latency_ms(config),
            "stream_latency_ms": stream_latency_ms(config),
            "lookahead_frames": lookahead_frames(config),
        }
        if not args.analytic_only:
            timing = measure_step_time(ParModel(config), args.trials, seed=args.seed)
            row.update(mean_ms=timing.mean_ms, p95_ms=timing.p95_ms, real_time_factor=timing.real_time_factor)
        rows.append(row)
    print(pd.DataFrame(rows).to_string(index=False))
    return EXIT_OK


def cmd_count_params(args) -> int:
    if not args.all:
        print(count_params(_model_config(args)))
        return EXIT_OK
    rows = [{"model": "PAR", "params": count_params(ModelConfig(seed=args.seed))}]
    for name in COMPACT_LADDER:
        rows.append({"model": f"Compact/{name}", "params": count_params(compact_config(name, seed=args.seed))})
    print(pd.DataFrame(rows).to_string(index=False))
    return EXIT_OK


def _suite_config(args) -> TrainConfig:
    fields = {"dataset_dir": args.data, "output_dir": args.out, "seed": args.seed, "model": tiny_config(seed=args.seed)}
    for key in ("max_iters", "batch_size", "validate_every", "max_valid_pieces", "crop_seconds"):
        value = getattr(args, key)
        if value is not None:
            fields[key] = value
    return TrainConfig.model_validate(fields)


def _print_suite(df: pd.DataFrame, csv: Optional[str]) -> None:
    print(format_metrics_table(df, label="variant").assign(params=df["params"]).to_string(index=False))
    if csv:
        df.to_csv(csv, index=False)


def cmd_ablate(args) -> int:
    _print_suite(run_ablation_suite(_suite_config(args), progress=not args.quiet), args.csv)
    return EXIT_OK


def cmd_size_sweep(args) -> int:
    _print_suite(run_size_suite(_suite_config(args), progress=not args.quiet), args.csv)
    return EXIT_OK


# ------------------------------
# Parser
# ------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="parpiano", description="Real-time piano transcription with PAR / PAR-compact.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render a synthetic piano dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pieces", type=int, default=50)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--polyphony", type=int, default=3)
    p.add_argument("--note-rate", type=float, default=2.0)
    p.add_argument("--pedal-prob", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="teacher-forced training with validation checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--config", help="TrainConfig JSON file; flags override it")
    _add_model_flags(p)
    p.add_argument("--ablation", action="append", choices=list(ABLATIONS))
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--validate-every", dest="validate_every", type=int)
    p.add_argument("--crop-seconds", dest="crop_seconds", type=float)
    p.add_argument("--max-valid-pieces", dest="max_valid_pieces", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="note-level metrics of estimates against references")
    p.add_argument("--ref", required=True, help="note file or directory")
    p.add_argument("--est", required=True, help="note file or directory")
    p.add_argument("--csv")
    p.add_argument("--raw-velocity", action="store_true", help="skip the velocity scale fit")
    p.add_argument("--breakdown", choices=["pitch", "length"])
    p.add_argument("--breakdown-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transcribe", help="transcribe a WAV file offline")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--latency-config", help="expected conv time widths of the checkpoint")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("live", help="PCM16 on stdin -> JSON lines of note events on stdout")
    p.add_argument("--model", required=True)
    p.add_argument("--chunk-bytes", dest="chunk_bytes", type=int, default=1024)
    p.set_defaults(func=cmd_live)

    p = sub.add_parser("bench-latency", help="analytic latency and measured per-frame compute")
    _add_model_flags(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--analytic-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_latency)

    p = sub.add_parser("count-params", help="parameter count of a configuration")
    _add_model_flags(p)
    p.add_argument("--ablation", action="append", choices=list(ABLATIONS))
    p.add_argument("--all", action="store_true", help="PAR and the whole compact ladder")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_count_params)

    for name, func, help_text in (
        ("ablate", cmd_ablate, "train and evaluate the ablation variants"),
        ("size-sweep", cmd_size_sweep, "train and evaluate the compact size ladder"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--out", default=f"runs/{name}")
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--crop-seconds", dest="crop_seconds", type=float)
        p.add_argument("--validate-every", dest="validate_every", type=int)
        p.add_argument("--max-valid-pieces", dest="max_valid_pieces", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--csv")
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(func=func)
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.DEBUG if verbosity > 0 else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except ParPianoError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
