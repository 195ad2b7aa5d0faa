"""Command-line entry point: run, report, replay, sample, generate.

Exit codes: 0 success, 2 configuration or missing run, 3 backend failure,
4 replay divergence.
"""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from .config import BackendConfig, RunConfig, load_config, load_report_settings
from .db import TranscriptStore
from .embeddings import build_embedder
from .engine import Engine, RunState
from .errors import (
    CoEvoError,
    ConfigError,
    EmbeddingError,
    EvaluationError,
    GatewayError,
    MissingRun,
    ReplayMismatch,
    TranscriptDivergence,
    TranscriptExhausted,
)
from .evaluation import generate_problem, ingester
from .knowledge import KnowledgeLibrary
from .llm_gateway import (
    HttpClient,
    LiveBackend,
    LLMGateway,
    ReplayBackend,
    ScriptedBackend,
    Transcript,
    TranscriptRecord,
)
from .prompt_book import PromptBook
from .report import build_report, parse_window
from .run_store import RunDirectory
from .usage_logger import usage_logger

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_REPLAY = 4

REPLAY_FIELDS = {"generation", "iteration", "samples", "population", "library",
                 "best_series", "valid_series", "offspring_series"}


def _http_client(backend: BackendConfig) -> HttpClient:
    return HttpClient(
        backend.base_url,
        api_key_env=backend.api_key_env,
        timeout=backend.timeout,
        retries=backend.retries,
        max_inflight=backend.max_inflight,
    )


def recorded_transcript(path: str) -> List[TranscriptRecord]:
    store = TranscriptStore(f"sqlite:///{path}")
    try:
        return [TranscriptRecord.from_entry(e) for e in store.get_entries()]
    finally:
        store.close()


def build_gateway(backend: BackendConfig, transcript: Transcript) -> LLMGateway:
    if backend.mode == "live":
        impl = LiveBackend(_http_client(backend), backend.model)
    elif backend.mode == "scripted":
        impl = ScriptedBackend.from_file(backend.fixture, strict=backend.strict)
    else:
        if not backend.fixture:
            raise ConfigError("backend.fixture: replay mode needs a recorded transcript.sqlite")
        impl = ReplayBackend(recorded_transcript(backend.fixture), strict=backend.strict)
    return LLMGateway(impl, transcript, max_response_chars=backend.max_response_chars)


def build_embedder_for(backend: BackendConfig):
    client = _http_client(backend) if backend.embed_mode == "remote" else None
    return build_embedder(backend.embed_mode, client, backend.embed_model)


def seed_library(config: RunConfig) -> Optional[KnowledgeLibrary]:
    """Library carried over from an earlier run, re-capped to this run's settings."""
    if not config.library.seed_from:
        return None
    record = RunDirectory(config.library.seed_from).load_state().library
    record = record.model_copy(update={
        "capacity": config.engine.library_capacity,
        "tau": config.engine.cluster_tau,
        "dedup_threshold": config.engine.dedup_threshold,
        "seed": config.engine.seed,
    })
    library = KnowledgeLibrary.from_record(record)
    logger.info(f"Seeded library with {len(library)} pieces from {config.library.seed_from}")
    return library


def _prompts(config: RunConfig) -> PromptBook:
    prompts = PromptBook(config.prompts.directory)
    prompts.check()
    return prompts


def _print_result(state: RunState):
    best = state.best
    if best is None:
        print("No solutions.")
        return
    score = f"{best.score:.6g}" if math.isfinite(best.score) else "invalid"
    print(f"Best {best.id}: {best.canonical or '(unparsed)'}  NMSE={score}")
    if best.params:
        print("  params: " + ", ".join(f"c{i}={value:.6g}" for i, value in enumerate(best.params)))


def cmd_run(args) -> int:
    config = load_config(args.config)
    run_dir = RunDirectory(args.output or config.output.directory)
    prompts = _prompts(config)

    state: Optional[RunState] = None
    if args.resume:
        state = run_dir.load_state()
        dataset = run_dir.load_dataset()
        transcript = run_dir.open_transcript()
        run_dir.rewind(state)
        logger.info(f"Resuming {run_dir.path} after generation {state.generation}")
    else:
        if run_dir.has_state():
            raise ConfigError(f"output.directory: {run_dir.path} already holds a run; use --resume or --output")
        dataset = generate_problem(config.problem)
        run_dir.prepare(args.config, dataset)
        transcript = run_dir.open_transcript()
        transcript.truncate(0)

    gateway = build_gateway(config.backend, transcript)
    if state is not None:
        gateway.restore(state.gateway_state)
    engine = Engine(config.engine, dataset, gateway, build_embedder_for(config.backend), prompts, recorder=run_dir)
    try:
        final = engine.run(state, library=seed_library(config) if state is None else None)
    finally:
        run_dir.close()

    usage_logger.log_stats("run", {
        "run_dir": str(run_dir.path),
        "generations": final.generation,
        "samples": final.samples,
        "iterations": final.iteration,
        "best_nmse": final.best_score,
        "library_size": len(final.library.pieces),
    })
    _print_result(final)
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = RunDirectory(args.run_dir)
    run_dir.require()
    library, report = load_report_settings(str(run_dir.config_path))
    try:
        window = parse_window(args.window) if args.window else None
    except ValueError as error:
        raise ConfigError(f"--window: {error}") from error
    stats = build_report(
        run_dir,
        window=window,
        figures=report.figures and not args.no_figures,
        eps=library.snapshot_eps,
        min_pts=library.snapshot_min_pts,
    )
    for error in stats["errors"]:
        logger.warning(error)
    print(f"Wrote {', '.join(stats['files'])} to {run_dir.path}")
    return EXIT_OK


def _fingerprint(state: RunState) -> Dict[str, Any]:
    return state.model_dump(mode="json", include=REPLAY_FIELDS)


def replay_run(run_dir: RunDirectory, strict: bool = False) -> RunState:
    """Re-execute a recorded run from its transcript and check it lands on the same state."""
    recorded = run_dir.load_state()
    config = load_config(str(run_dir.config_path))
    records = [TranscriptRecord.from_entry(e) for e in run_dir.transcript_store().get_entries()]
    gateway = LLMGateway(
        ReplayBackend(records, strict=strict or config.backend.strict),
        Transcript(),
        max_response_chars=config.backend.max_response_chars,
    )
    engine_config = config.engine.model_copy(update={"generations": recorded.generation})
    engine = Engine(engine_config, run_dir.load_dataset(), gateway,
                    build_embedder_for(config.backend), _prompts(config))
    replayed = engine.run(library=seed_library(config))

    expected, actual = _fingerprint(recorded), _fingerprint(replayed)
    for key in sorted(REPLAY_FIELDS):
        if expected[key] != actual[key]:
            raise ReplayMismatch(f"replayed {key} differs from the recording")
    if len(gateway.transcript) != recorded.transcript_length:
        raise ReplayMismatch(
            f"replay made {len(gateway.transcript)} requests, recording has {recorded.transcript_length}"
        )
    return replayed


def cmd_replay(args) -> int:
    run_dir = RunDirectory(args.run_dir)
    try:
        replayed = replay_run(run_dir, strict=args.strict)
    except (TranscriptExhausted, TranscriptDivergence, ReplayMismatch) as error:
        usage_logger.log_error(type(error).__name__, str(error))
        print(f"Replay diverged: {type(error).__name__}: {error}")
        return EXIT_REPLAY
    finally:
        run_dir.close()
    print(f"Replay matched {replayed.generation} generations and {replayed.samples} samples")
    return EXIT_OK


def cmd_sample(args) -> int:
    config = load_config(args.config)
    if args.library:
        library = KnowledgeLibrary.from_record(RunDirectory(args.library).load_state().library)
    else:
        library = config.engine.new_library()
    dataset = generate_problem(config.problem)
    gateway = build_gateway(config.backend, Transcript())
    engine = Engine(config.engine, dataset, gateway, build_embedder_for(config.backend), _prompts(config))
    results = engine.sample(library, args.count)

    frame = pd.DataFrame([
        {
            "sample": index,
            "solution_id": r.solution.id,
            "equation": r.solution.canonical,
            "score": r.solution.score,
            "valid": r.solution.valid,
            "used_knowledge": r.used_knowledge,
        }
        for index, r in enumerate(results)
    ], columns=["sample", "solution_id", "equation", "score", "valid", "used_knowledge"])
    out = Path(args.output or config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "samples.csv", index=False)

    valid = frame[frame["valid"]]
    summary = {
        "samples": len(frame),
        "valid_ratio": float(frame["valid"].mean()) if len(frame) else 0.0,
        "library_size": len(library),
        "best_nmse": float(valid["score"].min()) if len(valid) else None,
        "median_nmse": float(valid["score"].median()) if len(valid) else None,
    }
    usage_logger.log_stats("sample", summary)
    print(f"Wrote {out / 'samples.csv'}: {summary}")
    return EXIT_OK


def cmd_generate(args) -> int:
    config = load_config(args.config)
    dataset = generate_problem(config.problem)
    ingester.write_csv(dataset, args.csv)
    print(f"Wrote {dataset.n_rows} rows ({len(dataset.id_rows)} ID, {len(dataset.ood_rows)} OOD) to {args.csv}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coevo", description="Co-evolve equations and reusable knowledge")
    parser.add_argument("--log-level", default="INFO", help="DEBUG logs full prompts and responses")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run the search for a config file")
    run.add_argument("config")
    run.add_argument("--resume", action="store_true", help="continue from the run's latest checkpoint")
    run.add_argument("--output", help="run directory (overrides output.directory)")
    run.set_defaults(handler=cmd_run)

    report = commands.add_parser("report", help="write CSV series, summary and figures for a run")
    report.add_argument("run_dir")
    report.add_argument("--window", help="knowledge snapshot over generations START:END")
    report.add_argument("--no-figures", action="store_true")
    report.set_defaults(handler=cmd_report)

    replay = commands.add_parser("replay", help="re-execute a run from its transcript")
    replay.add_argument("run_dir")
    replay.add_argument("--strict", action="store_true", help="also require identical prompts")
    replay.set_defaults(handler=cmd_replay)

    sample = commands.add_parser("sample", help="independent samples against a fixed library")
    sample.add_argument("config")
    sample.add_argument("--library", help="run directory whose final library is used")
    sample.add_argument("--count", type=int, default=10)
    sample.add_argument("--output", help="directory for samples.csv")
    sample.set_defaults(handler=cmd_sample)

    generate = commands.add_parser("generate", help="write the configured dataset as CSV")
    generate.add_argument("config")
    generate.add_argument("csv")
    generate.set_defaults(handler=cmd_generate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    usage_logger.configure(args.log_level)
    try:
        return args.handler(args)
    except (ConfigError, MissingRun, EvaluationError) as error:
        usage_logger.log_error(type(error).__name__, str(error))
        print(f"error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except (GatewayError, EmbeddingError) as error:
        usage_logger.log_error(type(error).__name__, str(error))
        print(f"backend error: {error}", file=sys.stderr)
        return EXIT_BACKEND
    except CoEvoError as error:
        usage_logger.log_error(type(error).__name__, str(error))
        print(f"error: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
