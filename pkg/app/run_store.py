"""On-disk layout of one run: config snapshot, dataset, checkpoints, logs, transcript.

    <run>/config.ini                resolved config snapshot
    <run>/dataset.csv, dataset.json data and its sidecar (target, time order, units)
    <run>/state.json                latest checkpoint
    <run>/checkpoints/generation_NNNN.json
    <run>/solutions.jsonl           every materialized candidate, in phase order
    <run>/library_history.jsonl     library record after each phase
    <run>/transcript.sqlite         request/response transcript
"""

import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

from .config import write_resolved
from .db import TranscriptStore
from .engine import RunState
from .errors import MissingRun
from .evaluation import Dataset, ingester
from .knowledge import LibraryRecord
from .llm_gateway import Transcript
from .solution import Solution

logger = logging.getLogger(__name__)


def _write_atomic(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, 'w', encoding='utf-8') as f:
        f.write(text)
    os.replace(tmp, path)


def _keep_lines(path: Path, keep) -> int:
    if not path.exists():
        return 0
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line for line in f if line.strip()]
    kept = [line for index, line in enumerate(lines) if keep(index, line)]
    _write_atomic(path, "".join(kept))
    return len(lines) - len(kept)


class RunDirectory:
    """Implements the engine's recorder: every finished phase lands here in one step."""

    def __init__(self, path: Union[str, Path], transcript: Optional[Transcript] = None):
        self.path = Path(path)
        self.transcript = transcript
        self._store: Optional[TranscriptStore] = None

    @property
    def config_path(self) -> Path:
        return self.path / "config.ini"

    @property
    def state_path(self) -> Path:
        return self.path / "state.json"

    @property
    def checkpoint_dir(self) -> Path:
        return self.path / "checkpoints"

    @property
    def solutions_path(self) -> Path:
        return self.path / "solutions.jsonl"

    @property
    def library_path(self) -> Path:
        return self.path / "library_history.jsonl"

    @property
    def dataset_path(self) -> Path:
        return self.path / "dataset.csv"

    @property
    def dataset_meta_path(self) -> Path:
        return self.path / "dataset.json"

    def has_state(self) -> bool:
        return self.state_path.exists()

    def require(self):
        if not self.has_state():
            raise MissingRun(f"no run state in {self.path}")

    def transcript_store(self) -> TranscriptStore:
        if self._store is None:
            self.path.mkdir(parents=True, exist_ok=True)
            self._store = TranscriptStore.for_run(self.path)
        return self._store

    def open_transcript(self) -> Transcript:
        self.transcript = Transcript(self.transcript_store())
        return self.transcript

    def prepare(self, config_path: str, dataset: Dataset):
        """Lay out a fresh run: config snapshot, dataset and its sidecar."""
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        write_resolved(config_path, self.config_path)
        ingester.write_csv(dataset, str(self.dataset_path))
        meta = {
            "name": dataset.name,
            "target": dataset.target,
            "time_ordered": dataset.time_ordered,
            "time_column": dataset.time_column,
            "description": dataset.description,
            "units": dataset.units,
        }
        _write_atomic(self.dataset_meta_path, json.dumps(meta, indent=2))
        for path in (self.solutions_path, self.library_path):
            path.write_text("", encoding="utf-8")
        logger.info(f"Prepared run directory {self.path}")

    def load_dataset(self) -> Dataset:
        if not self.dataset_meta_path.exists():
            raise MissingRun(f"no dataset sidecar in {self.path}")
        with open(self.dataset_meta_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        dataset, stats = ingester.ingest_csv(
            str(self.dataset_path),
            target=meta["target"],
            name=meta.get("name"),
            time_ordered=meta.get("time_ordered", False),
            time_column=meta.get("time_column") or "t",
        )
        if stats["errors"]:
            logger.warning(f"{len(stats['errors'])} dataset rows skipped in {self.dataset_path}")
        return replace(dataset, description=meta.get("description", ""), units=meta.get("units", {}))

    def record(self, state: RunState, solutions: List[Solution]):
        """Append the phase's logs, flush the transcript, then checkpoint."""
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        with open(self.solutions_path, 'a', encoding='utf-8') as f:
            for solution in solutions:
                f.write(solution.model_dump_json() + "\n")
        with open(self.library_path, 'a', encoding='utf-8') as f:
            f.write(json.dumps({
                "generation": state.generation,
                "library": json.loads(state.library.model_dump_json()),
            }) + "\n")
        if self.transcript is not None:
            self.transcript.flush()

        payload = state.model_dump_json()
        _write_atomic(self.checkpoint_dir / f"generation_{state.generation:04d}.json", payload)
        _write_atomic(self.state_path, payload)
        logger.info(f"Checkpoint written for generation {state.generation}")

    def load_state(self, generation: Optional[int] = None) -> RunState:
        if generation is None:
            self.require()
            path = self.state_path
        else:
            path = self.checkpoint_dir / f"generation_{generation:04d}.json"
            if not path.exists():
                raise MissingRun(f"no checkpoint for generation {generation} in {self.path}")
        with open(path, 'r', encoding='utf-8') as f:
            return RunState.model_validate_json(f.read())

    def checkpoints(self) -> List[int]:
        if not self.checkpoint_dir.exists():
            return []
        return sorted(int(p.stem.split("_")[1]) for p in self.checkpoint_dir.glob("generation_*.json"))

    def rewind(self, state: RunState):
        """Drop log lines and transcript entries written after `state` was checkpointed."""
        dropped = _keep_lines(self.solutions_path, lambda index, line: index < state.solutions_logged)
        dropped += _keep_lines(
            self.library_path, lambda index, line: json.loads(line)["generation"] <= state.generation
        )
        if self.transcript is not None:
            self.transcript.truncate(state.transcript_length)
        if dropped:
            logger.info(f"Dropped {dropped} log lines written after generation {state.generation}")

    def read_solutions(self) -> List[Solution]:
        if not self.solutions_path.exists():
            return []
        with open(self.solutions_path, 'r', encoding='utf-8') as f:
            return [Solution.model_validate_json(line) for line in f if line.strip()]

    def read_library_history(self) -> List[Tuple[int, LibraryRecord]]:
        if not self.library_path.exists():
            return []
        history = []
        with open(self.library_path, 'r', encoding='utf-8') as f:
            for line in f:
                if line.strip():
                    entry = json.loads(line)
                    history.append((entry["generation"], LibraryRecord.model_validate(entry["library"])))
        return history

    def close(self):
        if self._store is not None:
            self._store.close()
