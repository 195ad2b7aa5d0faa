"""The knowledge library: summarized improvements, deduplicated, capped and clustered."""

import logging
import math
import threading
from typing import List, Literal, Optional, Sequence

from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator

from .embeddings import (
    NOISE,
    Clustering,
    Embedding,
    cluster_dbscan,
    cluster_threshold,
    cosine,
)
from .errors import EmbeddingError, EmptyText, ResponseRejected
from .llm_gateway import SUMMARY_TEMPERATURE, LLMGateway, parse_fences
from .prompt_book import PromptBook
from .rng import stream
from .solution import Solution
from .usage_logger import usage_logger

logger = logging.getLogger(__name__)

MAX_DEFINITION_CHARS = 200
MAX_DESCRIPTION_CHARS = 2000


class KnowledgeSource(BaseModel):
    solution_id: str
    iteration: int
    score_before: float
    score_after: float


class KnowledgePiece(BaseModel):
    id: str
    definition: str = Field(min_length=1, max_length=MAX_DEFINITION_CHARS)
    description: str = Field(default="", max_length=MAX_DESCRIPTION_CHARS)
    embedding: List[float]
    source: KnowledgeSource
    uses: int = 0
    inserted_at: int = 0

    _vector: Optional[Embedding] = PrivateAttr(default=None)

    @field_validator("embedding")
    @classmethod
    def _usable_embedding(cls, value: List[float]) -> List[float]:
        try:
            Embedding(value)
        except EmbeddingError as error:
            raise ValueError(str(error)) from error
        return value

    @model_validator(mode="after")
    def _improvement_only(self) -> "KnowledgePiece":
        before, after = self.source.score_before, self.source.score_after
        if not (math.isfinite(before) and after < before):
            raise ValueError("knowledge comes only from a strict improvement over a finite score")
        return self

    @property
    def vector(self) -> Embedding:
        if self._vector is None:
            self._vector = Embedding(self.embedding)
        return self._vector

    @property
    def improvement(self) -> float:
        return self.source.score_before - self.source.score_after

    @property
    def text(self) -> str:
        return f"{self.definition}: {self.description}" if self.description else self.definition


class AdmissionReport(BaseModel):
    action: Literal["added", "merged"]
    piece_id: str
    merged_into: Optional[str] = None
    evicted: List[str] = Field(default_factory=list)


class LibraryRecord(BaseModel):
    """Serializable library state; clustering is recomputed on load."""

    pieces: List[KnowledgePiece] = Field(default_factory=list)
    capacity: int = 30
    tau: float = 0.85
    dedup_threshold: float = 0.95
    seed: int = 0
    reuse_counter: int = 0
    insert_counter: int = 0


class SnapshotRecord(BaseModel):
    id: str
    definition: str
    cluster: int
    improvement: float
    uses: int
    solution_id: str
    iteration: int


class LibrarySnapshot(BaseModel):
    clustering: Clustering
    records: List[SnapshotRecord] = Field(default_factory=list)


def snapshot_pieces(pieces: Sequence[KnowledgePiece], eps: float = 0.3, min_pts: int = 2) -> LibrarySnapshot:
    """DBSCAN view over any set of pieces (one library state or a window of them)."""
    clustering = cluster_dbscan([(p.id, p.vector) for p in pieces], eps=eps, min_pts=min_pts)
    records = [
        SnapshotRecord(
            id=p.id,
            definition=p.definition,
            cluster=label,
            improvement=p.improvement,
            uses=p.uses,
            solution_id=p.source.solution_id,
            iteration=p.source.iteration,
        )
        for p, label in zip(pieces, clustering.labels)
    ]
    return LibrarySnapshot(clustering=clustering, records=records)


class KnowledgeLibrary:
    """Capacity-bounded store of knowledge pieces with random and similarity reuse.

    Mutations (insert, use-count bumps) hold the library lock. The threshold
    clustering always covers exactly the current pieces.
    """

    def __init__(
        self,
        capacity: int = 30,
        tau: float = 0.85,
        dedup_threshold: float = 0.95,
        seed: int = 0,
    ):
        self.capacity = capacity
        self.tau = tau
        self.dedup_threshold = dedup_threshold
        self.seed = seed
        self.pieces: List[KnowledgePiece] = []
        self.reuse_counter = 0
        self.insert_counter = 0
        self.clustering = Clustering(method="threshold", params={"tau": tau})
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def ids(self) -> List[str]:
        return [p.id for p in self.pieces]

    def _recluster(self):
        self.clustering = cluster_threshold([(p.id, p.vector) for p in self.pieces], tau=self.tau)

    def insert(self, piece: KnowledgePiece) -> AdmissionReport:
        """Merge into a near-duplicate or append, then evict down to capacity."""
        with self._lock:
            piece = piece.model_copy(update={"inserted_at": self.insert_counter})
            self.insert_counter += 1

            report = None
            if self.pieces:
                similarities = [cosine(piece.vector, p.vector) for p in self.pieces]
                best = max(range(len(self.pieces)), key=lambda i: (similarities[i], -i))
                if similarities[best] >= self.dedup_threshold:
                    existing = self.pieces[best]
                    keep = piece if piece.improvement > existing.improvement else existing
                    self.pieces[best] = keep.model_copy(update={"uses": existing.uses + piece.uses})
                    report = AdmissionReport(action="merged", piece_id=piece.id, merged_into=existing.id)
            if report is None:
                self.pieces.append(piece)
                report = AdmissionReport(action="added", piece_id=piece.id)

            self._recluster()
            while len(self.pieces) > self.capacity:
                victim = self._eviction_candidate()
                self.pieces = [p for p in self.pieces if p.id != victim.id]
                report.evicted.append(victim.id)
                self._recluster()

        usage_logger.log_knowledge(report.action, piece.id, piece.definition, piece.improvement, len(self.pieces))
        for evicted in report.evicted:
            logger.info(f"Evicted knowledge piece {evicted}")
        return report

    def _eviction_candidate(self) -> KnowledgePiece:
        """Smallest improvement (then oldest) inside the largest cluster (then lowest label)."""
        groups = self.clustering.groups()
        largest = max(range(len(groups)), key=lambda label: (len(groups[label]), -label))
        members = set(groups[largest])
        candidates = [p for p in self.pieces if p.id in members]
        return min(candidates, key=lambda p: (p.improvement, p.inserted_at))

    def _bump(self, chosen: List[KnowledgePiece]) -> List[KnowledgePiece]:
        chosen_ids = {p.id for p in chosen}
        for index, p in enumerate(self.pieces):
            if p.id in chosen_ids:
                self.pieces[index] = p.model_copy(update={"uses": p.uses + 1})
        by_id = {p.id: p for p in self.pieces}
        return [by_id[p.id] for p in chosen]

    def reuse_random(self) -> List[KnowledgePiece]:
        """One random piece per cluster, in random order."""
        with self._lock:
            rng = stream(self.seed, "reuse_random", self.reuse_counter)
            self.reuse_counter += 1
            by_id = {p.id: p for p in self.pieces}
            chosen = [by_id[rng.choice(members)] for members in self.clustering.groups()]
            rng.shuffle(chosen)
            return self._bump(chosen)

    def reuse_similar(self, query: Embedding, k: int) -> List[KnowledgePiece]:
        """Top-k pieces by cosine to the query; ties go to the smaller id."""
        if k < 1:
            raise ValueError("k must be at least 1")
        with self._lock:
            ranked = sorted(self.pieces, key=lambda p: (-cosine(query, p.vector), p.id))
            return self._bump(ranked[:k])

    def snapshot(self, eps: float = 0.3, min_pts: int = 2) -> LibrarySnapshot:
        with self._lock:
            return snapshot_pieces(list(self.pieces), eps=eps, min_pts=min_pts)

    def cluster_of(self, piece_id: str) -> int:
        return self.clustering.assignments.get(piece_id, NOISE)

    def to_record(self) -> LibraryRecord:
        with self._lock:
            return LibraryRecord(
                pieces=[p.model_copy() for p in self.pieces],
                capacity=self.capacity,
                tau=self.tau,
                dedup_threshold=self.dedup_threshold,
                seed=self.seed,
                reuse_counter=self.reuse_counter,
                insert_counter=self.insert_counter,
            )

    @classmethod
    def from_record(cls, record: LibraryRecord) -> "KnowledgeLibrary":
        library = cls(
            capacity=record.capacity,
            tau=record.tau,
            dedup_threshold=record.dedup_threshold,
            seed=record.seed,
        )
        library.pieces = [p.model_copy() for p in record.pieces]
        library.reuse_counter = record.reuse_counter
        library.insert_counter = record.insert_counter
        library._recluster()
        return library

    def copy(self) -> "KnowledgeLibrary":
        return KnowledgeLibrary.from_record(self.to_record())


def describe_solution(solution: Solution) -> str:
    lines = []
    if solution.idea_text:
        lines.append(f"Idea: {solution.idea_text}")
    lines.append(f"Equation: {solution.canonical or solution.math_text or '(none)'}")
    return "\n".join(lines)


def summarize_improvement(
    parent: Solution,
    child: Solution,
    gateway: LLMGateway,
    embedder,
    prompts: PromptBook,
    problem: str,
    iteration: int,
) -> Optional[KnowledgePiece]:
    """Ask the backend why `child` beats `parent`; None if the answer is unusable.

    Callers only invoke this on a strict improvement over a finite parent score.
    """
    if not (child.valid and math.isfinite(parent.score) and child.score < parent.score):
        raise ValueError("summaries are only drawn from strict improvements")

    request = prompts.request(
        "summarize",
        tag="summarize",
        temperature=SUMMARY_TEMPERATURE,
        problem=problem,
        before=describe_solution(parent),
        after=describe_solution(child),
        score_before=f"{parent.score:.6g}",
        score_after=f"{child.score:.6g}",
    )
    try:
        response = gateway.complete(request)
    except ResponseRejected as error:
        logger.warning(f"Summary for {child.id} rejected: {error}")
        return None

    blocks = parse_fences(response)
    definition = " ".join(blocks.get("definition", "").split())
    description = blocks.get("description", "").strip()
    if not definition:
        logger.warning(f"Summary for {child.id} has no definition block; knowledge dropped")
        return None

    definition = definition[:MAX_DEFINITION_CHARS]
    description = description[:MAX_DESCRIPTION_CHARS]
    try:
        vector = embedder.embed(f"{definition}\n{description}")
    except EmptyText:
        logger.warning(f"Summary for {child.id} has nothing to embed; knowledge dropped")
        return None

    return KnowledgePiece(
        id=f"k-{child.id}",
        definition=definition,
        description=description,
        embedding=vector.to_list(),
        source=KnowledgeSource(
            solution_id=child.id,
            iteration=iteration,
            score_before=parent.score,
            score_after=child.score,
        ),
    )
