"""Idea-tree generation of one solution: inspire, think, solve."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

from pydantic import BaseModel, Field, field_validator

from .embeddings import Embedding, mean_direction
from .errors import EmptyText, MissingMathBlock, ResponseRejected
from .evaluation import Dataset
from .knowledge import KnowledgeLibrary, KnowledgePiece, describe_solution, summarize_improvement
from .llm_gateway import ChatRequest, LLMGateway, extract_blocks, parse_fences
from .prompt_book import PromptBook
from .solution import Evaluator, Lineage, Operator, RawGeneration, Solution, rank

logger = logging.getLogger(__name__)

NO_FEEDBACK = "No candidate has been evaluated yet."
NO_KNOWLEDGE = "(none yet)"
REJECTED_IDEA = "(the model returned no usable idea)"


class TreeConfig(BaseModel):
    widths: List[int] = Field(default_factory=lambda: [3, 2])
    reuse_k: int = Field(default=2, ge=1)
    concurrent: bool = False
    max_workers: int = Field(default=4, ge=1)

    @field_validator("widths")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if not value or any(width < 1 for width in value):
            raise ValueError("widths must be a non-empty list of positive integers")
        return value

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def requests_per_call(self) -> int:
        """Generation requests of one call, summaries excluded."""
        return sum(self.widths) + self.widths[-1]


class IdeaNode(BaseModel):
    id: str
    level: int
    text: str
    embedding: List[float]
    parents: List[str] = Field(default_factory=list)
    feedback: Optional[str] = None
    candidate_id: Optional[str] = None


class TaskContext(BaseModel):
    """What one generate_solution call needs to know about the task and its parents."""

    problem: str
    variables: str
    operator: Operator = "init"
    parents: List[Solution] = Field(default_factory=list)
    call_prefix: str = "s"
    born_at: int = 0
    time_ordered: bool = False


class GenerationResult(BaseModel):
    solution: Solution
    candidates: List[Solution]
    pieces: List[KnowledgePiece]
    nodes: List[IdeaNode]
    requests: int
    used_knowledge: bool


def describe_variables(dataset: Dataset) -> str:
    def label(name: str) -> str:
        unit = dataset.units.get(name)
        return f"{name} ({unit})" if unit else name

    lines = [f"- {label(name)}" for name in dataset.feature_names]
    lines.append(f"Target: {label(dataset.target)}")
    return "\n".join(lines)


def format_knowledge(pieces: Sequence[KnowledgePiece]) -> str:
    if not pieces:
        return NO_KNOWLEDGE
    return "\n".join(f"- {p.definition}: {p.description}" if p.description else f"- {p.definition}" for p in pieces)


def format_parents(parents: Sequence[Solution]) -> str:
    blocks = []
    for parent in parents:
        score = f"{parent.score:.6g}" if math.isfinite(parent.score) else "invalid"
        blocks.append(f"Solution {parent.id} (NMSE {score}):\n{describe_solution(parent)}")
    return "\n\n".join(blocks)


def round_robin_parents(j: int, width: int, previous: int) -> List[int]:
    """Indices of level k-1 nodes feeding node j of a level with `width` nodes."""
    indices = [i for i in range(previous) if i % width == j]
    return indices or [j % previous]


class _TreeCall:
    """State of one generate_solution call."""

    def __init__(self, context: TaskContext, library: KnowledgeLibrary, config: TreeConfig,
                 gateway: LLMGateway, evaluator: Evaluator, embedder, prompts: PromptBook):
        self.context = context
        self.library = library
        self.config = config
        self.gateway = gateway
        self.evaluator = evaluator
        self.embedder = embedder
        self.prompts = prompts

        self.requests = 0
        self.used_knowledge = False
        self.nodes: List[IdeaNode] = []
        self.candidates: List[Solution] = []
        self.pieces: List[KnowledgePiece] = []
        self.best: Optional[Solution] = None
        valid_parents = [p for p in rank(context.parents) if p.valid]
        # Improvement reference: best parent for offspring, best candidate so far for init
        self.reference: Optional[Solution] = valid_parents[0] if valid_parents else None
        if context.parents:
            self.lineage = Lineage(parents=[p.id for p in context.parents], operator=context.operator)
        else:
            self.lineage = Lineage()
        self.common = {
            "problem": context.problem,
            "variables": context.variables,
            "idea_format": prompts.render("idea_format"),
            "format_contract": prompts.render(
                "format_contract",
                extra_functions=", grad1 (time derivative of its argument)" if context.time_ordered else "",
            ),
        }

    def _send(self, requests: List[ChatRequest]) -> List[Optional[str]]:
        """Responses in request order; None for a rejected response."""
        def call(request: ChatRequest) -> Optional[str]:
            try:
                return self.gateway.complete(request)
            except ResponseRejected as error:
                logger.warning(f"{request.tag} response rejected: {error}")
                return None

        self.requests += len(requests)
        if self.config.concurrent and len(requests) > 1:
            with ThreadPoolExecutor(max_workers=self.config.max_workers) as executor:
                return list(executor.map(call, requests))
        return [call(request) for request in requests]

    def _embed(self, text: str) -> Embedding:
        try:
            return self.embedder.embed(text)
        except EmptyText:
            return self.embedder.embed(self.context.problem)

    def _materialize(self, raw: RawGeneration) -> Solution:
        candidate_id = f"{self.context.call_prefix}.{len(self.candidates)}"
        candidate = self.evaluator.materialize(raw, candidate_id, self.lineage, self.context.born_at)
        self.candidates.append(candidate)

        reference = self.reference
        if (reference is not None and candidate.valid and math.isfinite(reference.score)
                and candidate.score < reference.score):
            piece = summarize_improvement(
                reference, candidate, self.gateway, self.embedder, self.prompts,
                problem=self.context.problem, iteration=self.context.born_at,
            )
            if piece is not None:
                self.pieces.append(piece)
        if reference is None or candidate.sort_key() < reference.sort_key():
            self.reference = candidate
        if self.best is None or candidate.sort_key() < self.best.sort_key():
            self.best = candidate
        return candidate

    def _feedback(self) -> Optional[str]:
        if self.best is None:
            return None
        return self.evaluator.feedback(self.best)

    def _add_idea(self, node_id: str, level: int, response: Optional[str],
                  parents: List[str], feedback: Optional[str]) -> IdeaNode:
        blocks = parse_fences(response or "")
        text = blocks.get("idea") or (response or "").strip() or REJECTED_IDEA
        candidate_id = None
        if blocks.get("math"):
            raw = RawGeneration(idea_text=text, math_text=blocks["math"], program_text=blocks.get("code", ""))
            candidate_id = self._materialize(raw).id
        node = IdeaNode(
            id=node_id,
            level=level,
            text=text,
            embedding=self._embed(text).to_list(),
            parents=parents,
            feedback=feedback,
            candidate_id=candidate_id,
        )
        self.nodes.append(node)
        return node

    def inspire(self) -> List[IdeaNode]:
        knowledge = self.library.reuse_random()
        self.used_knowledge = bool(knowledge)
        if self.context.operator == "init":
            template, tag = "inspire", "inspire"
        else:
            template = self.context.operator
            tag = "crossover" if template.endswith("crossover") else "mutation"

        width = self.config.widths[0]
        requests = [
            self.prompts.request(
                template,
                tag=tag,
                knowledge=format_knowledge(knowledge),
                parents=format_parents(self.context.parents),
                count=str(width),
                index=str(j + 1),
                **self.common,
            )
            for j in range(width)
        ]
        responses = self._send(requests)
        return [self._add_idea(f"n0.{j}", 0, response, [], None) for j, response in enumerate(responses)]

    def think(self, level: int, previous: List[IdeaNode]) -> List[IdeaNode]:
        width = self.config.widths[level]
        feedback = self._feedback()
        requests, parent_ids = [], []
        for j in range(width):
            chosen = [previous[i] for i in round_robin_parents(j, width, len(previous))]
            query = mean_direction([Embedding(node.embedding) for node in chosen])
            related = self.library.reuse_similar(query, self.config.reuse_k) if len(self.library) else []
            parent_ids.append([node.id for node in chosen])
            requests.append(self.prompts.request(
                "think",
                tag="think",
                parents="\n\n".join(f"Idea {node.id}: {node.text}" for node in chosen),
                knowledge=format_knowledge(related),
                feedback=feedback or NO_FEEDBACK,
                **self.common,
            ))
        responses = self._send(requests)
        return [
            self._add_idea(f"n{level}.{j}", level, response, parent_ids[j], feedback)
            for j, response in enumerate(responses)
        ]

    def solve(self, final: List[IdeaNode]):
        feedback = self._feedback()
        requests = [
            self.prompts.request(
                "solve",
                tag="solve",
                parents=node.text,
                feedback=feedback or NO_FEEDBACK,
                **self.common,
            )
            for node in final
        ]
        for node, response in zip(final, self._send(requests)):
            if response is None:
                raw = RawGeneration(idea_text=node.text, extraction_error="ResponseRejected: unusable response")
            else:
                try:
                    raw = extract_blocks(response)
                except MissingMathBlock as error:
                    raw = RawGeneration(idea_text=node.text, extraction_error=f"MissingMathBlock: {error}")
            if not raw.idea_text:
                raw = raw.model_copy(update={"idea_text": node.text})
            self._materialize(raw)

    def run(self) -> GenerationResult:
        level_nodes = self.inspire()
        for level in range(1, self.config.depth + 1):
            level_nodes = self.think(level, level_nodes)
        self.solve(level_nodes)
        return GenerationResult(
            solution=self.best,
            candidates=self.candidates,
            pieces=self.pieces,
            nodes=self.nodes,
            requests=self.requests,
            used_knowledge=self.used_knowledge,
        )


def generate_solution(
    context: TaskContext,
    library: KnowledgeLibrary,
    config: TreeConfig,
    gateway: LLMGateway,
    evaluator: Evaluator,
    embedder,
    prompts: Optional[PromptBook] = None,
) -> GenerationResult:
    """Generate one solution through an idea tree and collect the knowledge it produced.

    Returns the best candidate by rank (an invalid one if nothing scored). Every strict
    improvement over the running reference yields one summarize request. Pieces are
    returned for the caller to insert.
    """
    call = _TreeCall(context, library, config, gateway, evaluator, embedder, prompts or PromptBook())
    result = call.run()
    logger.debug(
        f"{context.call_prefix}: {len(result.candidates)} candidates, best {result.solution.score:.6g}, "
        f"{len(result.pieces)} pieces, {result.requests} generation requests"
    )
    return result
