"""The evolutionary loop: initialization, offspring generation, population update."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Protocol, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .evaluation import Dataset
from .expression import FitBudget
from .idea_tree import GenerationResult, TaskContext, TreeConfig, describe_variables, generate_solution
from .knowledge import KnowledgeLibrary, KnowledgePiece, LibraryRecord
from .llm_gateway import LLMGateway
from .prompt_book import PromptBook
from .rng import stream
from .solution import OPERATORS, Evaluator, Operator, Solution, rank
from .usage_logger import usage_logger

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

DEFAULT_OPERATOR_MIX = {
    "pos_crossover": 0.35,
    "neg_crossover": 0.15,
    "pos_mutation": 0.35,
    "neg_mutation": 0.15,
}


class EngineConfig(BaseModel):
    population_size: int = Field(default=10, ge=1)
    generations: int = Field(default=100, ge=0)
    samples_per_generation: int = Field(default=20, ge=1)
    operator_mix: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_OPERATOR_MIX))
    seed: int = 0
    tree: TreeConfig = Field(default_factory=TreeConfig)
    fit: FitBudget = Field(default_factory=FitBudget)
    library_capacity: int = Field(default=30, ge=1)
    cluster_tau: float = Field(default=0.85, gt=0, lt=1)
    dedup_threshold: float = Field(default=0.95, gt=0, le=1)
    immediate_knowledge_insert: bool = False
    concurrent_offspring: bool = False
    max_workers: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _consistent(self) -> "EngineConfig":
        unknown = set(self.operator_mix) - set(OPERATORS)
        if unknown:
            raise ValueError(f"unknown operator(s) in operator_mix: {', '.join(sorted(unknown))}")
        if any(p < 0 for p in self.operator_mix.values()):
            raise ValueError("operator probabilities must be non-negative")
        if abs(sum(self.operator_mix.values()) - 1.0) > 1e-9:
            raise ValueError("operator probabilities must sum to 1")
        crossover = sum(self.operator_mix.get(op, 0.0) for op in ("pos_crossover", "neg_crossover"))
        if crossover > 0 and self.population_size < 2:
            raise ValueError("crossover needs population_size >= 2")
        if self.immediate_knowledge_insert and self.concurrent_offspring:
            raise ValueError("immediate knowledge insertion requires sequential offspring")
        return self

    @property
    def total_samples(self) -> int:
        return self.generations * self.samples_per_generation

    def new_library(self) -> KnowledgeLibrary:
        return KnowledgeLibrary(
            capacity=self.library_capacity,
            tau=self.cluster_tau,
            dedup_threshold=self.dedup_threshold,
            seed=self.seed,
        )


class BestPoint(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    iteration: int
    samples: int
    best_nmse: float


class ValidPoint(BaseModel):
    generation: int
    valid_ratio: float
    valid: int
    total: int


class OffspringPoint(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    sample: int
    generation: int
    solution_id: str
    operator: Operator
    score: float
    used_knowledge: bool


class RunState(BaseModel):
    """Everything needed to continue a run; serialized as one checkpoint record."""

    model_config = ConfigDict(extra="ignore", ser_json_inf_nan="constants")

    format_version: int = FORMAT_VERSION
    generation: int = 0
    iteration: int = 0
    samples: int = 0
    population: List[Solution] = Field(default_factory=list)
    library: LibraryRecord = Field(default_factory=LibraryRecord)
    best_series: List[BestPoint] = Field(default_factory=list)
    valid_series: List[ValidPoint] = Field(default_factory=list)
    offspring_series: List[OffspringPoint] = Field(default_factory=list)
    gateway_state: Dict = Field(default_factory=dict)
    transcript_length: int = 0
    solutions_logged: int = 0

    @property
    def best(self) -> Optional[Solution]:
        return self.population[0] if self.population else None

    @property
    def best_score(self) -> float:
        return self.best.score if self.best else math.inf

    @property
    def offspring_count(self) -> int:
        return len(self.offspring_series)


class RunRecorder(Protocol):
    """Persists what a finished phase produced (solution log, library, checkpoint)."""

    def record(self, state: RunState, solutions: List[Solution]) -> None: ...


class Engine:
    """Owns the collaborators of a run and drives it generation by generation."""

    def __init__(
        self,
        config: EngineConfig,
        dataset: Dataset,
        gateway: LLMGateway,
        embedder,
        prompts: Optional[PromptBook] = None,
        recorder: Optional[RunRecorder] = None,
    ):
        self.config = config
        self.dataset = dataset
        self.gateway = gateway
        self.embedder = embedder
        self.prompts = prompts or PromptBook()
        self.recorder = recorder
        self.evaluator = Evaluator(dataset, config.fit, seed=config.seed)
        self.variables = describe_variables(dataset)

    def _context(self, operator: Operator, parents: List[Solution], prefix: str, born_at: int) -> TaskContext:
        return TaskContext(
            problem=self.dataset.description or f"Find an equation for {self.dataset.target}.",
            variables=self.variables,
            operator=operator,
            parents=parents,
            call_prefix=prefix,
            born_at=born_at,
            time_ordered=self.dataset.time_ordered,
        )

    def _generate(self, library: KnowledgeLibrary, context: TaskContext) -> GenerationResult:
        return generate_solution(context, library, self.config.tree, self.gateway,
                                 self.evaluator, self.embedder, self.prompts)

    def _insert(self, library: KnowledgeLibrary, pieces: List[KnowledgePiece]):
        for piece in pieces:
            library.insert(piece)

    def _sync(self, state: RunState, library: KnowledgeLibrary) -> RunState:
        return state.model_copy(update={
            "library": library.to_record(),
            "gateway_state": self.gateway.state(),
            "transcript_length": len(self.gateway.transcript),
        })

    def _record(self, state: RunState, solutions: List[Solution]) -> RunState:
        state = state.model_copy(update={"solutions_logged": state.solutions_logged + len(solutions)})
        if self.recorder is not None:
            self.recorder.record(state, solutions)
        return state

    def initialize(self, library: Optional[KnowledgeLibrary] = None) -> RunState:
        """N independent init calls. A non-empty library is used for inspiration."""
        library = library.copy() if library is not None else self.config.new_library()
        if len(library):
            logger.info(f"Continual mode: starting from a library of {len(library)} pieces")

        state = RunState()
        population, logged, pending = [], [], []
        iteration = 0
        for k in range(self.config.population_size):
            result = self._generate(library, self._context("init", [], f"i{k:03d}", born_at=k))
            iteration += result.requests
            population.append(result.solution)
            logged.extend(result.candidates)
            if self.config.immediate_knowledge_insert:
                self._insert(library, result.pieces)
            else:
                pending.extend(result.pieces)
        self._insert(library, pending)

        population = rank(population)
        best = population[0].score
        state = state.model_copy(update={
            "iteration": iteration,
            "samples": len(population),
            "population": population,
            "best_series": [BestPoint(iteration=iteration, samples=len(population), best_nmse=best)],
        })
        state = self._sync(state, library)
        usage_logger.log_generation(0, best, None, len(library), state.samples)
        return self._record(state, logged)

    def sample(self, library: KnowledgeLibrary, count: int) -> List[GenerationResult]:
        """Independent init calls against a fixed library; nothing is inserted."""
        library = library.copy()
        return [self._generate(library, self._context("init", [], f"sample{k:04d}", born_at=k))
                for k in range(count)]

    def _draw_operator(self, rng) -> Operator:
        draw = rng.random()
        cumulative = 0.0
        last = None
        for operator in OPERATORS:
            probability = self.config.operator_mix.get(operator, 0.0)
            if probability <= 0:
                continue
            cumulative += probability
            last = operator
            if draw < cumulative:
                return operator
        return last

    @staticmethod
    def _tournament(population: List[Solution], rng) -> Solution:
        if len(population) == 1:
            return population[0]
        a, b = rng.sample(range(len(population)), 2)
        return min(population[a], population[b], key=Solution.sort_key)

    def _select_parents(self, operator: Operator, population: List[Solution], rng) -> List[Solution]:
        first = self._tournament(population, rng)
        if operator.endswith("mutation"):
            return [first]
        rest = [p for p in population if p.id != first.id]
        return [first, self._tournament(rest, rng)]

    def plan_generation(self, state: RunState) -> List[Tuple[Operator, List[Solution]]]:
        """Operators and parents for every offspring of the next generation."""
        rng = stream(self.config.seed, "generation", state.generation + 1)
        plan = []
        for _ in range(self.config.samples_per_generation):
            operator = self._draw_operator(rng)
            plan.append((operator, self._select_parents(operator, state.population, rng)))
        return plan

    def step_generation(self, state: RunState) -> RunState:
        """One generation. On a backend failure the exception propagates and `state` is untouched."""
        generation = state.generation + 1
        library = KnowledgeLibrary.from_record(state.library)
        plan = self.plan_generation(state)
        contexts = [
            self._context(operator, parents, f"g{generation:04d}-{s:03d}", born_at=state.samples + s)
            for s, (operator, parents) in enumerate(plan)
        ]

        if self.config.concurrent_offspring and len(contexts) > 1:
            with ThreadPoolExecutor(max_workers=self.config.max_workers) as executor:
                results: List[Optional[GenerationResult]] = list(
                    executor.map(lambda c: self._generate(library, c), contexts)
                )
        else:
            results = [None] * len(contexts)

        seen = {self._dedup_key(p) for p in state.population} - {None}
        iteration, best = state.iteration, state.best_score
        best_series = list(state.best_series)
        offspring_series = list(state.offspring_series)
        offspring, logged, pending = [], [], []
        for s, context in enumerate(contexts):
            result = results[s] or self._generate(library, context)
            iteration += result.requests
            logged.extend(result.candidates)
            pieces = list(result.pieces)
            key = self._dedup_key(result.solution)
            if key is not None and key in seen:
                logger.debug(f"{context.call_prefix}: duplicate of an existing solution, regenerating")
                retry = self._generate(library, context.model_copy(update={"call_prefix": context.call_prefix + "r"}))
                iteration += retry.requests
                logged.extend(retry.candidates)
                pieces.extend(retry.pieces)
                result = retry
            child = result.solution
            key = self._dedup_key(child)
            if key is not None:
                seen.add(key)
            offspring.append(child)

            if self.config.immediate_knowledge_insert:
                self._insert(library, pieces)
            else:
                pending.extend(pieces)

            best = min(best, child.score)
            best_series.append(BestPoint(iteration=iteration, samples=state.samples + s + 1, best_nmse=best))
            offspring_series.append(OffspringPoint(
                sample=state.samples + s + 1,
                generation=generation,
                solution_id=child.id,
                operator=context.operator,
                score=child.score,
                used_knowledge=result.used_knowledge,
            ))
        self._insert(library, pending)

        valid = sum(1 for child in offspring if child.valid)
        total = self.config.samples_per_generation
        population = rank(state.population + offspring)[: self.config.population_size]
        new_state = state.model_copy(update={
            "generation": generation,
            "iteration": iteration,
            "samples": state.samples + len(offspring),
            "population": population,
            "best_series": best_series,
            "valid_series": state.valid_series + [
                ValidPoint(generation=generation, valid_ratio=valid / total, valid=valid, total=total)
            ],
            "offspring_series": offspring_series,
        })
        new_state = self._sync(new_state, library)
        usage_logger.log_generation(generation, population[0].score, valid / total, len(library), new_state.samples)
        return self._record(new_state, logged)

    @staticmethod
    def _dedup_key(solution: Solution) -> Optional[str]:
        """Canonical text, else the raw math text; None when there is no expression at all."""
        return solution.canonical or solution.math_text.strip() or None

    def run(self, state: Optional[RunState] = None, library: Optional[KnowledgeLibrary] = None) -> RunState:
        """Initialize (unless resuming from `state`) and run the remaining generations."""
        if state is None:
            state = self.initialize(library)
        while state.generation < self.config.generations:
            state = self.step_generation(state)
        logger.info(
            f"Run finished: {state.generation} generations, {state.samples} samples, "
            f"best NMSE {state.best_score:.6g}"
        )
        return state


def initialize(cfg: EngineConfig, dataset: Dataset, library: Optional[KnowledgeLibrary],
               gateway: LLMGateway, embedder, prompts: Optional[PromptBook] = None) -> RunState:
    return Engine(cfg, dataset, gateway, embedder, prompts).initialize(library)


def step_generation(state: RunState, cfg: EngineConfig, dataset: Dataset, gateway: LLMGateway,
                    embedder, prompts: Optional[PromptBook] = None) -> RunState:
    return Engine(cfg, dataset, gateway, embedder, prompts).step_generation(state)


def run(cfg: EngineConfig, dataset: Dataset, gateway: LLMGateway, embedder,
        prompts: Optional[PromptBook] = None, recorder: Optional[RunRecorder] = None) -> RunState:
    return Engine(cfg, dataset, gateway, embedder, prompts, recorder).run()
