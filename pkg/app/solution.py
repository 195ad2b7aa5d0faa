"""Candidate solutions: three linked representations, a score and a lineage."""

import logging
import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import CoEvoError
from .evaluation import Dataset, feedback_summary
from .expression import (
    DEFAULT_MAX_NODES,
    FitBudget,
    FittedModel,
    equation_body,
    fit_constants,
    parse,
    to_text,
)

logger = logging.getLogger(__name__)

Operator = Literal["init", "pos_crossover", "neg_crossover", "pos_mutation", "neg_mutation"]
OPERATORS: Tuple[Operator, ...] = ("pos_crossover", "neg_crossover", "pos_mutation", "neg_mutation")

# Sort key stand-in for "no skeleton"
UNPARSED_NODE_COUNT = 10**9


class RawGeneration(BaseModel):
    """The three text fields extracted from one model response."""

    idea_text: str = ""
    math_text: str = ""
    program_text: str = ""
    extraction_error: Optional[str] = None


class Lineage(BaseModel):
    parents: List[str] = Field(default_factory=list)
    operator: Operator = "init"

    @model_validator(mode="after")
    def _parents_match_operator(self) -> "Lineage":
        if (self.operator == "init") != (not self.parents):
            raise ValueError("only init solutions may (and must) have no parents")
        return self


class Solution(BaseModel):
    """One candidate. Immutable after materialization.

    valid solutions carry the canonical math text and the fitted parameters, and their
    score is the training NMSE; invalid ones score +inf and record why.
    """

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    id: str
    idea_text: str = ""
    math_text: str = ""
    program_text: str = ""
    canonical: Optional[str] = None
    params: List[float] = Field(default_factory=list)
    node_count: Optional[int] = None
    score: float = math.inf
    valid: bool = False
    reason: Optional[str] = None
    lineage: Lineage = Field(default_factory=Lineage)
    born_at: int = 0

    @model_validator(mode="after")
    def _score_matches_validity(self) -> "Solution":
        if self.valid and not math.isfinite(self.score):
            raise ValueError("a valid solution needs a finite score")
        if not self.valid and self.score != math.inf:
            raise ValueError("an invalid solution scores +inf")
        return self

    def sort_key(self) -> Tuple[float, int, int, str]:
        nodes = self.node_count if self.node_count is not None else UNPARSED_NODE_COUNT
        return (self.score, nodes, self.born_at, self.id)

    def fitted_model(self) -> Optional[FittedModel]:
        if not self.valid or self.canonical is None:
            return None
        return FittedModel(parse(self.canonical), tuple(self.params), self.score)


def compare(a: Solution, b: Solution) -> int:
    """-1 if a ranks before b, 1 if after, 0 only for the same id at the same rank."""
    key_a, key_b = a.sort_key(), b.sort_key()
    return (key_a > key_b) - (key_a < key_b)


def rank(solutions: List[Solution]) -> List[Solution]:
    return sorted(solutions, key=Solution.sort_key)


class Evaluator:
    """Turns raw generations into scored solutions against one dataset."""

    def __init__(
        self,
        dataset: Dataset,
        budget: Optional[FitBudget] = None,
        seed: int = 0,
        max_nodes: int = DEFAULT_MAX_NODES,
    ):
        self.dataset = dataset
        self.budget = budget or FitBudget()
        self.seed = seed
        self.max_nodes = max_nodes

    def materialize(
        self,
        raw: RawGeneration,
        solution_id: str,
        lineage: Optional[Lineage] = None,
        born_at: int = 0,
    ) -> Solution:
        """Parse, fit and score. Candidate failures become valid=False, never exceptions."""
        fields = {
            "id": solution_id,
            "idea_text": raw.idea_text,
            "math_text": raw.math_text,
            "program_text": raw.program_text,
            "lineage": lineage or Lineage(),
            "born_at": born_at,
        }
        if raw.extraction_error:
            return Solution(**fields, reason=raw.extraction_error)
        try:
            skeleton = parse(equation_body(raw.math_text), max_nodes=self.max_nodes)
            fitted = fit_constants(
                skeleton,
                self.dataset,
                self.dataset.target,
                self.budget,
                seed=self.seed,
                solution_id=solution_id,
            )
        except CoEvoError as error:
            logger.debug(f"Candidate {solution_id} invalid: {error}")
            return Solution(**fields, reason=f"{type(error).__name__}: {error}")

        return Solution(
            **fields,
            canonical=to_text(skeleton),
            params=list(fitted.params),
            node_count=skeleton.node_count,
            score=fitted.fit_loss,
            valid=True,
        )

    def feedback(self, solution: Solution) -> str:
        """Feedback string threaded into the next idea-tree level."""
        model = solution.fitted_model()
        if model is None:
            return f"The candidate could not be evaluated ({solution.reason})."
        return feedback_summary(model, self.dataset)
