"""Shared builders for datasets, solutions, knowledge pieces and scripted responses."""

import math
from typing import List, Optional, Sequence

import numpy as np

from app.evaluation import Dataset
from app.expression import FitBudget
from app.knowledge import KnowledgePiece, KnowledgeSource
from app.llm_gateway import LLMGateway, ScriptedBackend, Transcript
from app.solution import Lineage, Solution

FAST_FIT = FitBudget(restarts=1, max_evals=400)


def linear_dataset(n: int = 10, slope: float = 2.0, intercept: float = 0.0, ood: int = 0) -> Dataset:
    """y = slope * x + intercept on x = 1..n; the last `ood` rows form the OOD split."""
    x = np.arange(1, n + 1, dtype=float)
    return Dataset(
        name="linear",
        columns={"x": x, "y": slope * x + intercept},
        target="y",
        id_rows=np.arange(n - ood),
        ood_rows=np.arange(n - ood, n),
        description="Find y as a function of x.",
    )


def idea_response(text: str, math_text: Optional[str] = None) -> str:
    response = f"```idea\n{text}\n```"
    if math_text:
        response += f"\n```math\n{math_text}\n```"
    return response


def solve_response(math_text: str, idea: str = "A simple law.") -> str:
    return (
        f"```idea\n{idea}\n```\n"
        f"```math\n{math_text}\n```\n"
        "```code\ndef f(x):\n    return x\n```"
    )


def summary_response(definition: str, description: str = "") -> str:
    return f"```definition\n{definition}\n```\n```description\n{description}\n```"


def scripted_gateway(fixture, strict: bool = False) -> LLMGateway:
    return LLMGateway(ScriptedBackend(fixture, strict=strict), Transcript())


def make_solution(
    solution_id: str,
    score: float = 0.5,
    node_count: int = 3,
    born_at: int = 0,
    canonical: Optional[str] = None,
    params: Optional[List[float]] = None,
    parents: Sequence[str] = (),
    operator: str = "init",
) -> Solution:
    valid = math.isfinite(score)
    return Solution(
        id=solution_id,
        math_text=canonical or "c0 * x",
        canonical=(canonical or "c0 * x") if valid else None,
        params=list(params) if params is not None else ([2.0] if valid else []),
        node_count=node_count if valid else None,
        score=score,
        valid=valid,
        reason=None if valid else "NoFiniteLoss: test",
        lineage=Lineage(parents=list(parents), operator=operator),
        born_at=born_at,
    )


def axis(index: int, dimension: int = 8) -> List[float]:
    vector = [0.0] * dimension
    vector[index] = 1.0
    return vector


def unit(angle: float) -> List[float]:
    """2-D unit vector at `angle` radians."""
    return [math.cos(angle), math.sin(angle)]


def make_piece(
    piece_id: str,
    embedding: Sequence[float],
    score_before: float = 1.0,
    score_after: float = 0.5,
    definition: Optional[str] = None,
    uses: int = 0,
) -> KnowledgePiece:
    return KnowledgePiece(
        id=piece_id,
        definition=definition or f"insight {piece_id}",
        description="",
        embedding=list(embedding),
        source=KnowledgeSource(
            solution_id=f"s-{piece_id}",
            iteration=0,
            score_before=score_before,
            score_after=score_after,
        ),
        uses=uses,
    )
