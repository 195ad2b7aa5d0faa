"""Exception hierarchy shared by every engine module."""

from typing import List, Optional


class CoEvoError(Exception):
    """Base class for all engine errors."""


# Expression language

class ExpressionError(CoEvoError):
    """Problems parsing, evaluating or fitting an expression."""


class ExpressionSyntaxError(ExpressionError):
    """Text does not follow the expression grammar.

    `position` is 1-based; end of input is reported as len(text) + 1.
    """

    def __init__(self, message: str, position: int, expected: Optional[List[str]] = None):
        self.position = position
        self.expected = list(expected or [])
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at position {position}{detail}")


class LimitExceeded(ExpressionError):
    """Text length or node count above the configured cap."""


class UnknownFunction(ExpressionError):
    """Call to a function outside the grammar's function set."""


class MissingVariable(ExpressionError):
    """A variable referenced by the expression has no data column."""


class ArityMismatch(ExpressionError):
    """Parameter vector length differs from the skeleton's parameter count."""


class NoFiniteLoss(ExpressionError):
    """Every loss evaluation during constant fitting was non-finite."""


# Datasets and scoring

class EvaluationError(CoEvoError):
    """Problems with datasets, problem specs or scoring."""


class LengthMismatch(EvaluationError):
    pass


class NotTimeOrdered(EvaluationError):
    """Numerical differentiation requested on data without a time order."""


class InvalidSpec(EvaluationError):
    pass


class InvalidDataset(EvaluationError):
    pass


# LLM backend

class GatewayError(CoEvoError):
    """Problems talking to the text-generation backend."""


class BackendUnavailable(GatewayError):
    """The backend could not produce a response (after retries, if any)."""


class TranscriptExhausted(BackendUnavailable):
    """Replay ran past the last recorded transcript entry."""


class TranscriptDivergence(GatewayError):
    """A replayed request does not match the recorded one."""


class ResponseRejected(GatewayError):
    """Response was empty or longer than allowed."""


class MissingMathBlock(GatewayError):
    """A generation response carried no ```math fence."""


# Embeddings

class EmbeddingError(CoEvoError):
    pass


class EmptyText(EmbeddingError):
    pass


class DimensionMismatch(EmbeddingError):
    pass


# Runs and configuration

class ConfigError(CoEvoError):
    """Configuration file is missing, malformed or inconsistent."""


class MissingRun(CoEvoError):
    """Run directory does not hold the expected files."""


class ReplayMismatch(CoEvoError):
    """Replayed run finished in a different state than the recorded one."""
