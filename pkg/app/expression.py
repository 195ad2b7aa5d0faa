"""Expression language for the math representation of a solution.

Infix grammar, highest precedence first:

    atom      number | identifier | function(args) | ( expr )
    power     atom [ ^ unary ]            right-associative
    unary     - unary | power
    term      unary { (* | /) unary }
    expr      term { (+ | -) term }

Identifiers `c0`, `c1`, ... are free parameters fitted per candidate; every other
identifier is a data column. `**` is accepted as an alias of `^`.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import minimize

from .errors import (
    ArityMismatch,
    ExpressionSyntaxError,
    LengthMismatch,
    LimitExceeded,
    MissingVariable,
    NoFiniteLoss,
    NotTimeOrdered,
    UnknownFunction,
)
from .numerics import nmse, numeric_gradient
from .rng import numpy_stream

logger = logging.getLogger(__name__)

MAX_TEXT_BYTES = 64 * 1024
DEFAULT_MAX_NODES = 200
MAX_NESTING = 64
MAX_PARAMETER_DIGITS = 6

BINARY_SYMBOLS = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
_SYMBOL_OPS = {symbol: op for op, symbol in BINARY_SYMBOLS.items()}

FUNCTIONS: Dict[str, Tuple[int, Callable[..., np.ndarray]]] = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "tan": (1, np.tan),
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "tanh": (1, np.tanh),
    "min2": (2, np.minimum),
    "max2": (2, np.maximum),
}

# Needs a time ordinate at evaluation time
TIME_FUNCTIONS = {"grad1": 1}

_PARAMETER_RE = re.compile(r"c(\d+)")
_TOKEN_RE = re.compile(
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>\*\*|[-+*/^(),])"
)


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Parameter:
    index: int


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    child: "ExprNode"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "ExprNode"
    right: "ExprNode"


@dataclass(frozen=True)
class Call:
    function: str
    args: Tuple["ExprNode", ...]


ExprNode = Union[Constant, Parameter, Variable, Unary, Binary, Call]


def children(node: ExprNode) -> Tuple[ExprNode, ...]:
    match node:
        case Unary(child=child):
            return (child,)
        case Binary(left=left, right=right):
            return (left, right)
        case Call(args=args):
            return args
    return ()


def walk(node: ExprNode):
    """Pre-order traversal."""
    stack = [node]
    while stack:
        current = stack.pop()
        yield current
        stack.extend(reversed(children(current)))


def node_count(node: ExprNode) -> int:
    return sum(1 for _ in walk(node))


@dataclass(frozen=True)
class Skeleton:
    """An expression with free parameters, plus the variables it reads."""

    root: ExprNode
    variables: Tuple[str, ...]
    param_count: int
    source_text: str = field(default="", compare=False)

    @property
    def node_count(self) -> int:
        return node_count(self.root)

    @property
    def degenerate(self) -> bool:
        used = {n.name for n in walk(self.root) if isinstance(n, Variable)}
        return any(name not in used for name in self.variables)

    @property
    def uses_time_derivative(self) -> bool:
        return any(isinstance(n, Call) and n.function in TIME_FUNCTIONS for n in walk(self.root))


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    position: int


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    index = 0
    while index < len(text):
        if text[index].isspace():
            index += 1
            continue
        match = _TOKEN_RE.match(text, index)
        if not match:
            raise ExpressionSyntaxError(f"unexpected character {text[index]!r}", index + 1)
        kind = match.lastgroup or "op"
        token_text = match.group()
        if token_text == "**":
            token_text = "^"
        tokens.append(_Token(kind, token_text, index + 1))
        index = match.end()
    return tokens


class _Parser:
    """Recursive-descent parser over a token list."""

    _ATOM_START = ["number", "identifier", "(", "-"]

    def __init__(self, text: str, max_nodes: int):
        self.tokens = _tokenize(text)
        self.index = 0
        self.end_position = len(text) + 1
        self.max_nodes = max_nodes
        self.nodes = 0
        self.depth = 0

    def _peek(self) -> Optional[_Token]:
        return self.tokens[self.index] if self.index < len(self.tokens) else None

    def _peek_op(self, *ops: str) -> bool:
        token = self._peek()
        return token is not None and token.kind == "op" and token.text in ops

    def _advance(self) -> _Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def _fail(self, message: str, expected: List[str]) -> ExpressionSyntaxError:
        token = self._peek()
        if token is None:
            return ExpressionSyntaxError(f"{message}: unexpected end of input", self.end_position, expected)
        return ExpressionSyntaxError(f"{message}: unexpected {token.text!r}", token.position, expected)

    def _make(self, node: ExprNode) -> ExprNode:
        self.nodes += 1
        if self.nodes > self.max_nodes:
            raise LimitExceeded(f"expression has more than {self.max_nodes} nodes")
        return node

    def parse(self) -> ExprNode:
        if not self.tokens:
            raise ExpressionSyntaxError("empty expression", 1, self._ATOM_START)
        node = self._expr()
        if self._peek() is not None:
            raise self._fail("trailing input", ["+", "-", "*", "/", "^", "end of input"])
        return node

    def _expr(self) -> ExprNode:
        node = self._term()
        while self._peek_op("+", "-"):
            op = _SYMBOL_OPS[self._advance().text]
            node = self._make(Binary(op, node, self._term()))
        return node

    def _term(self) -> ExprNode:
        node = self._unary()
        while self._peek_op("*", "/"):
            op = _SYMBOL_OPS[self._advance().text]
            node = self._make(Binary(op, node, self._unary()))
        return node

    def _unary(self) -> ExprNode:
        if self._peek_op("-"):
            self._advance()
            self._enter()
            child = self._unary()
            self.depth -= 1
            return self._make(Unary("negate", child))
        return self._power()

    def _power(self) -> ExprNode:
        base = self._atom()
        if self._peek_op("^"):
            self._advance()
            self._enter()
            exponent = self._unary()
            self.depth -= 1
            return self._make(Binary("pow", base, exponent))
        return base

    def _enter(self) -> None:
        self.depth += 1
        if self.depth > MAX_NESTING:
            raise LimitExceeded(f"expression nests deeper than {MAX_NESTING} levels")

    def _atom(self) -> ExprNode:
        token = self._peek()
        if token is None:
            raise self._fail("incomplete expression", self._ATOM_START)
        if token.kind == "number":
            value = float(token.text)
            if not math.isfinite(value):
                raise self._fail("number out of range", ["finite number"])
            self._advance()
            return self._make(Constant(value))
        if token.kind == "ident":
            self._advance()
            if self._peek_op("("):
                return self._call(token)
            parameter = _PARAMETER_RE.fullmatch(token.text)
            if parameter:
                if len(parameter.group(1)) > MAX_PARAMETER_DIGITS:
                    raise ExpressionSyntaxError(
                        f"parameter index too long: {token.text[:12]}...", token.position, ["c<index>"]
                    )
                return self._make(Parameter(int(parameter.group(1))))
            return self._make(Variable(token.text))
        if self._peek_op("("):
            self._advance()
            self._enter()
            node = self._expr()
            if not self._peek_op(")"):
                raise self._fail("unbalanced parenthesis", [")", "+", "-", "*", "/", "^"])
            self._advance()
            self.depth -= 1
            return node
        raise self._fail("expected an operand", self._ATOM_START)

    def _call(self, name: _Token) -> ExprNode:
        arity = FUNCTIONS[name.text][0] if name.text in FUNCTIONS else TIME_FUNCTIONS.get(name.text)
        if arity is None:
            raise UnknownFunction(f"unknown function {name.text!r} at position {name.position}")
        self._advance()  # (
        self._enter()
        args = [self._expr()]
        while self._peek_op(","):
            self._advance()
            args.append(self._expr())
        if not self._peek_op(")"):
            raise self._fail(f"unterminated call to {name.text}", [")", ","])
        self._advance()
        self.depth -= 1
        if len(args) != arity:
            raise ExpressionSyntaxError(
                f"{name.text} takes {arity} argument(s), got {len(args)}", name.position
            )
        return self._make(Call(name.text, tuple(args)))


def _renumber_parameters(node: ExprNode, mapping: Mapping[int, int]) -> ExprNode:
    match node:
        case Parameter(index=index):
            return Parameter(mapping[index])
        case Unary(op=op, child=child):
            return Unary(op, _renumber_parameters(child, mapping))
        case Binary(op=op, left=left, right=right):
            return Binary(op, _renumber_parameters(left, mapping), _renumber_parameters(right, mapping))
        case Call(function=function, args=args):
            return Call(function, tuple(_renumber_parameters(a, mapping) for a in args))
    return node


def parse(
    text: str,
    max_nodes: int = DEFAULT_MAX_NODES,
    declared_variables: Optional[Sequence[str]] = None,
) -> Skeleton:
    """Parse expression text into a Skeleton.

    Parameter indices are renumbered densely in ascending order (c0, c2 -> c0, c1).
    Variables are listed declared-first, then in order of first use.
    """
    if len(text.encode("utf-8")) > MAX_TEXT_BYTES:
        raise LimitExceeded(f"expression text exceeds {MAX_TEXT_BYTES} bytes")
    root = _Parser(text, max_nodes).parse()

    indices = sorted({n.index for n in walk(root) if isinstance(n, Parameter)})
    if indices != list(range(len(indices))):
        root = _renumber_parameters(root, {old: new for new, old in enumerate(indices)})

    variables: List[str] = list(declared_variables or [])
    for n in walk(root):
        if isinstance(n, Variable) and n.name not in variables:
            variables.append(n.name)
    return Skeleton(root=root, variables=tuple(variables), param_count=len(indices), source_text=text)


def equation_body(text: str) -> str:
    """Join a multi-line math block and drop a leading `lhs =` if present."""
    body = " ".join(line.strip() for line in text.strip().splitlines() if line.strip())
    if "=" in body:
        body = body.rsplit("=", 1)[1].strip()
    return body


# Printing

_PRECEDENCE = {"add": 1, "sub": 1, "mul": 2, "div": 2, "negate": 3, "pow": 4}
_ATOM = 5


def format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _render(node: ExprNode) -> Tuple[str, int]:
    match node:
        case Constant(value=value):
            return format_number(value), _ATOM
        case Parameter(index=index):
            return f"c{index}", _ATOM
        case Variable(name=name):
            return name, _ATOM
        case Call(function=function, args=args):
            return f"{function}({', '.join(_render(a)[0] for a in args)})", _ATOM
        case Unary(child=child):
            text, prec = _render(child)
            return "-" + (f"({text})" if prec < _PRECEDENCE["negate"] else text), _PRECEDENCE["negate"]
        case Binary(op=op, left=left, right=right):
            prec = _PRECEDENCE[op]
            left_text, left_prec = _render(left)
            right_text, right_prec = _render(right)
            if op == "pow":
                wrap_left = left_prec <= prec
                wrap_right = right_prec < _PRECEDENCE["negate"]
            else:
                wrap_left = left_prec < prec
                wrap_right = right_prec <= prec
            if wrap_left:
                left_text = f"({left_text})"
            if wrap_right:
                right_text = f"({right_text})"
            return f"{left_text} {BINARY_SYMBOLS[op]} {right_text}", prec
    raise TypeError(f"not an expression node: {node!r}")


def to_text(expression: Union[Skeleton, ExprNode]) -> str:
    """Canonical text with minimal parentheses; parse(to_text(s)) == s structurally."""
    root = expression.root if isinstance(expression, Skeleton) else expression
    return _render(root)[0]


# Evaluation

def evaluate(
    skeleton: Skeleton,
    params: Sequence[float],
    columns: Mapping[str, Sequence[float]],
    ordinate: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Vectorized evaluation over equal-length columns.

    Domain violations (x/0, log of non-positive, 0^negative) yield non-finite entries
    instead of errors. `ordinate` enables grad1() and must be the time column.
    """
    values = np.asarray(params, dtype=float)
    if values.shape != (skeleton.param_count,):
        raise ArityMismatch(f"expected {skeleton.param_count} parameters, got {values.size}")
    missing = [name for name in skeleton.variables if name not in columns]
    if missing:
        raise MissingVariable(f"no data for variable(s): {', '.join(missing)}")

    arrays = {name: np.asarray(columns[name], dtype=float) for name in skeleton.variables}
    lengths = {a.shape[0] for a in arrays.values()}
    if ordinate is not None:
        time = np.asarray(ordinate, dtype=float)
        lengths.add(time.shape[0])
    else:
        time = None
    if len(lengths) > 1:
        raise LengthMismatch(f"columns have differing lengths {sorted(lengths)}")
    n = lengths.pop() if lengths else _any_length(columns)

    def run(node: ExprNode) -> np.ndarray:
        match node:
            case Constant(value=value):
                return np.full(n, value)
            case Parameter(index=index):
                return np.full(n, values[index])
            case Variable(name=name):
                return arrays[name]
            case Unary(child=child):
                return -run(child)
            case Binary(op=op, left=left, right=right):
                a, b = run(left), run(right)
                if op == "add":
                    return a + b
                if op == "sub":
                    return a - b
                if op == "mul":
                    return a * b
                if op == "div":
                    return np.divide(a, b)
                return np.power(a, b)
            case Call(function=function, args=args):
                if function in TIME_FUNCTIONS:
                    if time is None:
                        raise NotTimeOrdered(f"{function}() needs time-ordered data")
                    return numeric_gradient(run(args[0]), time)
                return FUNCTIONS[function][1](*(run(a) for a in args))
        raise TypeError(f"not an expression node: {node!r}")

    with np.errstate(all="ignore"):
        return np.asarray(run(skeleton.root), dtype=float)


def _any_length(columns: Mapping[str, Sequence[float]]) -> int:
    for column in columns.values():
        return len(column)
    return 1


# Constant fitting

class FitBudget(BaseModel):
    """Nelder-Mead restarts and per-restart loss-evaluation cap."""

    restarts: int = Field(default=4, ge=1)
    max_evals: int = Field(default=2000, ge=1)
    xatol: float = Field(default=1e-12, gt=0)
    fatol: float = Field(default=1e-16, gt=0)


class TrainingData(Protocol):
    """What fitting needs from a dataset: the training split and its time axis."""

    def split_columns(self, split: str) -> Dict[str, np.ndarray]: ...

    def split_ordinate(self, split: str) -> Optional[np.ndarray]: ...


@dataclass(frozen=True)
class FittedModel:
    skeleton: Skeleton
    params: Tuple[float, ...]
    fit_loss: float

    def predict(self, columns: Mapping[str, Sequence[float]], ordinate: Optional[Sequence[float]] = None) -> np.ndarray:
        return evaluate(self.skeleton, self.params, columns, ordinate=ordinate)


class _BudgetSpent(Exception):
    pass


class _TrackedLoss:
    """Counts evaluations, maps non-finite losses to +inf and remembers the best point."""

    def __init__(self, loss: Callable[[np.ndarray], float], cap: int):
        self.loss = loss
        self.cap = cap
        self.calls = 0
        self.best_value = math.inf
        self.best_point: Optional[np.ndarray] = None

    def __call__(self, point: np.ndarray) -> float:
        if self.calls >= self.cap:
            raise _BudgetSpent
        self.calls += 1
        value = self.loss(point)
        if not math.isfinite(value):
            return math.inf
        if value < self.best_value:
            self.best_value = value
            self.best_point = np.array(point, dtype=float)
        return value


def fit_constants(
    skeleton: Skeleton,
    data: TrainingData,
    target: str,
    budget: Optional[FitBudget] = None,
    seed: int = 0,
    solution_id: str = "",
) -> FittedModel:
    """Fit free parameters by minimizing training NMSE with restarted Nelder-Mead.

    Restart 0 starts from all ones; restart r > 0 from a uniform [-2, 2] draw seeded by
    (seed, solution_id, r). Only the "id" split is read.
    """
    budget = budget or FitBudget()
    columns = data.split_columns("id")
    if target not in columns:
        raise MissingVariable(f"target column {target!r} not in dataset")
    y = columns[target]
    ordinate = data.split_ordinate("id")

    def loss(point: Sequence[float]) -> float:
        return nmse(evaluate(skeleton, point, columns, ordinate=ordinate), y)

    if skeleton.param_count == 0:
        value = loss([])
        if not math.isfinite(value):
            raise NoFiniteLoss("expression is non-finite on the training data")
        return FittedModel(skeleton, (), value)

    best_value, best_point = math.inf, None
    for restart in range(budget.restarts):
        if restart == 0:
            start = np.ones(skeleton.param_count)
        else:
            start = numpy_stream(seed, solution_id, restart).uniform(-2.0, 2.0, skeleton.param_count)
        tracked = _TrackedLoss(loss, budget.max_evals)
        try:
            minimize(
                tracked,
                start,
                method="Nelder-Mead",
                options={
                    "maxfev": budget.max_evals,
                    "xatol": budget.xatol,
                    "fatol": budget.fatol,
                    "adaptive": skeleton.param_count > 2,
                },
            )
        except _BudgetSpent:
            pass
        logger.debug(f"restart {restart}: {tracked.calls} evals, best {tracked.best_value:.3g}")
        if tracked.best_value < best_value:
            best_value, best_point = tracked.best_value, tracked.best_point
        if best_value == 0.0:
            break

    if best_point is None:
        raise NoFiniteLoss("no parameter vector gave a finite training loss")
    return FittedModel(skeleton, tuple(float(p) for p in best_point), best_value)
