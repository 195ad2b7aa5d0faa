"""Datasets, NMSE scoring, evaluator feedback and the built-in benchmark problems."""

import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.integrate import solve_ivp

from .errors import InvalidDataset, InvalidSpec, MissingVariable, NotTimeOrdered
from .expression import FittedModel, Skeleton, evaluate, parse
from .numerics import nmse, numeric_gradient
from .rng import numpy_stream

logger = logging.getLogger(__name__)

SPLIT_COLUMN = "__split__"
SPLITS = ("id", "ood")
# Datasets are shared across concurrent offspring
_READS_LOCK = threading.Lock()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Named numeric columns with an ID/OOD row partition.

    When `time_ordered` is set, row order is sampling-time order and `time_column`
    holds the ordinate used by grad1().
    """

    name: str
    columns: Dict[str, np.ndarray]
    target: str
    id_rows: np.ndarray
    ood_rows: np.ndarray
    time_ordered: bool = False
    time_column: Optional[str] = None
    description: str = ""
    units: Dict[str, str] = field(default_factory=dict)
    reads: Counter = field(default_factory=Counter, compare=False, repr=False)

    def __post_init__(self) -> None:
        columns = {name: np.asarray(values, dtype=float) for name, values in self.columns.items()}
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "id_rows", np.asarray(self.id_rows, dtype=int))
        object.__setattr__(self, "ood_rows", np.asarray(self.ood_rows, dtype=int))

        if self.target not in columns:
            raise InvalidDataset(f"target column {self.target!r} missing from dataset {self.name!r}")
        lengths = {values.shape for values in columns.values()}
        if len(lengths) != 1 or len(next(iter(lengths))) != 1:
            raise InvalidDataset("all columns must be one-dimensional and of equal length")
        for name, values in columns.items():
            if not np.all(np.isfinite(values)):
                raise InvalidDataset(f"column {name!r} holds non-finite values")
        n = self.n_rows
        if self.id_rows.size == 0:
            raise InvalidDataset("dataset has no ID rows")
        combined = np.concatenate([self.id_rows, self.ood_rows])
        if np.unique(combined).size != combined.size or set(combined.tolist()) != set(range(n)):
            raise InvalidDataset("ID and OOD rows must be disjoint and cover every row")
        if self.time_ordered:
            if self.time_column not in columns:
                raise InvalidDataset("time-ordered dataset needs a time column")
            if not np.all(np.diff(columns[self.time_column]) > 0):
                raise InvalidDataset(f"time column {self.time_column!r} is not strictly increasing")
            for rows in (self.id_rows, self.ood_rows):
                if rows.size and not np.all(np.diff(rows) == 1):
                    raise InvalidDataset("time-ordered splits must be contiguous row ranges")

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.target])

    @property
    def feature_names(self) -> List[str]:
        return [name for name in self.columns if name != self.target]

    def _rows(self, split: str) -> np.ndarray:
        if split == "id":
            return self.id_rows
        if split == "ood":
            return self.ood_rows
        raise ValueError(f"unknown split {split!r}")

    def split_columns(self, split: str) -> Dict[str, np.ndarray]:
        with _READS_LOCK:
            self.reads[split] += 1
        rows = self._rows(split)
        return {name: values[rows] for name, values in self.columns.items()}

    def split_ordinate(self, split: str) -> Optional[np.ndarray]:
        if not self.time_ordered:
            return None
        return self.columns[self.time_column][self._rows(split)]

    def gradient(self, column: str) -> np.ndarray:
        """Numerical time derivative of a column over the full trajectory."""
        if not self.time_ordered:
            raise NotTimeOrdered(f"dataset {self.name!r} is not time-ordered")
        return numeric_gradient(self.columns[column], self.columns[self.time_column])

    def without_time_order(self) -> "Dataset":
        return replace(self, time_ordered=False, reads=Counter())

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.columns)
        split = np.empty(self.n_rows, dtype=object)
        split[self.id_rows] = "id"
        split[self.ood_rows] = "ood"
        frame[SPLIT_COLUMN] = split
        return frame


class SplitScores(BaseModel):
    id_nmse: float
    ood_nmse: Optional[float] = None


def score_solution(model: FittedModel, data: Dataset) -> SplitScores:
    """NMSE on the ID and OOD rows separately. OOD is reporting only."""
    scores = {}
    for split in SPLITS:
        if split == "ood" and data.ood_rows.size == 0:
            continue
        columns = data.split_columns(split)
        predictions = model.predict(columns, ordinate=data.split_ordinate(split))
        scores[f"{split}_nmse"] = nmse(predictions, columns[data.target])
    return SplitScores(**scores)


def feedback_summary(model: FittedModel, data: Dataset, rows: int = 5) -> str:
    """Evaluator feedback: ID NMSE and the rows with the largest absolute residuals."""
    columns = data.split_columns("id")
    try:
        predictions = model.predict(columns, ordinate=data.split_ordinate("id"))
    except MissingVariable as error:
        return f"Evaluation failed: {error}"
    target = columns[data.target]
    score = nmse(predictions, target)
    lines = [f"Training NMSE: {score:.6g}"]
    finite = np.isfinite(predictions)
    if not finite.all():
        lines.append(f"{int((~finite).sum())} of {finite.size} rows evaluate to non-finite values.")
    residual = np.where(finite, np.abs(target - predictions), np.inf)
    worst = np.argsort(-residual, kind="stable")[:rows]
    lines.append("Largest residuals:")
    for row in worst:
        inputs = ", ".join(f"{name}={columns[name][row]:.4g}" for name in data.feature_names)
        lines.append(
            f"  {inputs}: target {target[row]:.4g}, predicted {predictions[row]:.4g}"
        )
    return "\n".join(lines)


# Built-in problem families

ProblemFamily = Literal["oscillation1", "oscillation2", "ecoli_growth", "stress_strain", "custom"]


@dataclass(frozen=True)
class FamilyInfo:
    description: str
    target: str
    ground_truth: str
    params: Tuple[float, ...]
    units: Dict[str, str]
    id_ranges: Dict[str, Tuple[float, float]]
    ood_ranges: Dict[str, Tuple[float, float]]
    time_ordered: bool = False


FAMILIES: Dict[str, FamilyInfo] = {
    "oscillation1": FamilyInfo(
        description=(
            "Acceleration of a damped, driven nonlinear oscillator as a function of "
            "position x, velocity v and time t."
        ),
        target="a",
        ground_truth="-c0 ^ 2 * x - c1 * v + c2 * sin(c3 * t)",
        params=(1.2, 0.3, 0.8, 1.5),
        units={"x": "m", "v": "m/s", "t": "s", "a": "m/s^2"},
        id_ranges={"x": (-1.0, 1.0), "v": (-1.0, 1.0), "t": (0.0, 10.0)},
        ood_ranges={"x": (1.2, 2.0), "v": (-1.0, 1.0), "t": (10.5, 15.0)},
    ),
    "oscillation2": FamilyInfo(
        description=(
            "Acceleration of a damped, driven oscillator observed along one trajectory; "
            "columns are time t, position x, velocity v, sampled at a uniform time step."
        ),
        target="a",
        ground_truth="-c0 * v - c1 * x + c2 * cos(c3 * t)",
        params=(0.5, 2.0, 0.6, 1.3),
        units={"x": "m", "v": "m/s", "t": "s", "a": "m/s^2"},
        id_ranges={},
        ood_ranges={},
        time_ordered=True,
    ),
    "ecoli_growth": FamilyInfo(
        description=(
            "Growth rate of an E. coli culture as a function of substrate concentration s "
            "and deviation of the temperature from its optimum temp_deviation."
        ),
        target="rate",
        ground_truth="c0 * s / (c1 + s) * exp(-c2 * temp_deviation ^ 2)",
        params=(1.8, 0.6, 0.15),
        units={"s": "g/L", "temp_deviation": "K", "rate": "1/h"},
        id_ranges={"s": (0.1, 5.0), "temp_deviation": (-3.0, 3.0)},
        ood_ranges={"s": (5.5, 10.0), "temp_deviation": (-3.0, 3.0)},
    ),
    "stress_strain": FamilyInfo(
        description="Stress of a material sample as a function of strain under tension.",
        target="stress",
        ground_truth="c0 * (1 - exp(-c1 * strain))",
        params=(500.0, 8.0),
        units={"strain": "1", "stress": "MPa"},
        id_ranges={"strain": (0.0, 0.5)},
        ood_ranges={"strain": (0.55, 1.0)},
    ),
}


class ProblemSpec(BaseModel):
    """What to generate (or load) as the search dataset."""

    family: ProblemFamily = "oscillation1"
    ground_truth: Optional[str] = None
    params: Optional[List[float]] = None
    target: Optional[str] = None
    description: Optional[str] = None
    ranges: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    ood_ranges: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    n_id: int = Field(default=200, ge=2)
    n_ood: int = Field(default=50, ge=0)
    noise_sd: float = Field(default=0.0, ge=0)
    seed: int = 0
    time_step: float = Field(default=0.05, gt=0)
    initial_state: Tuple[float, float] = (0.5, 0.0)
    dataset_path: Optional[str] = None
    time_ordered: bool = False
    time_column: str = "t"

    def resolved(self) -> Tuple[str, Skeleton, np.ndarray]:
        """(target, ground-truth skeleton, ground-truth params) with family defaults filled in."""
        info = FAMILIES.get(self.family)
        text = self.ground_truth or (info.ground_truth if info else None)
        target = self.target or (info.target if info else None)
        if not text or not target:
            raise InvalidSpec("custom problems need a ground_truth expression and a target")
        skeleton = parse(text)
        if self.params is not None:
            params = np.asarray(self.params, dtype=float)
        elif info and not self.ground_truth:
            params = np.asarray(info.params, dtype=float)
        else:
            params = np.ones(skeleton.param_count)
        if params.size != skeleton.param_count:
            raise InvalidSpec(
                f"ground truth has {skeleton.param_count} parameters, {params.size} given"
            )
        return target, skeleton, params


def ground_truth_model(spec: ProblemSpec) -> FittedModel:
    _, skeleton, params = spec.resolved()
    return FittedModel(skeleton, tuple(float(p) for p in params), 0.0)


def _check_ranges(ranges: Mapping[str, Tuple[float, float]], ood: Mapping[str, Tuple[float, float]]) -> None:
    for name, (low, high) in list(ranges.items()) + list(ood.items()):
        if not (math.isfinite(low) and math.isfinite(high) and low <= high):
            raise InvalidSpec(f"range for {name!r} is not a finite interval")
    outside = [
        name
        for name, (low, high) in ood.items()
        if name in ranges and (low > ranges[name][1] or high < ranges[name][0])
    ]
    if ood and not outside:
        raise InvalidSpec("OOD ranges must lie strictly outside the ID range for at least one variable")


def _sampled_problem(spec: ProblemSpec, info: Optional[FamilyInfo]) -> Dataset:
    target, skeleton, params = spec.resolved()
    id_ranges = dict(info.id_ranges) if info else {}
    id_ranges.update(spec.ranges)
    ood_ranges = dict(info.ood_ranges) if info else {}
    ood_ranges.update(spec.ood_ranges)
    missing = [name for name in skeleton.variables if name not in id_ranges]
    if missing:
        raise InvalidSpec(f"no sampling range for variable(s): {', '.join(missing)}")
    if spec.n_ood and not ood_ranges:
        raise InvalidSpec("OOD rows requested but no OOD ranges given")
    _check_ranges(id_ranges, ood_ranges)

    rng = numpy_stream(spec.seed, spec.family, "sample")
    columns: Dict[str, np.ndarray] = {}
    for name in sorted(id_ranges):
        low, high = id_ranges[name]
        ood_low, ood_high = ood_ranges.get(name, (low, high))
        columns[name] = np.concatenate(
            [rng.uniform(low, high, spec.n_id), rng.uniform(ood_low, ood_high, spec.n_ood)]
        )
    values = evaluate(skeleton, params, columns)
    if not np.all(np.isfinite(values)):
        raise InvalidSpec("ground truth is non-finite over the sampling ranges")
    if spec.noise_sd:
        values = values + numpy_stream(spec.seed, spec.family, "noise").normal(0.0, spec.noise_sd, values.size)
    columns[target] = values
    n = spec.n_id + spec.n_ood
    return Dataset(
        name=spec.family,
        columns=columns,
        target=target,
        id_rows=np.arange(spec.n_id),
        ood_rows=np.arange(spec.n_id, n),
        description=spec.description or (info.description if info else ""),
        units=dict(info.units) if info else {},
    )


def _trajectory_problem(spec: ProblemSpec, info: FamilyInfo) -> Dataset:
    """Integrate x' = v, v' = a(x, v, t) on a uniform grid; ID is the early part."""
    target, skeleton, params = spec.resolved()
    if set(skeleton.variables) - {"x", "v", "t"}:
        raise InvalidSpec("trajectory problems may only use the variables x, v and t")
    n = spec.n_id + spec.n_ood
    times = np.arange(n) * spec.time_step

    def acceleration(t: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return evaluate(skeleton, params, {"x": x, "v": v, "t": t})

    def rhs(t: float, state: np.ndarray) -> List[float]:
        x, v = state
        return [v, float(acceleration(np.array([t]), np.array([x]), np.array([v]))[0])]

    solution = solve_ivp(
        rhs,
        (0.0, float(times[-1])),
        list(spec.initial_state),
        t_eval=times,
        method="DOP853",
        rtol=1e-11,
        atol=1e-12,
    )
    if not solution.success:
        raise InvalidSpec(f"trajectory integration failed: {solution.message}")
    x, v = solution.y
    values = acceleration(times, x, v)
    if not np.all(np.isfinite(values)):
        raise InvalidSpec("trajectory diverged")
    if spec.noise_sd:
        values = values + numpy_stream(spec.seed, spec.family, "noise").normal(0.0, spec.noise_sd, n)
    return Dataset(
        name=spec.family,
        columns={"t": times, "x": x, "v": v, target: values},
        target=target,
        id_rows=np.arange(spec.n_id),
        ood_rows=np.arange(spec.n_id, n),
        time_ordered=True,
        time_column="t",
        description=spec.description or info.description,
        units=dict(info.units),
    )


def generate_problem(spec: ProblemSpec) -> Dataset:
    """Build the dataset a ProblemSpec describes. Deterministic per (spec, seed)."""
    if spec.dataset_path:
        dataset, stats = ingester.ingest_csv(
            spec.dataset_path,
            target=spec.target or "",
            name=spec.family,
            time_ordered=spec.time_ordered,
            time_column=spec.time_column,
        )
        if stats["errors"]:
            logger.warning(f"Dataset {spec.dataset_path}: skipped {len(stats['errors'])} rows")
        return replace(dataset, description=spec.description or dataset.description)

    info = FAMILIES.get(spec.family)
    if spec.family == "custom" and not spec.ground_truth:
        raise InvalidSpec("custom problems need either dataset_path or ground_truth")
    if info and info.time_ordered:
        return _trajectory_problem(spec, info)
    return _sampled_problem(spec, info)


class DatasetIngester:
    """Reads and writes datasets as CSV with a `__split__` column."""

    def ingest_csv(
        self,
        file_path: str,
        target: str,
        name: Optional[str] = None,
        time_ordered: bool = False,
        time_column: str = "t",
    ) -> Tuple[Dataset, Dict[str, Any]]:
        """Load a dataset CSV. Rows with missing or non-numeric values are skipped."""
        path = Path(file_path)
        if not path.exists():
            raise InvalidDataset(f"dataset file not found: {file_path}")

        stats: Dict[str, Any] = {"total_rows": 0, "loaded_rows": 0, "errors": []}
        frame = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
        stats["total_rows"] = len(frame)
        if not target:
            raise InvalidDataset("dataset target column not configured")
        if target not in frame.columns:
            raise InvalidDataset(f"target column {target!r} not in {file_path}")

        if SPLIT_COLUMN in frame.columns:
            split = frame.pop(SPLIT_COLUMN).astype(str).str.strip().str.lower()
        else:
            logger.warning(f"{file_path} has no {SPLIT_COLUMN} column; every row is ID")
            split = pd.Series(["id"] * len(frame), index=frame.index)

        numeric = frame.apply(pd.to_numeric, errors="coerce")
        keep = []
        for index in range(len(frame)):
            row = numeric.iloc[index]
            if split.iloc[index] not in SPLITS:
                stats["errors"].append(f"row {index + 1}: unknown split {split.iloc[index]!r}")
            elif not np.all(np.isfinite(row.to_numpy(dtype=float))):
                stats["errors"].append(f"row {index + 1}: missing or non-numeric value")
            else:
                keep.append(index)
        stats["loaded_rows"] = len(keep)

        numeric = numeric.iloc[keep].reset_index(drop=True)
        split = split.iloc[keep].reset_index(drop=True)
        dataset = Dataset(
            name=name or path.stem,
            columns={column: numeric[column].to_numpy(dtype=float) for column in numeric.columns},
            target=target,
            id_rows=np.flatnonzero(split.to_numpy() == "id"),
            ood_rows=np.flatnonzero(split.to_numpy() == "ood"),
            time_ordered=time_ordered,
            time_column=time_column if time_ordered else None,
        )
        logger.info(f"Loaded {stats['loaded_rows']}/{stats['total_rows']} rows from {file_path}")
        return dataset, stats

    def write_csv(self, dataset: Dataset, file_path: str) -> None:
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dataset.to_frame().to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


# Global ingester instance
ingester = DatasetIngester()
