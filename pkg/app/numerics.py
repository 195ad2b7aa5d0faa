"""Array-level scoring and differentiation helpers."""

from typing import Sequence, Union

import numpy as np

from .errors import LengthMismatch, NotTimeOrdered

ArrayLike = Union[Sequence[float], np.ndarray]


def nmse(predictions: ArrayLike, targets: ArrayLike) -> float:
    """Normalized MSE: squared-error sum over the targets' squared deviation sum.

    Non-finite predictions score +inf. Constant targets score 0 on an exact match
    and +inf otherwise.
    """
    y_hat = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y_hat.shape != y.shape:
        raise LengthMismatch(f"predictions have {y_hat.size} entries, targets {y.size}")
    if not np.all(np.isfinite(y_hat)):
        return float("inf")
    sse = float(np.sum((y - y_hat) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        return 0.0 if sse == 0.0 else float("inf")
    return sse / sst


def numeric_gradient(values: ArrayLike, ordinate: ArrayLike) -> np.ndarray:
    """d(values)/d(ordinate): central differences inside, one-sided at both ends."""
    v = np.asarray(values, dtype=float)
    t = np.asarray(ordinate, dtype=float)
    if v.shape != t.shape or v.ndim != 1:
        raise LengthMismatch(f"values have {v.size} entries, ordinate {t.size}")
    if v.size < 2:
        raise LengthMismatch("numerical differentiation needs at least two samples")
    if not np.all(np.diff(t) > 0):
        raise NotTimeOrdered("ordinate is not strictly increasing")
    return np.gradient(v, t, edge_order=1)
