"""
Tensor conventions: dense float64 numpy arrays, row-major, leading batch axis.
"""
from typing import Iterable, Sequence

import numpy as np
import numpy.typing as npt

from core.errors import NonFiniteError, ShapeMismatchError

Tensor = npt.NDArray[np.float64]


def as_tensor(data: Iterable[float], shape: Sequence[int] = None) -> Tensor:
    """Builds a float64 tensor; with `shape`, `data` is the flat row-major buffer."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is None:
        return np.ascontiguousarray(arr)
    if int(np.prod(shape)) != arr.size:
        raise ShapeMismatchError("product(shape) must equal len(data)", expected=int(np.prod(shape)), actual=arr.size)
    return np.ascontiguousarray(arr.reshape(tuple(shape)))


def ensure_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(where)
    return t


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float64)
