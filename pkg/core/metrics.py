"""
Recovery metrics and the calibrated averaged performance (CAP) score.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from core.errors import ConfigError, ShapeMismatchError
from core.tensor import Tensor


def mse_recovery_error(x: Tensor, x_hat: Tensor) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatchError("mse_recovery_error", expected=x.shape, actual=x_hat.shape)
    return float(np.mean((x - x_hat) ** 2))


def per_sample_mse(x: Tensor, x_hat: Tensor) -> np.ndarray:
    if x.shape != x_hat.shape:
        raise ShapeMismatchError("per_sample_mse", expected=x.shape, actual=x_hat.shape)
    return np.mean((x - x_hat).reshape(len(x), -1) ** 2, axis=1)


def label_error(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatchError("label_error", expected=truth.shape, actual=pred.shape)
    if pred.size == 0:
        return 0.0
    return float(np.mean(pred != truth))


@dataclass(frozen=True)
class CapInput:
    """One (accuracy, recovery_error) pair per defense strength."""

    settings: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if len(self.settings) < 1:
            raise ConfigError("CAP needs at least one defense setting")
        for acc, err in self.settings:
            if not 0.0 <= acc <= 1.0 or err < 0:
                raise ConfigError(f"invalid CAP setting (accuracy={acc}, recovery_error={err})")

    @classmethod
    def of(cls, pairs: Sequence[Tuple[float, float]]) -> "CapInput":
        return cls(tuple((float(a), float(r)) for a, r in pairs))


def cap(inp: CapInput) -> float:
    """Mean over settings of accuracy x recovery error."""
    values = np.array(inp.settings, dtype=np.float64)
    return float(np.mean(values[:, 0] * values[:, 1]))
