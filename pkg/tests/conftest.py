from typing import Callable

import numpy as np
import pytest
from loguru import logger

from config.experiment_config import (AttackConfig, ExperimentConfig, MlpArch, SyntheticDataset, TrainingConfig)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, perturbing x in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.remove()
    yield


@pytest.fixture
def tiny_experiment(tmp_path) -> ExperimentConfig:
    """Synthetic blobs, 2 parties, small MLP; trains in well under a second."""
    return ExperimentConfig(
        name="tiny",
        dataset=SyntheticDataset(n=200, n_test=100, dims=8, classes=2, blob_sep=10.0),
        arch=MlpArch(layer_dims=[8, 4]),
        parties=2,
        training=TrainingConfig(epochs=3, batch_size=32, lr=0.05),
        defense_grids=[{"variant": "none", "strengths": [0.0]}],
        attacks=["cafe", "pmc"],
        attack_cfg=AttackConfig(iterations=30, restarts=1, targets=4, pmc_iterations=100),
        aux_size=20,
        seeds=[0],
        output_dir=str(tmp_path / "results"),
    )
