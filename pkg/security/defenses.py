"""
Protections applied at the protocol boundary.

FedPass itself lives in the passport layers; it is selected through the same
DefenseSpec union but is an identity at the message boundary. Gaussian noise
and top-k sparsification act on outbound embeddings (against feature attacks)
or outbound gradients (against label attacks).
"""
import math
from typing import Annotated, Iterable, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import ConfigError, OutOfScopeError
from core.passport import PassportLaw
from core.tensor import Tensor

Boundary = Literal["embeddings", "gradients"]

NOISE_GRID = (5e-5, 1.0)
KEEP_RATIO_GRID = (0.001, 0.5)


class NoDefense(BaseModel):
    model_config = ConfigDict(frozen=True)
    variant: Literal["none"] = "none"

    @property
    def strength(self) -> float:
        return 0.0


class FedPassDefense(BaseModel):
    model_config = ConfigDict(frozen=True)
    variant: Literal["fedpass"] = "fedpass"
    N: float = Field(default=50.0, gt=0)
    sigma2: float = Field(default=1.0, ge=0)
    scope: Literal["per_batch", "per_sample"] = "per_batch"
    inference: Literal["resample", "frozen"] = "resample"
    active_N: Optional[float] = Field(default=None, gt=0)
    active_sigma2: Optional[float] = Field(default=None, ge=0)
    active_scope: Optional[Literal["per_batch", "per_sample"]] = None
    swept: Literal["N", "sigma2"] = "N"

    @property
    def strength(self) -> float:
        return self.N if self.swept == "N" else self.sigma2

    def passive_law(self) -> PassportLaw:
        return PassportLaw(N=self.N, sigma2=self.sigma2, scope=self.scope, inference=self.inference)

    def active_law(self) -> PassportLaw:
        return PassportLaw(
            N=self.active_N if self.active_N is not None else self.N,
            sigma2=self.active_sigma2 if self.active_sigma2 is not None else self.sigma2,
            scope=self.active_scope or self.scope,
            inference=self.inference,
        )


class GaussianNoiseDefense(BaseModel):
    model_config = ConfigDict(frozen=True)
    variant: Literal["gaussian_noise"] = "gaussian_noise"
    noise_level: float = Field(ge=0)
    target: Boundary = "embeddings"

    @property
    def strength(self) -> float:
        return self.noise_level


class SparsifyDefense(BaseModel):
    model_config = ConfigDict(frozen=True)
    variant: Literal["sparsify"] = "sparsify"
    keep_ratio: float = Field(gt=0, le=1)
    target: Boundary = "gradients"

    @property
    def strength(self) -> float:
        return self.keep_ratio


class OutOfScopeDefense(BaseModel):
    """CAE and InstaHide: named so configurations and sweeps can mention them, never runnable.
    A sweep turns each of their grid points into error rows."""

    model_config = ConfigDict(frozen=True)
    variant: Literal["cae", "instahide"]
    level: float = 0.0

    @property
    def strength(self) -> float:
        return self.level

    def refuse(self):
        raise OutOfScopeError(f"{self.variant} defense is not implemented")


DefenseSpec = Annotated[
    Union[NoDefense, FedPassDefense, GaussianNoiseDefense, SparsifyDefense, OutOfScopeDefense],
    Field(discriminator="variant"),
]


def sparsify(t: Tensor, keep_ratio: float) -> Tensor:
    """Keeps the ceil(keep_ratio * n) largest-magnitude entries; ties keep the lower flat index."""
    flat = np.asarray(t, dtype=np.float64).ravel()
    k = min(flat.size, math.ceil(keep_ratio * flat.size))
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:k]] = flat[order[:k]]
    return out.reshape(np.shape(t))


def apply_tensor_defense(t: Tensor, spec, rng: np.random.Generator, boundary: Optional[Boundary] = None) -> Tensor:
    """Applies `spec` to an outbound tensor. With `boundary`, specs targeting the other boundary pass through."""
    if isinstance(spec, OutOfScopeDefense):
        spec.refuse()
    if isinstance(spec, (NoDefense, FedPassDefense)):
        return t
    if boundary is not None and spec.target != boundary:
        return t
    if isinstance(spec, GaussianNoiseDefense):
        if spec.noise_level == 0:
            return t
        return t + rng.normal(0.0, spec.noise_level, size=np.shape(t))
    if isinstance(spec, SparsifyDefense):
        return sparsify(t, spec.keep_ratio)
    raise ConfigError(f"unknown defense {spec!r}")


def defense_grid(variant: str, strengths: Iterable[float], **fixed) -> List:
    """One spec per strength, in order. `fixed` carries the non-swept fields (target, N, sigma2 ...)."""
    strengths = [float(s) for s in strengths]
    if not strengths:
        raise ConfigError(f"empty strength list for {variant} grid")
    if any(b < a for a, b in zip(strengths, strengths[1:])):
        raise ConfigError(f"{variant} strengths must be sorted ascending: {strengths}")
    if variant in ("cae", "instahide"):
        return [OutOfScopeDefense(variant=variant, level=s) for s in strengths]
    if variant == "none":
        return [NoDefense() for _ in strengths]
    if variant == "fedpass":
        swept = fixed.get("swept", "N")
        return [FedPassDefense(**{**fixed, swept: s}) for s in strengths]
    if variant == "gaussian_noise":
        return [GaussianNoiseDefense(noise_level=s, **fixed) for s in strengths]
    if variant == "sparsify":
        return [SparsifyDefense(keep_ratio=s, **fixed) for s in strengths]
    raise ConfigError(f"unknown defense variant {variant!r}")


def check_grid_range(spec) -> None:
    """Strength windows accepted in sweep grids for the baselines."""
    if isinstance(spec, GaussianNoiseDefense) and not NOISE_GRID[0] <= spec.noise_level <= NOISE_GRID[1]:
        raise ConfigError(f"noise_level {spec.noise_level} outside {NOISE_GRID}")
    if isinstance(spec, SparsifyDefense) and not KEEP_RATIO_GRID[0] <= spec.keep_ratio <= KEEP_RATIO_GRID[1]:
        raise ConfigError(f"keep_ratio {spec.keep_ratio} outside {KEEP_RATIO_GRID}")
