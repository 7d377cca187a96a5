from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from config.settings import SETTINGS
from core.errors import ConfigError
from security.defenses import DefenseSpec, check_grid_range, defense_grid


class MnistDataset(BaseModel):
    kind: Literal["mnist"] = "mnist"
    path: Optional[str] = None                  # defaults to SETTINGS.DATA_DIR
    train_subset: int = Field(default=2000, gt=0)
    test_subset: int = Field(default=1000, gt=0)
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"

    @property
    def root(self) -> Path:
        return Path(self.path or SETTINGS.DATA_DIR)


class SyntheticDataset(BaseModel):
    kind: Literal["synthetic"] = "synthetic"
    n: int = Field(default=1000, gt=0)
    n_test: int = Field(default=500, gt=0)
    dims: int = Field(default=8, gt=0)
    classes: int = Field(default=2, ge=2)
    blob_sep: float = Field(default=10.0, ge=0)
    spread: float = Field(default=1.0, gt=0)


class MlpArch(BaseModel):
    kind: Literal["mlp"] = "mlp"
    layer_dims: List[int] = Field(default_factory=lambda: [128, 64])  # last entry is the fusion dim
    active_hidden: List[int] = Field(default_factory=list)
    passive_passport_position: int = -1         # among the weighted layers
    active_passport_position: int = 0
    autoencoder_hidden: Optional[int] = None

    @property
    def fusion_dim(self) -> int:
        return self.layer_dims[-1]


class LenetLiteArch(BaseModel):
    kind: Literal["lenet_lite"] = "lenet_lite"
    conv_channels: Tuple[int, int] = (4, 8)
    kernels: Tuple[int, int] = (5, 3)
    pool: int = 2
    fusion_dim: int = 64
    active_hidden: List[int] = Field(default_factory=list)
    passive_passport_position: int = -2         # the last conv
    active_passport_position: int = 0
    autoencoder_hidden: Optional[int] = None


DatasetSpec = Annotated[Union[MnistDataset, SyntheticDataset], Field(discriminator="kind")]
ArchSpec = Annotated[Union[MlpArch, LenetLiteArch], Field(discriminator="kind")]


class TrainingConfig(BaseModel):
    epochs: int = Field(default=20, ge=0)
    rounds: Optional[int] = Field(default=None, ge=0)   # overrides epochs when set
    batch_size: int = Field(default=64, gt=0)
    lr: float = Field(default=1e-2, gt=0)
    weight_decay: float = Field(default=4e-5, ge=0)
    parties: int = Field(default=2, gt=0)
    seed: int = 0
    eval_every: int = Field(default=0, ge=0)            # rounds between test evaluations; 0 = once per epoch
    threaded_parties: bool = False
    fault_injection: bool = False


class AttackConfig(BaseModel):
    iterations: int = Field(default=2000, gt=0)
    step_size: float = Field(default=0.1, gt=0)
    tv_lambda: float = Field(default=0.1, ge=0)
    restarts: int = Field(default=3, gt=0)
    seed: int = 0
    init_std: float = Field(default=0.1, gt=0)
    optimize_passports: bool = False
    tv_shape: Optional[Tuple[int, ...]] = None          # reshape flat features before TV
    targets: int = Field(default=16, gt=0)              # test samples attacked per run
    probes: int = Field(default=200, gt=0)              # MI probe queries
    shadow_iterations: int = Field(default=500, gt=0)
    shadow_lr: float = Field(default=0.05, gt=0)
    pmc_mode: Literal["softmax", "least_squares"] = "softmax"
    pmc_iterations: int = Field(default=500, gt=0)
    pmc_lr: float = Field(default=0.5, gt=0)


class DefenseGrid(BaseModel):
    variant: Literal["none", "fedpass", "gaussian_noise", "sparsify", "cae", "instahide"]
    strengths: List[float]
    fixed: Dict[str, Any] = Field(default_factory=dict)

    def specs(self) -> list:
        return defense_grid(self.variant, self.strengths, **self.fixed)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "fedpass"
    dataset: DatasetSpec = Field(default_factory=MnistDataset)
    arch: ArchSpec = Field(default_factory=MlpArch)
    parties: int = Field(default=2, gt=0)
    split: Literal["columns"] = "columns"
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    defense_grids: List[DefenseGrid] = Field(default_factory=list)
    attacks: List[Literal["cafe", "mi", "pmc"]] = Field(default_factory=lambda: ["cafe", "pmc"])
    attack_cfg: AttackConfig = Field(default_factory=AttackConfig)
    aux_size: int = Field(default=40, gt=0)
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = SETTINGS.RESULTS_PATH
    strict_grids: bool = True

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"duplicate seeds: {self.seeds}")
        if self.training.parties != self.parties:
            self.training = self.training.model_copy(update={"parties": self.parties})
        return self

    def grid(self) -> list:
        """Every defense spec of every grid, checked against the sweep windows when strict."""
        specs = []
        for g in self.defense_grids:
            for spec in g.specs():
                if self.strict_grids:
                    check_grid_range(spec)
                specs.append(spec)
        return specs


def parse_defense(data: Dict[str, Any]):
    try:
        return TypeAdapter(DefenseSpec).validate_python(data)
    except ValidationError as e:
        raise ConfigError(f"invalid defense spec {data}: {e}") from e


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return ExperimentConfig.model_validate_json(path.read_text())
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config {path}: {e}") from e
