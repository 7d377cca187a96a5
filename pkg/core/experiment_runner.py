"""
Sweep orchestration: one grid point = one trained VFL system (defense spec x seed)
attacked by every configured attack. Failures become error rows; the sweep goes on.
"""
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config.experiment_config import ExperimentConfig, parse_defense
from config.settings import SETTINGS
from core.errors import ConfigError, FedPassError
from core.metrics import mse_recovery_error
from core.network import forward
from core.parties import ActiveParty, PassiveParty, build_parties
from core.protocol import TrainingHistory, align_parties, evaluate, train
from core.tensor import Tensor
from data.data_loader import DatasetSplit, load_dataset, vertical_split
from database.checkpoints import read_checkpoint, restore_parties, save_checkpoint
from database.result_store import ResultStore
from scheduler import run_jobs
from security.attacker_view import PassiveModelView, observe_embeddings, probe_pairs
from security.attacks import AuxiliaryDataset, cafe_invert, label_report, mi_blackbox, pmc_attack
from security.boundary_validator import BoundaryValidator
from security.defenses import FedPassDefense, GaussianNoiseDefense, NoDefense, OutOfScopeDefense, SparsifyDefense

VICTIM = 0
FEDPASS_LABEL_FIELDS = ("N", "sigma2", "scope", "inference", "active_N", "active_sigma2", "active_scope")


@dataclass
class RunResult:
    defense: str
    strength: float
    attack: str
    seed: int
    main_accuracy: Optional[float] = None
    recovery_error: Optional[float] = None
    train_s: float = 0.0
    attack_s: float = 0.0
    error: Optional[str] = None
    defense_spec: Dict[str, Any] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def key(self) -> Tuple[str, float, str, int]:
        return self.defense, self.strength, self.attack, self.seed


@dataclass
class TrainedSystem:
    passives: List[PassiveParty]
    active: ActiveParty
    data: DatasetSplit
    test_shards: List[Tensor]
    history: TrainingHistory
    main_accuracy: float
    train_s: float


def _fmt(value) -> str:
    return f"{value:g}" if isinstance(value, float) else str(value)


def defense_label(spec) -> str:
    """Row label of a defense. Fields that are neither swept nor at their default are folded in,
    so two grids of the same variant never share a label."""
    if isinstance(spec, NoDefense):
        return "none"
    if isinstance(spec, FedPassDefense):
        defaults = FedPassDefense()
        fixed = [f"{name}={_fmt(getattr(spec, name))}" for name in FEDPASS_LABEL_FIELDS
                 if name != spec.swept and getattr(spec, name) != getattr(defaults, name)]
        return f"fedpass:{spec.swept}" + (f"[{','.join(fixed)}]" if fixed else "")
    if isinstance(spec, (GaussianNoiseDefense, SparsifyDefense)):
        return f"{spec.variant}:{spec.target}"
    return spec.variant


def build_system(cfg: ExperimentConfig, spec, seed: int) -> TrainedSystem:
    """Loads data, splits it vertically, builds and aligns the parties. Untrained."""
    if isinstance(spec, OutOfScopeDefense):
        spec.refuse()
    data = load_dataset(cfg.dataset, seed)
    shards = vertical_split(data.train_x, cfg.parties)
    passives, active = build_parties(shards, data.train_y, data.classes, cfg.arch, defense=spec, seed=seed)
    align_parties(passives, active)
    return TrainedSystem(passives, active, data, vertical_split(data.test_x, cfg.parties), TrainingHistory(), 0.0, 0.0)


def train_system(cfg: ExperimentConfig, spec, seed: int) -> TrainedSystem:
    system = build_system(cfg, spec, seed)
    training = cfg.training.model_copy(update={"seed": seed})
    started = time.perf_counter()
    system.history = train(training, system.passives, system.active,
                           test=(system.test_shards, system.data.test_y))
    system.train_s = time.perf_counter() - started
    system.main_accuracy = evaluate(system.passives, system.active, system.test_shards, system.data.test_y)
    BoundaryValidator.validate(system.passives, system.active)
    return system


def attack_system(system: TrainedSystem, cfg: ExperimentConfig, attack: str, seed: int) -> Tuple[float, Dict[str, Any]]:
    """Runs one attack against a trained system; returns (recovery error, diagnostics)."""
    acfg = cfg.attack_cfg.model_copy(update={"seed": seed})
    victim = system.passives[VICTIM]
    targets = system.test_shards[VICTIM][:acfg.targets]
    # attack-owned stream; the victim's samplers and noise rng stay untouched
    observer = np.random.default_rng([seed, 0x0B5E])

    if attack == "cafe":
        observed = observe_embeddings(victim, targets, observer)
        result = cafe_invert(PassiveModelView.from_party(victim), observed.H, acfg)
        return mse_recovery_error(targets, result.x_hat), result.report("cafe", targets).diagnostics

    if attack == "mi":
        train_x = victim.features
        probes = train_x[:min(acfg.probes, len(train_x))]
        pairs = probe_pairs(victim, probes, observer)
        skeleton = PassiveModelView.from_party(victim).skeleton(np.random.default_rng([seed, 0x5AD0]))
        observed = observe_embeddings(victim, targets, observer)
        result = mi_blackbox(pairs, observed.H, acfg, skeleton)
        diagnostics = result.report("mi", targets).diagnostics
        diagnostics.update({"probes": result.shadow.pairs, "shadow_residual": result.shadow.residual})
        return mse_recovery_error(targets, result.x_hat), diagnostics

    if attack == "pmc":
        n = len(victim.features)
        if cfg.aux_size > n:
            raise ConfigError(f"aux_size {cfg.aux_size} exceeds the {n} aligned training records")
        picks = np.sort(np.random.default_rng([seed, 0xA0C5]).choice(n, cfg.aux_size, replace=False))
        aux_x = victim.features[picks]
        aux_H = forward(victim.model, aux_x, victim.inference_keys(len(aux_x), observer)).output
        aux = AuxiliaryDataset([(aux_H[i], int(system.active.labels[p])) for i, p in enumerate(picks)])
        test_x = system.test_shards[VICTIM]
        test_H = forward(victim.model, test_x, victim.inference_keys(len(test_x), observer)).output
        pred = pmc_attack(aux, list(test_H), acfg, classes=system.data.classes)
        report = label_report(pred, system.data.test_y, aux.n_a)
        return report.aggregate, report.diagnostics

    raise ConfigError(f"unknown attack {attack!r}")


def run_grid_point(cfg: ExperimentConfig, spec, seed: int) -> List[RunResult]:
    """Trains one system and attacks it with every configured attack."""
    label = defense_label(spec)
    base = dict(defense=label, strength=float(spec.strength), seed=seed, defense_spec=spec.model_dump(mode="json"))
    logger.info(f"[Sweep] grid point {label}={spec.strength} seed={seed}")
    try:
        system = train_system(cfg, spec, seed)
    except FedPassError as e:
        logger.error(f"[Sweep] training failed for {label}={spec.strength} seed={seed}: {e}")
        return [RunResult(attack=a, error=f"{type(e).__name__}: {e}", **base) for a in cfg.attacks]

    results = []
    for attack in cfg.attacks:
        started = time.perf_counter()
        row = RunResult(attack=attack, main_accuracy=system.main_accuracy, train_s=system.train_s, **base)
        try:
            row.recovery_error, row.diagnostics = attack_system(system, cfg, attack, seed)
        except FedPassError as e:
            logger.error(f"[Sweep] {attack} failed for {label}={spec.strength} seed={seed}: {e}")
            row.error = f"{type(e).__name__}: {e}"
            row.diagnostics = dict(getattr(e, "diagnostics", None) or {})
        row.attack_s = time.perf_counter() - started
        results.append(row)
    return results


def grid_points(cfg: ExperimentConfig) -> List[Tuple[Any, int]]:
    specs = cfg.grid()
    if not specs:
        raise ConfigError("empty defense grid")
    return [(spec, seed) for spec in specs for seed in cfg.seeds]


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, out_dir: Optional[str] = None) -> List[RunResult]:
    """Full sweep: defense grid x seeds, each grid point attacked by every configured attack.
    Rows are upserted (reruns overwrite) and exported as CSV + JSON."""
    points = grid_points(cfg)
    out = Path(out_dir or cfg.output_dir)
    store = ResultStore(str(out / SETTINGS.DB_NAME))
    logger.info(f"[Sweep] {cfg.name}: {len(points)} grid points x {len(cfg.attacks)} attacks, jobs={jobs}")
    results: List[RunResult] = []

    def write(rows: Sequence[RunResult]):
        store.upsert(rows)
        results.extend(rows)

    run_jobs(run_grid_point, [(cfg, spec, seed) for spec, seed in points], jobs=jobs, on_result=write)
    store.export(str(out), name=cfg.name)
    failed = sum(r.error is not None for r in results)
    if failed:
        logger.warning(f"[Sweep] {failed}/{len(results)} rows failed; see {out / (cfg.name + '.json')}")
    logger.success(f"[Sweep] {cfg.name} finished: {len(results)} rows in {out}")
    return sorted(results, key=lambda r: r.key)


def train_and_save(cfg: ExperimentConfig, seed: int, checkpoint_dir: Optional[str] = None) -> Tuple[TrainedSystem, Path]:
    """Single training run on the first grid spec (no defense without a grid), checkpointed."""
    specs = cfg.grid()
    spec = specs[0] if specs else NoDefense()
    system = train_system(cfg, spec, seed)
    directory = Path(checkpoint_dir or SETTINGS.CHECKPOINT_PATH)
    slug = re.sub(r"[^\w=,-]+", "-", defense_label(spec)).strip("-")
    archive, _ = save_checkpoint(str(directory / f"{cfg.name}_{slug}_s{seed}"),
                                 system.passives, system.active, {
                                     "config": cfg.model_dump(mode="json"),
                                     "defense_spec": spec.model_dump(mode="json"),
                                     "seed": seed,
                                     "main_accuracy": system.main_accuracy,
                                     "rounds": system.history.rounds,
                                 })
    return system, archive


def attack_checkpoint(path: str, cfg: Optional[ExperimentConfig] = None) -> List[RunResult]:
    """Rebuilds the system a checkpoint was trained as, restores it and runs the configured attacks."""
    meta, _ = read_checkpoint(path)
    cfg = cfg or ExperimentConfig.model_validate(meta["config"])
    spec = parse_defense(meta["defense_spec"])
    seed = int(meta["seed"])
    system = build_system(cfg, spec, seed)
    restore_parties(path, system.passives, system.active)
    system.main_accuracy = evaluate(system.passives, system.active, system.test_shards, system.data.test_y)
    rows = []
    for attack in cfg.attacks:
        started = time.perf_counter()
        row = RunResult(defense=defense_label(spec), strength=float(spec.strength), attack=attack, seed=seed,
                        main_accuracy=system.main_accuracy, defense_spec=spec.model_dump(mode="json"))
        try:
            row.recovery_error, row.diagnostics = attack_system(system, cfg, attack, seed)
        except FedPassError as e:
            logger.error(f"[Attack] {attack} failed on {path}: {e}")
            row.error = f"{type(e).__name__}: {e}"
        row.attack_s = time.perf_counter() - started
        rows.append(row)
    return rows
