"""
Protocol participants. Each party owns its model half, its data shard and its
passport samplers; the only thing parties share is the transport.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config.experiment_config import ArchSpec
from core.architectures import build_active_model, build_passive_model
from core.errors import ConfigError
from core.network import ActivationTrace, Network
from core.passport import PassportKey, PassportSampler
from core.tensor import Tensor
from security.defenses import DefenseSpec, FedPassDefense, NoDefense


def _samplers(model: Network, rng: np.random.Generator) -> Dict[int, PassportSampler]:
    return {slot: PassportSampler(model.layers[slot].config, rng) for slot in sorted(model.passport_slots)}


@dataclass
class PassiveParty:
    id: str
    features: Tensor
    model: Network
    samplers: Dict[int, PassportSampler] = field(default_factory=dict)
    defense: DefenseSpec = field(default_factory=NoDefense)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    record_ids: Optional[List[int]] = None
    traces: Dict[int, ActivationTrace] = field(default_factory=dict)
    last_round: int = -1

    @property
    def passport_cfg(self):
        return {slot: s.config for slot, s in self.samplers.items()} or None

    def training_keys(self, batch: int) -> Dict[int, PassportKey]:
        return {slot: s.next_key(batch) for slot, s in self.samplers.items()}

    def inference_keys(self, batch: int, rng: Optional[np.random.Generator] = None) -> Dict[int, PassportKey]:
        return {slot: s.inference_key(batch, rng) for slot, s in self.samplers.items()}

    def observation_keys(self, batch: int, rng: np.random.Generator) -> Dict[int, PassportKey]:
        """Training-time keys from `rng`; the round state stays untouched."""
        return {slot: s.observation_key(batch, rng) for slot, s in self.samplers.items()}

    def reindex(self, ordering: Sequence[int]):
        """Reorders the shard to an aligned record ordering."""
        position = {rid: i for i, rid in enumerate(self.record_ids)}
        self.features = self.features[[position[rid] for rid in ordering]]
        self.record_ids = list(ordering)


@dataclass
class ActiveParty:
    labels: np.ndarray
    model: Network
    party_ids: List[str]
    samplers: Dict[int, PassportSampler] = field(default_factory=dict)
    defense: DefenseSpec = field(default_factory=NoDefense)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    record_ids: Optional[List[int]] = None
    last_round: int = -1

    id: str = "active"

    @property
    def passport_cfg(self):
        return {slot: s.config for slot, s in self.samplers.items()} or None

    def training_keys(self, batch: int) -> Dict[int, PassportKey]:
        return {slot: s.next_key(batch) for slot, s in self.samplers.items()}

    def inference_keys(self, batch: int, rng: Optional[np.random.Generator] = None) -> Dict[int, PassportKey]:
        return {slot: s.inference_key(batch, rng) for slot, s in self.samplers.items()}

    def reindex(self, ordering: Sequence[int]):
        position = {rid: i for i, rid in enumerate(self.record_ids)}
        self.labels = self.labels[[position[rid] for rid in ordering]]
        self.record_ids = list(ordering)


class BatchScheduler:
    """Per-epoch permutations of the aligned records, derived from the shared seed and broadcast to every party."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size > n:
            raise ConfigError(f"batch_size {batch_size} exceeds aligned dataset size {n}")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0xBA7C])

    @property
    def rounds_per_epoch(self) -> int:
        return -(-self.n // self.batch_size)

    def epoch(self) -> List[np.ndarray]:
        perm = self.rng.permutation(self.n)
        return [perm[i:i + self.batch_size] for i in range(0, self.n, self.batch_size)]

    def rounds(self, total: int) -> Iterator[Tuple[int, np.ndarray]]:
        r = 0
        while r < total:
            for batch in self.epoch():
                if r >= total:
                    return
                yield r, batch
                r += 1


def build_parties(shards: Sequence[Tensor], labels: np.ndarray, classes: int, arch: ArchSpec,
                  defense=None, seed: int = 0) -> Tuple[List[PassiveParty], ActiveParty]:
    """Builds K passive parties and the active party. Every random stream is spawned from `seed`."""
    defense = defense if defense is not None else NoDefense()
    k = len(shards)
    streams = np.random.SeedSequence(seed).spawn(k + 1)
    fedpass = isinstance(defense, FedPassDefense)
    passive_law = defense.passive_law() if fedpass else None
    active_law = defense.active_law() if fedpass else None

    passives = []
    for i, shard in enumerate(shards):
        init_seq, passport_seq, noise_seq = streams[i].spawn(3)
        model = build_passive_model(arch, shard.shape[1:], np.random.default_rng(init_seq), passive_law)
        passives.append(PassiveParty(
            id=f"passive_{i}",
            features=shard,
            model=model,
            samplers=_samplers(model, np.random.default_rng(passport_seq)),
            defense=defense,
            rng=np.random.default_rng(noise_seq),
            record_ids=list(range(len(shard))),
        ))
    init_seq, passport_seq, noise_seq = streams[k].spawn(3)
    model = build_active_model(arch, classes, np.random.default_rng(init_seq), active_law)
    active = ActiveParty(
        labels=np.asarray(labels, dtype=np.int64),
        model=model,
        party_ids=[p.id for p in passives],
        samplers=_samplers(model, np.random.default_rng(passport_seq)),
        defense=defense,
        rng=np.random.default_rng(noise_seq),
        record_ids=list(range(len(labels))),
    )
    logger.info(f"[Protocol] built {k} passive parties + active, defense={defense.variant}, seed={seed}")
    return passives, active
