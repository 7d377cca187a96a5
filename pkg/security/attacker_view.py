"""
What a semi-honest attacker gets to see.

Views are built from a party by copying only what the threat model exposes:
model parameters (white-box) or a query oracle (black-box). Passport samplers,
keys and the other side's data never enter a view.
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core.errors import AttackError
from core.layers import AvgPool2d, Conv2d, Flatten, Layer, Linear, ReLU, Shape
from core.network import Network, forward
from core.parties import PassiveParty
from core.passport import PassportLayer
from core.tensor import Tensor
from security.defenses import apply_tensor_defense


class PassiveModelView:
    """White-box copy of a passive bottom model G, passport structure included, no keys."""

    def __init__(self, network: Network):
        self._network = network.copy()

    @classmethod
    def from_party(cls, party: PassiveParty) -> "PassiveModelView":
        return cls(party.model)

    @property
    def input_shape(self) -> Shape:
        return self._network.input_shape

    @property
    def output_shape(self) -> Shape:
        return self._network.output_shape

    @property
    def passport_slots(self):
        return self._network.passport_slots

    def network(self) -> Network:
        return self._network.copy()

    def neutral_network(self) -> Network:
        """Passport slots replaced by their bias-free base layer: the gamma = 1, beta = 0 guess."""
        layers = [layer.base if isinstance(layer, PassportLayer) else layer for layer in self._network.copy().layers]
        return Network(layers, input_shape=self.input_shape)

    def skeleton(self, rng: np.random.Generator) -> Network:
        """Freshly initialized network with the same layer kinds and sizes, passports removed."""
        layers: List[Layer] = []
        for layer in self._network.layers:
            base = layer.base if isinstance(layer, PassportLayer) else layer
            if isinstance(base, Linear):
                layers.append(Linear(base.in_dim, base.out_dim, rng=rng))
            elif isinstance(base, Conv2d):
                layers.append(Conv2d(base.in_ch, base.out_ch, base.kernel, rng=rng))
            elif isinstance(base, AvgPool2d):
                layers.append(AvgPool2d(base.window))
            elif isinstance(base, ReLU):
                layers.append(ReLU())
            elif isinstance(base, Flatten):
                layers.append(Flatten())
            else:
                raise AttackError(f"no skeleton rule for {type(base).__name__}")
        return Network(layers, input_shape=self.input_shape)


@dataclass(frozen=True)
class EmbeddingObservation:
    """Embeddings as they crossed the boundary (defense applied), plus the batch they belong to."""

    H: Tensor
    batch: Tuple[int, ...] = ()


def observe_embeddings(party: PassiveParty, x: Tensor, rng: np.random.Generator) -> EmbeddingObservation:
    """What the active party receives for inputs `x`: the live passive path with a fresh training-time
    passport draw. Passports and boundary noise come from `rng`, so observing never moves the party's
    own streams or its last training key."""
    keys = party.observation_keys(len(x), rng) if party.samplers else {}
    H = forward(party.model, x, keys).output
    return EmbeddingObservation(H=apply_tensor_defense(H, party.defense, rng, boundary="embeddings"))


def probe_pairs(party: PassiveParty, xs: Tensor, rng: np.random.Generator) -> List[Tuple[Tensor, Tensor]]:
    """Black-box probe queries (x, H) against the live passive path."""
    observed = observe_embeddings(party, xs, rng).H
    return [(xs[i], observed[i]) for i in range(len(xs))]
