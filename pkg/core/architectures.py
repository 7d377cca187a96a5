"""
Desk-scale model zoo: bottom models G (passive) and top models F (active),
with passport slots at the last conv / last linear of each passive model and
at the first fully-connected layer of the active model.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config.experiment_config import ArchSpec, LenetLiteArch, MlpArch
from core.errors import ConfigError, ShapeMismatchError
from core.layers import AvgPool2d, Conv2d, Flatten, Layer, Linear, ReLU, Shape, WeightedLayer
from core.network import Network
from core.passport import PassportLaw, PassportLayer


def _weighted_indices(layers: Sequence[Layer]) -> List[int]:
    return [i for i, layer in enumerate(layers) if isinstance(layer, WeightedLayer)]


def insert_passport(layers: List[Layer], input_shape: Shape, position: int, law: PassportLaw,
                    rng: np.random.Generator, hidden: Optional[int] = None) -> int:
    """Wraps the `position`-th weighted layer (negative counts from the end) into a PassportLayer.
    Returns the slot index within `layers`."""
    weighted = _weighted_indices(layers)
    try:
        slot = weighted[position]
    except IndexError:
        raise ConfigError(f"passport position {position} out of range for {len(weighted)} weighted layers")
    shape = tuple(input_shape)
    for layer in layers[:slot]:
        shape = layer.output_shape(shape)
    layers[slot] = PassportLayer(layers[slot], law.for_shape(shape), rng=rng, hidden=hidden)
    return slot


def mlp_layers(input_shape: Shape, dims: Sequence[int], rng: np.random.Generator) -> List[Layer]:
    layers: List[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    width = int(np.prod(input_shape))
    for k, out in enumerate(dims):
        layers.append(Linear(width, out, rng=rng))
        if k < len(dims) - 1:
            layers.append(ReLU())
        width = out
    return layers


def lenet_lite_layers(input_shape: Shape, spec: LenetLiteArch, rng: np.random.Generator) -> List[Layer]:
    if len(input_shape) != 3:
        raise ConfigError(f"lenet_lite needs image shards (c, h, w), got {tuple(input_shape)}")
    c = input_shape[0]
    layers: List[Layer] = [
        Conv2d(c, spec.conv_channels[0], spec.kernels[0], rng=rng),
        ReLU(),
        AvgPool2d(spec.pool),
        Conv2d(spec.conv_channels[0], spec.conv_channels[1], spec.kernels[1], rng=rng),
        ReLU(),
        Flatten(),
    ]
    shape = tuple(input_shape)
    try:
        for layer in layers:
            shape = layer.output_shape(shape)
    except ShapeMismatchError as e:
        raise ConfigError(f"lenet_lite does not fit shard shape {tuple(input_shape)}: {e}") from e
    layers.append(Linear(shape[0], spec.fusion_dim, rng=rng))
    return layers


def build_passive_model(arch: ArchSpec, input_shape: Shape, rng: np.random.Generator,
                        law: Optional[PassportLaw] = None) -> Network:
    if isinstance(arch, MlpArch):
        layers = mlp_layers(input_shape, arch.layer_dims, rng)
    elif isinstance(arch, LenetLiteArch):
        layers = lenet_lite_layers(input_shape, arch, rng)
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    if law is not None:
        insert_passport(layers, input_shape, arch.passive_passport_position, law, rng, arch.autoencoder_hidden)
    net = Network(layers, input_shape=input_shape)
    logger.debug(f"[Arch] passive {arch.kind} {tuple(input_shape)} -> {net.output_shape}, "
                 f"slots={sorted(net.passport_slots)}, params={net.parameter_count}")
    return net


def build_active_model(arch: ArchSpec, classes: int, rng: np.random.Generator,
                       law: Optional[PassportLaw] = None) -> Network:
    fusion_dim = arch.fusion_dim
    layers = mlp_layers((fusion_dim,), list(arch.active_hidden) + [classes], rng)
    if law is not None:
        insert_passport(layers, (fusion_dim,), arch.active_passport_position, law, rng, arch.autoencoder_hidden)
    net = Network(layers, input_shape=(fusion_dim,))
    logger.debug(f"[Arch] active head {fusion_dim} -> {classes}, slots={sorted(net.passport_slots)}")
    return net


def centralized_model(passive: Network, active: Network) -> Tuple[Network, int]:
    """K=1 unsplit network F(G(x)) sharing copies of both halves' parameters.
    Returns the network and the index of the first active layer."""
    bottom, top = passive.copy(), active.copy()
    return Network(bottom.layers + top.layers, input_shape=passive.input_shape), len(bottom.layers)
