"""
Sequential networks built from `core.layers` with optional passport slots.
"""
import copy
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from core.errors import PassportError, ShapeMismatchError
from core.layers import Conv2d, Layer, Linear, Shape
from core.passport import PassportKey, PassportLayer
from core.tensor import Tensor, ensure_finite


@dataclass
class ActivationTrace:
    """Per-layer outputs and caches of one forward pass."""

    owner: int
    input: Tensor
    outputs: List[Tensor]
    caches: List[Any]
    keys: Dict[int, PassportKey] = field(default_factory=dict)

    @property
    def output(self) -> Tensor:
        return self.outputs[-1] if self.outputs else self.input


@dataclass
class Gradients:
    """Parameter gradients, one dict per layer mirroring `layer.params`, plus d(loss)/d(input)."""

    params: List[Dict[str, Tensor]]
    input_gradient: Tensor

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([{k: factor * v for k, v in g.items()} for g in self.params], factor * self.input_gradient)


class Network:
    def __init__(self, layers: Sequence[Layer], input_shape: Optional[Shape] = None):
        self.layers: List[Layer] = list(layers)
        self.input_shape: Optional[Shape] = tuple(input_shape) if input_shape is not None else None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, PassportLayer) and not isinstance(layer.base, (Linear, Conv2d)):
                raise PassportError(f"passport slot {i} does not wrap a Linear/Conv2d layer")
        if self.input_shape is not None:
            self.output_shape  # validates that adjacent layers compose

    @property
    def passport_slots(self) -> Set[int]:
        return {i for i, layer in enumerate(self.layers) if isinstance(layer, PassportLayer)}

    @property
    def output_shape(self) -> Shape:
        shape = self.input_shape
        if shape is None:
            raise ShapeMismatchError("network has no declared input shape")
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeMismatchError as e:
                raise ShapeMismatchError(str(e), layer_index=i, expected=e.expected, actual=e.actual) from e
        return tuple(shape)

    def parameters(self) -> Iterator[Tuple[int, str, Tensor]]:
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield i, name, value

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for _, _, v in self.parameters()))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def describe(self) -> Dict[str, Any]:
        return {"input_shape": list(self.input_shape) if self.input_shape else None,
                "layers": [layer.describe() for layer in self.layers]}

    def __call__(self, x: Tensor, keys: Optional[Mapping[int, PassportKey]] = None) -> Tensor:
        return forward(self, x, keys).output


def forward(net: Network, x: Tensor, keys: Optional[Mapping[int, PassportKey]] = None) -> ActivationTrace:
    """Runs `x` through the network; passport slots consume `keys[slot]`."""
    x = np.asarray(x, dtype=np.float64)
    keys = dict(keys or {})
    if net.input_shape is not None and tuple(x.shape[1:]) != net.input_shape:
        raise ShapeMismatchError("network input", layer_index=0, expected=net.input_shape, actual=tuple(x.shape[1:]))
    missing = net.passport_slots - set(keys)
    if missing:
        raise PassportError(f"no passport key for slot(s) {sorted(missing)}")

    outputs, caches = [], []
    h = x
    for i, layer in enumerate(net.layers):
        try:
            if isinstance(layer, PassportLayer):
                h, cache = layer.forward(h, keys[i])
            else:
                h, cache = layer.forward(h)
        except ShapeMismatchError as e:
            if e.layer_index is not None:
                raise
            raise ShapeMismatchError(f"{type(layer).__name__} forward", layer_index=i,
                                     expected=e.expected, actual=e.actual) from e
        ensure_finite(h, f"forward layer {i} ({layer.kind})")
        outputs.append(h)
        caches.append(cache)
    return ActivationTrace(owner=id(net), input=x, outputs=outputs, caches=caches,
                           keys={i: keys[i] for i in net.passport_slots})


def backward(net: Network, trace: ActivationTrace, out_grad: Tensor) -> Gradients:
    """Reverse pass over a trace produced by `forward(net, ...)`."""
    if trace.owner != id(net) or len(trace.caches) != len(net.layers):
        raise ShapeMismatchError("activation trace does not belong to this network",
                                 expected=len(net.layers), actual=len(trace.caches))
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if out_grad.shape != trace.output.shape:
        raise ShapeMismatchError("out_grad", layer_index=len(net.layers) - 1,
                                 expected=trace.output.shape, actual=out_grad.shape)
    grads: List[Dict[str, Tensor]] = [{} for _ in net.layers]
    g = out_grad
    for i in range(len(net.layers) - 1, -1, -1):
        g, grads[i] = net.layers[i].backward(trace.caches[i], g)
    ensure_finite(g, "backward input gradient")
    for i, layer_grads in enumerate(grads):
        for name, value in layer_grads.items():
            ensure_finite(value, f"backward layer {i} {name}")
    return Gradients(params=grads, input_gradient=g)


def input_gradient(net: Network, x: Tensor, out_grad: Tensor,
                   keys: Optional[Mapping[int, PassportKey]] = None) -> Tuple[Tensor, Tensor]:
    """(output, d<out_grad, output>/dx) in one call; the inversion attacks' workhorse."""
    trace = forward(net, x, keys)
    return trace.output, backward(net, trace, out_grad).input_gradient
