"""
Dense layers with analytic reverse-mode gradients.
Every layer works on a leading batch axis and reports gradients with respect
to its parameters and to its input (inversion attacks need the latter).
"""
from typing import Any, Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import ConfigError, ShapeMismatchError
from core.tensor import Tensor, glorot_uniform

Shape = Tuple[int, ...]


class Layer:
    """Base class. `params` maps parameter names to arrays updated in place."""

    kind = "layer"

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        raise NotImplementedError

    def backward(self, cache: Any, grad_out: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind}


class WeightedLayer(Layer):
    """Linear / Conv2d: the layers a passport slot may wrap."""

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    @property
    def bias(self) -> Optional[Tensor]:
        return self.params.get("bias")

    def drop_bias(self):
        self.params.pop("bias", None)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def apply_weight(self, x: Tensor) -> Tensor:
        """The bias-free linear map W*x."""
        raise NotImplementedError

    def weight_grad(self, x: Tensor, grad_out: Tensor) -> Tensor:
        raise NotImplementedError

    def input_grad(self, grad_out: Tensor, input_shape: Shape) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        self.check_input(x)
        out = self.apply_weight(x)
        if self.bias is not None:
            out = out + self.bias.reshape((1, -1) + (1,) * (out.ndim - 2))
        return out, x

    def backward(self, cache: Any, grad_out: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        x = cache
        grads = {"weight": self.weight_grad(x, grad_out)}
        if self.bias is not None:
            grads["bias"] = grad_out.sum(axis=tuple(i for i in range(grad_out.ndim) if i != 1))
        return self.input_grad(grad_out, x.shape), grads

    def check_input(self, x: Tensor):
        raise NotImplementedError


class Linear(WeightedLayer):
    kind = "linear"

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None, bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params["weight"] = glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim)
        if bias:
            self.params["bias"] = np.zeros(out_dim)

    def check_input(self, x: Tensor):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError("Linear input", expected=("batch", self.in_dim), actual=x.shape)

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_dim,):
            raise ShapeMismatchError("Linear input", expected=(self.in_dim,), actual=tuple(input_shape))
        return (self.out_dim,)

    def apply_weight(self, x: Tensor) -> Tensor:
        return x @ self.weight.T

    def weight_grad(self, x: Tensor, grad_out: Tensor) -> Tensor:
        return grad_out.T @ x

    def input_grad(self, grad_out: Tensor, input_shape: Shape) -> Tensor:
        return grad_out @ self.weight

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim, "bias": self.bias is not None}


class Conv2d(WeightedLayer):
    """Stride-1, valid-padding 2-D convolution (cross-correlation)."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 rng: Optional[np.random.Generator] = None, bias: bool = True):
        super().__init__()
        if stride != 1:
            raise ConfigError(f"Conv2d supports stride 1 only, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        fan_in, fan_out = in_ch * kernel * kernel, out_ch * kernel * kernel
        self.params["weight"] = glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out)
        if bias:
            self.params["bias"] = np.zeros(out_ch)

    def check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != self.in_ch or x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise ShapeMismatchError("Conv2d input", expected=("batch", self.in_ch, f">={self.kernel}", f">={self.kernel}"),
                                     actual=x.shape)

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = input_shape
        if c != self.in_ch or h < self.kernel or w < self.kernel:
            raise ShapeMismatchError("Conv2d input", expected=(self.in_ch, self.kernel, self.kernel), actual=tuple(input_shape))
        return (self.out_ch, h - self.kernel + 1, w - self.kernel + 1)

    def _windows(self, x: Tensor) -> Tensor:
        return sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))

    def apply_weight(self, x: Tensor) -> Tensor:
        return np.einsum("bchwij,ocij->bohw", self._windows(x), self.weight, optimize=True)

    def weight_grad(self, x: Tensor, grad_out: Tensor) -> Tensor:
        return np.einsum("bchwij,bohw->ocij", self._windows(x), grad_out, optimize=True)

    def input_grad(self, grad_out: Tensor, input_shape: Shape) -> Tensor:
        dx = np.zeros(input_shape)
        h_out, w_out = grad_out.shape[2], grad_out.shape[3]
        for i in range(self.kernel):
            for j in range(self.kernel):
                dx[:, :, i:i + h_out, j:j + w_out] += np.einsum("bohw,oc->bchw", grad_out, self.weight[:, :, i, j])
        return dx

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "bias": self.bias is not None}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return np.maximum(x, 0.0), x

    def backward(self, cache: Any, grad_out: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        return grad_out * (cache > 0), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache: Any, grad_out: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        return grad_out.reshape(cache), {}


class AvgPool2d(Layer):
    """Non-overlapping average pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "avgpool2d"

    def __init__(self, window: int):
        super().__init__()
        self.window = window

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = input_shape
        if h < self.window or w < self.window:
            raise ShapeMismatchError("AvgPool2d input", expected=(c, self.window, self.window), actual=tuple(input_shape))
        return (c, h // self.window, w // self.window)

    def forward(self, x: Tensor) -> Tuple[Tensor, Any]:
        if x.ndim != 4 or x.shape[2] < self.window or x.shape[3] < self.window:
            raise ShapeMismatchError("AvgPool2d input", expected=("batch", "c", f">={self.window}", f">={self.window}"),
                                     actual=x.shape)
        b, c, h, w = x.shape
        k = self.window
        hc, wc = (h // k) * k, (w // k) * k
        out = x[:, :, :hc, :wc].reshape(b, c, hc // k, k, wc // k, k).mean(axis=(3, 5))
        return out, x.shape

    def backward(self, cache: Any, grad_out: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        k = self.window
        dx = np.zeros(cache)
        spread = np.repeat(np.repeat(grad_out, k, axis=2), k, axis=3) / (k * k)
        dx[:, :, :spread.shape[2], :spread.shape[3]] = spread
        return dx, {}

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "window": self.window}
