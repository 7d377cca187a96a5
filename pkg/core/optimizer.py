from core.errors import ConfigError, ShapeMismatchError
from core.network import Gradients, Network


def sgd_step(net: Network, grads: Gradients, lr: float, weight_decay: float = 0.0):
    """theta <- theta - lr * (g + weight_decay * theta), in place."""
    if lr <= 0 or weight_decay < 0:
        raise ConfigError(f"lr must be positive and weight_decay non-negative (lr={lr}, wd={weight_decay})")
    if len(grads.params) != len(net.layers):
        raise ShapeMismatchError("gradients do not mirror the network", expected=len(net.layers), actual=len(grads.params))
    for i, layer in enumerate(net.layers):
        layer_grads = grads.params[i]
        if set(layer_grads) != set(layer.params):
            raise ShapeMismatchError("gradient names", layer_index=i, expected=sorted(layer.params), actual=sorted(layer_grads))
        for name, param in layer.params.items():
            g = layer_grads[name]
            if g.shape != param.shape:
                raise ShapeMismatchError(f"gradient for {name}", layer_index=i, expected=param.shape, actual=g.shape)
            param -= lr * (g + weight_decay * param)
