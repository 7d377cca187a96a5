import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import numeric_grad, rel_err
from core.errors import ConfigError, NonFiniteError, ShapeMismatchError
from core.layers import AvgPool2d, Conv2d, Flatten, Linear, ReLU
from core.losses import cross_entropy_loss, mse_loss
from core.network import Gradients, Network, backward, forward
from core.optimizer import sgd_step
from core.tensor import as_tensor, ensure_finite


def _linear(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    layer = Linear(w.shape[1], w.shape[0], bias=b is not None)
    layer.params["weight"][...] = w
    if b is not None:
        layer.params["bias"][...] = b
    return layer


def test_as_tensor_checks_shape():
    assert as_tensor([1, 2, 3, 4], shape=(2, 2)).shape == (2, 2)
    with pytest.raises(ShapeMismatchError):
        as_tensor([1, 2, 3], shape=(2, 2))
    with pytest.raises(NonFiniteError):
        ensure_finite(np.array([1.0, np.nan]), "test")


def test_linear_forward_example():
    net = Network([_linear([[1, 2], [3, 4]], [0, 0])], input_shape=(2,))
    assert_array_equal(net(np.array([[1.0, 1.0]])), [[3.0, 7.0]])


def test_relu_forward_and_backward_examples():
    net = Network([ReLU()], input_shape=(3,))
    assert_array_equal(net(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])
    net = Network([ReLU()], input_shape=(2,))
    trace = forward(net, np.array([[-1.0, 2.0]]))
    assert_array_equal(backward(net, trace, np.array([[5.0, 5.0]])).input_gradient, [[0.0, 5.0]])


def test_linear_backward_scalar_chain_rule():
    net = Network([_linear([[2.0]])], input_shape=(1,))
    trace = forward(net, np.array([[3.0]]))
    grads = backward(net, trace, np.array([[1.0]]))
    assert_array_equal(grads.params[0]["weight"], [[3.0]])
    assert_array_equal(grads.input_gradient, [[2.0]])


def test_composed_forward_matches_single_layers(rng):
    lin, relu = Linear(4, 3, rng=rng), ReLU()
    lin.params["bias"][...] = rng.standard_normal(3)
    x = rng.standard_normal((5, 4))
    out = Network([lin, relu], input_shape=(4,))(x)
    assert_array_equal(out, np.maximum(x @ lin.weight.T + lin.bias, 0.0))


def test_forward_is_deterministic(rng):
    net = Network([Linear(6, 5, rng=rng), ReLU(), Linear(5, 2, rng=rng)], input_shape=(6,))
    x = rng.standard_normal((3, 6))
    assert_array_equal(net(x), net(x.copy()))


def test_shape_mismatch_names_layer():
    with pytest.raises(ShapeMismatchError) as info:
        Network([Linear(4, 3), Linear(2, 1)], input_shape=(4,))
    assert info.value.layer_index == 1
    net = Network([Linear(4, 3)], input_shape=(4,))
    with pytest.raises(ShapeMismatchError) as info:
        forward(net, np.zeros((2, 5)))
    assert info.value.layer_index == 0


def test_backward_rejects_foreign_trace(rng):
    a = Network([Linear(3, 2, rng=rng)], input_shape=(3,))
    b = Network([Linear(3, 2, rng=rng)], input_shape=(3,))
    trace = forward(a, rng.standard_normal((1, 3)))
    with pytest.raises(ShapeMismatchError):
        backward(b, trace, np.ones((1, 2)))
    with pytest.raises(ShapeMismatchError):
        backward(a, trace, np.ones((1, 3)))


def test_flatten_linear_matches_matrix_oracle(rng):
    x = rng.standard_normal((2, 2, 2, 2))
    lin = Linear(8, 3, rng=rng)
    out = Network([Flatten(), lin], input_shape=(2, 2, 2))(x)
    expected = np.zeros((2, 3))
    for b in range(2):
        flat = [x[b, c, i, j] for c in range(2) for i in range(2) for j in range(2)]
        for o in range(3):
            expected[b, o] = sum(lin.weight[o, k] * flat[k] for k in range(8)) + lin.bias[o]
    assert_allclose(out, expected, atol=1e-12)


def test_avgpool_and_conv_shapes():
    net = Network([Conv2d(1, 2, 3), ReLU(), AvgPool2d(2)], input_shape=(1, 7, 6))
    assert net.output_shape == (2, 2, 2)
    with pytest.raises(ConfigError):
        Conv2d(1, 1, 3, stride=2)


def _net_factories():
    return {
        "linear": lambda rng: Network([Linear(4, 3, rng=rng)], input_shape=(4,)),
        "relu": lambda rng: Network([Linear(4, 4, rng=rng), ReLU()], input_shape=(4,)),
        "flatten": lambda rng: Network([Flatten(), Linear(12, 2, rng=rng)], input_shape=(1, 3, 4)),
        "conv2d": lambda rng: Network([Conv2d(2, 3, 2, rng=rng)], input_shape=(2, 4, 4)),
        "avgpool2d": lambda rng: Network([Conv2d(1, 2, 2, rng=rng), AvgPool2d(2)], input_shape=(1, 5, 5)),
    }


@pytest.mark.parametrize("kind", sorted(_net_factories()))
def test_layer_gradients_match_finite_differences(kind):
    for instance in range(20):
        rng = np.random.default_rng([7, instance])
        net = _net_factories()[kind](rng)
        for _, _, p in net.parameters():
            p[...] = rng.standard_normal(p.shape)
        x = rng.standard_normal((2,) + net.input_shape)
        # keep ReLU inputs away from the kink
        if kind == "relu":
            x = x + 0.1 * np.sign(x)
        upstream = rng.standard_normal((2,) + net.output_shape)
        objective = lambda: float(np.sum(net(x) * upstream))

        grads = backward(net, forward(net, x), upstream)
        assert rel_err(grads.input_gradient, numeric_grad(lambda v: float(np.sum(net(v) * upstream)), x)) < 1e-4
        for i, name, p in net.parameters():
            assert rel_err(grads.params[i][name], numeric_grad(lambda _: objective(), p)) < 1e-4, (kind, i, name)


def test_sgd_step_examples():
    net = Network([_linear([[1.0]])], input_shape=(1,))
    sgd_step(net, Gradients([{"weight": np.array([[1.0]])}], np.zeros((1, 1))), lr=0.5)
    assert_array_equal(net.layers[0].weight, [[0.5]])

    net = Network([_linear([[2.0]])], input_shape=(1,))
    sgd_step(net, Gradients([{"weight": np.array([[0.0]])}], np.zeros((1, 1))), lr=0.1, weight_decay=0.5)
    assert_allclose(net.layers[0].weight, [[1.9]], atol=1e-15)


def test_sgd_converges_on_quadratic(rng):
    target = rng.standard_normal((3, 2))
    net = Network([Linear(2, 3, rng=rng, bias=False)], input_shape=(2,))
    for _ in range(1000):
        g = 2.0 * (net.layers[0].weight - target)
        sgd_step(net, Gradients([{"weight": g}], np.zeros((1, 2))), lr=0.1)
    assert np.max(np.abs(net.layers[0].weight - target)) < 1e-6


def test_sgd_step_validates_inputs():
    net = Network([_linear([[1.0]])], input_shape=(1,))
    good = Gradients([{"weight": np.zeros((1, 1))}], np.zeros((1, 1)))
    with pytest.raises(ConfigError):
        sgd_step(net, good, lr=0.0)
    with pytest.raises(ShapeMismatchError):
        sgd_step(net, Gradients([{"weight": np.zeros((2, 1))}], np.zeros((1, 1))), lr=0.1)


def test_cross_entropy_examples():
    loss, _ = cross_entropy_loss(np.array([[0.0, 0.0]]), [0])
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, grad = cross_entropy_loss(np.array([[1000.0, 0.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))
    with pytest.raises(ShapeMismatchError):
        cross_entropy_loss(np.zeros((1, 2)), [2])


def test_cross_entropy_gradient_matches_finite_differences(rng):
    logits = rng.standard_normal((4, 3))
    labels = [0, 2, 1, 2]
    _, grad = cross_entropy_loss(logits, labels)
    assert rel_err(grad, numeric_grad(lambda z: cross_entropy_loss(z, labels)[0], logits)) < 1e-5


def test_mse_loss_examples(rng):
    a = rng.standard_normal((3, 2))
    assert mse_loss(a, a.copy())[0] == 0.0
    assert mse_loss(np.array([1.0, 3.0]), np.array([1.0, 1.0]))[0] == 2.0
    b = rng.standard_normal((3, 2))
    _, grad = mse_loss(a, b)
    assert rel_err(grad, numeric_grad(lambda v: mse_loss(v, b)[0], a)) < 1e-6
    with pytest.raises(ShapeMismatchError):
        mse_loss(np.zeros(2), np.zeros(3))
