import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.helpers.model import ConfigurationError, DivergenceError
from src.models.network import NetworkSpec
from src.models.state import NeuronState, WeightSet
from src.models.training import AugMode
from src.services.energy import CRNN
from src.services.losses import total_loss
from tests.conftest import build_net


def random_state(net, seed=1):
    rng = np.random.default_rng(seed)
    return NeuronState(
        layers=[rng.uniform(0.05, 0.95, size=(net.x.shape[0], *net.spec.state_shape(i))) for i in range(net.spec.n_total)]
    )


def test_init_state_shapes():
    net = build_net()
    state = net.model.init_state(3, "zeros", None, np.dtype("float64"))
    state.check_shapes(net.spec)
    assert all(not layer.any() for layer in state.layers)
    with pytest.raises(ConfigurationError):
        net.model.init_state(3, "uniform", None, np.dtype("float64"))


def test_init_weights_match_spec():
    net = build_net(upsilon=(0,), mode=AugMode.LE)
    net.weights.check_shapes(net.spec)
    assert net.weights.projections[0].shape == (net.spec.num_classes, net.spec.flat_size(0))
    assert net.weights.num_parameters() == net.spec.num_parameters() + net.weights.projections[0].size


def test_constant_bias_init_leaves_the_weights_unchanged():
    model = CRNN(NetworkSpec.from_architecture("conv3-2,fc-3", (1, 4, 4)))
    drawn = model.init_weights(np.random.default_rng(3), np.dtype("float64"), scale=0.5)
    constant = model.init_weights(np.random.default_rng(3), np.dtype("float64"), scale=0.5, bias=0.5)
    for a, b in zip(drawn.weights, constant.weights):
        assert_array_equal(a, b)
    assert all((b == 0.5).all() for b in constant.biases)
    assert not any((b == 0.5).all() for b in drawn.biases)


def test_primitive_of_dense_network_is_the_layer_sum():
    net = build_net("fc-4,fc-3", (1, 2, 2))
    state = random_state(net)
    w = net.weights
    flat = net.x.reshape(net.x.shape[0], -1)
    expected = np.sum(state.layers[0] * (flat @ w.weights[0].T + w.biases[0]))
    expected += np.sum(state.layers[1] * (state.layers[0] @ w.weights[1].T + w.biases[1]))
    assert net.model.primitive(net.x, state, w) == pytest.approx(expected, rel=1e-12)
    per_sample = net.model.primitive(net.x, state, w, per_sample=True)
    assert per_sample.shape == (net.x.shape[0],)
    assert per_sample.sum() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("architecture", ["conv3-2,maxpool,fc-3", "conv3-2,conv3-2,maxpool,fc-3", "fc-5,fc-3"])
def test_state_gradient_matches_finite_differences(architecture):
    net = build_net(architecture)
    state = random_state(net)
    grads = net.model.d_primitive_d_state(net.x, state, net.weights)
    eps = 1e-6
    for index, layer in enumerate(state.layers):
        numeric = np.zeros_like(layer)
        for flat in range(layer.size):
            values = []
            for sign in (1.0, -1.0):
                moved = [a.copy() for a in state.layers]
                moved[index].flat[flat] += sign * eps
                values.append(net.model.primitive(net.x, NeuronState(layers=moved), net.weights))
            numeric.flat[flat] = (values[0] - values[1]) / (2 * eps)
        assert_allclose(grads[index], numeric, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("architecture", ["conv3-2,maxpool,fc-3", "fc-5,fc-3"])
def test_weight_gradients_match_finite_differences(architecture):
    net = build_net(architecture)
    state = random_state(net)
    grads = net.model.weight_gradients(net.x, state, net.weights)
    eps = 1e-6
    for name, value in net.weights.named().items():
        numeric = np.zeros_like(value)
        for flat in range(value.size):
            values = []
            for sign in (1.0, -1.0):
                moved = value.copy()
                moved.flat[flat] += sign * eps
                values.append(net.model.primitive(net.x, state, net.weights.with_parameter(name, moved)))
            numeric.flat[flat] = (values[0] - values[1]) / (2 * eps)
        assert_allclose(grads[name], numeric, rtol=1e-6, atol=1e-7, err_msg=name)


def test_augmented_primitive_subtracts_the_scaled_loss():
    net = build_net("fc-4,fc-3", (1, 2, 2), upsilon=(0,), mode=AugMode.LE)
    state = random_state(net)
    phi = net.model.primitive(net.x, state, net.weights)
    assert net.model.augmented_primitive(net.x, state, net.weights, 0.0, 0.5, net.targets, AugMode.LE) == phi
    loss = total_loss(state, net.weights, net.targets, [0], 0.5, AugMode.LE, reduction="sum")
    value = net.model.augmented_primitive(net.x, state, net.weights, 0.3, 0.5, net.targets, AugMode.LE)
    assert value == pytest.approx(phi - 0.3 * loss, rel=1e-12)


def test_kd_primitive_needs_teacher_logits():
    net = build_net("fc-4,fc-3", (1, 2, 2), upsilon=(0,), mode=AugMode.KD)
    state = random_state(net)
    with pytest.raises(ConfigurationError):
        net.model.augmented_primitive(net.x, state, net.weights, 0.1, 0.5, net.targets, AugMode.KD)


def test_run_phase_with_zero_tolerance_runs_every_step():
    net = build_net()
    init = net.model.init_state(4, "zeros", None, np.dtype("float64"))
    result = net.model.run_phase(net.x, init, net.weights, max_steps=17, tol=0.0)
    assert result.steps == 17
    assert len(result.residuals) == 17
    assert len(result.energies) == 17
    assert not result.converged
    assert result.state.t == 17


def test_free_phase_reaches_a_fixed_point():
    net = build_net()
    init = net.model.init_state(4, "zeros", None, np.dtype("float64"))
    result = net.model.run_phase(net.x, init, net.weights, max_steps=500, tol=1e-12)
    assert result.converged
    assert result.steps < 500
    step = net.model.dynamics_step(net.x, result.state, net.weights)
    assert step.max_abs_diff(result.state) < 1e-11
    assert all(np.all((layer >= 0.0) & (layer <= 1.0)) for layer in result.state.layers)


def test_nudged_phase_moves_the_output_towards_the_label():
    net = build_net()
    init = net.model.init_state(4, "zeros", None, np.dtype("float64"))
    free = net.model.run_phase(net.x, init, net.weights, max_steps=300, tol=1e-12)
    nudged = net.model.run_phase(
        net.x, free.state, net.weights, beta=0.5, targets=net.targets, max_steps=300, tol=1e-12, phase="nudge+"
    )
    rows = np.arange(4)
    delta = nudged.state.output - free.state.output
    assert np.all(delta[rows, net.labels] >= 0.0)
    assert nudged.phase == "nudge+"


def test_diverging_dynamics_raise():
    spec = NetworkSpec.from_architecture("fc-4,fc-3", (1, 2, 2), linear_activation="relu")
    model = CRNN(spec)
    weights = WeightSet(
        weights=[np.full(spec.weight_shape(i), 100.0) for i in range(2)],
        biases=[np.ones(4), np.ones(3)],
    )
    x = np.ones((1, 1, 2, 2))
    init = model.init_state(1, "zeros", None, np.dtype("float64"))
    with pytest.raises(DivergenceError) as error:
        model.run_phase(x, init, weights, max_steps=1000, tol=0.0)
    assert error.value.phase == "free"


def test_predict_is_the_argmax_of_the_free_output():
    net = build_net()
    init = net.model.init_state(4, "zeros", None, np.dtype("float64"))
    labels, result = net.model.predict(net.x, net.weights, init, 200, 1e-10)
    assert_array_equal(labels, np.argmax(result.state.output, axis=1))
