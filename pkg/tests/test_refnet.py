import numpy as np
import pytest

from actmon.refnet import (
    BatchNorm,
    Conv2D,
    Dense,
    LeakyReLU,
    Network,
    forward,
    forward_with_trace,
    init_network,
    input_gradient,
    leaky_relu,
    load_network,
    monitored_layer_index,
    network_from_json,
    network_to_json,
    save_network,
)


def single_neuron_net():
    return Network(
        (Dense(np.array([[1.0, 1.0]]), np.array([0.0])), LeakyReLU()),
        input_shape=(2,),
    )


def finite_difference(net, x, target, step=1e-5):
    """Central-difference gradient of the SSE loss; the independent oracle."""

    def loss(xv):
        y = forward(net, xv)
        return float(((y - np.asarray(target).ravel()) ** 2).sum())

    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        grad[idx] = (loss(xp) - loss(xm)) / (2.0 * step)
        it.iternext()
    return grad


def rel_error(a, b):
    # worst absolute deviation relative to the gradient's own magnitude;
    # elementwise ratios are ill-posed where components cancel to ~0
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def random_mixed_net(rng):
    """Small random net covering all four layer kinds, kink-safe inputs."""
    h = int(rng.integers(4, 7))
    w = int(rng.integers(4, 7))
    f = int(rng.integers(2, 4))
    arch = [
        ("conv2d", f),
        ("batchnorm",),
        ("leaky_relu",),
        ("dense", int(rng.integers(3, 7))),
        ("leaky_relu",),
        ("dense", int(rng.integers(2, 5))),
    ]
    net = init_network(arch, (h, w), seed=int(rng.integers(0, 2**31)))
    return net


def kink_distance(net, x):
    """Smallest |pre-activation| feeding any leaky ReLU layer."""
    _, trace = forward_with_trace(net, x)
    dist = np.inf
    for i, layer in enumerate(net.layers):
        if isinstance(layer, LeakyReLU):
            dist = min(dist, float(np.abs(trace[i]).min()))
    return dist


class TestLeakyRelu:
    def test_positive_identity(self):
        assert leaky_relu(2.0) == 2.0

    def test_negative_slope(self):
        assert leaky_relu(-1.0) == pytest.approx(-0.01)

    def test_zero_boundary(self):
        assert leaky_relu(0.0) == 0.0

    def test_vectorized(self):
        out = leaky_relu(np.array([-2.0, 0.0, 3.0]))
        assert np.allclose(out, [-0.02, 0.0, 3.0])


class TestForward:
    def test_hand_evaluated_positive(self):
        assert forward(single_neuron_net(), np.array([1.0, 2.0]))[0] == pytest.approx(3.0)

    def test_hand_evaluated_negative_branch(self):
        out = forward(single_neuron_net(), np.array([-1.0, -2.0]))
        assert out[0] == pytest.approx(-0.03)

    def test_identity_batchnorm(self):
        net = Network(
            (BatchNorm(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=1e-12),),
            input_shape=(3,),
        )
        x = np.array([0.5, -1.5, 2.0])
        assert np.allclose(forward(net, x), x, atol=1e-9)

    def test_conv_hand_case(self):
        # 2x2 sum filter over a 3x3 ramp: each output sums its window
        net = Network((Conv2D(np.ones((2, 2))),), input_shape=(3, 3))
        x = np.arange(9.0).reshape(3, 3)
        out = forward(net, x)
        assert np.allclose(out, [8.0, 12.0, 20.0, 24.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            forward(single_neuron_net(), np.zeros(3))

    def test_deterministic(self):
        net = random_mixed_net(np.random.default_rng(0))
        x = np.random.default_rng(1).uniform(size=net.input_shape)
        assert np.array_equal(forward(net, x), forward(net, x))

    def test_batchnorm_affine_in_input(self):
        # inference batchnorm is affine: bn(a*x+b) = a*scale*x + bn(b)-ish
        bn = BatchNorm(
            np.array([1.5, 0.5]),
            np.array([0.1, -0.2]),
            np.array([0.3, 0.7]),
            np.array([2.0, 0.5]),
        )
        net = Network((bn,), input_shape=(2,))
        x = np.array([0.4, -1.0])
        a, b = 2.5, np.array([0.3, 0.1])
        lhs = forward(net, a * x + b)
        scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
        rhs = a * scale * x + forward(net, b)
        assert np.allclose(lhs, rhs)


class TestTrace:
    def test_trace_starts_with_flattened_input(self):
        net = random_mixed_net(np.random.default_rng(2))
        x = np.random.default_rng(3).uniform(size=net.input_shape)
        _, trace = forward_with_trace(net, x)
        assert np.array_equal(trace[0], x.ravel())

    def test_trace_ends_with_output(self):
        net = random_mixed_net(np.random.default_rng(4))
        x = np.random.default_rng(5).uniform(size=net.input_shape)
        out, trace = forward_with_trace(net, x)
        assert np.array_equal(trace[len(trace) - 1], out)
        assert np.array_equal(out, forward(net, x))

    def test_trace_length_is_layers_plus_one(self):
        net = init_network([("dense", 4), ("leaky_relu",), ("dense", 2)], (3,), seed=0)
        _, trace = forward_with_trace(net, np.zeros(3))
        assert len(trace) == 4


class TestGradient:
    def test_dense_closed_form(self):
        rng = np.random.default_rng(7)
        W = rng.normal(size=(3, 4))
        net = Network((Dense(W, np.zeros(3)),), input_shape=(4,))
        x = rng.normal(size=4)
        t = rng.normal(size=3)
        expected = 2.0 * W.T @ (W @ x - t)
        assert np.allclose(input_gradient(net, x, t), expected, rtol=1e-12)

    def test_zero_gradient_at_minimum(self):
        net = single_neuron_net()
        x = np.array([1.0, 2.0])
        t = forward(net, x)
        assert np.allclose(input_gradient(net, x, t), 0.0)

    def test_matches_finite_differences_mixed_net(self):
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 10:
            net = random_mixed_net(rng)
            x = rng.uniform(0.1, 0.9, size=net.input_shape)
            if kink_distance(net, x) < 1e-3:
                continue  # the 0-point subgradient choice breaks FD there
            t = forward(net, x) + rng.normal(0.0, 0.5, size=int(np.prod(net.output_shape)))
            g = input_gradient(net, x, t)
            fd = finite_difference(net, x, t)
            assert rel_error(g, fd) < 1e-4
            checked += 1

    def test_bad_loss_rejected(self):
        with pytest.raises(ValueError, match="sse"):
            input_gradient(single_neuron_net(), np.zeros(2), np.zeros(1), loss="mse")

    def test_target_length_checked(self):
        with pytest.raises(ValueError, match="target"):
            input_gradient(single_neuron_net(), np.zeros(2), np.zeros(4))


class TestInit:
    def test_same_seed_identical(self):
        arch = [("conv2d", 3), ("batchnorm",), ("leaky_relu",), ("dense", 4)]
        a = init_network(arch, (5, 5), seed=42)
        b = init_network(arch, (5, 5), seed=42)
        assert network_to_json(a) == network_to_json(b)

    def test_dense_shape_contract(self):
        net = init_network([("dense", 3)], (4,), seed=0)
        assert net.layers[0].weights.shape == (3, 4)

    def test_fan_in_bound(self):
        net = init_network([("dense", 64)], (4,), seed=1)
        layer = net.layers[0]
        assert np.abs(layer.weights).max() <= 0.5
        assert np.abs(layer.bias).max() <= 0.5

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown layer kind"):
            init_network([("softmax",)], (4,), seed=0)

    def test_shape_chain_validated(self):
        with pytest.raises(ValueError, match="conv2d"):
            init_network([("dense", 4), ("conv2d", 3)], (8,), seed=0)


class TestSerialization:
    def test_json_roundtrip(self, tmp_path):
        net = random_mixed_net(np.random.default_rng(9))
        path = str(tmp_path / "net.json")
        save_network(net, path)
        loaded = load_network(path)
        x = np.random.default_rng(10).uniform(size=net.input_shape)
        assert np.array_equal(forward(net, x), forward(loaded, x))

    def test_version_checked(self):
        doc = network_to_json(single_neuron_net())
        doc["version"] = 9
        with pytest.raises(ValueError, match="version"):
            network_from_json(doc)


class TestLayerSelection:
    def test_last_selectors(self):
        net = init_network(
            [("conv2d", 3), ("batchnorm",), ("leaky_relu",), ("dense", 4), ("batchnorm",), ("leaky_relu",)],
            (6, 6),
            seed=0,
        )
        assert monitored_layer_index(net, "last_batchnorm") == 5
        assert monitored_layer_index(net, "last_leaky_relu") == 6
        assert monitored_layer_index(net, 0) == 0

    def test_missing_kind(self):
        net = init_network([("dense", 2)], (3,), seed=0)
        with pytest.raises(ValueError, match="no batchnorm"):
            monitored_layer_index(net, "last_batchnorm")
