import numpy as np
import pytest

from gradcheck import check_per_example, random_case, random_tiny_net
from tempered_dp import nn
from tempered_dp.tensor import ParameterError, RngStream, ShapeError, gaussian_sample


def test_tempered_sigmoid_221_is_tanh():
    x = np.linspace(-10, 10, 10_001)
    assert np.max(np.abs(nn.tempered_sigmoid(x, nn.TANH_PARAMS) - np.tanh(x))) <= 1e-12


def test_tempered_sigmoid_saturates_without_overflow():
    p = nn.TemperedSigmoidParams(3.0, 4.0, 1.5)
    with np.errstate(all="raise"):
        y = nn.tempered_sigmoid(np.array([-1e4, 1e4]), p)
    np.testing.assert_allclose(y, [-1.5, 1.5])
    assert p.bound == 1.5


def test_tempered_sigmoid_grad_matches_difference():
    p = nn.TemperedSigmoidParams(1.5, 3.0, 0.5)
    x = np.linspace(-3, 3, 101)
    h = 1e-6
    fd = (nn.tempered_sigmoid(x + h, p) - nn.tempered_sigmoid(x - h, p)) / (2 * h)
    np.testing.assert_allclose(nn.tempered_sigmoid_grad(x, p), fd, rtol=1e-7, atol=1e-9)


def test_relu_subgradient_at_zero():
    assert nn.relu_grad(np.array([0.0]))[0] == 0.0
    np.testing.assert_array_equal(nn.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_activation_parse():
    assert nn.Activation.parse("tanh") == nn.TANH
    assert nn.Activation.parse("ReLU") == nn.RELU
    a = nn.Activation.parse("tempered-sigmoid", 1, 2, 0.5)
    assert a.params == nn.TemperedSigmoidParams(1, 2, 0.5)
    with pytest.raises(ParameterError):
        nn.Activation.parse("gelu")


def test_mnist_shapes_and_param_count():
    net = nn.build_mnist_net()
    assert net.shapes() == [(28, 28, 1), (14, 14, 16), (7, 7, 16), (4, 4, 32),
                            (2, 2, 32), (32,), (10,)]
    assert net.num_params == 13_722


def test_cifar_shapes_and_param_count():
    net = nn.build_cifar_net()
    assert net.shapes()[-2:] == [(4, 4, 10), (10,)]
    assert net.num_params == 605_226
    assert net.layers[-2].activation == nn.NO_ACTIVATION


def test_with_activation_swaps_hidden_layers_only():
    net = nn.build_mnist_net(nn.TANH).with_activation(nn.RELU)
    assert net == nn.build_mnist_net(nn.RELU)


def test_network_rejects_wrong_head():
    with pytest.raises(ShapeError):
        nn.NetworkSpec((nn.LayerSpec("dense", 5, activation=nn.RELU),), (4,), 10)
    with pytest.raises(ParameterError):
        nn.LayerSpec("conv2d", 4, 3, 1)  # missing activation tag


def test_forward_shape_errors():
    net = nn.build_mnist_net()
    theta = nn.init_params(net, RngStream(0))
    with pytest.raises(ShapeError):
        nn.forward(net, theta, np.zeros((2, 28, 28)))
    with pytest.raises(ShapeError):
        nn.forward(net, theta[:-1], np.zeros((2, 28, 28, 1)))


def test_init_is_seeded_and_bias_free():
    net = nn.build_mnist_net()
    a = nn.init_params(net, RngStream(3))
    np.testing.assert_array_equal(a, nn.init_params(net, RngStream(3)))
    for W, b in nn.param_views(net, a):
        assert not b.any()
        assert W.std() > 0


def test_trace_holds_post_activation_outputs():
    net = nn.build_mnist_net()
    theta = nn.init_params(net, RngStream(0))
    x = np.random.default_rng(0).random((3, 28, 28, 1), dtype=np.float32)
    logits, trace = nn.forward(net, theta, x, trace=True)
    assert logits.shape == (3, 10)
    assert trace[1] is None
    np.testing.assert_array_equal(trace[0], nn.first_conv_activation(net, theta, x))
    assert np.abs(trace[0]).max() <= 1.0


def test_per_example_rows_sum_to_batch_gradient():
    net = nn.build_mnist_net(nn.RELU)
    theta = nn.init_params(net, RngStream(1), dtype=np.float64)
    x = np.random.default_rng(1).random((5, 28, 28, 1))
    y = np.arange(5)
    G = nn.per_example_gradients(net, theta, x, y)
    np.testing.assert_allclose(G.mean(axis=0), nn.batch_gradient(net, theta, x, y),
                               rtol=1e-10, atol=1e-13)
    # each row only depends on its own example
    np.testing.assert_allclose(G[2], nn.per_example_gradients(net, theta, x[2:3], y[2:3])[0],
                               rtol=1e-10, atol=1e-13)


def test_softmax_loss_and_errors():
    loss, d = nn.loss_softmax_ce(np.zeros(10), 3)
    assert loss == pytest.approx(np.log(10))
    assert d.sum() == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ParameterError):
        nn.loss_softmax_ce(np.zeros(10), 10)
    loss, _ = nn.loss_softmax_ce(np.array([1e4, -1e4]), 0)
    assert np.isfinite(loss)


@pytest.mark.parametrize("i", range(6))
def test_tiny_net_gradients_small_step(i):
    # h = 1e-5 keeps truncation far below 1e-4 even for pure relative error
    act = (nn.RELU, nn.TANH, nn.Activation.parse("tempered_sigmoid", 1.5, 3, 0.5))[i % 3]
    rng = RngStream(5).derive("small-h", i)
    net = random_tiny_net(rng, act)
    theta, x, y = random_case(net, rng)
    worst, checked, _ = check_per_example(net, theta, x, y, h=1e-5, floor=1e-7)
    assert checked > 0
    assert worst <= 1e-4


def test_cifar_net_runs_on_a_small_batch():
    net = nn.build_cifar_net(nn.TANH)
    theta = nn.init_params(net, RngStream(0))
    x = gaussian_sample(RngStream(1), (2, 32, 32, 3), 0.3).astype(np.float32)
    G = nn.per_example_gradients(net, theta, x, np.array([1, 7]))
    assert G.shape == (2, 605_226)
    assert np.all(np.isfinite(G))
