import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbcat.numerics import (MLP, Activation, CosineAnneal, DenseLayer, Mode, NonFiniteError,
                            OptimKind, OptimState, adam_step, check_finite, dense_backward,
                            dense_forward, mish, mish_grad, sgd_momentum_step, softplus)


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def test_mish_values():
    assert mish(np.array(0.0)) == 0.0
    x = np.array([-2.0, 1.0, 3.0])
    assert np.allclose(mish(x), x * np.tanh(np.log1p(np.exp(x))))


def test_mish_extremes_are_finite():
    x = np.array([-1e3, -50.0, 50.0, 1e3])
    y = mish(x)
    assert np.all(np.isfinite(y))
    assert y[-1] == pytest.approx(1e3)
    assert np.all(np.isfinite(mish_grad(x)))
    assert np.all(np.isfinite(softplus(x)))


def test_mish_grad_matches_fd():
    x = np.linspace(-6, 6, 41)
    h = 1e-6
    fd = (mish(x + h) - mish(x - h)) / (2 * h)
    assert np.allclose(mish_grad(x), fd, atol=1e-7)


def test_sigmoid_activation_grad():
    z = np.linspace(-5, 5, 11)
    out = Activation.SIGMOID(z)
    assert np.allclose(Activation.SIGMOID.grad(z, out), out * (1 - out))


def test_check_finite():
    check_finite(np.ones(3), "x")
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]), "x")


def _layer(n_in, n_out, act=Activation.MISH, seed=0):
    return DenseLayer.init(n_in, n_out, act, np.random.default_rng(seed), np.float64)


def test_dense_init_ranges():
    layer = _layer(30, 20)
    lim = math.sqrt(6 / 50)
    assert np.all(np.abs(layer.weight) <= lim)
    assert np.all(layer.bias == 0)
    assert np.all(layer.bn_gamma == 1) and np.all(layer.bn_beta == 0)


def test_dense_forward_shape_errors():
    layer = _layer(4, 3)
    with pytest.raises(ValueError):
        dense_forward(layer, np.zeros((5, 2)), Mode.EVAL)
    with pytest.raises(ValueError):
        dense_forward(layer, np.zeros((1, 4)), Mode.TRAIN)


def test_train_mode_normalises_and_updates_running_stats():
    layer = _layer(3, 4, Activation.SIGMOID)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(16, 3)) * 5 + 2
    out, cache = dense_forward(layer, x, Mode.TRAIN)
    z = x @ layer.weight.T + layer.bias
    mu, var = z.mean(0), z.var(0)
    assert np.allclose(layer.bn_running_mean, 0.1 * mu)
    assert np.allclose(layer.bn_running_var, 0.9 + 0.1 * var)
    zhat = (z - mu) / np.sqrt(var + 1e-5)
    assert np.allclose(out, 1 / (1 + np.exp(-zhat)))


def test_eval_mode_leaves_buffers_alone():
    layer = _layer(3, 4)
    before = {k: v.copy() for k, v in layer.buffers().items()}
    dense_forward(layer, np.ones((5, 3)), Mode.EVAL)
    for k, v in layer.buffers().items():
        assert np.array_equal(v, before[k])


@pytest.mark.parametrize("act", [Activation.MISH, Activation.SIGMOID])
def test_dense_backward_matches_fd(act):
    rng = np.random.default_rng(3)
    layer = _layer(4, 3, act, seed=3)
    layer.bn_gamma[:] = rng.uniform(0.5, 1.5, 3)
    layer.bn_beta[:] = rng.normal(size=3)
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(6, 3))

    def loss():
        out, _ = dense_forward(layer, x, Mode.TRAIN)
        return float((out * w).sum())

    running = {k: v.copy() for k, v in layer.buffers().items()}
    out, cache = dense_forward(layer, x, Mode.TRAIN)
    gx, grads = dense_backward(layer, w, cache)
    for name, p in layer.parameters().items():
        fd = fd_grad(loss, p)
        assert np.allclose(grads[name], fd, atol=1e-6), name
    assert np.allclose(gx, fd_grad(loss, x), atol=1e-6)
    for k, v in layer.buffers().items():
        v[...] = running[k]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_mlp_gradients_property(n_layers, rows, seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 9)) for _ in range(n_layers + 1)]
    net = MLP(sizes, rng, np.float64)
    x = rng.normal(size=(rows, sizes[0]))
    w = rng.normal(size=(rows, sizes[-1]))
    snap = {k: v.copy() for k, v in net.buffers().items()}

    def loss():
        out, _ = net.forward(x, Mode.TRAIN)
        return float((out * w).sum())

    out, caches = net.forward(x, Mode.TRAIN)
    gx, grads = net.backward(w, caches)
    for name, p in net.parameters().items():
        fd = fd_grad(loss, p, eps=1e-5)
        err = np.abs(grads[name] - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(grads[name])), 1e-4)
        assert err.max() < 1e-4, name
    for k, v in net.buffers().items():
        v[...] = snap[k]


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 2**31 - 1))
def test_outputs_finite_for_large_inputs(scale, seed):
    rng = np.random.default_rng(seed)
    net = MLP([3, 5, 4], rng, np.float64)
    x = np.clip(rng.normal(size=(4, 3)) * scale, -1e3, 1e3)
    for mode in (Mode.TRAIN, Mode.EVAL):
        out, _ = net.forward(x, mode)
        assert np.all(np.isfinite(out))
        assert np.all((out >= 0) & (out <= 1))


def test_sgd_momentum_hand_example():
    w = np.array([1.0])
    state = OptimState(OptimKind.SGD_MOMENTUM)
    sgd_momentum_step({"w": w}, {"w": np.array([0.5])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w[0] == pytest.approx(0.95)
    sgd_momentum_step({"w": w}, {"w": np.array([0.5])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w[0] == pytest.approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5))


def test_sgd_weight_decay_only_on_named():
    a, b = np.array([2.0]), np.array([2.0])
    state = OptimState(OptimKind.SGD_MOMENTUM)
    zero = {"a": np.zeros(1), "b": np.zeros(1)}
    sgd_momentum_step({"a": a, "b": b}, zero, state, 0.1, 0.0, 0.5, decay={"a"})
    assert a[0] == pytest.approx(2.0 - 0.1 * 1.0)
    assert b[0] == 2.0


def test_optimizer_errors():
    w = np.zeros(2)
    state = OptimState(OptimKind.SGD_MOMENTUM)
    with pytest.raises(ValueError):
        sgd_momentum_step({"w": w}, {"w": np.zeros(3)}, state, 0.1, 0.9, 0.0)
    with pytest.raises(ValueError):
        sgd_momentum_step({"w": w}, {"w": np.zeros(2)}, state, 0.0, 0.9, 0.0)
    with pytest.raises(KeyError):
        adam_step({"w": w}, {"v": np.zeros(2)}, OptimState(OptimKind.ADAM), 0.1)


def test_adam_first_step_moves_by_lr():
    w = np.array([1.0, -1.0])
    adam_step({"w": w}, {"w": np.array([3.0, -0.2])}, OptimState(OptimKind.ADAM), lr=0.01)
    assert np.allclose(w, [0.99, -0.99], atol=1e-6)


def test_cosine_schedule():
    s = CosineAnneal(10)
    assert s.factor(0) == 1.0
    assert s.factor(5) == pytest.approx(0.5)
    assert s.factor(10) == pytest.approx(0.0)
    w = np.array([1.0])
    state = OptimState(OptimKind.ADAM, step=10)
    adam_step({"w": w}, {"w": np.array([1.0])}, state, 0.01, schedule=s)
    assert w[0] == 1.0
