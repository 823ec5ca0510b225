"""Dense-network engine: init, forward, exact backprop, Adam."""

import numpy as np
import pytest

from penn_mpc import nn
from penn_mpc.errors import ConfigError, ShapeError, TrainingError


def test_init_deterministic():
    a = nn.init_params([2, 1], seed=7)
    b = nn.init_params([2, 1], seed=7)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weights, lb.weights)
        assert np.array_equal(la.biases, lb.biases)


def test_init_shapes():
    p = nn.init_params([3, 64, 64, 6], seed=0)
    assert p.layer_sizes == [3, 64, 64, 6]
    assert len(p.layers) == 3
    assert p.layers[0].weights.shape == (64, 3)
    assert p.layers[-1].out_dim == 6
    assert all(np.all(l.biases == 0.0) for l in p.layers)


def test_init_variance_scaled_by_fan_in():
    # fan-in 64, > 1e4 draws: weight variance within 20% of 1/64
    p = nn.init_params([64, 200], seed=3)
    var = p.layers[0].weights.var()
    assert abs(var - 1.0 / 64.0) < 0.2 / 64.0


def test_init_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        nn.init_params([4], seed=0)
    with pytest.raises(ConfigError):
        nn.init_params([4, 0, 2], seed=0)
    with pytest.raises(ConfigError):
        nn.init_params([4, 2], activation="softplus", seed=0)


def _identity_net(n):
    p = nn.init_params([n, n], activation="identity", seed=0)
    p.layers[0].weights = np.eye(n)
    p.layers[0].biases = np.zeros(n)
    return p


def test_forward_identity_net():
    p = _identity_net(3)
    x = np.array([0.3, -1.2, 4.0])
    y, _ = nn.mlp_forward(p, x)
    assert np.allclose(y, x, atol=0)


def test_forward_single_tanh_unit():
    p = nn.init_params([1, 1, 1], activation="tanh", seed=0)
    p.layers[0].weights[:] = 1.0
    p.layers[0].biases[:] = 0.0
    p.layers[1].weights[:] = 1.0
    p.layers[1].biases[:] = 0.0
    y, _ = nn.mlp_forward(p, np.array([0.5]))
    assert y[0] == pytest.approx(0.46211716, abs=1e-8)


def test_forward_zero_weights_gives_bias():
    p = nn.init_params([4, 8, 2], seed=1)
    for layer in p.layers:
        layer.weights[:] = 0.0
    p.layers[-1].biases[:] = [1.5, -2.0]
    y, _ = nn.mlp_forward(p, np.array([9.0, -3.0, 2.0, 7.0]))
    assert np.allclose(y, [1.5, -2.0])


def test_forward_dim_mismatch():
    p = nn.init_params([4, 2], seed=0)
    with pytest.raises(ShapeError):
        nn.mlp_forward(p, np.zeros(5))


def test_forward_batch_matches_rowwise():
    p = nn.init_params([5, 16, 4], seed=2)
    x = np.random.default_rng(0).normal(size=(11, 5))
    batch, _ = nn.mlp_forward(p, x)
    for i in range(11):
        row, _ = nn.mlp_forward(p, x[i])
        assert np.all(np.abs(batch[i] - row) < 1e-12)


def test_affine_with_identity_activation():
    p = nn.init_params([4, 6, 3], activation="identity", seed=5)
    rng = np.random.default_rng(1)
    x = rng.normal(size=4)
    f = lambda v: nn.mlp_forward(p, v)[0]
    alpha = 2.7
    lhs = f(alpha * x) - f(np.zeros(4))
    rhs = alpha * (f(x) - f(np.zeros(4)))
    assert np.all(np.abs(lhs - rhs) < 1e-9)


def test_backward_linear_chain_rule():
    # y = w x + b with w=2, x=3: dL/dw=3, dL/db=1, dL/dx=w
    p = nn.init_params([1, 1], activation="identity", seed=0)
    p.layers[0].weights[:] = 2.0
    _, cache = nn.mlp_forward(p, np.array([3.0]))
    grads, input_grad = nn.mlp_backward(p, cache, np.array([1.0]))
    assert grads[0].weights[0, 0] == pytest.approx(3.0)
    assert grads[0].biases[0] == pytest.approx(1.0)
    assert input_grad[0] == pytest.approx(2.0)


def test_backward_zero_grad():
    p = nn.init_params([3, 5, 2], seed=0)
    x = np.ones(3)
    _, cache = nn.mlp_forward(p, x)
    grads, input_grad = nn.mlp_backward(p, cache, np.zeros(2))
    assert all(np.all(g.weights == 0) and np.all(g.biases == 0) for g in grads)
    assert np.all(input_grad == 0)


def _fd_check(p, x, proj, rel_tol=1e-4, h=1e-5):
    """Central finite differences on L = sum(proj * f(x)) for every param."""
    y, cache = nn.mlp_forward(p, x)
    grads, _ = nn.mlp_backward(p, cache, proj)
    worst = 0.0
    for li, layer in enumerate(p.layers):
        for arr, g in ((layer.weights, grads[li].weights),
                       (layer.biases, grads[li].biases)):
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                yp, _ = nn.mlp_forward(p, x)
                flat[j] = orig - h
                ym, _ = nn.mlp_forward(p, x)
                flat[j] = orig
                fd = (np.sum(proj * yp) - np.sum(proj * ym)) / (2 * h)
                denom = max(abs(fd), abs(gflat[j]), 1e-8)
                worst = max(worst, abs(fd - gflat[j]) / denom)
    assert worst < rel_tol, f"worst rel error {worst}"


@pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
def test_backward_matches_finite_differences(activation):
    rng = np.random.default_rng(hash(activation) % 2**31)
    p = nn.init_params([5, 8, 4], activation=activation, seed=11)
    # keep relu pre-activations away from the kink
    x = rng.normal(size=(3, 5))
    proj = rng.normal(size=(3, 4))
    _fd_check(p, x, proj)


def test_backward_fd_larger_net():
    rng = np.random.default_rng(42)
    p = nn.init_params([10, 16, 16, 6], activation="tanh", seed=9)
    x = rng.normal(size=(2, 10))
    proj = rng.normal(size=(2, 6))
    _fd_check(p, x, proj)


def test_backward_stale_cache_rejected():
    p = nn.init_params([3, 4, 2], seed=0)
    _, cache = nn.mlp_forward(p, np.ones(3))
    other = nn.init_params([3, 5, 2], seed=0)
    with pytest.raises(ShapeError):
        nn.mlp_backward(other, cache, np.ones(2))
    with pytest.raises(ShapeError):
        nn.mlp_backward(p, cache, np.ones(3))


def test_adam_zero_grads_leave_params():
    p = nn.init_params([2, 3], seed=4)
    g = [nn.LayerParams(np.zeros_like(l.weights), np.zeros_like(l.biases))
         for l in p.layers]
    state = nn.AdamState.init(p)
    p2, state2 = nn.adam_step(p, g, state)
    assert state2.step == 1
    for l1, l2 in zip(p.layers, p2.layers):
        assert np.array_equal(l1.weights, l2.weights)
        assert np.array_equal(l1.biases, l2.biases)


def test_adam_first_step_magnitude():
    # with g=1 the bias corrections cancel and the step is ~ -lr
    p = nn.init_params([1, 1], activation="identity", seed=0)
    w0 = p.layers[0].weights[0, 0]
    g = [nn.LayerParams(np.array([[1.0]]), np.array([0.0]))]
    p2, _ = nn.adam_step(p, g, nn.AdamState.init(p))
    delta = p2.layers[0].weights[0, 0] - w0
    assert delta == pytest.approx(-9.99999e-4, abs=1e-9)


def test_adam_pure_function():
    p = nn.init_params([3, 2], seed=8)
    g = [nn.LayerParams(np.full_like(p.layers[0].weights, 0.3),
                        np.full_like(p.layers[0].biases, -0.2))]
    state = nn.AdamState.init(p)
    a1, s1 = nn.adam_step(p, g, state)
    a2, s2 = nn.adam_step(p, g, state)
    assert np.array_equal(a1.layers[0].weights, a2.layers[0].weights)
    assert s1.step == s2.step == 1
    assert np.array_equal(s1.m[0].weights, s2.m[0].weights)


def test_adam_rejects_nan_grads():
    p = nn.init_params([2, 2], seed=0)
    g = [nn.LayerParams(np.full((2, 2), np.nan), np.zeros(2))]
    with pytest.raises(TrainingError):
        nn.adam_step(p, g, nn.AdamState.init(p))


def test_forward_determinism_bitwise():
    p = nn.init_params([6, 12, 3], seed=123)
    x = np.random.default_rng(5).normal(size=(4, 6))
    y1, _ = nn.mlp_forward(p, x)
    y2, _ = nn.mlp_forward(p, x)
    assert np.array_equal(y1, y2)
