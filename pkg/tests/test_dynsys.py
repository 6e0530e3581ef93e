import numpy as np
import pytest

from yopo.dynsys import (ACTIVATIONS, NetworkSpec, Params, adversarial_objective, compose, forward, init_params,
                         layer_map, loss, loss_grad, random_spec, regularizer, total_loss)
from yopo.errors import NumericError, UsageError
from yopo.numerics import central_diff, make_rng


def test_spec_normalizes_and_validates():
    s = NetworkSpec((3, 4, 2), "tanh")
    assert s.activations == ("tanh", "tanh")
    assert s.reg_weights == (0.0, 0.0)
    assert s.depth == 2 and s.input_dim == 3 and s.output_dim == 2
    with pytest.raises(UsageError):
        NetworkSpec((3,))
    with pytest.raises(UsageError):
        NetworkSpec((3, 2), ("tanh", "tanh"))
    with pytest.raises(UsageError, match="relu"):
        NetworkSpec((3, 2), "relu")
    with pytest.raises(UsageError):
        NetworkSpec((3, 2), "tanh", "hinge")
    with pytest.raises(UsageError):
        NetworkSpec((3, 2), "tanh", reg_weights=(-1.0,))


def test_spec_dict_round_trip():
    s = NetworkSpec((3, 4, 2), ("tanh", "linear"), "quadratic", (0.1, 0.0), (0.0, 0.2))
    assert NetworkSpec.from_dict(s.to_dict()) == s


def test_forward_matches_direct_composition(small_tanh):
    spec, params = small_tanh
    rng = make_rng(0, "fwd")
    x = rng.uniform(size=(7, 4))
    eta = rng.uniform(-0.1, 0.1, size=(7, 4))
    traj = forward(spec, params, x, eta)
    assert np.allclose(traj.output, compose(spec, params, x + eta), rtol=0, atol=1e-15)
    assert np.array_equal(traj.states[0], x)
    assert np.array_equal(traj.layer_input(0), x + eta)


def test_forward_batched_rows_equal_single(small_tanh):
    spec, params = small_tanh
    x = make_rng(1, "rows").uniform(size=(3, 4))
    batched = forward(spec, params, x).output
    for i in range(3):
        assert np.allclose(batched[i], forward(spec, params, x[i]).output, rtol=0, atol=1e-15)


def test_forward_rejects_wrong_dims(small_tanh):
    spec, params = small_tanh
    with pytest.raises(UsageError):
        forward(spec, params, np.zeros(5))
    with pytest.raises(UsageError):
        forward(spec, params, np.zeros(4), np.zeros(3))


def test_forward_nonfinite_raises():
    spec = NetworkSpec((1, 1), "linear", "quadratic")
    params = Params([np.array([[1e308]])], [np.zeros(1)])
    with pytest.raises(NumericError), np.errstate(over="ignore", invalid="ignore"):
        forward(spec, params, np.array([1e10]))


@pytest.mark.parametrize("name", sorted(ACTIVATIONS))
def test_activation_derivatives(name):
    fn, deriv = ACTIVATIONS[name]
    z = np.linspace(-3, 3, 13) + 0.01
    h = 1e-6
    fd = (fn(z + h) - fn(z - h)) / (2 * h)
    assert np.allclose(deriv(z, fn(z)), fd, rtol=1e-6, atol=1e-9)


def test_sigmoid_is_stable_at_extremes():
    fn, _ = ACTIVATIONS["sigmoid"]
    v = fn(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(v)) and v[0] == 0.0 and v[1] == 1.0


@pytest.mark.parametrize("kind", ["cross_entropy", "quadratic", "neg_quadratic", "linear"])
def test_loss_grad_matches_finite_differences(kind):
    spec = NetworkSpec((2, 3), "tanh", kind)
    rng = make_rng(2, kind)
    xT = rng.normal(size=3)
    y = 1 if kind == "cross_entropy" else rng.normal(size=3)
    fd = central_diff(lambda v: float(loss(spec, v, y)), xT)
    assert np.allclose(loss_grad(spec, xT, y), fd, rtol=1e-7, atol=1e-9)


def test_cross_entropy_known_value():
    spec = NetworkSpec((2, 2), "linear")
    # log(1 + e^{-1})
    assert float(loss(spec, np.array([1.0, 0.0]), 0)) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-15)


def test_label_checks():
    spec = NetworkSpec((2, 3), "tanh")
    with pytest.raises(UsageError):
        loss(spec, np.zeros(3), 3)
    with pytest.raises(UsageError):
        loss(spec, np.zeros(3), 0.5)
    q = NetworkSpec((2, 3), "tanh", "quadratic")
    with pytest.raises(UsageError):
        loss(q, np.zeros(3), np.zeros(2))


def test_params_flat_round_trip(small_tanh):
    spec, params = small_tanh
    flat = params.flat()
    assert flat.size == params.size == sum(W.size + b.size for W, b in zip(params.weights, params.biases))
    back = Params.from_flat(spec, flat)
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, params.weights))
    with pytest.raises(UsageError):
        Params.from_flat(spec, flat[:-1])


def test_glorot_init_ranges():
    spec = NetworkSpec((30, 20, 10), "tanh")
    p = init_params(spec, make_rng(0, "glorot"))
    for t, W in enumerate(p.weights):
        lim = np.sqrt(6.0 / (spec.layer_dims[t] + spec.layer_dims[t + 1]))
        assert np.max(np.abs(W)) <= lim
        assert np.all(p.biases[t] == 0)


def test_regularizers_enter_total_loss():
    spec = NetworkSpec((2, 2), "linear", "quadratic", reg_weights=(0.5,), state_reg_weights=(0.25,))
    params = Params([np.eye(2)], [np.ones(2)])
    x0 = np.array([1.0, 2.0])
    y = np.zeros(2)
    # Phi = 0.5 |(2, 3)|^2 = 6.5; theta reg = 0.5 * 0.5 * (1 + 1 + 1 + 1) = 1; state reg on clean x0 = 0.25 * 0.5 * 5
    assert float(total_loss(spec, params, x0, y)) == pytest.approx(6.5 + 1.0 + 0.625, abs=1e-14)
    assert regularizer(spec, params, 0) == pytest.approx(1.0)
    with pytest.raises(UsageError):
        regularizer(spec, params, 1)


def test_adversarial_objective_is_total_loss_at_eta(small_tanh):
    spec, params = small_tanh
    x0 = np.full(4, 0.5)
    eta = np.full(4, 0.05)
    assert adversarial_objective(spec, params, x0, 2, eta) == total_loss(spec, params, x0, 2, eta)


def test_layer_map_is_single_layer(small_tanh):
    spec, params = small_tanh
    x = np.ones(4)
    assert np.array_equal(layer_map(spec, params, 0, x), np.tanh(params.weights[0] @ x + params.biases[0]))


def test_random_spec_respects_limits():
    for k in range(20):
        s = random_spec(make_rng(k, "spec"), max_depth=3, max_dim=5)
        assert 1 <= s.depth <= 3 and max(s.layer_dims) <= 5
        if s.loss_kind == "cross_entropy":
            assert s.output_dim >= 2
