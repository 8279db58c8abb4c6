import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfrl import nn
from mfrl.data import make_rng
from mfrl.nn import ForwardCache, MlpSpec, NumericError, ParamVector, SgdState, ShapeError


def _erf_series(x, terms=80):
    # Maclaurin series; accurate for |x| <= 3 with this many terms
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def test_erf_against_series_oracle():
    xs = np.linspace(-3, 3, 121)
    approx = nn.erf_approx(xs)
    oracle = np.array([_erf_series(x) for x in xs])
    assert np.max(np.abs(approx - oracle)) < 2e-7


@given(st.floats(-50, 50, allow_nan=False))
def test_erf_is_odd_and_bounded(x):
    a = float(nn.erf_approx(np.array([x]))[0])
    b = float(nn.erf_approx(np.array([-x]))[0])
    assert a == pytest.approx(-b, abs=1e-15)
    assert -1.0 <= a <= 1.0


@pytest.mark.parametrize("kind", ["erf", "tanh", "relu"])
def test_activation_derivative_matches_central_difference(kind):
    z = np.linspace(-3, 3, 61)
    z = z[np.abs(z) > 1e-3]  # stay off the relu kink
    a = nn.activate(z, kind)
    g = nn.activate_grad(z, a, kind)
    h = 1e-6
    fd = (nn.activate(z + h, kind) - nn.activate(z - h, kind)) / (2 * h)
    # the erf approximation is not exactly differentiable; its derivative is the exact one
    tol = 5e-6 if kind == "erf" else 1e-7
    assert np.max(np.abs(g - fd)) < tol


def test_relu_kink_uses_zero_subgradient():
    z = np.array([0.0])
    assert nn.activate_grad(z, nn.activate(z, "relu"), "relu")[0] == 0.0


def test_spec_shapes_and_counts():
    spec = MlpSpec(3, (5, 4), 2)
    assert spec.shapes() == [(3, 5), (1, 5), (5, 4), (1, 4), (4, 2), (1, 2)]
    assert spec.n_params() == 15 + 5 + 20 + 4 + 8 + 2
    assert spec.feature_dim == 4


@pytest.mark.parametrize("bad", [dict(hidden_dims=()), dict(hidden_dims=(0,)), dict(activation="gelu")])
def test_spec_rejects_invalid(bad):
    kw = dict(input_dim=2, hidden_dims=(3,), output_dim=1)
    kw.update(bad)
    with pytest.raises(ValueError):
        MlpSpec(**kw)


def test_init_is_seeded_and_bounded():
    spec = MlpSpec(4, (8,), 3)
    a = nn.init_params(spec, make_rng(0))
    b = nn.init_params(spec, make_rng(0))
    assert np.array_equal(a.values, b.values)
    (W1, b1), _ = a.layers()
    assert np.all(np.abs(W1) <= math.sqrt(6 / 4))
    assert np.all(np.abs(b1) <= 1 / math.sqrt(4))


def test_forward_matches_explicit_loop(rng):
    spec = MlpSpec(3, (4, 5), 2, "tanh")
    p = nn.init_params(spec, make_rng(1))
    x = rng.normal(size=(6, 3))
    h, out = nn.forward(spec, p, x)
    (W1, b1), (W2, b2), (W3, b3) = p.layers()
    for i in range(6):
        a1 = [math.tanh(sum(x[i, k] * W1[k, j] for k in range(3)) + b1[j]) for j in range(4)]
        a2 = [math.tanh(sum(a1[k] * W2[k, j] for k in range(4)) + b2[j]) for j in range(5)]
        o = [sum(a2[k] * W3[k, j] for k in range(5)) + b3[j] for j in range(2)]
        assert np.allclose(h[i], a2, atol=1e-14)
        assert np.allclose(out[i], o, atol=1e-14)


def test_forward_rejects_wrong_input_width():
    spec = MlpSpec(3, (4,), 2)
    p = nn.init_params(spec, make_rng(0))
    with pytest.raises(ShapeError, match="layer 0"):
        nn.forward(spec, p, np.zeros((2, 5)))


def test_param_vector_rejects_wrong_length():
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(5), [(2, 2), (1, 2)])


def _fd_check(spec, seed):
    rng = make_rng(seed)
    p = nn.init_params(spec, rng)
    x = rng.normal(size=(5, spec.input_dim))
    R = rng.normal(size=(5, spec.output_dim))

    def loss(vals):
        _, out = nn.forward(spec, ParamVector(vals, p.shapes), x)
        return float(np.sum(out * R))

    cache = ForwardCache()
    nn.forward(spec, p, x, cache)
    g = nn.backward(spec, p, cache, R).values
    h = 1e-6
    fd = np.empty_like(g)
    for i in range(g.size):
        e = np.zeros_like(g)
        e[i] = h
        fd[i] = (loss(p.values + e) - loss(p.values - e)) / (2 * h)
    return np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)


@pytest.mark.parametrize("kind", ["tanh", "erf"])
@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(kind, seed):
    assert _fd_check(MlpSpec(3, (6, 5), 4, kind), seed) <= 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_backward_names_nonfinite_layer():
    spec = MlpSpec(2, (3,), 1)
    p = nn.init_params(spec, make_rng(0))
    cache = ForwardCache()
    nn.forward(spec, p, np.ones((2, 2)), cache)
    with pytest.raises(NumericError, match="layer"):
        nn.backward(spec, p, cache, np.array([[np.inf], [0.0]]))


def test_sgd_step_matches_hand_rule():
    shapes = [(2, 1), (1, 1)]
    p = ParamVector(np.array([1.0, -2.0, 0.5]), shapes)
    g = ParamVector(np.array([0.1, 0.2, -0.3]), shapes)
    st_ = SgdState(np.array([0.5, 0.0, 1.0]), momentum=0.9, weight_decay=0.01)
    v = 0.9 * np.array([0.5, 0.0, 1.0]) + g.values + 0.01 * np.array([1.0, -2.0, 0.5])
    expect = np.array([1.0, -2.0, 0.5]) - 0.1 * v
    nn.sgd_step(p, g, 0.1, st_)
    assert np.allclose(p.values, expect, atol=1e-15)
    assert np.allclose(st_.momentum_buffer, v, atol=1e-15)


def test_sgd_without_momentum_is_plain_gradient_step():
    shapes = [(2, 1), (1, 1)]
    p = ParamVector(np.zeros(3), shapes)
    g = ParamVector(np.array([1.0, 2.0, 3.0]), shapes)
    nn.sgd_step(p, g, 0.5, SgdState.zeros(3, momentum=0.0))
    assert np.array_equal(p.values, [-0.5, -1.0, -1.5])


def test_sgd_step_rejects_overflow():
    shapes = [(1, 1), (1, 1)]
    p = ParamVector(np.zeros(2), shapes)
    g = ParamVector(np.array([np.inf, 0.0]), shapes)
    with pytest.raises(NumericError):
        nn.sgd_step(p, g, 0.1, SgdState.zeros(2))


def test_lr_schedule():
    assert nn.lr_at(0, 0.05, (60, 80, 90)) == 0.05
    assert nn.lr_at(60, 0.05, (60, 80, 90)) == pytest.approx(0.005)
    assert nn.lr_at(95, 0.05, (60, 80, 90)) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        nn.lr_at(1, 0.1, (10, 5))
