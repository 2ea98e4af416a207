import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clientindex.smallnet import (
    DenseParams,
    GradientError,
    MlpParams,
    ShapeError,
    Tensor,
    concat,
    cosine_rows,
    cosine_sim,
    cross_entropy,
    finite_diff_check,
    glorot_dense,
    grad,
    init_mlp,
    kl_from_logits,
    mlp_apply,
    mlp_forward,
    sgd_init,
    sgd_step,
    softmax,
    tree_leaves,
)

from reference import mlp_layers, scalar_mlp

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# mlp_forward

def test_identity_layer_returns_input():
    p = MlpParams([DenseParams(np.eye(3), np.zeros(3))], ["identity"])
    x = np.array([[1.0, -2.0, 3.5], [0.0, 4.0, 1.0]])
    np.testing.assert_array_equal(mlp_forward(p, x), x)


@pytest.mark.parametrize("act", ["identity", "tanh", "relu"])
def test_zero_input_zero_bias_gives_zero(act):
    p = MlpParams([DenseParams(np.random.default_rng(1).normal(size=(4, 3)), np.zeros(3))], [act])
    np.testing.assert_array_equal(mlp_forward(p, np.zeros((2, 4))), np.zeros((2, 3)))


def test_mlp_matches_scalar_reference():
    rng = np.random.default_rng(7)
    p = init_mlp([5, 4, 3], ["tanh", "relu"], rng)
    p.layers[0].bias[:] = rng.normal(size=4)
    x = rng.normal(size=(6, 5))
    np.testing.assert_allclose(mlp_forward(p, x), scalar_mlp(*mlp_layers(p), x), rtol=1e-12, atol=1e-14)


def test_mlp_dimension_error_names_layer():
    p = init_mlp([3, 4, 2], ["tanh", "identity"], np.random.default_rng(0))
    with pytest.raises(ShapeError, match="layer 0"):
        mlp_forward(p, np.zeros((1, 5)))


def test_mlp_layers_must_chain():
    with pytest.raises(ShapeError, match="layer 1"):
        MlpParams([DenseParams(np.zeros((2, 3)), np.zeros(3)),
                   DenseParams(np.zeros((4, 1)), np.zeros(1))], ["tanh", "tanh"])


def test_glorot_bounds():
    p = glorot_dense(10, 30, np.random.default_rng(0))
    limit = math.sqrt(6.0 / 40)
    assert np.all(np.abs(p.weight) <= limit)
    assert np.all(p.bias == 0)


# grad

def test_grad_of_sum_is_ones():
    p = DenseParams(np.arange(6.0).reshape(2, 3), np.array([1.0, 2.0, 3.0]))
    g = grad(lambda q: q.weight.sum() + q.bias.sum(), p)
    np.testing.assert_array_equal(g.weight, np.ones((2, 3)))
    np.testing.assert_array_equal(g.bias, np.ones(3))


def test_grad_of_half_square_norm_is_param():
    W = np.random.default_rng(3).normal(size=(3, 4))
    p = DenseParams(W, np.zeros(4))
    g = grad(lambda q: 0.5 * (q.weight * q.weight).sum(), p)
    np.testing.assert_allclose(g.weight, W, rtol=0, atol=0)


def test_unsupported_primitive_raises():
    p = DenseParams(np.ones((2, 2)), np.zeros(2))
    with pytest.raises((GradientError, TypeError)):
        grad(lambda q: Tensor(np.sin(q.weight)).sum(), p)


def test_loss_must_be_tensor():
    p = DenseParams(np.ones((2, 2)), np.zeros(2))
    with pytest.raises(GradientError):
        grad(lambda q: 1.0, p)


@pytest.mark.parametrize("seed", range(5))
def test_every_primitive_passes_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp([4, 5, 3], ["relu", "tanh"], rng)
    p.layers[0].bias[:] = rng.uniform(0.5, 1.0, size=5)
    x = rng.normal(size=(4, 4))
    target = rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, size=4)
    mask = ~np.eye(4, dtype=bool)

    def loss(q):
        h = mlp_apply(q, x)
        a = h[:, :2]
        b = concat([h[:, 2:], h[:, :1]], axis=1)
        parts = [
            cosine_rows(a + 3.0, b + 2.0).mean(),
            ((h - target).abs()).sum() / 10.0,
            cross_entropy(h, labels),
            (h @ h.T).logsumexp(axis=1, mask=mask).mean(),
            ((h.square() + 1.0).log() + (h * 0.3).exp()).mean(),
            (h.square().sum(axis=1) + 1.0).sqrt().mean(),
        ]
        total = parts[0]
        for t in parts[1:]:
            total = total + t
        return total

    assert finite_diff_check(loss, p) < 1e-4


# sgd

def test_plain_sgd_subtracts_gradient():
    p = DenseParams(np.array([[1.0, 2.0]]), np.array([0.5]) * np.ones(2))
    g = DenseParams(np.array([[0.25, -1.0]]), np.array([1.0, 1.0]))
    new, _ = sgd_step(p, g, sgd_init(p, 1.0))
    np.testing.assert_array_equal(new.weight, [[0.75, 3.0]])
    np.testing.assert_array_equal(new.bias, [-0.5, -0.5])


def test_zero_grad_twice_leaves_params():
    p = DenseParams(np.array([[1.0, -2.0]]), np.array([3.0, 4.0]))
    zero = DenseParams(np.zeros((1, 2)), np.zeros(2))
    state = sgd_init(p, 0.1, momentum=0.9)
    q, state = sgd_step(p, zero, state)
    q, state = sgd_step(q, zero, state)
    np.testing.assert_array_equal(q.weight, p.weight)
    np.testing.assert_array_equal(q.bias, p.bias)


def test_momentum_weight_decay_hand_computed():
    # v1 = 0.5 + 5e-5 * 1 = 0.50005, w1 = 1 - 0.1 * v1
    # v2 = 0.9 * v1 + 0.5 + 5e-5 * w1, w2 = w1 - 0.1 * v2
    p = DenseParams(np.array([[1.0]]), np.array([1.0]))
    g = DenseParams(np.array([[0.5]]), np.array([0.5]))
    state = sgd_init(p, 0.1, momentum=0.9, weight_decay=5e-5)
    p1, state = sgd_step(p, g, state)
    assert p1.weight[0, 0] == pytest.approx(0.949995, abs=1e-15)
    assert p1.bias[0] == pytest.approx(0.95, abs=1e-15)  # biases are not decayed
    p2, state = sgd_step(p1, g, state)
    assert p2.weight[0, 0] == pytest.approx(0.854985750025, abs=1e-14)


def test_sgd_does_not_mutate_and_is_deterministic():
    rng = np.random.default_rng(0)
    p = init_mlp([3, 2], ["tanh"], rng)
    g = init_mlp([3, 2], ["tanh"], rng)
    before = [x.copy() for _, x in tree_leaves(p)]
    a, _ = sgd_step(p, g, sgd_init(p, 0.1, 0.9, 1e-3))
    b, _ = sgd_step(p, g, sgd_init(p, 0.1, 0.9, 1e-3))
    for x, y in zip(before, [x for _, x in tree_leaves(p)]):
        np.testing.assert_array_equal(x, y)
    for (_, x), (_, y) in zip(tree_leaves(a), tree_leaves(b)):
        assert x.tobytes() == y.tobytes()


def test_sgd_shape_mismatch():
    p = DenseParams(np.zeros((2, 2)), np.zeros(2))
    g = DenseParams(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        sgd_step(p, g, sgd_init(p, 0.1))


# cosine, softmax, kl

def test_cosine_examples():
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1.5, -2.0, 3.0], [3.0, -4.0, 6.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim([1, 2], [3, 4]) == pytest.approx(11 / (math.sqrt(5) * math.sqrt(25)), abs=1e-15)


def test_cosine_zero_norm_raises():
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 2])


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, math.log(2)]), [1 / 3, 2 / 3], atol=1e-15)
    np.testing.assert_allclose(softmax(np.full(7, 3.3)), np.full(7, 1 / 7), atol=1e-15)
    big = softmax([1000.0, 1000.5])
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, softmax([0.0, 0.5]), atol=1e-15)


def test_kl_examples():
    assert kl_from_logits([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert kl_from_logits([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]) == pytest.approx(0.0, abs=1e-15)
    p, q = [0.5, 0.5], [0.25, 0.75]
    direct = sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))
    assert kl_from_logits([0.0, 0.0], [0.0, math.log(3)]) == pytest.approx(direct, abs=1e-14)


def test_finite_diff_check_on_simple_losses():
    p = DenseParams(np.array([[0.3, -1.2], [2.0, 0.7]]), np.array([0.1, -0.4]))
    c = np.array([[1.0, 2.0], [-3.0, 0.5]])
    # central differences are exact on a linear loss, so a wide step only removes round-off
    assert finite_diff_check(lambda q: (q.weight * c).sum() + q.bias.sum(), p, h=1e-2) < 1e-10
    assert finite_diff_check(lambda q: (q.weight * q.weight).sum() + (q.bias * q.bias).sum() * 3.0,
                             p) < 1e-8


# properties

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(v, c):
    s = softmax(v)
    assert abs(s.sum() - 1.0) <= 1e-12
    assert np.all(s > 0)
    assert np.max(np.abs(softmax(v + c) - s)) < 1e-12


nonzero_vec = arrays(np.float64, 4, elements=st.floats(-10, 10, allow_nan=False)).filter(
    lambda a: np.linalg.norm(a) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(nonzero_vec, nonzero_vec, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(a, b, c, d):
    assert abs(cosine_sim(c * a, d * b) - cosine_sim(a, b)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-20, 20)),
       arrays(np.float64, 5, elements=st.floats(-20, 20)), st.floats(-20, 20))
def test_kl_nonnegative_and_zero_on_shift(p, q, c):
    assert kl_from_logits(p, q) >= 0.0
    assert kl_from_logits(p, p + c) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dense_tanh_gradient_property(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp([3, 3, 2], ["tanh", "identity"], rng)
    x = rng.normal(size=(4, 3))
    assert finite_diff_check(lambda q: (mlp_apply(q, x).square()).mean(), p) < 1e-4
