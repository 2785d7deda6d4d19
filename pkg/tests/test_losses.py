import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from attrnet.layers import ConfigError, Network, ReLU
from attrnet.losses import (
    IdentityBatch,
    backward_batch,
    cross_entropy,
    feature_outputs,
    mean_intra_distance,
    objective,
    similarity_loss,
    softmax_loss,
    toy_sgd_train,
    trainable_layers,
)
from attrnet.synthetic import fully_connected, global_conv, identity_task, separable_attribute_task
from attrnet.tensor import ShapeError
from conftest import central_difference, relative_error

finite = st.floats(-5, 5, allow_nan=False, width=64)


def test_cross_entropy_examples():
    lv = cross_entropy(np.zeros(5), [0, 1, 1, 0, 1])
    assert lv.loss == pytest.approx(5 * math.log(2), abs=1e-9)
    assert cross_entropy([20.0], [1]).loss <= 1e-8
    assert cross_entropy([-20.0], [0]).loss <= 1e-8
    with pytest.raises(ShapeError):
        cross_entropy([0.0, 1.0], [1])


def test_cross_entropy_clamps_extreme_scores():
    lv = cross_entropy([-1000.0], [1])
    assert np.isfinite(lv.loss)
    assert lv.loss == pytest.approx(-math.log(1e-12))


def test_softmax_examples():
    assert softmax_loss(np.zeros(4), 2).loss == pytest.approx(math.log(4), abs=1e-9)
    z = np.zeros(5)
    z[3] = 30
    assert softmax_loss(z, 3).loss <= 1e-8
    with pytest.raises(IndexError):
        softmax_loss(z, 5)
    with pytest.raises(IndexError):
        softmax_loss(z, -1)


def test_similarity_examples():
    lv = similarity_loss(IdentityBatch(np.array([[1.0, 0.0], [0.0, 1.0]]), [(0, 1)]))
    assert lv.loss == pytest.approx(2.0)
    same = similarity_loss(IdentityBatch.from_identities(np.ones((4, 3)), [0, 0, 1, 1]))
    assert same.loss == 0 and not same.grad.any()
    with pytest.raises(ValueError):
        similarity_loss(IdentityBatch.from_identities(np.ones((3, 2)), [0, 1, 2]))
    with pytest.raises(IndexError):
        similarity_loss(IdentityBatch(np.ones((2, 2)), [(0, 0)]))


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite), st.data())
def test_cross_entropy_gradient(f, data):
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=f.size, max_size=f.size)))
    lv = cross_entropy(f, y)
    assert lv.loss >= 0
    num = central_difference(lambda v: cross_entropy(v, y).loss, f)
    assert relative_error(lv.grad, num) <= 1e-4


@given(hnp.arrays(np.float64, st.integers(2, 8), elements=finite), st.data())
def test_softmax_gradient_and_shift(z, data):
    c = data.draw(st.integers(0, z.size - 1))
    shift = data.draw(finite)
    lv = softmax_loss(z, c)
    num = central_difference(lambda v: softmax_loss(v, c).loss, z)
    assert relative_error(lv.grad, num) <= 1e-4
    assert abs(softmax_loss(z + shift, c).loss - lv.loss) <= 1e-6


@given(hnp.arrays(np.float64, (6, 3), elements=finite), st.lists(st.integers(0, 2), min_size=6, max_size=6), finite)
def test_similarity_gradient_and_translation(x, ids, shift):
    batch = IdentityBatch.from_identities(x, ids)
    if not batch.pairs:
        return
    lv = similarity_loss(batch)
    num = central_difference(lambda v: similarity_loss(IdentityBatch(v, batch.pairs)).loss, x)
    assert relative_error(lv.grad, num) <= 1e-4
    moved = similarity_loss(IdentityBatch(x + shift, batch.pairs)).loss
    assert moved == pytest.approx(lv.loss, rel=1e-9, abs=1e-9)


def small_net(rng, n_in=4, hidden=6, n_out=3):
    return Network([fully_connected(rng, n_in, hidden), ReLU(), fully_connected(rng, hidden, n_out)], (n_in,))


@pytest.mark.parametrize("kind", ["cross_entropy", "softmax", "combined"])
def test_network_gradients_match_finite_differences(rng, kind):
    net = small_net(rng)
    x = rng.normal(size=(7, 4))
    y = rng.integers(0, 2, (7, 3)) if kind == "cross_entropy" else rng.integers(0, 3, 7)
    layers = trainable_layers(net)
    _, out_grads, acts = objective(layers, 1, x, y, kind, 0.05)
    grads = backward_batch(layers, acts, out_grads)
    for i in (0, 2):
        def loss_w(w, i=i):
            saved = layers[i].weight
            layers[i].weight = w
            try:
                return objective(layers, 1, x, y, kind, 0.05)[0]
            finally:
                layers[i].weight = saved

        num = central_difference(loss_w, layers[i].weight)
        assert relative_error(grads[i][0], num) <= 1e-4


def test_trainer_rejects_conv_layers(rng):
    net = Network([global_conv(rng, 1, 1, 3)], (1, 5, 5))
    with pytest.raises(ConfigError):
        toy_sgd_train(net, np.zeros((2, 1, 5, 5)), np.zeros(2), "softmax", 0.1, 1, 0)
    with pytest.raises(ValueError):
        toy_sgd_train(small_net(rng), np.zeros((2, 4)), np.zeros(2), "hinge", 0.1, 1, 0)


def test_zero_learning_rate_leaves_parameters(rng):
    net = small_net(rng)
    x = rng.normal(size=(20, 4))
    y = rng.integers(0, 3, 20)
    trained, trace = toy_sgd_train(net, x, y, "softmax", 0.0, 15, seed=3)
    for a, b in zip(net.layers, trained.layers):
        if not isinstance(a, ReLU):
            np.testing.assert_array_equal(a.weight, b.weight)
    assert max(trace) == min(trace)


def test_trainer_is_reproducible(rng):
    net = small_net(rng)
    x = rng.normal(size=(30, 4))
    y = rng.integers(0, 3, 30)
    a = toy_sgd_train(net, x, y, "softmax", 0.1, 20, seed=5, batch_size=8)
    b = toy_sgd_train(net, x, y, "softmax", 0.1, 20, seed=5, batch_size=8)
    assert a[1] == b[1]
    np.testing.assert_array_equal(a[0].layers[0].weight, b[0].layers[0].weight)


def test_separable_task_reaches_high_accuracy():
    x, y = separable_attribute_task(0)
    rng = np.random.default_rng(0)
    net = Network([fully_connected(rng, 2, 16), ReLU(), fully_connected(rng, 16, 2)], (2,))
    trained, trace = toy_sgd_train(net, x, y, "cross_entropy", 0.5, 500, seed=0)
    scores = feature_outputs(Network(trained.layers, (2,), feature_layer=2), x)
    assert np.mean((scores > 0) == (y > 0)) >= 0.95
    assert trace[-1] < trace[0]


def test_combined_objective_pulls_identities_together():
    x, ids = identity_task(0)
    rng = np.random.default_rng(1)
    net = Network([fully_connected(rng, 8, 16), ReLU(), fully_connected(rng, 16, 3)], (8,), feature_layer=1)
    before = mean_intra_distance(feature_outputs(net, x), ids)
    trained, _ = toy_sgd_train(net, x, ids, "combined", 0.05, 300, seed=0)
    after = mean_intra_distance(feature_outputs(trained, x), ids)
    assert after < before
