import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from attrnet.layers import Network
from attrnet.predict import (
    CropSet,
    SvmModel,
    crop_rects,
    extend_region,
    group_attributes,
    kmeans,
    label_of,
    make_crops,
    predict_attributes,
    rank_neurons,
    restrict,
    svm_objective,
    svm_train,
)
from attrnet.synthetic import block_weight_matrix, fully_connected, sparse_signal_task
from attrnet.tensor import Rect, ShapeError, crop, hflip


def test_extend_region_examples():
    r = Rect(45, 45, 10, 10)
    assert extend_region(r, 100, 100, 1.0) == r
    assert extend_region(r, 100, 100, 1.2) == Rect(44, 44, 12, 12)
    corner = extend_region(Rect(0, 0, 20, 20), 30, 30, 1.5)
    assert corner == Rect(0, 0, 25, 25)
    with pytest.raises(ValueError):
        extend_region(r, 100, 100, 0.9)


@given(
    st.integers(0, 40), st.integers(0, 40), st.integers(1, 40), st.integers(1, 40), st.floats(1.0, 2.0)
)
def test_extend_region_stays_inside(top, left, h, w, factor):
    H, W = 80, 90
    r = extend_region(Rect(top, left, h, w), H, W, factor)
    assert 0 <= r.top and 0 <= r.left and r.bottom <= H and r.right <= W
    assert r.top <= top and r.left <= left and r.bottom >= top + h and r.right >= left + w


def test_crops_match_offset_oracle(rng):
    region = rng.normal(size=(2, 32, 40)).astype(np.float32)
    cs = make_crops(region)
    ch, cw = 28, 35
    offsets = [(2, 2), (0, 0), (0, 5), (4, 0), (4, 5)]
    for i, (t, l) in enumerate(offsets):
        np.testing.assert_array_equal(cs.views[i], crop(region, Rect(t, l, ch, cw)))
        np.testing.assert_array_equal(cs.views[i + 5], hflip(cs.views[i]))
    assert cs.flipped == [False] * 5 + [True] * 5


def test_crop_limits():
    assert len(set(crop_rects(10, 10, 1.0))) == 1
    sym = np.tile(np.array([1, 2, 3, 2, 1], np.float32), (1, 5, 1))
    cs = make_crops(sym, 1.0)
    for a, b in zip(cs.views[:5], cs.views[5:]):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ShapeError):
        make_crops(np.zeros((1, 1, 1), np.float32), 0.4)
    with pytest.raises(ShapeError):
        CropSet([np.zeros((1, 1, 1))], [Rect(0, 0, 1, 1)], [False])


def blobs(rng, n=100, gap=6.0):
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    x = rng.normal(size=(n, 2)) + (gap / 2) * y[:, None] * np.array([1.0, 0.0])
    return x, y


def test_svm_separates_blobs_and_never_worse_than_zero(rng):
    x, y = blobs(rng)
    trace = []
    m = svm_train(x, y, C=1.0, epochs=50, seed=0, trace=trace)
    assert np.all(np.sign(m.decision(x)[:, 0]) == y)
    tr = trace[0]
    assert all(b <= a + 1e-6 for a, b in zip(tr, tr[1:]))
    final = svm_objective(m.weights[0].astype(np.float64), float(m.biases[0]), x, y, 1.0)
    assert final <= svm_objective(np.zeros(2), 0.0, x, y, 1.0)


def test_svm_zero_c_is_majority(rng):
    x = rng.normal(size=(10, 3))
    y = np.array([1, 1, 1, -1, -1, 1, 1, -1, 1, 1], float)
    m = svm_train(x, y, C=0.0, seed=1)
    assert not m.weights.any()
    assert np.mean(np.sign(m.decision(x)[:, 0]) == y) == pytest.approx(0.7)


def test_svm_duplicates_keep_signs(rng):
    x, y = blobs(rng, 60, gap=4.0)
    a = svm_train(x, y, seed=2)
    b = svm_train(np.repeat(x, 2, axis=0), np.repeat(y, 2), seed=2)
    np.testing.assert_array_equal(np.sign(a.decision(x)), np.sign(b.decision(x)))


def test_svm_label_errors(rng):
    x = rng.normal(size=(4, 2))
    with pytest.raises(ValueError):
        svm_train(x, np.ones(4), seed=0)
    with pytest.raises(ValueError):
        svm_train(x, np.array([1, 0, 1, -1]), seed=0)


def test_svm_is_deterministic(rng):
    x, y = blobs(rng)
    a, b = svm_train(x, y, seed=9), svm_train(x, y, seed=9)
    np.testing.assert_array_equal(a.weights, b.weights)


def feature_net(rng, dim=6):
    return Network([fully_connected(rng, 12, dim)], (3, 2, 2))


def test_predict_trivial_and_tie(rng):
    net = feature_net(rng)
    views = [rng.normal(size=(3, 2, 2)).astype(np.float32) for _ in range(10)]
    ones = predict_attributes(views, net, SvmModel(np.zeros((2, 6)), np.ones(2)))
    assert all(p.score == 1 and p.label == 1 for p in ones)
    assert label_of(0.0) == 1 and label_of(-1e-12) == -1


def test_alternating_views_average_to_zero_positive():
    # identity features, so view i scores +1 or -1 by construction
    net = Network([fully_connected(np.random.default_rng(0), 1, 1)], (1, 1, 1))
    net.layers[0].weight[:] = 1
    net.layers[0].bias[:] = 0
    views = [np.full((1, 1, 1), (-1) ** i, np.float32) for i in range(10)]
    (p,) = predict_attributes(views, net, SvmModel(np.ones((1, 1)), np.zeros(1)))
    assert p.score == 0 and p.label == 1


def test_predict_matches_loop_oracle(rng):
    net = feature_net(rng)
    model = SvmModel(rng.normal(size=(4, 6)), rng.normal(size=4))
    region = rng.normal(size=(3, 4, 4)).astype(np.float32)
    cs = make_crops(region, 0.5)
    got = predict_attributes(cs, net, model)
    for a in range(4):
        total = 0.0
        for v in cs.views:
            f = net.forward(v).astype(np.float64)
            total += float(model.weights[a].astype(np.float64) @ f + model.biases[a])
        assert got[a].score == pytest.approx(total / 10, abs=1e-6)
    with pytest.raises(ShapeError):
        predict_attributes(cs, net, SvmModel(np.ones((1, 5)), np.zeros(1)))


def test_rescaling_features_and_weights_keeps_labels(rng):
    net = feature_net(rng)
    model = SvmModel(rng.normal(size=(3, 6)), rng.normal(size=3))
    views = [rng.normal(size=(3, 2, 2)).astype(np.float32) for _ in range(10)]
    base = [p.label for p in predict_attributes(views, net, model)]
    scaled_net = Network([type(net.layers[0])(net.layers[0].weight * 4, net.layers[0].bias * 4)], net.input_shape)
    scaled = SvmModel(model.weights / 4, model.biases, None)
    assert [p.label for p in predict_attributes(views, scaled_net, scaled)] == base


def test_rank_neurons_examples(rng):
    w = rng.normal(size=20)
    np.testing.assert_array_equal(rank_neurons(w, 1.0), np.arange(20))
    assert list(rank_neurons([0.1, -3.0, 2.0, 0.5], 0.5)) == [1, 2]
    onehot = np.zeros(8)
    onehot[5] = 2.0
    keep = rank_neurons(onehot, 0.1)
    assert list(keep) == [5]
    model = SvmModel(onehot[None], np.array([0.5]))
    x = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(restrict(model, keep).decision(x), model.decision(x))
    full = SvmModel(rng.normal(size=(2, 8)), rng.normal(size=2))
    np.testing.assert_array_equal(restrict(full, rank_neurons(w[:8], 1.0)).decision(x), full.decision(x))
    with pytest.raises(ValueError):
        rank_neurons(w, 0.0)


def test_top_tenth_of_neurons_keeps_accuracy():
    x, y, informative = sparse_signal_task(0)
    model = svm_train(x, y, seed=0)
    full = np.mean(np.sign(model.decision(x)[:, 0]) == y)
    keep = rank_neurons(model.weights[0], 0.1)
    kept = np.mean(np.sign(restrict(model, keep).decision(x)[:, 0]) == y)
    assert kept >= 0.9 * full
    assert len(set(keep) & set(informative)) >= 8


def test_kmeans_properties(rng):
    pts = rng.normal(size=(30, 3))
    g = kmeans(pts, 4, seed=0)
    assert all(b <= a + 1e-9 for a, b in zip(g.inertia, g.inertia[1:]))
    d2 = ((pts[:, None] - g.centroids[None]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(d2.argmin(axis=1), g.labels)
    assert sorted(i for m in g.members() for i in m) == list(range(30))
    singletons = kmeans(pts[:5], 5, seed=1)
    assert sorted(len(m) for m in singletons.members()) == [1] * 5
    assert singletons.inertia[-1] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        kmeans(pts[:3], 4, seed=0)
    a, b = kmeans(pts, 4, seed=7), kmeans(pts, 4, seed=7)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_identical_columns_share_a_group(rng):
    w = rng.normal(size=(10, 6))
    w[:, 4] = w[:, 1]
    for seed in range(10):
        g = group_attributes(w, 3, seed)
        assert g.labels[1] == g.labels[4]


@pytest.mark.parametrize("seed", range(5))
def test_block_matrix_recovered(seed):
    w, labels = block_weight_matrix(seed)
    g = group_attributes(w, 3, seed)
    assert adjusted_rand_score(labels, g.labels) == 1.0
