import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attrnet.layers import (
    ConfigError,
    FullyConnected,
    GlobalConv,
    LocalConv,
    MacCounter,
    MaxPool,
    Network,
    PatchGrid,
    ReLU,
    conv_forward,
    fc_forward,
    local_conv_forward_patch,
    max_pool,
    patch_forward_oracle,
    relu,
    trunk_geometry,
)
from attrnet.synthetic import global_conv, local_conv, fully_connected
from attrnet.tensor import Rect, ShapeError, crop


def loop_conv(x, w, b, stride):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for ch in range(c):
                    for u in range(k):
                        for v in range(k):
                            acc += float(x[ch, i * stride + u, j * stride + v]) * float(w[f, ch, u, v])
                out[f, i, j] = acc + b[f]
    return out


def test_patch_grid_counts_and_origins():
    g = PatchGrid(3, 4, 2)
    assert g.patch_side == 12
    assert g.counts(16, 13) == (3, 1)
    assert g.origins(14, 14) == [(0, 0), (0, 2), (2, 0), (2, 2)]
    assert PatchGrid(2, 5).patch_stride == 5
    assert g.patch_count(11, 20) == 0
    with pytest.raises(ConfigError):
        PatchGrid(3, 4, 3)
    with pytest.raises(ConfigError):
        PatchGrid(0, 4)


def test_conv_examples():
    ones = GlobalConv(np.ones((1, 1, 3, 3)), np.zeros(1))
    assert conv_forward(np.ones((1, 3, 3), np.float32), ones).item() == 9
    rng = np.random.default_rng(0)
    w = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
    delta = np.zeros((1, 5, 5), np.float32)
    delta[0, 2, 2] = 1
    out = conv_forward(delta, GlobalConv(w, np.zeros(2)))
    # cross-correlation of an impulse reads the filter backwards
    np.testing.assert_array_equal(out, w[:, 0, ::-1, ::-1])


def test_conv_matches_loop_oracle_and_counts(rng):
    x = rng.normal(size=(3, 16, 16)).astype(np.float32)
    layer = GlobalConv(rng.normal(size=(8, 3, 5, 5)), rng.normal(size=8), stride=2)
    c = MacCounter()
    out = conv_forward(x, layer, c)
    assert out.shape == (8, 6, 6)
    assert np.abs(out - loop_conv(x, layer.weight, layer.bias, 2)).max() <= 1e-5
    assert c.conv == out.size * 25 * 3 and c.fc == 0


def test_conv_errors(rng):
    layer = GlobalConv(rng.normal(size=(2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        conv_forward(np.zeros((2, 5, 5), np.float32), layer)
    with pytest.raises(ShapeError):
        conv_forward(np.zeros((3, 2, 5), np.float32), layer)


@given(st.integers(0, 10_000), st.floats(-4, 4))
def test_conv_is_linear_without_bias(seed, a):
    rng = np.random.default_rng(seed)
    layer = GlobalConv(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    x = rng.normal(size=(2, 7, 7)).astype(np.float32)
    lhs = conv_forward((a * x).astype(np.float32), layer).astype(np.float64)
    rhs = a * conv_forward(x, layer).astype(np.float64)
    assert np.abs(lhs - rhs).max() <= 1e-5 * max(1.0, np.abs(rhs).max())


def test_conv_translation(rng):
    layer = GlobalConv(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), stride=2)
    x = rng.normal(size=(1, 15, 15)).astype(np.float32)
    full = conv_forward(x, layer)
    shifted = conv_forward(x[:, 2:, 2:].copy(), layer)
    np.testing.assert_allclose(shifted, full[:, 1:, 1:], atol=1e-6)


def test_local_conv_single_cell_is_global(rng):
    w = rng.normal(size=(1, 4, 2, 3, 3))
    b = rng.normal(size=(1, 4))
    x = rng.normal(size=(2, 8, 8)).astype(np.float32)
    local = local_conv_forward_patch(x, LocalConv(w, b, cells=1))
    np.testing.assert_allclose(local, conv_forward(x, GlobalConv(w[0], b[0])), atol=1e-6)


def test_local_conv_per_cell_constant_banks():
    g, cell = 3, 4
    w = np.arange(g * g, dtype=np.float32).reshape(g * g, 1, 1, 1, 1)
    x = np.random.default_rng(1).normal(size=(1, g * cell, g * cell)).astype(np.float32)
    out = local_conv_forward_patch(x, LocalConv(w, np.zeros((g * g, 1)), cells=g))
    for i in range(g * g):
        a, b = divmod(i, g)
        r = Rect(a * cell, b * cell, cell, cell)
        np.testing.assert_allclose(crop(out, r), i * crop(x, r), atol=1e-6)


@pytest.mark.parametrize("span", [1, 2, 3])
def test_local_conv_matches_crop_convolve_stitch(rng, span):
    g, cell = 3, 4
    layer = local_conv(rng, g, span, 2, 3, 3)
    x = rng.normal(size=(2, g * cell, g * cell)).astype(np.float32)
    c = MacCounter()
    out = local_conv_forward_patch(x, layer, c)
    n, region = g - span + 1, span * cell
    side = region - 2
    assert out.shape == (3, n * side, n * side)
    for i in range(layer.banks):
        a, b = divmod(i, n)
        part = x[:, a * cell:a * cell + region, b * cell:b * cell + region]
        ref = loop_conv(part, layer.weight[i], layer.bias[i], 1)
        got = out[:, a * side:(a + 1) * side, b * side:(b + 1) * side]
        assert np.abs(got - ref).max() <= 1e-5
    assert c.conv == out.size * 9 * 2


def test_local_conv_equal_banks_match_global_on_each_region(rng):
    g, cell, span = 3, 5, 2
    w = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    n = g - span + 1
    layer = LocalConv(np.stack([w] * n * n), np.stack([b] * n * n), g, span)
    x = rng.normal(size=(2, g * cell, g * cell)).astype(np.float32)
    out = local_conv_forward_patch(x, layer)
    glob = conv_forward(x, GlobalConv(w, b))
    side = span * cell - 2
    for a in range(n):
        for c in range(n):
            got = out[:, a * side:(a + 1) * side, c * side:(c + 1) * side]
            ref = glob[:, a * cell:a * cell + side, c * cell:c * cell + side]
            assert np.abs(got - ref).max() <= 1e-6


def test_local_conv_geometry_errors(rng):
    with pytest.raises(ConfigError):
        LocalConv(rng.normal(size=(3, 1, 1, 2, 2)), np.zeros((3, 1)), cells=2)
    layer = local_conv(rng, 3, 1, 1, 1, 2)
    with pytest.raises(ConfigError):
        local_conv_forward_patch(np.zeros((1, 10, 10), np.float32), layer)
    with pytest.raises(ShapeError):
        local_conv_forward_patch(np.zeros((2, 9, 9), np.float32), layer)


def test_relu_pool_fc_examples(rng):
    assert relu(np.array([-1, 0, 2], np.float32)).tolist() == [0, 0, 2]
    assert max_pool(np.array([[[1, 2], [3, 4]]], np.float32), MaxPool(2, 2)).item() == 4
    fc = FullyConnected(rng.normal(size=(5, 12)), rng.normal(size=5))
    x = rng.normal(size=(3, 2, 2)).astype(np.float32)
    c = MacCounter()
    out = fc_forward(x, fc, c)
    ref = [sum(float(fc.weight[o, i]) * float(x.ravel()[i]) for i in range(12)) + fc.bias[o] for o in range(5)]
    assert np.abs(out - ref).max() <= 1e-5
    assert c.fc == 60 and c.conv == 0
    with pytest.raises(ShapeError):
        fc_forward(np.zeros(11, np.float32), fc)


def test_network_shapes_and_defaults(rng):
    net = Network(
        [global_conv(rng, 1, 2, 3), ReLU(), MaxPool(2, 2), fully_connected(rng, 2 * 3 * 3, 4), ReLU(), fully_connected(rng, 4, 2)],
        (1, 8, 8),
    )
    assert net.shapes[2] == (2, 3, 3)
    assert net.feature_layer == 5 and net.response_layer == 2
    assert net.feature_dim == 2
    with pytest.raises(ConfigError):
        Network([fully_connected(rng, 10, 2)], (1, 3, 3))


def test_trunk_geometry():
    layers = [GlobalConv(np.zeros((1, 1, 5, 5)), np.zeros(1)), MaxPool(2, 2), GlobalConv(np.zeros((1, 1, 3, 3)), np.zeros(1), 2)]
    assert trunk_geometry(layers) == (4, 1 + 4 + 1 + 2 * 2)


def test_oracle_single_patch_and_counting(rng):
    net = Network([global_conv(rng, 1, 2, 3), ReLU(), local_conv(rng, 2, 1, 2, 2, 2), fully_connected(rng, 2 * 6 * 6, 3)], (1, 10, 10))
    grid = PatchGrid(2, 5, 5)
    x = rng.normal(size=(1, 10, 10)).astype(np.float32)
    (only,) = patch_forward_oracle(x, net, grid)
    np.testing.assert_array_equal(only, net.forward(x))
    one = MacCounter()
    net.forward(x, one)
    big = rng.normal(size=(1, 30, 30)).astype(np.float32)
    many = MacCounter()
    feats = patch_forward_oracle(big, net, grid, many)
    assert len(feats) == 25
    assert many.conv == 25 * one.conv and many.fc == 25 * one.fc
    again = MacCounter()
    patch_forward_oracle(big, net, grid, again, threads=3)
    assert again == many
    with pytest.raises(ShapeError):
        patch_forward_oracle(np.zeros((1, 9, 9), np.float32), net, grid)
