"""Seeded synthetic networks, images and corpora used by tests, scripts and fixtures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    FullyConnected,
    GlobalConv,
    LocalConv,
    MaxPool,
    Network,
    PatchGrid,
    ReLU,
)
from .tensor import DTYPE


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(DTYPE)


def global_conv(rng, c_in, c_out, k, stride=1):
    return GlobalConv(_he(rng, (c_out, c_in, k, k), c_in * k * k), rng.normal(0, 0.1, c_out), stride)


def local_conv(rng, cells, span, c_in, c_out, k, stride=1):
    banks = (cells - span + 1) ** 2
    return LocalConv(
        _he(rng, (banks, c_out, c_in, k, k), c_in * k * k),
        rng.normal(0, 0.1, (banks, c_out)),
        cells,
        span,
        stride,
    )


def fully_connected(rng, n_in, n_out):
    return FullyConnected(_he(rng, (n_out, n_in), n_in), rng.normal(0, 0.1, n_out))


@dataclass
class InterweaveCase:
    net: Network
    grid: PatchGrid
    image: np.ndarray


def random_interweave_case(rng: np.random.Generator, max_patches: int = 3, max_features: int = 64) -> InterweaveCase:
    """A random global-then-local network with a compatible patch grid and image.

    Cell grid g in {2, 3}, spans in {1, 2}, one or two global layers followed
    by one or two local layers, up to ``max_patches`` patches per side.
    """
    while True:
        g = int(rng.choice([2, 3]))
        n_global = int(rng.integers(1, 3))
        n_local = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        widths = [int(rng.integers(2, 6)) for _ in range(n_global + n_local)]
        cell = int(rng.integers(2, 6))

        # local suffix, built forwards from the cell side
        suffix = []
        cells, side, ch = g, cell, widths[n_global - 1]
        ok = True
        for li in range(n_local):
            span = int(rng.integers(1, min(2, cells) + 1))
            region = span * side
            k = int(rng.integers(1, min(3, region) + 1))
            suffix.append(local_conv(rng, cells, span, ch, widths[n_global + li], k))
            side = region - k + 1
            cells = cells - span + 1
            ch = widths[n_global + li]
            if rng.random() < 0.7:
                suffix.append(ReLU())
            if side % 2 == 0 and side >= 2 and rng.random() < 0.3:
                suffix.append(MaxPool(2, 2))
                side //= 2
            if side < 1:
                ok = False
        if not ok:
            continue

        # global prefix, chosen forwards then inverted to find the patch side
        prefix_plan = []
        for gi in range(n_global):
            k = int(rng.integers(1, 5))
            s = 2 if rng.random() < 0.25 else 1
            prefix_plan.append(("conv", k, s, widths[gi]))
            if rng.random() < 0.25:
                prefix_plan.append(("pool", 2, 2, None))
        n = g * cell
        for kind, k, s, _ in reversed(prefix_plan):
            n = (n - 1) * s + k
        patch = n
        if patch % g:
            continue
        cell_size = patch // g
        total_stride = int(np.prod([s for _, _, s, _ in prefix_plan]))
        steps = [d for d in range(1, cell_size + 1) if cell_size % d == 0 and d % total_stride == 0]
        if not steps:
            continue
        step = int(rng.choice(steps))

        layers = []
        ch = c_in
        for kind, k, s, width in prefix_plan:
            if kind == "conv":
                layers.append(global_conv(rng, ch, width, k, s))
                ch = width
                if rng.random() < 0.7:
                    layers.append(ReLU())
            else:
                layers.append(MaxPool(k, s))
        layers.extend(suffix)
        final = suffix_out = widths[-1] * (cells * side) ** 2
        dim = int(rng.integers(2, max_features + 1))
        if rng.random() < 0.5:
            hidden = int(rng.integers(2, max_features + 1))
            layers += [fully_connected(rng, final, hidden), ReLU(), fully_connected(rng, hidden, dim)]
        else:
            layers.append(fully_connected(rng, suffix_out, dim))
        net = Network(layers, (c_in, patch, patch))
        grid = PatchGrid(g, cell_size, step)
        nr, nc = (int(rng.integers(1, max_patches + 1)) for _ in range(2))
        h = patch + (nr - 1) * step + int(rng.integers(0, step))
        w = patch + (nc - 1) * step + int(rng.integers(0, step))
        image = rng.uniform(0, 1, (c_in, h, w)).astype(DTYPE)
        return InterweaveCase(net, grid, image)


# Reference sharing configuration: a cut-down attribute network with two global
# layers at full resolution and the 3x3-cell / 2x2-span local pair on top.
REFERENCE_GRID = PatchGrid(cells=3, cell_size=16, patch_stride=8)
REFERENCE_PATCHES_PER_SIDE = 5


def reference_network(seed: int = 0, channels: int = 16, feature_dim: int = 64) -> Network:
    rng = np.random.default_rng(seed)
    layers = [
        global_conv(rng, 3, channels, 5),
        ReLU(),
        MaxPool(2, 2),
        global_conv(rng, channels, channels, 5),
        ReLU(),
        MaxPool(2, 2),
        local_conv(rng, 3, 1, channels, channels, 2),
        ReLU(),
        local_conv(rng, 3, 2, channels, channels, 3),
        ReLU(),
        fully_connected(rng, channels * 4 * 4, feature_dim),
    ]
    p = REFERENCE_GRID.patch_side
    return Network(layers, (3, p, p))


def reference_image_side(patches_per_side: int = REFERENCE_PATCHES_PER_SIDE) -> int:
    g = REFERENCE_GRID
    return g.patch_side + (patches_per_side - 1) * g.patch_stride


# -- planted-pattern localization corpus ------------------------------------------

CORPUS_SIDE = 64
PATTERN_SIDES = (20, 26)  # inclusive range
PATTERN_MARGIN = 8
BACKGROUND_MAX = 0.5
DETECTOR_SCALES = (0.7,)
REFINER_SCALES = (0.6,)


def _box_conv(k: int, bias: float) -> GlobalConv:
    return GlobalConv(np.full((1, 1, k, k), 1.0 / (k * k), DTYPE), np.array([bias], DTYPE), 1)


def detector_networks() -> tuple[Network, Network]:
    """Hand-built coarse and fine detectors for the bright-square pattern.

    Both threshold a box average at 0.5, which background noise (at most
    ``BACKGROUND_MAX``) cannot reach.  The coarse net pools and blurs again
    so its response spreads past the pattern, like a head-and-shoulders cue;
    the fine net keeps full resolution.
    """
    coarse = Network(
        [_box_conv(5, -0.5), ReLU(), MaxPool(2, 2), _box_conv(5, 0.0), ReLU()], (1, CORPUS_SIDE, CORPUS_SIDE)
    )
    fine = Network([_box_conv(3, -0.5), ReLU()], (1, 32, 32))
    return coarse, fine


def planted_image(rng: np.random.Generator, with_pattern: bool = True):
    """Uniform background noise, optionally with a bright noisy square; returns (image, rect list)."""
    from .tensor import Rect

    n = CORPUS_SIDE
    image = rng.uniform(0.0, BACKGROUND_MAX, (1, n, n))
    rects = []
    if with_pattern:
        s = int(rng.integers(PATTERN_SIDES[0], PATTERN_SIDES[1] + 1))
        top, left = (int(v) for v in rng.integers(PATTERN_MARGIN, n - s - PATTERN_MARGIN + 1, 2))
        image[:, top:top + s, left:left + s] = rng.uniform(BACKGROUND_MAX, 1.0, (s, s))
        rects.append(Rect(top, left, s, s))
    return image.astype(DTYPE), rects


def planted_corpus(seed: int, count: int, with_pattern: bool = True):
    rng = np.random.default_rng(seed)
    return [planted_image(rng, with_pattern) for _ in range(count)]


# -- pipeline fixture models --------------------------------------------------------

FIXTURE_GRID = PatchGrid(cells=2, cell_size=8, patch_stride=2)


def fixture_attribute_network(seed: int = 0) -> Network:
    """Small single-channel attribute net: one conv, two local layers, FC features."""
    rng = np.random.default_rng(seed)
    p = FIXTURE_GRID.patch_side
    layers = [
        global_conv(rng, 1, 4, 3),
        ReLU(),
        local_conv(rng, 2, 1, 4, 6, 2),
        ReLU(),
        local_conv(rng, 2, 2, 6, 6, 3),
        ReLU(),
        fully_connected(rng, 6 * 10 * 10, 16),
    ]
    return Network(layers, (1, p, p))


def fixture_svm(seed: int = 0, dim: int = 16, attributes: int = 3):
    from .predict import SvmModel

    rng = np.random.default_rng(seed)
    return SvmModel(rng.normal(0, 0.5, (attributes, dim)), rng.normal(0, 0.5, attributes), 1.0)


# -- toy tasks for the trainers ----------------------------------------------------


def separable_attribute_task(seed: int, n: int = 200, gap: float = 0.15):
    """2-D points with one attribute per axis: positive where that coordinate is positive.

    Points within ``gap`` of either axis are rejected, so both attributes
    are separable with a margin.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        p = rng.uniform(-1, 1, 2)
        if np.all(np.abs(p) > gap):
            out.append(p)
    x = np.array(out)
    return x, (x > 0).astype(np.float64)


def identity_task(seed: int, identities: int = 3, per_identity: int = 30, dim: int = 8, spread: float = 1.0):
    """Gaussian clusters, one per identity; returns (features, identity ids)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 2, (identities, dim))
    ids = np.repeat(np.arange(identities), per_identity)
    return centers[ids] + rng.normal(0, spread, (ids.size, dim)), ids


def sparse_signal_task(seed: int, n: int = 600, dim: int = 100, informative: int = 10):
    """Labels are the sign of a linear function of a few coordinates; the rest is noise."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(dim, informative, replace=False)
    w = np.zeros(dim)
    w[idx] = rng.normal(0, 3, informative)
    x = rng.normal(0, 1, (n, dim))
    y = np.where(x @ w >= 0, 1.0, -1.0)
    return x, y, np.sort(idx)


def block_weight_matrix(seed: int, dim: int = 64, sizes=(4, 5, 6), noise: float = 0.3):
    """Columns drawn around one centre per block; returns (matrix dim x attributes, block labels)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3, (len(sizes), dim))
    labels = rng.permutation(np.repeat(np.arange(len(sizes)), sizes))
    cols = centers[labels] + rng.normal(0, noise, (labels.size, dim))
    return cols.T, labels
