"""Training losses with analytic gradients and a small SGD trainer for FC/ReLU stacks.

Losses are computed in float64 and returned as values to be minimised.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .layers import ConfigError, FullyConnected, Network, ReLU
from .tensor import DTYPE, ShapeError

LOG_CLAMP = 1e-12
DEFAULT_SIMILARITY_WEIGHT = 0.003


@dataclass
class LossValue:
    loss: float
    grad: np.ndarray


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def cross_entropy(scores, labels) -> LossValue:
    """Negated attribute log-likelihood, summed over attributes.

    ``p_i = sigmoid(f_i)``; the gradient with respect to ``f_i`` is ``p_i - y_i``.
    """
    f = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if f.shape != y.shape:
        raise ShapeError(f"{f.shape[-1] if f.ndim else 0} scores for {y.shape[-1] if y.ndim else 0} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("attribute labels must be 0 or 1")
    p = sigmoid(f)
    ll = y * np.log(np.maximum(p, LOG_CLAMP)) + (1 - y) * np.log(np.maximum(1 - p, LOG_CLAMP))
    return LossValue(float(-ll.sum()), p - y)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_loss(logits, cls: int) -> LossValue:
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= cls < z.shape[-1]:
        raise IndexError(f"class {cls} out of range for {z.shape[-1]} logits")
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    p = np.exp(shifted - log_norm)
    grad = p.copy()
    grad[cls] -= 1.0
    return LossValue(float(log_norm - shifted[cls]), grad)


@dataclass
class IdentityBatch:
    features: np.ndarray  # (n, d)
    pairs: list  # unordered (i, j), i < j, same identity

    @classmethod
    def from_identities(cls, features, identities: Sequence[int]) -> "IdentityBatch":
        ids = list(identities)
        pairs = [(i, j) for i, j in combinations(range(len(ids)), 2) if ids[i] == ids[j]]
        return cls(np.asarray(features, dtype=np.float64), pairs)


def similarity_loss(batch: IdentityBatch) -> LossValue:
    """Sum of squared Euclidean distances over same-identity pairs."""
    if not batch.pairs:
        raise ValueError("similarity loss needs at least one same-identity pair")
    x = np.asarray(batch.features, dtype=np.float64)
    n = len(x)
    for i, j in batch.pairs:
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"invalid pair ({i}, {j}) for {n} features")
    idx = np.array(batch.pairs)
    diff = x[idx[:, 0]] - x[idx[:, 1]]
    grad = np.zeros_like(x)
    np.add.at(grad, idx[:, 0], 2 * diff)
    np.add.at(grad, idx[:, 1], -2 * diff)
    return LossValue(float((diff**2).sum()), grad)


# -- backprop through FC/ReLU stacks ------------------------------------------


@dataclass
class Dense:
    """float64 affine parameters used while training."""

    weight: np.ndarray
    bias: np.ndarray


def trainable_layers(net: Network) -> list:
    out = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, FullyConnected):
            out.append(Dense(layer.weight.astype(np.float64), layer.bias.astype(np.float64)))
        elif isinstance(layer, ReLU):
            out.append(layer)
        else:
            raise ConfigError(f"layer {i} ({type(layer).__name__}) has no backward pass here")
    return out


def forward_batch(layers, x: np.ndarray) -> list[np.ndarray]:
    """Batched float64 forward; ``acts[i]`` is the input of layer ``i``."""
    acts = [np.asarray(x, dtype=np.float64).reshape(len(x), -1)]
    for layer in layers:
        a = acts[-1]
        if isinstance(layer, ReLU):
            acts.append(np.maximum(a, 0))
        else:
            acts.append(a @ np.asarray(layer.weight, dtype=np.float64).T + layer.bias)
    return acts


def backward_batch(layers, acts, grads_out: dict) -> dict:
    """Parameter gradients ``{layer index: (dW, db)}`` from upstream output gradients."""
    grads = {}
    g = None
    for i in range(len(layers) - 1, -1, -1):
        if i in grads_out:
            g = grads_out[i] if g is None else g + grads_out[i]
        if g is None:
            continue
        layer = layers[i]
        if isinstance(layer, ReLU):
            g = g * (acts[i] > 0)
        else:
            grads[i] = (g.T @ acts[i], g.sum(axis=0))
            g = g @ np.asarray(layer.weight, dtype=np.float64)
    return grads


def objective(layers, feature_layer: int, x, y, kind: str, similarity_weight: float = DEFAULT_SIMILARITY_WEIGHT):
    """Batch-mean objective, upstream gradients and activations.

    ``cross_entropy`` reads the last layer as attribute scores and ``y`` as a
    0/1 matrix; ``softmax`` reads it as class logits and ``y`` as class ids;
    ``combined`` adds the weighted similarity loss on the feature layer output,
    pairing samples of equal class id.
    """
    acts = forward_batch(layers, x)
    out = acts[-1]
    n = len(out)
    last = len(layers) - 1
    if kind == "cross_entropy":
        lv = cross_entropy(out, np.asarray(y, dtype=np.float64).reshape(out.shape))
        return lv.loss / n, {last: lv.grad / n}, acts
    if kind in ("softmax", "combined"):
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        total, g = 0.0, np.empty_like(out)
        for i in range(n):
            lv = softmax_loss(out[i], int(y[i]))
            total += lv.loss
            g[i] = lv.grad
        grads = {last: g / n}
        total /= n
        if kind == "combined":
            batch = IdentityBatch.from_identities(acts[feature_layer + 1], y)
            if batch.pairs:
                sv = similarity_loss(batch)
                total += similarity_weight * sv.loss
                grads[feature_layer] = grads.get(feature_layer, 0) + similarity_weight * sv.grad
        return total, grads, acts
    raise ValueError(f"unknown loss kind {kind!r}")


LOSS_KINDS = ("cross_entropy", "softmax", "combined")


def toy_sgd_train(
    net: Network,
    x,
    y,
    kind: str,
    lr: float,
    steps: int,
    seed: int,
    batch_size: int | None = None,
    similarity_weight: float = DEFAULT_SIMILARITY_WEIGHT,
) -> tuple[Network, list[float]]:
    """Plain minibatch SGD.  Returns a trained copy and the per-step batch loss."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    layers = trainable_layers(net)
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    bs = n if batch_size is None else min(batch_size, n)
    trace = []
    order, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = np.sort(order[pos:pos + bs])  # fixed summation order within a batch
        pos += bs
        loss, out_grads, acts = objective(layers, net.feature_layer, x[idx], y[idx], kind, similarity_weight)
        trace.append(loss)
        for i, (gw, gb) in backward_batch(layers, acts, out_grads).items():
            layers[i].weight = layers[i].weight - lr * gw
            layers[i].bias = layers[i].bias - lr * gb
    trained = [
        l if isinstance(l, ReLU) else FullyConnected(l.weight.astype(DTYPE), l.bias.astype(DTYPE))
        for l in layers
    ]
    return Network(trained, net.input_shape, net.feature_layer, net.response_layer), trace


def feature_outputs(net: Network, x) -> np.ndarray:
    return forward_batch(net.layers, x)[net.feature_layer + 1]


def mean_intra_distance(features, identities) -> float:
    batch = IdentityBatch.from_identities(features, identities)
    idx = np.array(batch.pairs)
    d = np.linalg.norm(batch.features[idx[:, 0]] - batch.features[idx[:, 1]], axis=1)
    return float(d.mean())
