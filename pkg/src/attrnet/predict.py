"""Attribute prediction on a located region.

The region is extended for context and cut into ten views (centre, four
corners and their mirror images).  Per-attribute linear SVMs score each view's
feature vector and the scores are averaged.  Also here: neuron ranking by SVM
weight magnitude and k-means grouping of attribute hyperplanes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import Network
from .tensor import DTYPE, Rect, ShapeError, crop, hflip

DEFAULT_EXTENSION = 1.2
DEFAULT_CROP_FRACTION = 0.875
CROP_POSITIONS = ("center", "top_left", "top_right", "bottom_left", "bottom_right")


def extend_region(window: Rect, height: int, width: int, factor: float = DEFAULT_EXTENSION) -> Rect:
    """Scale ``window`` about its centre by ``factor`` and clip it to the image."""
    if factor < 1:
        raise ValueError(f"extension factor must be >= 1, got {factor}")
    if window.bottom > height or window.right > width:
        raise ValueError(f"window {window.as_list()} outside {height}x{width} image")

    def axis(start, size, limit):
        new = int(round(size * factor))
        lo = int(math.floor(start + size / 2 - new / 2 + 0.5))
        hi = lo + new
        lo, hi = max(lo, 0), min(hi, limit)
        return lo, hi - lo

    top, h = axis(window.top, window.height, height)
    left, w = axis(window.left, window.width, width)
    return Rect(top, left, h, w)


@dataclass
class CropSet:
    """Ten views of one region: five positions, then the same five mirrored."""

    views: list  # tensors
    rects: list  # Rect per view, in region coordinates
    flipped: list  # bool per view

    def __post_init__(self):
        if not (len(self.views) == len(self.rects) == len(self.flipped) == 10):
            raise ShapeError(f"a crop set holds exactly 10 views, got {len(self.views)}")


def crop_rects(height: int, width: int, crop_fraction: float = DEFAULT_CROP_FRACTION) -> list[Rect]:
    if not 0 < crop_fraction <= 1:
        raise ValueError(f"crop fraction must lie in (0, 1], got {crop_fraction}")
    ch, cw = int(round(crop_fraction * height)), int(round(crop_fraction * width))
    if ch < 1 or cw < 1:
        raise ShapeError(f"region {height}x{width} too small for crop fraction {crop_fraction}")
    dy, dx = height - ch, width - cw
    return [
        Rect(dy // 2, dx // 2, ch, cw),
        Rect(0, 0, ch, cw),
        Rect(0, dx, ch, cw),
        Rect(dy, 0, ch, cw),
        Rect(dy, dx, ch, cw),
    ]


def make_crops(region: np.ndarray, crop_fraction: float = DEFAULT_CROP_FRACTION) -> CropSet:
    _, h, w = region.shape
    rects = crop_rects(h, w, crop_fraction)
    views = [crop(region, r) for r in rects]
    views += [hflip(v) for v in views]
    return CropSet(views, rects + rects, [False] * 5 + [True] * 5)


# -- linear SVMs -----------------------------------------------------------------


@dataclass
class SvmModel:
    """One linear classifier per attribute: ``weights`` is (attributes, dim)."""

    weights: np.ndarray
    biases: np.ndarray
    C: float | None = 1.0  # unknown after loading from disk

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.biases = np.asarray(self.biases, dtype=DTYPE).reshape(-1)
        if self.weights.ndim == 1:
            self.weights = self.weights[None]
        if self.weights.ndim != 2 or self.weights.shape[0] != self.biases.size:
            raise ShapeError(f"weights {self.weights.shape} do not match {self.biases.size} biases")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("SVM parameters must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def attributes(self) -> int:
        return self.weights.shape[0]

    def decision(self, features) -> np.ndarray:
        """Scores (n, attributes) for a batch of feature vectors."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.dim:
            raise ShapeError(f"feature dim {x.shape[1]} != model dim {self.dim}")
        return x @ self.weights.astype(np.float64).T + self.biases.astype(np.float64)


def svm_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, C: float) -> float:
    margins = 1.0 - y * (x @ w + b)
    return float(0.5 * w @ w + C * np.maximum(margins, 0.0).sum())


def _check_labels(y: np.ndarray) -> None:
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("labels must be +1 or -1")
    if not ((y == 1).any() and (y == -1).any()):
        raise ValueError("training data has a single class")


def _train_one(x, y, C, epochs, rng, batch_size, trace):
    n, d = x.shape
    _check_labels(y)
    w, b = np.zeros(d), 0.0
    if C == 0:
        b = 1.0 if (y == 1).sum() >= (y == -1).sum() else -1.0
        trace.append(svm_objective(w, b, x, y, C))
        return w, b
    # Steps follow the strongly convex schedule for objective / (C n), on
    # centred features; the bias absorbs the centring afterwards.
    lam = 1.0 / (C * n)
    mu = x.mean(axis=0)
    xc = x - mu
    t0 = (1.0 + float((xc * xc).sum(axis=1).mean())) / lam
    best = svm_objective(w, b, x, y, C)
    trace.append(best)
    t = 0
    for _ in range(epochs):
        w0, b0, t_start = w.copy(), b, t
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            xb, yb = xc[idx], y[idx]
            viol = yb * (xb @ w + b) < 1
            t += 1
            step = 1.0 / (lam * (t + t0))
            w = w - step * (lam * w - (yb[viol, None] * xb[viol]).sum(axis=0) / len(idx))
            b = b + step * yb[viol].sum() / len(idx)
        obj = svm_objective(w, b - w @ mu, x, y, C)
        if obj > best:
            # reject the epoch and retry with smaller steps
            w, b, t = w0, b0, t_start
            t0 *= 2.0
        else:
            best = obj
        trace.append(best)
    b = b - w @ mu
    return w, b


def svm_train(
    features,
    labels,
    C: float = 1.0,
    epochs: int = 50,
    seed: int = 0,
    batch_size: int = 16,
    trace: list | None = None,
) -> SvmModel:
    """Hinge-loss linear SVMs by minibatch sub-gradient descent.

    ``labels`` is (n,) or (n, attributes) of +/-1.  Epochs that raise the
    objective are rolled back with a halved step, so the recorded epoch-end
    objective never increases.  ``trace`` (if given) receives one list of
    objective values per attribute.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be (n, dim), got {x.shape}")
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows for {y.shape[0]} label rows")
    if C < 0:
        raise ValueError("C must be non-negative")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for a in range(y.shape[1]):
        tr: list = []
        w, b = _train_one(x, y[:, a], float(C), epochs, rng, batch_size, tr)
        ws.append(w)
        bs.append(b)
        if trace is not None:
            trace.append(tr)
    return SvmModel(np.array(ws), np.array(bs), float(C))


@dataclass
class AttributePrediction:
    score: float
    label: int  # +1 or -1


def score_views(features, model: SvmModel) -> np.ndarray:
    """Mean SVM score per attribute over a stack of view features."""
    return model.decision(features).mean(axis=0)


def label_of(score: float) -> int:
    return 1 if score >= 0 else -1


def predict_attributes(
    crops: CropSet | Sequence[np.ndarray], net: Network, model: SvmModel
) -> list[AttributePrediction]:
    """Average the per-view SVM scores; zero counts as positive."""
    if net.feature_dim != model.dim:
        raise ShapeError(f"network feature dim {net.feature_dim} != model dim {model.dim}")
    views = crops.views if isinstance(crops, CropSet) else list(crops)
    feats = np.stack([net.forward(v).reshape(-1) for v in views])
    return [AttributePrediction(float(s), label_of(s)) for s in score_views(feats, model)]


# -- neuron ranking and attribute groups -------------------------------------------


def rank_neurons(weights, keep_fraction: float) -> np.ndarray:
    """Indices of the ``ceil(keep_fraction * dim)`` largest-|w| neurons (ties by index)."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep fraction must lie in (0, 1], got {keep_fraction}")
    keep = math.ceil(keep_fraction * w.size - 1e-9)
    order = np.lexsort((np.arange(w.size), -np.abs(w)))
    return np.sort(order[:keep])


def restrict(model: SvmModel, keep: dict | Sequence[int]) -> SvmModel:
    """Zero every weight outside ``keep`` (one index set for all attributes, or a dict per attribute)."""
    mask = np.zeros(model.weights.shape, dtype=bool)
    if isinstance(keep, dict):
        for a, idx in keep.items():
            mask[a, np.asarray(idx, dtype=np.int64)] = True
    else:
        mask[:, np.asarray(keep, dtype=np.int64)] = True
    return SvmModel(np.where(mask, model.weights, 0), model.biases.copy(), model.C)


@dataclass
class AttributeGroups:
    labels: np.ndarray  # cluster id per attribute
    centroids: np.ndarray  # (k, dim)
    inertia: list = field(default_factory=list)  # after each assignment step

    @property
    def k(self) -> int:
        return len(self.centroids)

    def members(self) -> list[list[int]]:
        return [np.flatnonzero(self.labels == c).tolist() for c in range(self.k)]


def _sq_dist(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            i = int(rng.integers(n))
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(points, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6) -> AttributeGroups:
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in 1..{n} (number of points)")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    inertia = []
    for _ in range(max_iter):
        d2 = _sq_dist(x, centroids)
        labels = d2.argmin(axis=1)
        inertia.append(float(d2[np.arange(n), labels].sum()))
        new = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dist(x, centroids)
    labels = d2.argmin(axis=1)
    inertia.append(float(d2[np.arange(n), labels].sum()))
    return AttributeGroups(labels, centroids, inertia)


def group_attributes(weight_matrix, k: int, seed: int) -> AttributeGroups:
    """k-means over attribute hyperplanes: one column of ``weight_matrix`` per attribute."""
    w = np.asarray(weight_matrix, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"weight matrix must be 2-D, got {w.shape}")
    return kmeans(w.T, k, seed)
