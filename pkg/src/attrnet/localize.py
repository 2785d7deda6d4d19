"""Weakly supervised localization from averaged convolutional responses.

A response map is the channel mean of one convolutional layer.  Candidate
windows are scored by their mean response (sum over the window divided by its
area), a calibrated threshold rejects background images, and a two-stage
cascade refines the best window.  Density peaks pick the dominant object on
maps with several responders.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .layers import ConfigError, FullyConnected, GlobalConv, MaxPool, Network, ReLU, trunk_geometry
from .tensor import DTYPE, Rect, ShapeError, channel_mean, crop, resize_bilinear

DEFAULT_SCALES = (0.3, 0.5, 0.7, 1.0)
DEFAULT_MAX_WINDOWS = 500
DEFAULT_DENSITY_RADIUS = 2


@dataclass
class ResponseMap:
    """A one-channel map plus the affine link back to input pixels.

    Map cell ``i`` covers input pixels ``[i * scale + offset, (i + 1) * scale + offset)``.
    """

    map: np.ndarray
    source: str = "map"
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.map, dtype=DTYPE)
        if m.ndim == 2:
            m = m[None]
        if m.ndim != 3 or m.shape[0] != 1 or m.shape[1] < 1 or m.shape[2] < 1:
            raise ShapeError(f"response map must be one nonempty channel, got shape {m.shape}")
        if not self.scale > 0:
            raise ValueError(f"scale factor must be positive, got {self.scale}")
        self.map = m

    @property
    def shape(self) -> tuple[int, int]:
        return self.map.shape[1], self.map.shape[2]

    @property
    def values(self) -> np.ndarray:
        return self.map[0]

    def to_image(self, r: Rect, height: int, width: int) -> Rect:
        """Map-cell rect to an input-pixel rect, rounded and clamped to the image.

        A side flush with the map border extends to the image border, since
        the pixels beyond the outermost cell centres have no cells of their own.
        """
        mh, mw = self.shape

        def span(start, size, limit, extent):
            lo = 0 if start == 0 else int(np.floor(start * self.scale + self.offset + 0.5))
            end = start + size
            hi = limit if end >= extent else int(np.floor(end * self.scale + self.offset + 0.5))
            lo = min(max(lo, 0), limit - 1)
            hi = min(max(hi, lo + 1), limit)
            return lo, hi - lo

        top, h = span(r.top, r.height, height, mh)
        left, w = span(r.left, r.width, width, mw)
        return Rect(top, left, h, w)


@dataclass
class ScoredWindow:
    rect: Rect
    score: float
    map_rect: Rect | None = None


@dataclass
class Threshold:
    value: float
    errors: int = 0


@dataclass
class ProposalParams:
    scales: tuple = DEFAULT_SCALES
    stride: int = 1
    max_windows: int = DEFAULT_MAX_WINDOWS

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(not 0 < s <= 1 for s in self.scales):
            raise ConfigError(f"window scales must lie in (0, 1], got {self.scales}")
        if self.stride < 1 or self.max_windows < 1:
            raise ConfigError("window stride and max_windows must be positive")


def _trunk(net: Network, upto: int) -> list:
    layers = net.layers[: upto + 1]
    for i, layer in enumerate(layers):
        if not isinstance(layer, (GlobalConv, ReLU, MaxPool)):
            raise ConfigError(f"layer {i} ({type(layer).__name__}) is not translation invariant")
    return layers


def response_map(net: Network, image: np.ndarray, layer: int | None = None) -> ResponseMap:
    """Channel mean of ``layer`` (default the net's response layer) on a full image."""
    idx = net.response_layer if layer is None else layer
    if idx is None:
        raise ConfigError("network has no response layer")
    layers = _trunk(net, idx)
    x = image
    for lyr in layers:
        x = lyr.forward(x)
    stride, field_ = trunk_geometry(layers)
    return ResponseMap(channel_mean(x), f"layer{idx}", float(stride), (field_ - stride) / 2.0)


# -- window proposals ------------------------------------------------------------


def window_side(scale: float, height: int, width: int) -> int:
    return max(1, int(np.floor(scale * min(height, width) + 0.5)))


def window_score(values: np.ndarray, r: Rect) -> float:
    return float(values[r.top:r.bottom, r.left:r.right].sum(dtype=np.float64) / r.area)


def propose_windows(
    rmap: ResponseMap,
    scales: Sequence[float] = DEFAULT_SCALES,
    stride: int = 1,
    max_windows: int = DEFAULT_MAX_WINDOWS,
    image_shape: tuple[int, int] | None = None,
) -> list[ScoredWindow]:
    """Square sliding windows scored by mean response, best first.

    Ties keep the (top, left, scale) enumeration order.  Rects are reported in
    image coordinates through ``rmap``'s geometry; ``image_shape`` bounds them
    (default: the map extent times its scale).
    """
    params = ProposalParams(tuple(scales), stride, max_windows)
    values = rmap.values.astype(np.float64)
    h, w = values.shape
    if image_shape is None:
        image_shape = (int(np.ceil(h * rmap.scale + rmap.offset)), int(np.ceil(w * rmap.scale + rmap.offset)))
    scores, tops, lefts, scale_ids, sides = [], [], [], [], []
    for si, s in enumerate(params.scales):
        side = window_side(s, h, w)
        if side > h or side > w:
            continue
        sums = sliding_window_view(values, (side, side))[:: params.stride, :: params.stride].sum(axis=(-2, -1))
        t, l = np.meshgrid(
            np.arange(0, h - side + 1, params.stride), np.arange(0, w - side + 1, params.stride), indexing="ij"
        )
        scores.append((sums / (side * side)).ravel())
        tops.append(t.ravel())
        lefts.append(l.ravel())
        scale_ids.append(np.full(t.size, si))
        sides.append(np.full(t.size, side))
    if not scores:
        return []
    score, top, left, sid, side = (np.concatenate(a) for a in (scores, tops, lefts, scale_ids, sides))
    order = np.lexsort((sid, left, top, -score))[: params.max_windows]
    out = []
    for i in order:
        mr = Rect(int(top[i]), int(left[i]), int(side[i]), int(side[i]))
        out.append(ScoredWindow(rmap.to_image(mr, *image_shape), float(score[i]), mr))
    return out


def calibrate_threshold(face_scores: Sequence[float], background_scores: Sequence[float]) -> Threshold:
    """Midpoint threshold minimising 0-1 errors (faces at or above it count positive).

    Candidates are the midpoints between consecutive distinct scores plus one
    boundary midpoint half a unit beyond each extreme.  Ties go to the larger
    margin, then to fewer background errors, then to the larger threshold.
    """
    pos = np.asarray(face_scores, dtype=np.float64).ravel()
    neg = np.asarray(background_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ValueError("scores must be finite")
    vals = np.unique(np.concatenate([pos, neg]))
    ext = np.concatenate([[vals[0] - 1.0], vals, [vals[-1] + 1.0]])
    cand = (ext[:-1] + ext[1:]) / 2.0
    margin = (ext[1:] - ext[:-1]) / 2.0
    pos_s, neg_s = np.sort(pos), np.sort(neg)
    misses = np.searchsorted(pos_s, cand, side="left")  # faces below threshold
    false_alarms = neg.size - np.searchsorted(neg_s, cand, side="left")  # background at or above
    errors = misses + false_alarms
    best = errors == errors.min()
    top_margin = margin[best].max()
    best &= margin >= top_margin * (1 - 1e-9)
    best &= false_alarms == false_alarms[best].min()
    i = int(np.flatnonzero(best)[-1])
    return Threshold(float(cand[i]), int(errors[i]))


# -- cascade -----------------------------------------------------------------------


def _best_window(rmap: ResponseMap, params: ProposalParams, image_shape) -> ScoredWindow | None:
    wins = propose_windows(rmap, params.scales, params.stride, params.max_windows, image_shape)
    return wins[0] if wins else None


@dataclass
class CascadeResult:
    window: ScoredWindow | None
    stage1: ScoredWindow | None
    maps: list = field(default_factory=list)


def localize_cascade(
    image: np.ndarray,
    net_o: Network,
    net_s: Network,
    thr: Threshold | float,
    params: ProposalParams | None = None,
    params_s: ProposalParams | None = None,
) -> CascadeResult:
    """Coarse window from ``net_o``, threshold test, then refinement by ``net_s``.

    The second stage crops the first window, resizes it to ``net_s``'s input
    size and maps its best window back to original image coordinates.
    """
    params = params or ProposalParams()
    params_s = params_s or params
    t = thr.value if isinstance(thr, Threshold) else float(thr)
    _, h, w = image.shape
    m1 = response_map(net_o, image)
    first = _best_window(m1, params, (h, w))
    if first is None or first.score < t:
        return CascadeResult(None, first, [m1])
    region = crop(image, first.rect)
    _, sh, sw = net_s.input_shape
    m2 = response_map(net_s, resize_bilinear(region, sh, sw))
    second = _best_window(m2, params_s, (sh, sw))
    if second is None:
        return CascadeResult(first, first, [m1, m2])
    r = second.rect
    fy, fx = first.rect.height / sh, first.rect.width / sw

    def back(start, size, f, origin, extent):
        lo = int(np.floor(start * f + 0.5))
        hi = int(np.floor((start + size) * f + 0.5))
        hi = min(max(hi, lo + 1), extent)
        return origin + lo, hi - lo

    top, hh = back(r.top, r.height, fy, first.rect.top, first.rect.height)
    left, ww = back(r.left, r.width, fx, first.rect.left, first.rect.width)
    return CascadeResult(ScoredWindow(Rect(top, left, hh, ww), second.score, second.map_rect), first, [m1, m2])


# -- density peaks -----------------------------------------------------------------


@dataclass
class PeakField:
    """Per-position density, distance to the nearest denser position, and their norm."""

    density: np.ndarray
    separation: np.ndarray
    score: np.ndarray  # sqrt(density^2 + separation^2)
    rank: np.ndarray  # position in the strict density order, 0 = densest


@dataclass
class Peak:
    position: tuple[int, int]
    density: float
    separation: float
    score: float


def box_density(values: np.ndarray, radius: int = DEFAULT_DENSITY_RADIUS) -> np.ndarray:
    """Mean of the map over the in-bounds Chebyshev ball of ``radius`` around each position."""
    v = np.asarray(values, dtype=np.float64)
    if radius < 0:
        raise ValueError("density radius must be non-negative")
    k = 2 * radius + 1
    padded = np.pad(v, radius)
    sums = sliding_window_view(padded, (k, k)).sum(axis=(-2, -1))
    ones = np.pad(np.ones_like(v), radius)
    counts = sliding_window_view(ones, (k, k)).sum(axis=(-2, -1))
    return sums / counts


def _order(values: np.ndarray, dens: np.ndarray) -> np.ndarray:
    """Strict order rank: higher density first, then higher value, then lower row-major index."""
    flat_idx = np.arange(dens.size)
    order = np.lexsort((flat_idx, -values.ravel(), -dens.ravel()))
    rank = np.empty(dens.size, dtype=np.int64)
    rank[order] = flat_idx
    return rank.reshape(dens.shape)


def _diameter(h: int, w: int) -> float:
    return float(np.sqrt((h - 1) ** 2 + (w - 1) ** 2))


def _field(values, radius, separation_sq_fn) -> PeakField:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v[0]
    dens = box_density(v, radius)
    rank = _order(v, dens)
    sep = np.zeros_like(dens)
    # Positions without positive density are background: they never become peaks.
    cand = (dens > 0) & (rank > 0)
    sq = separation_sq_fn(rank, cand)
    sep[cand] = np.sqrt(sq.astype(np.float64))
    sep[rank == 0] = _diameter(*v.shape)
    return PeakField(dens, sep, np.sqrt(dens * dens + sep * sep), rank)


def _offsets_by_distance(h: int, w: int):
    dy, dx = np.meshgrid(np.arange(-(h - 1), h), np.arange(-(w - 1), w), indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    sq = dy * dy + dx * dx
    keep = sq > 0
    dy, dx, sq = dy[keep], dx[keep], sq[keep]
    order = np.argsort(sq, kind="stable")
    dy, dx, sq = dy[order], dx[order], sq[order]
    bounds = np.flatnonzero(np.diff(sq)) + 1
    return np.split(dy, bounds), np.split(dx, bounds), sq[np.concatenate([[0], bounds])]


def _separation_sq_search(rank: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Expanding search in order of distance, over unresolved candidates only."""
    h, w = rank.shape
    ys, xs = np.nonzero(cand)
    my_rank = rank[ys, xs]
    result = np.zeros(ys.size, dtype=np.int64)
    todo = np.arange(ys.size)
    if todo.size == 0:
        return result
    groups_y, groups_x, group_sq = _offsets_by_distance(h, w)
    for gy, gx, sq in zip(groups_y, groups_x, group_sq):
        ty = ys[todo][:, None] + gy[None, :]
        tx = xs[todo][:, None] + gx[None, :]
        inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        r = np.where(inside, rank[np.clip(ty, 0, h - 1), np.clip(tx, 0, w - 1)], np.iinfo(np.int64).max)
        hit = (r < my_rank[todo][:, None]).any(axis=1)
        if hit.any():
            result[todo[hit]] = sq
            todo = todo[~hit]
            if todo.size == 0:
                break
    return result


def _separation_sq_dense(rank: np.ndarray, cand: np.ndarray, chunk: int = 256) -> np.ndarray:
    """All-pairs reference: O(N^2) squared distances, chunked to bound memory."""
    h, w = rank.shape
    ys, xs = np.nonzero(cand)
    all_y, all_x = np.divmod(np.arange(h * w), w)
    flat_rank = rank.ravel()
    out = np.zeros(ys.size, dtype=np.int64)
    big = np.iinfo(np.int64).max
    for s in range(0, ys.size, chunk):
        cy, cx = ys[s:s + chunk], xs[s:s + chunk]
        sq = (cy[:, None] - all_y[None, :]) ** 2 + (cx[:, None] - all_x[None, :]) ** 2
        higher = flat_rank[None, :] < rank[cy, cx][:, None]
        out[s:s + chunk] = np.where(higher, sq, big).min(axis=1)
    return out


def peak_field(values, radius: int = DEFAULT_DENSITY_RADIUS) -> PeakField:
    return _field(values, radius, _separation_sq_search)


def peak_field_bruteforce(values, radius: int = DEFAULT_DENSITY_RADIUS) -> PeakField:
    return _field(values, radius, _separation_sq_dense)


def ranked_peaks(pf: PeakField, top_k: int | None = None) -> list[Peak]:
    w = pf.density.shape[1]
    order = np.lexsort((pf.rank.ravel(), -pf.score.ravel()))
    if top_k is not None:
        order = order[:top_k]
    return [
        Peak(divmod(int(i), w), float(pf.density.flat[i]), float(pf.separation.flat[i]), float(pf.score.flat[i]))
        for i in order
    ]


def density_peaks(rmap: ResponseMap | np.ndarray, density_radius: int = DEFAULT_DENSITY_RADIUS, top_k: int = 1) -> list[Peak]:
    """Positions with the largest peak score, best first."""
    values = rmap.values if isinstance(rmap, ResponseMap) else np.asarray(rmap)
    return ranked_peaks(peak_field(values, density_radius), top_k)


def prune_to_dominant(
    rmap: ResponseMap,
    size: tuple[int, int] | int,
    density_radius: int = DEFAULT_DENSITY_RADIUS,
    image_shape: tuple[int, int] | None = None,
) -> ScoredWindow:
    """Window of ``size`` map cells centred on the strongest density peak, kept inside the map."""
    h, w = rmap.shape
    wh, ww = (size, size) if isinstance(size, int) else size
    wh, ww = min(max(1, wh), h), min(max(1, ww), w)
    (py, px) = density_peaks(rmap, density_radius, 1)[0].position
    top = min(max(py - wh // 2, 0), h - wh)
    left = min(max(px - ww // 2, 0), w - ww)
    mr = Rect(top, left, wh, ww)
    if image_shape is None:
        image_shape = (int(np.ceil(h * rmap.scale + rmap.offset)), int(np.ceil(w * rmap.scale + rmap.offset)))
    return ScoredWindow(rmap.to_image(mr, *image_shape), window_score(rmap.values, mr), mr)


# -- attribute region maps -----------------------------------------------------------


def convolutional_head(net: Network, upto: int | None = None) -> list:
    """Trunk plus every fully connected layer recast as a convolution.

    The first FC kernel covers the trunk's output extent at training size;
    later FC layers become 1x1 convolutions.
    """
    upto = len(net.layers) - 1 if upto is None else upto
    fcs = [i for i, l in enumerate(net.layers) if isinstance(l, FullyConnected)]
    if not fcs:
        raise ConfigError("network has no fully connected layers to convert")
    head = fcs[0]
    layers = list(_trunk(net, head - 1)) if head > 0 else []
    shape = net.shapes[head - 1] if head > 0 else net.input_shape
    if len(shape) != 3:
        raise ConfigError(f"trunk output {shape} is not a spatial map")
    c, kh, kw = shape
    if kh != kw:
        raise ConfigError(f"non-square trunk output {kh}x{kw} cannot become a square kernel")
    for i in range(head, upto + 1):
        layer = net.layers[i]
        if isinstance(layer, ReLU):
            layers.append(layer)
        elif isinstance(layer, FullyConnected):
            o = layer.out_features
            if i == head:
                weight = layer.weight.reshape(o, c, kh, kw)
            else:
                weight = layer.weight.reshape(o, layer.in_features, 1, 1)
            layers.append(GlobalConv(weight, layer.bias, 1))
        else:
            raise ConfigError(f"layer {i} ({type(layer).__name__}) follows the fully connected head")
    return layers


def attribute_region_map(net: Network, attribute: int, image: np.ndarray) -> ResponseMap:
    """Spatial map of one output score, from the fully convolutional form of ``net``."""
    if len(net.input_shape) != 3:
        raise ConfigError(f"network input {net.input_shape} is not an image")
    _, h, w = image.shape
    _, th, tw = net.input_shape
    if h < th or w < tw:
        raise ShapeError(f"image {h}x{w} smaller than training input {th}x{tw}")
    layers = convolutional_head(net)
    x = image
    for layer in layers:
        x = layer.forward(x)
    if not 0 <= attribute < x.shape[0]:
        raise IndexError(f"attribute {attribute} out of range for {x.shape[0]} outputs")
    stride, field_ = trunk_geometry(layers)
    return ResponseMap(x[attribute:attribute + 1], f"attribute{attribute}", float(stride), (field_ - stride) / 2.0)
