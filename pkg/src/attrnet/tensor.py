"""Dense float32 tensors and the small set of spatial operations built on them.

Tensors are plain ``numpy.ndarray`` objects of dtype float32.  Spatial maps are
laid out (channel, row, col), row-major within each channel; feature vectors
are rank 1.  No operation here broadcasts: every shape mismatch is an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_RANK = 4
DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose."""


class BoundsError(IndexError):
    """Raised when a rectangle falls outside the map it indexes."""


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.top < 0 or self.left < 0:
            raise BoundsError(f"negative rect origin ({self.top}, {self.left})")
        if self.height < 1 or self.width < 1:
            raise ShapeError(f"empty rect {self.height}x{self.width}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def as_list(self) -> list[int]:
        return [self.top, self.left, self.height, self.width]


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate and convert ``data`` to a float32 tensor.

    Rejects rank > 4, zero-sized axes and non-finite values.
    """
    t = np.array(data, dtype=DTYPE, copy=True)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if t.size != int(np.prod(shape)):
            raise ShapeError(f"{t.size} values do not fill shape {shape}")
        t = t.reshape(shape)
    if t.ndim == 0 or t.ndim > MAX_RANK:
        raise ShapeError(f"rank {t.ndim} outside 1..{MAX_RANK}")
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"zero-sized axis in shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains NaN or Inf")
    return t


def _spatial(t: np.ndarray) -> np.ndarray:
    if t.ndim != 3:
        raise ShapeError(f"expected (channel, row, col) map, got shape {t.shape}")
    return t


def crop(t: np.ndarray, r: Rect) -> np.ndarray:
    _spatial(t)
    _, h, w = t.shape
    if r.bottom > h:
        raise BoundsError(f"rect bottom {r.bottom} exceeds map height {h}")
    if r.right > w:
        raise BoundsError(f"rect right {r.right} exceeds map width {w}")
    return t[:, r.top:r.bottom, r.left:r.right].copy()


def stitch(parts: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Block-concatenate a rows x cols grid of maps.

    Every part in a grid row must share its height, every part in a grid
    column its width, and all parts their channel count.
    """
    if not parts or not parts[0]:
        raise ShapeError("empty stitch grid")
    ncols = len(parts[0])
    if any(len(row) != ncols for row in parts):
        raise ShapeError("ragged stitch grid: rows have different lengths")
    for row in parts:
        for p in row:
            _spatial(p)
    channels = parts[0][0].shape[0]
    widths = [p.shape[2] for p in parts[0]]
    for i, row in enumerate(parts):
        height = row[0].shape[1]
        for j, p in enumerate(row):
            if p.shape[0] != channels:
                raise ShapeError(f"part ({i},{j}) has {p.shape[0]} channels, expected {channels}")
            if p.shape[1] != height:
                raise ShapeError(f"part ({i},{j}) height {p.shape[1]} != row height {height}")
            if p.shape[2] != widths[j]:
                raise ShapeError(f"part ({i},{j}) width {p.shape[2]} != column width {widths[j]}")
    return np.concatenate([np.concatenate(row, axis=2) for row in parts], axis=1)


def channel_mean(t: np.ndarray) -> np.ndarray:
    _spatial(t)
    return t.mean(axis=0, dtype=np.float64, keepdims=True).astype(DTYPE)


def hflip(t: np.ndarray) -> np.ndarray:
    _spatial(t)
    return t[:, :, ::-1].copy()


def mirror_rect(r: Rect, width: int) -> Rect:
    """The rect that ``r`` becomes after a horizontal flip of a map ``width`` wide."""
    return Rect(r.top, width - r.right, r.height, r.width)


def resize_bilinear(t: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (no corner alignment)."""
    _spatial(t)
    _, h, w = t.shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    src = t.astype(np.float64)
    top = src[:, r0, :] * (1 - fr)[None, :, None] + src[:, r1, :] * fr[None, :, None]
    out = top[:, :, c0] * (1 - fc)[None, None, :] + top[:, :, c1] * fc[None, None, :]
    return out.astype(DTYPE)
