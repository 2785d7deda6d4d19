"""Layer definitions and the reference patch-by-patch forward pass.

All convolutions are valid (no padding) cross-correlations.  A locally shared
layer divides its input into a ``cells x cells`` grid; bank ``o`` owns the
``span x span`` block of cells whose top-left cell is ``o`` and is convolved
only inside that block.  The per-bank outputs are laid out on a
``(cells - span + 1)``-per-side grid, so a per-cell layer (``span == 1``) keeps
its cell grid and a wider span shrinks it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Rect, ShapeError, crop, stitch


class ConfigError(ValueError):
    """A network or grid whose geometry does not compose."""


@dataclass
class MacCounter:
    """Multiply-accumulate tally, split into convolution and fully connected work."""

    conv: int = 0
    fc: int = 0

    @property
    def total(self) -> int:
        return self.conv + self.fc

    def merge(self, other: "MacCounter") -> None:
        self.conv += other.conv
        self.fc += other.fc


@dataclass(frozen=True)
class PatchGrid:
    """Patch geometry in input pixels: ``cells x cells`` cells of ``cell_size`` each."""

    cells: int
    cell_size: int
    patch_stride: int = 0

    def __post_init__(self):
        if self.cells < 1 or self.cell_size < 1:
            raise ConfigError("cells and cell_size must be >= 1")
        if self.patch_stride == 0:
            object.__setattr__(self, "patch_stride", self.cell_size)
        if self.patch_stride < 1:
            raise ConfigError("patch_stride must be >= 1")
        if self.cell_size % self.patch_stride:
            raise ConfigError(
                f"patch_stride {self.patch_stride} does not divide cell_size {self.cell_size}"
            )

    @property
    def patch_side(self) -> int:
        return self.cells * self.cell_size

    def counts(self, height: int, width: int) -> tuple[int, int]:
        p = self.patch_side
        if height < p or width < p:
            return 0, 0
        return (height - p) // self.patch_stride + 1, (width - p) // self.patch_stride + 1

    def patch_count(self, height: int, width: int) -> int:
        nr, nc = self.counts(height, width)
        return nr * nc

    def origins(self, height: int, width: int) -> list[tuple[int, int]]:
        """Patch origins in row-major order."""
        nr, nc = self.counts(height, width)
        s = self.patch_stride
        return [(i * s, j * s) for i in range(nr) for j in range(nc)]


# -- kernels -----------------------------------------------------------------


def correlate(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of ``x`` (..., C, H, W) with ``weight`` (O, C, k, k)."""
    k = weight.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(-2, -1))
    if stride > 1:
        win = win[..., ::stride, ::stride, :, :]
    out = np.tensordot(win, weight, axes=([-5, -2, -1], [1, 2, 3]))
    out = np.moveaxis(out, -1, -3)
    out += bias[:, None, None]
    return out.astype(DTYPE, copy=False)


def conv_extent(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _max_pool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (window, window), axis=(-2, -1))
    if stride > 1:
        win = win[..., ::stride, ::stride, :, :]
    return win.max(axis=(-2, -1))


# -- layer kinds ---------------------------------------------------------------


@dataclass(eq=False)
class GlobalConv:
    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)
    stride: int = 1
    name: str = ""

    tag = 1

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ConfigError(f"conv weight must be (out, in, k, k), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("conv bias must have one entry per output channel")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, shape):
        c, h, w = _map_shape(shape, self)
        if c != self.in_channels:
            raise ConfigError(f"conv expects {self.in_channels} channels, got {c}")
        if h < self.k or w < self.k:
            raise ConfigError(f"map {h}x{w} smaller than kernel {self.k}")
        return (self.out_channels, conv_extent(h, self.k, self.stride), conv_extent(w, self.k, self.stride))

    def forward(self, x, counter=None):
        return conv_forward(x, self, counter)


@dataclass(eq=False)
class LocalConv:
    weight: np.ndarray  # (banks, out, in, k, k), banks row-major by cell origin
    bias: np.ndarray  # (banks, out)
    cells: int  # cell grid side of the layer input
    span: int = 1  # cells covered per bank, per side
    stride: int = 1
    name: str = ""

    tag = 2

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        if not 1 <= self.span <= self.cells:
            raise ConfigError(f"span {self.span} outside 1..{self.cells}")
        if self.weight.ndim != 5 or self.weight.shape[3] != self.weight.shape[4]:
            raise ConfigError(f"local weight must be (banks, out, in, k, k), got {self.weight.shape}")
        if self.weight.shape[0] != self.out_cells**2:
            raise ConfigError(
                f"{self.cells}x{self.cells} grid with span {self.span} needs "
                f"{self.out_cells ** 2} banks, got {self.weight.shape[0]}"
            )
        if self.bias.shape != self.weight.shape[:2]:
            raise ConfigError("local bias must be (banks, out)")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def k(self) -> int:
        return self.weight.shape[3]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def banks(self) -> int:
        return self.weight.shape[0]

    @property
    def out_cells(self) -> int:
        return self.cells - self.span + 1

    def bank_origin(self, i: int) -> tuple[int, int]:
        return divmod(i, self.out_cells)

    def cell_extent(self, side: int) -> int:
        if side % self.cells:
            raise ConfigError(f"map side {side} not divisible into {self.cells} cells")
        return side // self.cells

    def out_cell_extent(self, cell: int) -> int:
        region = self.span * cell
        if region < self.k:
            raise ConfigError(f"bank region {region} smaller than kernel {self.k}")
        return conv_extent(region, self.k, self.stride)

    def output_shape(self, shape):
        c, h, w = _map_shape(shape, self)
        if c != self.in_channels:
            raise ConfigError(f"local conv expects {self.in_channels} channels, got {c}")
        if h != w:
            raise ConfigError("locally shared layers need square maps")
        oc = self.out_cell_extent(self.cell_extent(h))
        return (self.out_channels, self.out_cells * oc, self.out_cells * oc)

    def forward(self, x, counter=None):
        return local_conv_forward_patch(x, self, counter)


@dataclass(eq=False)
class ReLU:
    name: str = ""
    tag = 3

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, counter=None):
        return relu(x)


@dataclass(eq=False)
class MaxPool:
    window: int
    stride: int
    name: str = ""
    tag = 4

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ConfigError("pool window and stride must be >= 1")

    def output_shape(self, shape):
        c, h, w = _map_shape(shape, self)
        if h < self.window or w < self.window:
            raise ConfigError(f"map {h}x{w} smaller than pool window {self.window}")
        return (c, conv_extent(h, self.window, self.stride), conv_extent(w, self.window, self.stride))

    def forward(self, x, counter=None):
        return max_pool(x, self)


@dataclass(eq=False)
class FullyConnected:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    name: str = ""
    tag = 5

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("fc weight must be (out, in) with an (out,) bias")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, shape):
        n = int(np.prod(shape))
        if n != self.in_features:
            raise ConfigError(f"fc expects {self.in_features} inputs, got {n} from shape {tuple(shape)}")
        return (self.out_features,)

    def forward(self, x, counter=None):
        return fc_forward(x, self, counter)


Layer = Union[GlobalConv, LocalConv, ReLU, MaxPool, FullyConnected]
CONV_KINDS = (GlobalConv, LocalConv)


def _map_shape(shape, layer):
    if len(shape) != 3:
        raise ConfigError(f"{type(layer).__name__} needs a (channel, row, col) input, got {tuple(shape)}")
    return shape


# -- forward operations ----------------------------------------------------------


def conv_forward(x: np.ndarray, layer: GlobalConv, counter: MacCounter | None = None) -> np.ndarray:
    if x.shape[-3] != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} channels, got {x.shape[-3]}")
    if x.shape[-2] < layer.k or x.shape[-1] < layer.k:
        raise ShapeError(f"input extent {x.shape[-2:]} smaller than kernel {layer.k}")
    out = correlate(x, layer.weight, layer.bias, layer.stride)
    if counter is not None:
        counter.conv += out.size * layer.k * layer.k * layer.in_channels
    return out


def local_conv_forward_patch(
    patch: np.ndarray, layer: LocalConv, counter: MacCounter | None = None
) -> np.ndarray:
    if patch.ndim != 3:
        raise ShapeError(f"expected a (channel, row, col) patch, got {patch.shape}")
    c_in, h, w = patch.shape
    if c_in != layer.in_channels:
        raise ShapeError(f"local conv expects {layer.in_channels} channels, got {c_in}")
    if h != w or h % layer.cells:
        raise ConfigError(f"patch {h}x{w} does not divide into a {layer.cells}x{layer.cells} grid")
    cell = h // layer.cells
    region = layer.span * cell
    if region < layer.k:
        raise ConfigError(f"bank region {region} smaller than kernel {layer.k}")
    n = layer.out_cells
    blocks = []
    for i in range(layer.banks):
        a, b = layer.bank_origin(i)
        part = crop(patch, Rect(a * cell, b * cell, region, region))
        out = correlate(part, layer.weight[i], layer.bias[i], layer.stride)
        if counter is not None:
            counter.conv += out.size * layer.k * layer.k * c_in
        blocks.append(out)
    return stitch([blocks[r * n:(r + 1) * n] for r in range(n)])


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(DTYPE, copy=False)


def max_pool(x: np.ndarray, layer: MaxPool) -> np.ndarray:
    if x.shape[-2] < layer.window or x.shape[-1] < layer.window:
        raise ShapeError(f"input extent {x.shape[-2:]} smaller than pool window {layer.window}")
    return _max_pool(x, layer.window, layer.stride)


def fc_forward(x: np.ndarray, layer: FullyConnected, counter: MacCounter | None = None) -> np.ndarray:
    v = x.reshape(-1)
    if v.size != layer.in_features:
        raise ShapeError(f"fc expects {layer.in_features} inputs, got {v.size}")
    if counter is not None:
        counter.fc += layer.weight.size
    return (layer.weight @ v + layer.bias).astype(DTYPE, copy=False)


# -- networks ----------------------------------------------------------------------


@dataclass(eq=False)
class Network:
    """An ordered layer stack with a fixed training input shape.

    ``feature_layer`` indexes the layer whose output is the feature vector
    (default: last fully connected layer).  ``response_layer`` indexes the
    layer whose output is averaged into a response map (default: the last
    layer before the first fully connected one).
    """

    layers: list
    input_shape: tuple
    feature_layer: int | None = None
    response_layer: int | None = None
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not self.layers:
            raise ConfigError("network has no layers")
        self.shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ConfigError as e:
                raise ConfigError(f"layer {i} ({type(layer).__name__}): {e}") from None
            self.shapes.append(shape)
        fcs = [i for i, l in enumerate(self.layers) if isinstance(l, FullyConnected)]
        if self.feature_layer is None:
            self.feature_layer = fcs[-1] if fcs else len(self.layers) - 1
        if not 0 <= self.feature_layer < len(self.layers):
            raise ConfigError(f"feature layer {self.feature_layer} out of range")
        if self.response_layer is None:
            head = fcs[0] if fcs else len(self.layers)
            self.response_layer = head - 1 if head > 0 else None
        if self.response_layer is not None and not 0 <= self.response_layer < len(self.layers):
            raise ConfigError(f"response layer {self.response_layer} out of range")

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.shapes[self.feature_layer]))

    def forward(self, x: np.ndarray, counter: MacCounter | None = None, upto: int | None = None) -> np.ndarray:
        """Run layers ``0..upto`` (inclusive; default the feature layer)."""
        upto = self.feature_layer if upto is None else upto
        for layer in self.layers[: upto + 1]:
            x = layer.forward(x, counter)
        return x

    def trace(self, x: np.ndarray, counter: MacCounter | None = None) -> list[np.ndarray]:
        outs = []
        for layer in self.layers[: self.feature_layer + 1]:
            x = layer.forward(x, counter)
            outs.append(x)
        return outs


def trunk_geometry(layers: Sequence) -> tuple[int, int]:
    """(cumulative stride, receptive field side) of a conv/pool stack."""
    stride, field_ = 1, 1
    for layer in layers:
        if isinstance(layer, GlobalConv):
            field_ += (layer.k - 1) * stride
            stride *= layer.stride
        elif isinstance(layer, MaxPool):
            field_ += (layer.window - 1) * stride
            stride *= layer.stride
        elif isinstance(layer, ReLU):
            continue
        else:
            raise ConfigError(f"{type(layer).__name__} has no translation-invariant geometry")
    return stride, field_


def patch_forward_oracle(
    image: np.ndarray,
    net: Network,
    grid: PatchGrid,
    counter: MacCounter | None = None,
    threads: int = 1,
) -> list[np.ndarray]:
    """Crop every patch and run the whole network on it, row-major patch order."""
    _, h, w = image.shape
    origins = grid.origins(h, w)
    if not origins:
        raise ShapeError(f"image {h}x{w} smaller than one {grid.patch_side}-pixel patch")
    p = grid.patch_side

    def run(origin):
        local = MacCounter()
        out = net.forward(crop(image, Rect(origin[0], origin[1], p, p)), local)
        return out, local

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, origins))
    else:
        results = [run(o) for o in origins]
    if counter is not None:
        for _, c in results:
            counter.merge(c)
    return [r[0] for r in results]
