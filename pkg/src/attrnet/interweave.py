"""One-pass extraction of many overlapping-patch feature vectors.

The network is split into a globally shared prefix, a locally shared suffix
and a fully connected head.  The prefix runs once over the whole image.  The
first local layer runs each bank once over the span its cell block occupies
across all patches (the per-bank "cell response channels").  Every later local
layer is evaluated on interweaved maps: for a bank with a span of ``f`` cells,
tiles are drawn from the previous layer's bank outputs so that the bank's
receptive field reads the right cells for every patch of one phase, and the
bank is then applied only at the phase-designated regions.

Patches are grouped twice.  The *offset* of a patch is its origin modulo the
cell side in the suffix input; patches sharing an offset share a tile grid.
The *phase* of a patch is its tile coordinate modulo the bank span.
"""

from __future__ import annotations

import csv
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .layers import (
    ConfigError,
    FullyConnected,
    GlobalConv,
    LocalConv,
    MacCounter,
    MaxPool,
    Network,
    PatchGrid,
    ReLU,
    correlate,
    patch_forward_oracle,
    trunk_geometry,
)
from .tensor import DTYPE, ShapeError, stitch


@dataclass
class NetSplit:
    prefix: list
    suffix: list
    head: list


def split_network(net: Network) -> NetSplit:
    layers = net.layers[: net.feature_layer + 1]
    i = 0
    while i < len(layers) and isinstance(layers[i], (GlobalConv, ReLU, MaxPool)):
        i += 1
    j = i
    while j < len(layers) and isinstance(layers[j], (LocalConv, ReLU, MaxPool)):
        j += 1
    prefix, suffix, head = layers[:i], layers[i:j], layers[j:]
    for layer in head:
        if not isinstance(layer, (FullyConnected, ReLU)):
            raise ConfigError(
                f"{type(layer).__name__} after the locally shared layers is not supported"
            )
    if not any(isinstance(l, LocalConv) for l in suffix):
        raise ConfigError("network has no locally shared layer")
    return NetSplit(prefix, suffix, head)


@dataclass(frozen=True)
class Placement:
    """Patch origins and cell side in the coordinate frame of the first local layer input."""

    origins: tuple
    cell: int

    @cached_property
    def tiles(self) -> list[tuple[int, int]]:
        return [(r // self.cell, c // self.cell) for r, c in self.origins]

    @cached_property
    def offsets(self) -> list[tuple[int, int]]:
        return [(r % self.cell, c % self.cell) for r, c in self.origins]

    @cached_property
    def by_offset(self) -> dict:
        """offset -> {tile coordinate: patch index}"""
        groups: dict = {}
        for p, (off, tile) in enumerate(zip(self.offsets, self.tiles)):
            groups.setdefault(off, {})[tile] = p
        return groups

    def phase(self, patch: int, span: int) -> tuple[int, int]:
        u, v = self.tiles[patch]
        return u % span, v % span


@dataclass
class CellResponseChannels:
    """Bank ``i`` of a local layer evaluated over a whole map region.

    ``offsets[i]`` is the input-map coordinate of the receptive field origin of
    ``channels[i][:, 0, 0]``.
    """

    layer: LocalConv
    channels: list
    offsets: list


@dataclass
class CellBlocks:
    """Per-patch cell contents of one local level: ``blocks[cell][patch]``."""

    placement: Placement
    cells: int
    blocks: list

    def patch_map(self, patch: int) -> np.ndarray:
        n = self.cells
        row = [self.blocks[i][patch] for i in range(n * n)]
        return stitch([row[r * n:(r + 1) * n] for r in range(n)])


@dataclass
class InterweavedMap:
    bank: int
    offset: tuple
    phase: tuple
    tile_origin: tuple  # tile coordinate of the map's top-left tile
    tile: int  # tile side in map elements
    tile_channels: np.ndarray  # source cell index per tile, -1 for filler
    map: np.ndarray
    patches: list = field(default_factory=list)

    def region_origin(self, patch_tile: tuple[int, int], bank_origin: tuple[int, int]) -> tuple[int, int]:
        r = (patch_tile[0] + bank_origin[0] - self.tile_origin[0]) * self.tile
        c = (patch_tile[1] + bank_origin[1] - self.tile_origin[1]) * self.tile
        return r, c


def _run(tasks, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda f: f(), tasks))
    return [f() for f in tasks]


def global_cell_pass(
    x: np.ndarray,
    layer: LocalConv,
    counter: MacCounter | None = None,
    placement: Placement | None = None,
    threads: int = 1,
) -> CellResponseChannels:
    """Apply every bank of ``layer`` to the whole map ``x``.

    With a placement, bank ``i`` is only evaluated over the bounding box of
    the regions it owns across all placed patches.
    """
    _, h, w = x.shape
    if x.shape[0] != layer.in_channels:
        raise ShapeError(f"local conv expects {layer.in_channels} channels, got {x.shape[0]}")
    if placement is not None:
        region = layer.span * placement.cell
        rows = [o[0] for o in placement.origins]
        cols = [o[1] for o in placement.origins]

    def bank(i):
        local = MacCounter()
        if placement is None:
            r0, c0, part = 0, 0, x
        else:
            a, b = layer.bank_origin(i)
            r0 = min(rows) + a * placement.cell
            c0 = min(cols) + b * placement.cell
            part = x[:, r0:max(rows) + a * placement.cell + region, c0:max(cols) + b * placement.cell + region]
        if part.shape[1] < layer.k or part.shape[2] < layer.k:
            raise ShapeError(f"map region {part.shape[1:]} smaller than kernel {layer.k}")
        out = correlate(part, layer.weight[i], layer.bias[i], layer.stride)
        local.conv += out.size * layer.k * layer.k * layer.in_channels
        return out, (r0, c0), local

    results = _run([lambda i=i: bank(i) for i in range(layer.banks)], threads)
    if counter is not None:
        for _, _, c in results:
            counter.merge(c)
    return CellResponseChannels(layer, [r[0] for r in results], [r[1] for r in results])


def cells_from_channels(ch: CellResponseChannels, placement: Placement) -> CellBlocks:
    """Crop each patch's bank outputs out of the cell response channels."""
    layer = ch.layer
    cell = placement.cell
    size = layer.out_cell_extent(cell)
    blocks = []
    for i in range(layer.banks):
        a, b = layer.bank_origin(i)
        chan, (r0, c0) = ch.channels[i], ch.offsets[i]
        per_patch = []
        for r, c in placement.origins:
            dr, dc = r + a * cell - r0, c + b * cell - c0
            if dr % layer.stride or dc % layer.stride:
                raise ConfigError(
                    f"patch offset ({dr}, {dc}) not aligned to local stride {layer.stride}"
                )
            dr //= layer.stride
            dc //= layer.stride
            blk = chan[:, dr:dr + size, dc:dc + size]
            if blk.shape[1:] != (size, size):
                raise ShapeError("cell block falls outside the cell response channel")
            per_patch.append(blk)
        blocks.append(per_patch)
    return CellBlocks(placement, layer.out_cells, blocks)


def build_interweaved_maps(cells: CellBlocks, layer: LocalConv) -> list[InterweavedMap]:
    """One map per (bank, offset, phase).

    For bank origin ``b`` and phase ``phi`` the tile at tile coordinate ``U``
    holds cell ``b + ((U - phi - b) mod span)`` of the patch that places that
    cell at ``U``.  Tiles no patch provides are zero filler.
    """
    if layer.cells != cells.cells:
        raise ConfigError(f"layer grid {layer.cells} does not match incoming grid {cells.cells}")
    f = layer.span
    g = cells.cells
    pl = cells.placement
    sample = cells.blocks[0][0]
    tile = sample.shape[1]
    filler = np.zeros_like(sample)
    maps = []
    for offset, members in pl.by_offset.items():
        classes: dict = {}
        for tile_rc, p in members.items():
            classes.setdefault((tile_rc[0] % f, tile_rc[1] % f), []).append(p)
        for phase in sorted(classes):
            patches = sorted(classes[phase])
            prow = [pl.tiles[p][0] for p in patches]
            pcol = [pl.tiles[p][1] for p in patches]
            for bank in range(layer.banks):
                br, bc = layer.bank_origin(bank)
                u0, v0 = min(prow) + br, min(pcol) + bc
                nu = max(prow) + br + f - u0
                nv = max(pcol) + bc + f - v0
                chans = np.full((nu, nv), -1, dtype=np.int64)
                rows = []
                for iu in range(nu):
                    u = u0 + iu
                    cr = br + (u - phase[0] - br) % f
                    row = []
                    for iv in range(nv):
                        v = v0 + iv
                        cc = bc + (v - phase[1] - bc) % f
                        provider = members.get((u - cr, v - cc))
                        if provider is None:
                            row.append(filler)
                        else:
                            chans[iu, iv] = cr * g + cc
                            row.append(cells.blocks[cr * g + cc][provider])
                    rows.append(row)
                maps.append(
                    InterweavedMap(bank, offset, phase, (u0, v0), tile, chans, stitch(rows), patches)
                )
    return maps


def evaluate_interweaved(
    maps: Sequence[InterweavedMap],
    layer: LocalConv,
    placement: Placement,
    counter: MacCounter | None = None,
    threads: int = 1,
) -> CellBlocks:
    """Apply each bank on its maps at the phase-designated regions only."""
    n_patches = len(placement.origins)
    out: list = [[None] * n_patches for _ in range(layer.banks)]

    def task(m: InterweavedMap):
        f = layer.span * m.tile
        origin = layer.bank_origin(m.bank)
        regions = []
        for p in m.patches:
            r, c = m.region_origin(placement.tiles[p], origin)
            regions.append(m.map[:, r:r + f, c:c + f])
        batch = np.stack(regions)
        res = correlate(batch, layer.weight[m.bank], layer.bias[m.bank], layer.stride)
        local = MacCounter(conv=res.size * layer.k * layer.k * layer.in_channels)
        return m, res, local

    for m, res, local in _run([lambda m=m: task(m) for m in maps], threads):
        for p, blk in zip(m.patches, res):
            out[m.bank][p] = blk
        if counter is not None:
            counter.merge(local)
    return CellBlocks(placement, layer.out_cells, out)


def _pool_blocks(cells: CellBlocks, layer: MaxPool) -> CellBlocks:
    side = cells.blocks[0][0].shape[1]
    if layer.window > layer.stride or side % layer.stride:
        raise ConfigError(
            f"pool window {layer.window}/stride {layer.stride} straddles {side}-wide cells"
        )
    blocks = [[layer.forward(b) for b in per] for per in cells.blocks]
    return CellBlocks(cells.placement, cells.cells, blocks)


def _relu_blocks(cells: CellBlocks) -> CellBlocks:
    blocks = [[np.maximum(b, 0) for b in per] for per in cells.blocks]
    return CellBlocks(cells.placement, cells.cells, blocks)


def plan_placement(image_shape, net: Network, grid: PatchGrid) -> tuple[NetSplit, Placement]:
    split = split_network(net)
    p = grid.patch_side
    if tuple(net.input_shape[1:]) != (p, p):
        raise ConfigError(f"network input {net.input_shape} does not match {p}x{p} patches")
    _, h, w = image_shape
    origins = grid.origins(h, w)
    if not origins:
        raise ShapeError(f"image {h}x{w} smaller than one {p}-pixel patch")
    stride, _ = trunk_geometry(split.prefix)
    if grid.patch_stride % stride:
        raise ConfigError(f"patch stride {grid.patch_stride} not a multiple of prefix stride {stride}")
    first = next(l for l in split.suffix if isinstance(l, LocalConv))
    k = net.layers.index(first)
    side = (net.shapes[k - 1] if k > 0 else net.input_shape)[1]
    cell = first.cell_extent(side)
    if first.stride > 1 and (cell % first.stride or (grid.patch_stride // stride) % first.stride):
        raise ConfigError("first local layer stride must divide the cell side and patch step")
    placement = Placement(tuple((r // stride, c // stride) for r, c in origins), cell)
    return split, placement


def interweaved_forward(
    image: np.ndarray,
    net: Network,
    grid: PatchGrid,
    counter: MacCounter | None = None,
    threads: int = 1,
) -> list[np.ndarray]:
    """Feature vectors of every patch, in the same order as the patch-by-patch pass."""
    split, placement = plan_placement(image.shape, net, grid)
    counter = counter if counter is not None else MacCounter()

    x = image
    for layer in split.prefix:
        x = layer.forward(x, counter)

    cells = None
    for layer in split.suffix:
        if isinstance(layer, LocalConv):
            if cells is None:
                ch = global_cell_pass(x, layer, counter, placement, threads)
                cells = cells_from_channels(ch, placement)
            else:
                maps = build_interweaved_maps(cells, layer)
                cells = evaluate_interweaved(maps, layer, placement, counter, threads)
        elif isinstance(layer, ReLU):
            if cells is None:
                x = layer.forward(x)
            else:
                cells = _relu_blocks(cells)
        else:
            if cells is None:
                x = layer.forward(x)
            else:
                cells = _pool_blocks(cells, layer)

    n = len(placement.origins)
    feats = np.stack([cells.patch_map(p).reshape(-1) for p in range(n)])
    for layer in split.head:
        if isinstance(layer, FullyConnected):
            if feats.shape[1] != layer.in_features:
                raise ShapeError(f"fc expects {layer.in_features} inputs, got {feats.shape[1]}")
            feats = (feats @ layer.weight.T + layer.bias).astype(DTYPE, copy=False)
            counter.fc += n * layer.weight.size
        else:
            feats = np.maximum(feats, 0)
    return list(feats)


# -- sharing benchmark ---------------------------------------------------------------


CSV_COLUMNS = [
    "patch_count",
    "oracle_macs",
    "onepass_macs",
    "mac_ratio",
    "wall_oracle_ms",
    "wall_onepass_ms",
    "wall_ratio",
]


@dataclass
class SharingReport:
    patch_count: int
    oracle_macs: int
    onepass_macs: int
    wall_oracle_ms: float
    wall_onepass_ms: float

    @property
    def mac_ratio(self) -> float:
        return self.oracle_macs / self.onepass_macs

    @property
    def wall_ratio(self) -> float:
        return self.wall_oracle_ms / self.wall_onepass_ms if self.wall_onepass_ms > 0 else float("inf")

    @property
    def shares(self) -> bool:
        return self.mac_ratio > 1

    def row(self) -> list:
        return [
            self.patch_count,
            self.oracle_macs,
            self.onepass_macs,
            f"{self.mac_ratio:.4f}",
            f"{self.wall_oracle_ms:.3f}",
            f"{self.wall_onepass_ms:.3f}",
            f"{self.wall_ratio:.4f}",
        ]


def _median_ms(fn, repetitions):
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def benchmark_sharing(
    image_sizes: Iterable[int],
    net: Network,
    grid: PatchGrid,
    repetitions: int = 5,
    seed: int = 0,
) -> list[SharingReport]:
    """Conv MAC tallies (deterministic) and median wall times of both paths.

    MAC counts cover convolutions only; the fully connected head costs the
    same on both paths.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for size in image_sizes:
        image = rng.uniform(0, 1, (net.input_shape[0], size, size)).astype(DTYPE)
        oc, ic = MacCounter(), MacCounter()
        patch_forward_oracle(image, net, grid, oc)
        interweaved_forward(image, net, grid, ic)
        reports.append(
            SharingReport(
                grid.patch_count(size, size),
                oc.conv,
                ic.conv,
                _median_ms(lambda: patch_forward_oracle(image, net, grid), repetitions),
                _median_ms(lambda: interweaved_forward(image, net, grid), repetitions),
            )
        )
    return reports


def write_report_csv(reports: Sequence[SharingReport], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
