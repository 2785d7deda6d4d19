"""End-to-end attribute prediction: localize, extend, ten views, averaged SVM scores.

The ten views are taken from a 3x3 patch grid laid over the resized region
and over its mirror image, so one pass per orientation yields every view's
feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interweave import interweaved_forward
from .io import PipelineConfig, load_network, load_svm, load_threshold
from .layers import ConfigError, Network, PatchGrid, patch_forward_oracle
from .localize import ProposalParams, localize_cascade
from .predict import SvmModel, extend_region, label_of, score_views
from .tensor import crop, hflip, resize_bilinear

# Patch index (row-major in a 3x3 grid) of each view, in crop-set order:
# centre, top-left, top-right, bottom-left, bottom-right.
_VIEW_PATCHES = (4, 0, 2, 6, 8)
# After mirroring, left and right corners swap.
_MIRROR_PATCHES = (4, 2, 0, 8, 6)
SCORE_DECIMALS = 4


@dataclass
class Models:
    net_o: Network
    net_s: Network
    anet: Network
    svm: SvmModel
    threshold: float
    config: PipelineConfig

    @classmethod
    def load(cls, cfg: PipelineConfig) -> "Models":
        return cls(
            load_network(cfg.net_o),
            load_network(cfg.net_s),
            load_network(cfg.anet),
            load_svm(cfg.svm),
            load_threshold(cfg.threshold),
            cfg,
        )

    @property
    def grid(self) -> PatchGrid:
        c = self.config
        return PatchGrid(c.cells, c.cell_size, c.patch_stride)


def region_side(grid: PatchGrid) -> int:
    """Resized region side so that a 3x3 patch grid covers it exactly."""
    return grid.patch_side + 2 * grid.patch_stride


def view_features(region: np.ndarray, anet: Network, grid: PatchGrid, threads: int = 1, oracle: bool = False):
    """Feature vectors of the ten views of a region already resized to ``region_side``."""
    _, h, w = region.shape
    side = region_side(grid)
    if (h, w) != (side, side):
        raise ConfigError(f"region {h}x{w} is not {side}x{side}")
    run = patch_forward_oracle if oracle else interweaved_forward
    plain = run(region, anet, grid, threads=threads)
    mirrored = run(hflip(region), anet, grid, threads=threads)
    views = [plain[i] for i in _VIEW_PATCHES] + [mirrored[i] for i in _MIRROR_PATCHES]
    return np.stack([np.asarray(v).reshape(-1) for v in views])


@dataclass
class ImagePrediction:
    window: list | None = None
    region: list | None = None
    window_score: float | None = None
    scores: tuple = ()

    def as_json(self) -> dict:
        """Rounded record; labels come from the unrounded scores."""
        return {
            "window": self.window,
            "region": self.region,
            "score": None if self.window_score is None else round(self.window_score, SCORE_DECIMALS),
            "attributes": [
                {"index": a, "score": round(s, SCORE_DECIMALS), "label": label_of(s)} for a, s in enumerate(self.scores)
            ],
        }


def predict_image(image: np.ndarray, models: Models, threads: int = 1, oracle: bool = False) -> ImagePrediction:
    cfg = models.config
    _, h, w = image.shape
    res = localize_cascade(
        image,
        models.net_o,
        models.net_s,
        models.threshold,
        ProposalParams(cfg.scales, cfg.stride, cfg.max_windows),
        ProposalParams(cfg.scales_s, cfg.stride, cfg.max_windows),
    )
    if res.window is None:
        return ImagePrediction()
    region = extend_region(res.window.rect, h, w, cfg.extension)
    side = region_side(models.grid)
    patch = resize_bilinear(crop(image, region), side, side)
    feats = view_features(patch, models.anet, models.grid, threads, oracle)
    scores = score_views(feats, models.svm)
    return ImagePrediction(
        res.window.rect.as_list(), region.as_list(), res.window.score, tuple(float(s) for s in scores)
    )
