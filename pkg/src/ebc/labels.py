"""Point annotations to blockwise count grids and classification targets.

Head-center annotations are rasterized directly onto an ``r``-times reduced
block lattice by counting points per block. No Gaussian smoothing is applied
anywhere: with integer bins the count space stays discrete, so block targets
are exact integers and the density target conserves the global count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bins import BinPolicy, quantize_counts

logger = logging.getLogger(__name__)

# Points may land this many pixels outside the image before loading refuses
# to clamp them (dataset annotations routinely carry off-by-one errors).
DEFAULT_CLAMP_TOLERANCE = 4.0


@dataclass
class PointAnnotation:
    """Head-center annotations for one image.

    ``points`` is an ``(N, 2)`` float array of ``[x, y]`` pixel coordinates,
    origin top-left, x rightward, y downward, each inside
    ``[0, width) x [0, height)``. The ground-truth global count of the image
    is ``len(points)``.
    """

    image_id: str
    width: int
    height: int
    points: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: non-positive image size")
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if pts.size:
            x, y = pts[:, 0], pts[:, 1]
            if (x < 0).any() or (x >= self.width).any() or (y < 0).any() or (
                y >= self.height
            ).any():
                raise ValueError(
                    f"{self.image_id}: point outside [0, {self.width}) x "
                    f"[0, {self.height}); clamp before constructing"
                )
        self.points = pts

    @property
    def count(self) -> int:
        return len(self.points)


def clamp_points(
    points: np.ndarray,
    width: int,
    height: int,
    tolerance: float = DEFAULT_CLAMP_TOLERANCE,
    image_id: str = "?",
) -> np.ndarray:
    """Clamps slightly out-of-bounds points to the nearest in-bounds pixel.

    Points farther out than ``tolerance`` pixels are rejected: they indicate
    a broken annotation rather than an off-by-one. Clamping (instead of
    dropping) preserves the image's global count.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not pts.size:
        return pts
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if (
        lo[0] < -tolerance
        or lo[1] < -tolerance
        or hi[0] >= width + tolerance
        or hi[1] >= height + tolerance
    ):
        raise ValueError(
            f"{image_id}: point coordinates exceed clamp tolerance "
            f"{tolerance} for image {width}x{height}"
        )
    # Upper bounds are exclusive; back off by a sub-pixel step.
    clamped = np.column_stack(
        [
            np.clip(pts[:, 0], 0.0, width - 1e-6),
            np.clip(pts[:, 1], 0.0, height - 1e-6),
        ]
    )
    n_moved = int((clamped != pts).any(axis=1).sum())
    if n_moved:
        logger.warning("%s: clamped %d out-of-bounds point(s)", image_id, n_moved)
    return clamped


@dataclass
class BlockCountMap:
    """Integer head counts per ``r x r`` image block."""

    grid: np.ndarray
    r: int

    @property
    def total(self) -> int:
        return int(self.grid.sum())


def rasterize_points(ann: PointAnnotation, r: int) -> BlockCountMap:
    """Counts annotation points per ``r x r`` block.

    A point ``(x, y)`` lands in block ``(y // r, x // r)``. When the image
    dimensions are not multiples of ``r``, points falling in the remainder
    strip are clamped into the last row/column so that no point is lost:
    the grid always sums to ``len(points)``.
    """
    if r < 1:
        raise ValueError(f"reduction factor must be >= 1, got {r}")
    hb, wb = ann.height // r, ann.width // r
    if hb == 0 or wb == 0:
        raise ValueError(
            f"{ann.image_id}: image {ann.width}x{ann.height} smaller than one "
            f"{r}x{r} block"
        )
    grid = np.zeros((hb, wb), dtype=np.int64)
    if ann.count:
        cols = np.minimum((ann.points[:, 0] // r).astype(np.int64), wb - 1)
        rows = np.minimum((ann.points[:, 1] // r).astype(np.int64), hb - 1)
        np.add.at(grid, (rows, cols), 1)
    return BlockCountMap(grid=grid, r=r)


@dataclass
class TargetMaps:
    """Training targets for one block grid.

    ``class_indices``: bin index per block. ``onehot``: indicator encoding
    with shape ``(n_bins, H_blocks, W_blocks)``, summing to 1 along the bin
    axis. ``gt_density``: per-block count target for the count loss (raw
    counts, or counts clamped at the terminal representative).
    """

    class_indices: np.ndarray
    onehot: np.ndarray
    gt_density: np.ndarray


def encode_targets(
    bcm: BlockCountMap, policy: BinPolicy, clamp_density: bool = False
) -> TargetMaps:
    """Quantizes a block count map into classification and density targets.

    With ``clamp_density`` off (the default) ``gt_density`` keeps the raw
    integer counts, so its sum equals the rasterized global count. With it
    on, counts are capped at the terminal bin's representative; this trades
    count conservation in dense blocks for consistency with the clamped
    classification labels.
    """
    idx = quantize_counts(bcm.grid, policy)
    onehot = np.zeros((policy.n,) + bcm.grid.shape, dtype=np.float32)
    ii, jj = np.indices(bcm.grid.shape)
    onehot[idx, ii, jj] = 1.0
    density = bcm.grid.astype(np.float64)
    if clamp_density:
        density = np.minimum(density, policy.bins[-1].representative)
    return TargetMaps(class_indices=idx, onehot=onehot, gt_density=density)


@dataclass
class DatasetStats:
    """Block-count statistics over a set of annotations.

    ``bin_counts[k]`` is the number of blocks whose count falls in bin ``k``.
    ``tail_mean`` is the mean of counts at or above the noise threshold,
    used to calibrate the terminal-bin representative (None when no block
    reaches the threshold).
    """

    bin_counts: np.ndarray
    max_block_count: int
    total_blocks: int
    clamped_blocks: int
    tail_mean: float | None
    n_images: int

    @property
    def clamped_fraction(self) -> float:
        return self.clamped_blocks / self.total_blocks

    @property
    def histogram(self) -> dict[int, int]:
        return {k: int(c) for k, c in enumerate(self.bin_counts) if c}


def dataset_statistics(
    annotations: list[PointAnnotation], r: int, policy: BinPolicy
) -> DatasetStats:
    """Aggregates per-bin block counts over a list of annotations."""
    if not annotations:
        raise ValueError("dataset_statistics requires at least one annotation")
    bin_counts = np.zeros(policy.n, dtype=np.int64)
    max_count = 0
    total = 0
    tail_sum = 0
    tail_n = 0
    threshold = policy.bins[-1].lo
    for ann in annotations:
        grid = rasterize_points(ann, r).grid
        idx = quantize_counts(grid, policy)
        bin_counts += np.bincount(idx.ravel(), minlength=policy.n)
        max_count = max(max_count, int(grid.max()))
        total += grid.size
        tail = grid[grid >= threshold]
        tail_sum += int(tail.sum())
        tail_n += tail.size
    return DatasetStats(
        bin_counts=bin_counts,
        max_block_count=max_count,
        total_blocks=total,
        clamped_blocks=tail_n,
        tail_mean=(tail_sum / tail_n) if tail_n else None,
        n_images=len(annotations),
    )
