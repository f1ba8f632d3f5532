"""Counting metrics, full-image tiled inference, and density-map files.

Metrics follow the standard counting definitions: mean absolute error and
root mean squared error between per-image ground-truth and predicted global
counts. Large images are processed as non-overlapping windows (optionally
overlapping with averaging) over a reflect-padded canvas, and the stitched
block map is cropped back so padded regions contribute nothing to the
count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import IMAGENET_MEAN, IMAGENET_STD, DatasetManifest, load_image


def metrics(pairs) -> tuple[float, float]:
    """(MAE, RMSE) over (ground truth, prediction) count pairs.

    Uses exact float summation, so the result is identical under any
    permutation of the pairs.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("metrics require at least one pair")
    n = len(pairs)
    abs_errors = [abs(gt - pred) for gt, pred in pairs]
    sq_errors = [(gt - pred) ** 2 for gt, pred in pairs]
    mae = math.fsum(abs_errors) / n
    rmse = math.sqrt(math.fsum(sq_errors) / n)
    return mae, rmse


@dataclass
class EvalResult:
    """Per-image counts plus aggregate errors for one evaluated split."""

    per_image: list[tuple[str, float, float]]  # (image_id, gt, pred)
    mae: float
    rmse: float

    @classmethod
    def from_records(cls, records) -> "EvalResult":
        rows = sorted(records, key=lambda r: r[0])
        mae, rmse = metrics([(gt, pred) for _, gt, pred in rows])
        return cls(per_image=rows, mae=mae, rmse=rmse)


def normalize_image(
    image: np.ndarray,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> torch.Tensor:
    """(H, W, 3) uint8 -> normalized (3, H, W) float tensor."""
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0
    mean_t = torch.tensor(mean).view(3, 1, 1)
    std_t = torch.tensor(std).view(3, 1, 1)
    return (t - mean_t) / std_t


def tiled_inference(
    image: torch.Tensor,
    model,
    window: int,
    r: int,
    overlap: int = 0,
) -> tuple[float, np.ndarray]:
    """Full-image density prediction by windowed forward passes.

    The image is reflect-padded to a multiple of the effective stride, each
    ``window x window`` tile is run through the model, and the block-level
    density tiles are stitched (averaged where tiles overlap). The stitched
    map is then cropped back to ``(H // r, W // r)``, which removes all
    density mass attributable to padding; the global count is the cropped
    map's sum.
    """
    if window % r != 0:
        raise ValueError(f"window {window} not divisible by block size {r}")
    if not 0 <= overlap < window:
        raise ValueError(f"overlap must lie in [0, window), got {overlap}")
    if overlap % r != 0:
        raise ValueError(f"overlap {overlap} not divisible by block size {r}")
    if image.dim() != 3:
        raise ValueError("expected a (3, H, W) image tensor")
    if image.shape[-2] < r or image.shape[-1] < r:
        raise ValueError("image smaller than one block")

    h, w = image.shape[-2:]
    stride = window - overlap
    n_y = max(1, math.ceil(max(h - overlap, 1) / stride))
    n_x = max(1, math.ceil(max(w - overlap, 1) / stride))
    padded_h = n_y * stride + overlap
    padded_w = n_x * stride + overlap
    x = image.unsqueeze(0)
    # Reflect padding is capped at size-1 per call; loop for small images.
    while x.shape[-1] < padded_w or x.shape[-2] < padded_h:
        step_w = min(padded_w - x.shape[-1], x.shape[-1] - 1)
        step_h = min(padded_h - x.shape[-2], x.shape[-2] - 1)
        x = torch.nn.functional.pad(x, (0, step_w, 0, step_h), mode="reflect")

    hb, wb = padded_h // r, padded_w // r
    acc = torch.zeros(hb, wb)
    weight = torch.zeros(hb, wb)
    wr = window // r
    with torch.no_grad():
        for iy in range(n_y):
            for ix in range(n_x):
                y0, x0 = iy * stride, ix * stride
                tile = x[:, :, y0 : y0 + window, x0 : x0 + window]
                _, density = model(tile)
                by, bx = y0 // r, x0 // r
                acc[by : by + wr, bx : bx + wr] += density[0].cpu()
                weight[by : by + wr, bx : bx + wr] += 1.0
    stitched = (acc / weight)[: h // r, : w // r]
    density_np = stitched.numpy().astype(np.float64)
    return float(density_np.sum()), density_np


def evaluate_manifest(
    model,
    manifest: DatasetManifest,
    window: int,
    r: int,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    overlap: int = 0,
) -> EvalResult:
    """Tiled inference over every image of a manifest, sorted by image id."""
    records = []
    for rec in sorted(manifest.records, key=lambda rec: rec.annotation.image_id):
        image = load_image(rec.image_path)
        tensor = normalize_image(image, mean, std)
        count, _ = tiled_inference(tensor, model, window, r, overlap=overlap)
        records.append((rec.annotation.image_id, float(rec.annotation.count), count))
    return EvalResult.from_records(records)


def write_eval_csv(path: str | Path, result: EvalResult) -> Path:
    path = Path(path)
    lines = ["image_id,gt_count,pred_count"]
    lines += [f"{i},{gt:.6f},{pred:.6f}" for i, gt, pred in result.per_image]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_density_file(path: str | Path, density: np.ndarray, r: int) -> Path:
    """Portable float-grid file: header line ``H W r``, then row-major values."""
    density = np.asarray(density, dtype=np.float64)
    if density.ndim != 2:
        raise ValueError("density must be 2-d")
    path = Path(path)
    h, w = density.shape
    rows = [f"{h} {w} {r}"]
    rows += [" ".join(f"{v:.10g}" for v in row) for row in density]
    path.write_text("\n".join(rows) + "\n")
    return path


def read_density_file(path: str | Path) -> tuple[np.ndarray, int]:
    lines = Path(path).read_text().strip().splitlines()
    h, w, r = (int(tok) for tok in lines[0].split())
    values = [float(tok) for line in lines[1 : 1 + h] for tok in line.split()]
    if len(values) != h * w:
        raise ValueError(f"density file has {len(values)} values, expected {h * w}")
    return np.array(values, dtype=np.float64).reshape(h, w), r


def render_density_png(path: str | Path, density: np.ndarray) -> Path:
    """Grayscale rendering of a density map, scaled to its own maximum."""
    density = np.asarray(density, dtype=np.float64)
    top = density.max()
    scaled = density / top if top > 0 else density
    img = (np.clip(scaled, 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(img, mode="L").save(path)
    return path
