"""Experiment grids over bins, loss weights, block sizes, and head types.

Each grid cell is a set of config overrides; the runner trains the cell,
evaluates it, and appends one CSV row keyed by the cell's config hash.
Finished hashes are skipped on re-runs, so an interrupted grid resumes
without duplicating work. Cell failures are recorded (NaN metrics plus an
error log) and the grid continues.

The ``bins.mode = "sbc"`` arm reproduces the classical comparison baseline:
block targets come from Gaussian-smoothed point maps and are quantized into
bordering real-valued unit intervals ``[0,1), [1,2), ..., [m, inf)``. It
exists only here; the core bin policies stay integer-valued.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
import traceback
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .config import apply_override, config_hash
from .data import Batch, CrowdDataset, epoch_order, load_manifest
from .head import ClassificationCounter, build_encoder
from .labels import rasterize_points
from .prompts import HashTextEncoder, PromptSet, embed_prompts
from .train import TrainResult, train

CSV_COLUMNS = [
    "config_hash",
    "granularity",
    "m",
    "lambda",
    "r",
    "head",
    "bin_mode",
    "mae",
    "rmse",
    "n_images",
    "wall_seconds",
]


@dataclass(frozen=True)
class ContinuousBins:
    """Bordering unit intervals over the smoothed count space.

    ``[0,1), [1,2), ..., [m-1,m), [m, inf)`` with midpoint representatives;
    the open tail uses ``m + 0.5``.
    """

    m: int

    @property
    def n(self) -> int:
        return self.m + 1

    @cached_property
    def representatives(self) -> np.ndarray:
        return np.arange(self.m + 1, dtype=np.float64) + 0.5

    def quantize_values(self, values: np.ndarray) -> np.ndarray:
        return np.minimum(np.floor(values).astype(np.int64), self.m)

    def prompts(self) -> PromptSet:
        texts = [
            f"There are between {k} and {k + 1} people" for k in range(self.m)
        ]
        texts.append(f"There are more than {self.m} people")
        return PromptSet(prompts=tuple(texts))


def smoothed_block_counts(
    points: np.ndarray, size: int, r: int, sigma: float
) -> np.ndarray:
    """Gaussian-smoothed point map over a square crop, summed per block."""
    canvas = np.zeros((size, size), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.size:
        xs = np.clip(pts[:, 0].astype(np.int64), 0, size - 1)
        ys = np.clip(pts[:, 1].astype(np.int64), 0, size - 1)
        np.add.at(canvas, (ys, xs), 1.0)
        canvas = gaussian_filter(canvas, sigma=sigma, mode="reflect")
    nb = size // r
    return canvas[: nb * r, : nb * r].reshape(nb, r, nb, r).sum(axis=(1, 3))


def sbc_batch(
    samples: list[tuple[torch.Tensor, np.ndarray]],
    r: int,
    cbins: ContinuousBins,
    sigma: float,
) -> Batch:
    """Interval-bin targets from smoothed maps, mirroring the integer path."""
    s = samples[0][0].shape[-1]
    images, cls, onehot, density, counts = [], [], [], [], []
    for img, pts in samples:
        block = smoothed_block_counts(pts, s, r, sigma)
        idx = cbins.quantize_values(block)
        oh = np.zeros((cbins.n,) + idx.shape, dtype=np.float32)
        ii, jj = np.indices(idx.shape)
        oh[idx, ii, jj] = 1.0
        images.append(img)
        cls.append(torch.from_numpy(idx))
        onehot.append(torch.from_numpy(oh))
        density.append(torch.from_numpy(block.astype(np.float32)))
        counts.append(len(pts))
    return Batch(
        images=torch.stack(images),
        class_indices=torch.stack(cls),
        onehot=torch.stack(onehot),
        density=torch.stack(density),
        counts=torch.tensor(counts, dtype=torch.float32),
    )


def expand_grid(axes: dict[str, list]) -> list[dict]:
    """Cartesian product of dotted-key axes into per-cell override dicts."""
    keys = sorted(axes)
    cells = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        cells.append(dict(zip(keys, combo)))
    return cells


def _merge_cell(base_cfg: dict, cell: dict) -> dict:
    cfg = base_cfg
    for dotted, value in sorted(cell.items()):
        cfg = apply_override(cfg, f"{dotted}={json.dumps(value)}")
    return cfg


def resolve_auto_m(cfg: dict) -> dict:
    """Replaces ``bins.m == "auto_max"`` with the dataset's max block count.

    With the threshold at the maximum observed count, the open tail bin
    holds exactly that count: no label is treated as noise.
    """
    if cfg["bins"]["m"] != "auto_max":
        return cfg
    manifest = load_manifest(cfg["data"]["root"], cfg["data"]["train_split"])
    r = cfg["model"]["r"]
    max_count = 0
    for ann in manifest.annotations:
        max_count = max(max_count, int(rasterize_points(ann, r).grid.max()))
    return apply_override(cfg, f"bins.m={max(1, max_count)}")


def _train_cell(cfg: dict, cell_dir: Path, text_encoder, quiet: bool) -> TrainResult:
    if cfg["bins"]["mode"] == "sbc":
        m = cfg["bins"]["m"]
        sigma = cfg["bins"]["sbc_sigma"]
        r = cfg["model"]["r"]
        cbins = ContinuousBins(m)
        enc_dim = cfg["model"]["embedding_dim"]
        encoder_for_text = text_encoder or HashTextEncoder(dim=enc_dim)
        batch_size = cfg["optim"]["batch_size"]

        def model_builder(c):
            encoder = build_encoder(c["model"])
            bank = embed_prompts(cbins.prompts(), encoder_for_text)
            return ClassificationCounter(
                encoder, cbins, bank, r=r, logit_scale_init=c["model"]["logit_scale_init"]
            )

        def batch_builder(dataset: CrowdDataset, epoch: int):
            order = epoch_order(dataset.base_seed, epoch, len(dataset))
            for start in range(0, len(order), batch_size):
                idxs = order[start : start + batch_size]
                samples = [dataset.sample(int(i), epoch) for i in idxs]
                yield sbc_batch(samples, r, cbins, sigma)

        return train(
            cfg,
            cell_dir,
            text_encoder=text_encoder,
            quiet=quiet,
            model_builder=model_builder,
            batch_builder=batch_builder,
        )
    return train(cfg, cell_dir, text_encoder=text_encoder, quiet=quiet)


def _existing_hashes(csv_path: Path) -> set[str]:
    if not csv_path.exists():
        return set()
    with csv_path.open() as fh:
        return {row["config_hash"] for row in csv.DictReader(fh)}


def _append_row(csv_path: Path, row: dict) -> None:
    new_file = not csv_path.exists()
    with csv_path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new_file:
            writer.writeheader()
        writer.writerow(row)


def run_ablation(
    base_cfg: dict,
    cells: list[dict],
    csv_path: str | Path,
    workdir: str | Path,
    text_encoder=None,
    quiet: bool = True,
) -> list[dict]:
    """Trains and evaluates every grid cell, emitting one CSV row per cell.

    Returns the rows written in this invocation (skipped cells excluded).
    """
    csv_path = Path(csv_path)
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    done = _existing_hashes(csv_path)
    written: list[dict] = []

    for cell in cells:
        cfg = _merge_cell(base_cfg, cell)
        chash = config_hash(cfg)
        if chash in done:
            continue
        t0 = time.time()
        row = {
            "config_hash": chash,
            "granularity": cfg["bins"]["granularity"],
            "m": cfg["bins"]["m"],
            "lambda": cfg["loss"]["lambda"],
            "r": cfg["model"]["r"],
            "head": cfg["model"]["head"],
            "bin_mode": cfg["bins"]["mode"],
        }
        try:
            cfg = resolve_auto_m(cfg)
            result = _train_cell(cfg, workdir / chash, text_encoder, quiet)
            best = min(result.log_rows, key=lambda r: r["val_mae"])
            val = load_manifest(
                cfg["data"]["root"], cfg["data"]["val_split"], verify_images=False
            )
            row.update(
                mae=f"{best['val_mae']:.6f}",
                rmse=f"{best['val_rmse']:.6f}",
                n_images=len(val),
            )
        except Exception:
            (workdir / f"{chash}.error.log").write_text(traceback.format_exc())
            row.update(mae="nan", rmse="nan", n_images=0)
        row["wall_seconds"] = f"{time.time() - t0:.3f}"
        _append_row(csv_path, row)
        done.add(chash)
        written.append(row)
    return written


def table1_cells(lambdas=(0.01, 0.1, 1.0, 2.0)) -> list[dict]:
    """The enhancement-ablation grid: interval baseline, integer bins,
    noise threshold, then the count-loss weight sweep."""
    cells: list[dict] = [
        {"bins.mode": "sbc", "bins.m": 8, "loss.lambda": 0.0},
        {"bins.mode": "integer", "bins.m": "auto_max", "loss.lambda": 0.0},
        {"bins.mode": "integer", "loss.lambda": 0.0},
    ]
    for lam in lambdas:
        cells.append({"bins.mode": "integer", "loss.lambda": lam})
    return cells
