"""Dataset ingestion, augmentation with point tracking, batch assembly.

Annotation files are line-delimited JSON, one record per image:
``{"image": <relative path>, "width": W, "height": H, "points": [[x, y], ...]}``
with real-valued pixel coordinates, origin top-left, under a dataset root of
the form ``<root>/images/...`` plus ``<root>/<split>.jsonl``.

Training samples are scale-jittered square crops: a ``s*u x s*u`` window
(u uniform in the configured scale range) is cropped and resized back to
``s x s``, with head-center coordinates transformed alongside the pixels,
followed by horizontal flip, color jitter, Gaussian blur, and per-channel
normalization. Every step is a pure function of the sample and a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from PIL import Image

from .bins import BinPolicy
from .labels import (
    DEFAULT_CLAMP_TOLERANCE,
    PointAnnotation,
    TargetMaps,
    clamp_points,
    encode_targets,
    rasterize_points,
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SPLITS = ("train", "val", "test")


@dataclass
class AugmentConfig:
    """Training-time augmentation parameters.

    ``hue`` defaults to 0: positive hue jitter is known to produce NaN
    gradients in this pipeline and is exposed for ablation only. Blur is
    applied unconditionally by default (``blur_prob=1.0``).
    """

    base_size: int = 224
    scale_range: tuple[float, float] = (1.0, 2.0)
    hflip_prob: float = 0.5
    brightness: float = 0.1
    saturation: float = 0.1
    hue: float = 0.0
    blur_kernel: int = 5
    blur_prob: float = 1.0
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.base_size < 1:
            raise ValueError(f"base_size must be positive, got {self.base_size}")
        lo, hi = self.scale_range
        if lo < 1 or hi < lo:
            raise ValueError(f"scale_range must satisfy 1 <= lo <= hi, got {self.scale_range}")
        if self.blur_kernel % 2 != 1:
            raise ValueError(f"blur_kernel must be odd, got {self.blur_kernel}")
        if not 0 <= self.hue <= 0.5:
            raise ValueError(f"hue must lie in [0, 0.5], got {self.hue}")


@dataclass
class ManifestRecord:
    image_path: Path
    annotation: PointAnnotation


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def annotations(self) -> list[PointAnnotation]:
        return [r.annotation for r in self.records]


def load_manifest(
    root: str | Path,
    split: str,
    clamp_tolerance: float = DEFAULT_CLAMP_TOLERANCE,
    verify_images: bool = True,
) -> DatasetManifest:
    """Loads and validates one split's annotation file.

    Slightly out-of-bounds points are clamped with a warning; duplicates,
    missing/undecodable images, malformed lines, and points beyond the clamp
    tolerance are errors.
    """
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
    ann_path = root / f"{split}.jsonl"
    if not ann_path.exists():
        raise FileNotFoundError(f"annotation file missing: {ann_path}")

    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with ann_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{ann_path}:{lineno}: malformed JSON ({e})") from e
            for key in ("image", "width", "height", "points"):
                if key not in rec:
                    raise ValueError(f"{ann_path}:{lineno}: missing key {key!r}")
            rel = rec["image"]
            if rel in seen:
                raise ValueError(f"{ann_path}:{lineno}: duplicate image path {rel!r}")
            seen.add(rel)
            img_path = root / rel
            if not img_path.exists():
                raise FileNotFoundError(f"{ann_path}:{lineno}: image missing: {img_path}")
            if verify_images:
                try:
                    with Image.open(img_path) as im:
                        im.verify()
                except Exception as e:
                    raise ValueError(f"{img_path}: image does not decode ({e})") from e
            points = clamp_points(
                np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2),
                rec["width"],
                rec["height"],
                tolerance=clamp_tolerance,
                image_id=rel,
            )
            ann = PointAnnotation(
                image_id=rel, width=rec["width"], height=rec["height"], points=points
            )
            records.append(ManifestRecord(image_path=img_path, annotation=ann))
    return DatasetManifest(root=root, split=split, records=records)


def load_image(path: str | Path) -> np.ndarray:
    """Decodes an image to (H, W, 3) uint8 RGB."""
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def _reflect_pad_to(image: np.ndarray, points: np.ndarray, min_h: int, min_w: int):
    """Reflect-pads right/bottom so the image is at least ``min_h x min_w``.

    Padding only on the far edges keeps point coordinates unchanged; the
    padded strip carries no annotations.
    """
    h, w = image.shape[:2]
    pad_h, pad_w = max(0, min_h - h), max(0, min_w - w)
    if pad_h == 0 and pad_w == 0:
        return image, points
    # np.pad reflect cannot exceed the source size per call; loop if needed.
    while pad_h > 0 or pad_w > 0:
        step_h = min(pad_h, image.shape[0] - 1)
        step_w = min(pad_w, image.shape[1] - 1)
        image = np.pad(image, ((0, step_h), (0, step_w), (0, 0)), mode="reflect")
        pad_h -= step_h
        pad_w -= step_w
    return image, points


def augment_sample(
    image: np.ndarray,
    points: np.ndarray,
    cfg: AugmentConfig,
    rng_seed,
) -> tuple[torch.Tensor, np.ndarray]:
    """Random crop-scale-flip-jitter-blur-normalize, tracking point coords.

    Returns the normalized float image as a (3, s, s) tensor and the
    surviving transformed points, all inside ``[0, s)^2``. Deterministic
    given ``rng_seed`` (an int or seed sequence for ``default_rng``): all
    random draws happen in a fixed order regardless of which are applied.
    """
    rng = np.random.default_rng(rng_seed)
    s = cfg.base_size
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()

    u = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    image, pts = _reflect_pad_to(image, pts, s, s)
    h, w = image.shape[:2]
    side = min(int(round(s * u)), h, w)
    oy = int(rng.integers(0, h - side + 1))
    ox = int(rng.integers(0, w - side + 1))
    flip = rng.random() < cfg.hflip_prob
    brightness = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    saturation = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    hue = rng.uniform(-cfg.hue, cfg.hue)
    do_blur = rng.random() < cfg.blur_prob

    crop = image[oy : oy + side, ox : ox + side]
    pts = pts - np.array([ox, oy], dtype=np.float64)
    inside = (pts >= 0).all(axis=1) & (pts[:, 0] < side) & (pts[:, 1] < side)
    pts = pts[inside] * (s / side)
    # Guard against round-off landing exactly on the open upper edge.
    pts = np.minimum(pts, np.nextafter(float(s), 0.0))

    t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1)
    if side != s:
        t = TF.resize(t, [s, s], antialias=True)
    if flip:
        t = TF.horizontal_flip(t)
        if pts.size:
            pts[:, 0] = np.maximum(s - 1 - pts[:, 0], 0.0)
    if cfg.brightness > 0:
        t = TF.adjust_brightness(t, brightness)
    if cfg.saturation > 0:
        t = TF.adjust_saturation(t, saturation)
    if cfg.hue > 0:
        t = TF.adjust_hue(t, hue)
    if do_blur and cfg.blur_kernel > 1:
        t = TF.gaussian_blur(t, [cfg.blur_kernel, cfg.blur_kernel])
    t = t.float() / 255.0
    t = TF.normalize(t, mean=list(cfg.normalize_mean), std=list(cfg.normalize_std))
    return t, pts


@dataclass
class Batch:
    """Stacked crops and their per-block training targets."""

    images: torch.Tensor  # (B, 3, s, s)
    class_indices: torch.Tensor  # (B, h, w) long
    onehot: torch.Tensor  # (B, n, h, w) float32
    density: torch.Tensor  # (B, h, w) float32
    counts: torch.Tensor  # (B,) surviving point counts


def make_batch(
    samples: list[tuple[torch.Tensor, np.ndarray]],
    r: int,
    policy: BinPolicy,
    clamp_density: bool = False,
) -> Batch:
    """Encodes per-crop targets and stacks a batch.

    Each sample's targets are computed independently (no cross-talk); all
    crops must share a size divisible by ``r``.
    """
    if not samples:
        raise ValueError("empty batch")
    s = samples[0][0].shape[-1]
    if any(img.shape[-2:] != (s, s) for img, _ in samples):
        raise ValueError("all crops in a batch must share the same size")
    if s % r != 0:
        raise ValueError(f"crop size {s} not divisible by block size {r}")

    images, cls, onehot, density, counts = [], [], [], [], []
    for i, (img, pts) in enumerate(samples):
        ann = PointAnnotation(image_id=f"crop-{i}", width=s, height=s, points=pts)
        targets: TargetMaps = encode_targets(
            rasterize_points(ann, r), policy, clamp_density=clamp_density
        )
        images.append(img)
        cls.append(torch.from_numpy(targets.class_indices))
        onehot.append(torch.from_numpy(targets.onehot))
        density.append(torch.from_numpy(targets.gt_density.astype(np.float32)))
        counts.append(len(pts))
    return Batch(
        images=torch.stack(images),
        class_indices=torch.stack(cls),
        onehot=torch.stack(onehot),
        density=torch.stack(density),
        counts=torch.tensor(counts, dtype=torch.float32),
    )


class CrowdDataset:
    """Lazy image loading plus seeded augmentation over a manifest.

    ``sample(idx, epoch)`` derives its seed from (base_seed, epoch, idx), so
    any sample is reproducible in isolation and epochs reshuffle the
    augmentations without any shared RNG state.
    """

    def __init__(self, manifest: DatasetManifest, cfg: AugmentConfig, base_seed: int = 0):
        self.manifest = manifest
        self.cfg = cfg
        self.base_seed = base_seed

    def __len__(self) -> int:
        return len(self.manifest)

    def sample(self, idx: int, epoch: int = 0) -> tuple[torch.Tensor, np.ndarray]:
        rec = self.manifest.records[idx]
        image = load_image(rec.image_path)
        seed = np.random.SeedSequence([self.base_seed, epoch, idx])
        return augment_sample(image, rec.annotation.points, self.cfg, seed)


def epoch_order(base_seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic sample permutation for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([base_seed, epoch, 0xBA7C4]))
    return rng.permutation(n)


def epoch_batches(
    dataset: CrowdDataset,
    batch_size: int,
    epoch: int,
    r: int,
    policy: BinPolicy,
    clamp_density: bool = False,
):
    """Yields shuffled batches for one epoch, deterministically."""
    order = epoch_order(dataset.base_seed, epoch, len(dataset))
    for start in range(0, len(order), batch_size):
        idxs = order[start : start + batch_size]
        samples = [dataset.sample(int(i), epoch) for i in idxs]
        yield make_batch(samples, r, policy, clamp_density=clamp_density)
