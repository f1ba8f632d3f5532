"""Synthetic dot-crowd datasets for desk-scale training and tests.

Each image is a noisy gray background with bright, softly antialiased dots;
the annotation points are the dot centers. The mapping from pixels to
counts is therefore fully learnable by a small encoder, which makes these
datasets suitable for end-to-end training checks without real crowd data.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
from PIL import Image


def scatter_points(
    rng: np.random.Generator,
    width: int,
    height: int,
    n: int,
    min_separation: float = 8.0,
    margin: float = 4.0,
    max_tries: int = 200,
) -> np.ndarray:
    """Samples ``n`` points, keeping them apart where space allows.

    Rejection sampling with a per-point retry cap: when the canvas is too
    crowded to honor the separation, the last candidate is accepted anyway
    so the requested count is always met.
    """
    pts: list[np.ndarray] = []
    for _ in range(n):
        candidate = None
        for _ in range(max_tries):
            candidate = np.array(
                [
                    rng.uniform(margin, width - margin),
                    rng.uniform(margin, height - margin),
                ]
            )
            if not pts:
                break
            d = np.linalg.norm(np.stack(pts) - candidate, axis=1).min()
            if d >= min_separation:
                break
        pts.append(candidate)
    return np.stack(pts) if pts else np.zeros((0, 2))


def render_dot_image(
    rng: np.random.Generator,
    width: int,
    height: int,
    points: np.ndarray,
    dot_radius=3.0,
    background: float = 60.0,
    noise: float = 5.0,
    dot_value=220.0,
) -> np.ndarray:
    """Renders bright dots at ``points`` over a noisy background, (H, W, 3) uint8.

    ``dot_radius`` and ``dot_value`` may be scalars or per-dot arrays; varied
    sizes and intensities make the counting task non-trivial for small
    encoders.
    """
    pts = np.asarray(points).reshape(-1, 2)
    radii = np.broadcast_to(np.asarray(dot_radius, dtype=np.float64), (len(pts),))
    values = np.broadcast_to(np.asarray(dot_value, dtype=np.float64), (len(pts),))
    canvas = background + rng.normal(0.0, noise, size=(height, width))
    boost = np.zeros((height, width))
    for (x, y), radius, value in zip(pts, radii, values):
        x0, x1 = int(max(0, x - radius - 1)), int(min(width, x + radius + 2))
        y0, y1 = int(max(0, y - radius - 1)), int(min(height, y + radius + 2))
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(xx + 0.5 - x, yy + 0.5 - y)
        patch = np.clip(radius + 0.5 - dist, 0.0, 1.0) * (value - background)
        boost[y0:y1, x0:x1] = np.maximum(boost[y0:y1, x0:x1], patch)
    img = np.clip(canvas + boost, 0, 255).astype(np.uint8)
    return np.repeat(img[:, :, None], 3, axis=2)


def generate_dataset(
    root: str | Path,
    split: str,
    n_images: int,
    size: tuple[int, int] = (224, 224),
    max_count: int = 30,
    seed: int = 0,
    dot_radius: float = 3.0,
    min_separation: float = 8.0,
    radius_range: tuple[float, float] | None = None,
    value_range: tuple[float, float] | None = None,
) -> Path:
    """Writes ``n_images`` rendered images plus the split's annotation file.

    Counts are uniform in ``[0, max_count]``. With ``radius_range`` /
    ``value_range`` set, dot size and brightness vary per dot (harder data).
    Returns the annotation path. Layout matches the loader's expectation:
    ``<root>/images/*.png`` and ``<root>/<split>.jsonl``.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(split.encode())]))
    width, height = size
    lines = []
    for i in range(n_images):
        n = int(rng.integers(0, max_count + 1))
        pts = scatter_points(rng, width, height, n, min_separation=min_separation)
        radii = rng.uniform(*radius_range, n) if radius_range else dot_radius
        values = rng.uniform(*value_range, n) if value_range else 220.0
        img = render_dot_image(rng, width, height, pts, dot_radius=radii, dot_value=values)
        rel = f"images/{split}_{i:04d}.png"
        Image.fromarray(img).save(root / rel)
        lines.append(
            json.dumps(
                {
                    "image": rel,
                    "width": width,
                    "height": height,
                    "points": [[float(x), float(y)] for x, y in pts],
                }
            )
        )
    ann_path = root / f"{split}.jsonl"
    ann_path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return ann_path
