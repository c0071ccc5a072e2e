"""Terrain-like synthetic 100x100 grayscale patches for desk-scale runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


def terrain(n: int, seed: int = 0, size: int = 100) -> np.ndarray:
    """Smooth multi-scale relief with a few bright/dark blobs, uint8 (n, size, size)."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        field = np.zeros((size, size))
        for sigma, w in ((12.0, 1.0), (5.0, 0.5), (2.0, 0.25)):
            layer = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
            field += w * layer / (layer.std() + 1e-12)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(4, 14)
            field += rng.choice([-1.5, 1.5]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        field = (field - field.mean()) / (field.std() + 1e-12)
        out[i] = np.clip(110 + 35 * field, 0, 255).astype(np.uint8)
    return out


def dusty(n: int, seed: int = 0, size: int = 100) -> np.ndarray:
    """Washed-out patches: low-contrast relief plus two-band speckle."""
    rng = np.random.default_rng(seed + 10_000)
    base = terrain(n, seed + 20_000, size).astype(np.float64)
    haze = 0.3 * (base - base.mean()) + 140
    speckle = rng.random((n, size, size)) < 0.6
    values = np.where(rng.random((n, size, size)) < 0.5, rng.integers(70, 145, (n, size, size)), rng.integers(145, 221, (n, size, size)))
    return np.where(speckle, values, np.clip(haze, 0, 255)).astype(np.uint8)


def write_dataset(root: Path, n_per_class: dict[str, int], seed: int = 0) -> Path:
    """Write PNG patches plus a manifest.csv with path,label,split columns."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    lines = ["path,label,split"]
    k = 0
    for split, n in n_per_class.items():
        clear = terrain(n, seed + k)
        dust = dusty(n, seed + k)
        k += 1
        for label, stack in (("not_dusty", clear), ("dusty", dust)):
            for i, img in enumerate(stack):
                rel = f"images/{split}_{label}_{i:04d}.png"
                Image.fromarray(img).save(root / rel)
                lines.append(f"{rel},{label},{split}")
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    return root / "manifest.csv"
