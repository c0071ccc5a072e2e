"""Two-band grayscale dust noise, salt-and-pepper noise and pixel histograms."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from .dataset_io import ImagePatch

SMOOTHING_WINDOW = 9
PEAK_FRACTION = 0.5


@dataclass(frozen=True)
class NoiseSpec:
    """Pixel budget and gray bands for one dust-noise draw.

    Low-band values are drawn from ``[low_band[0], low_band[1])`` and high-band
    values from ``[high_band[0], high_band[1]]`` so the two supports are
    disjoint when ``low_band[1] == high_band[0]``.
    """

    n_low: int
    n_high: int
    seed: int = 0
    low_band: tuple[int, int] = (70, 145)
    high_band: tuple[int, int] = (145, 220)

    def __post_init__(self) -> None:
        lo, hi = self.low_band, self.high_band
        if not (0 <= lo[0] < lo[1] <= 255 and 0 <= hi[0] <= hi[1] <= 255):
            raise ValueError(f"band bounds out of range: {lo}, {hi}")
        if lo[1] > hi[0]:
            raise ValueError(f"low band {lo} overlaps high band {hi}")
        if self.n_low < 0 or self.n_high < 0:
            raise ValueError("pixel counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n_low + self.n_high

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_BANDS = {"low_band": (70, 145), "high_band": (145, 220)}
# early experiment: mid and high end of the spectrum
MID_HIGH_BANDS = {"low_band": (105, 205), "high_band": (205, 255)}


@dataclass
class PixelHistogram:
    counts: np.ndarray
    peaks: list[int]
    smoothed: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mass_between(self, lo: int, hi: int) -> float:
        return float(self.counts[lo : hi + 1].sum() / max(self.total, 1))


def smoothed_peaks(counts: np.ndarray, window: int = SMOOTHING_WINDOW, fraction: float = PEAK_FRACTION) -> tuple[np.ndarray, list[int]]:
    smooth = np.convolve(counts.astype(np.float64), np.ones(window) / window, mode="same")
    if smooth.max() <= 0:
        return smooth, []
    # plateaus report their middle bin
    idx, _ = find_peaks(smooth, height=fraction * smooth.max())
    return smooth, sorted(int(i) for i in idx)


def histogram(patches: Sequence[ImagePatch | np.ndarray]) -> PixelHistogram:
    if len(patches) == 0:
        raise ValueError("histogram needs at least one patch")
    counts = np.zeros(256, dtype=np.int64)
    for p in patches:
        px = p.pixels if isinstance(p, ImagePatch) else np.asarray(p, dtype=np.uint8)
        counts += np.bincount(px.ravel(), minlength=256)
    smooth, peaks = smoothed_peaks(counts)
    return PixelHistogram(counts=counts, peaks=peaks, smoothed=smooth)


def _pixels(image: ImagePatch | np.ndarray) -> np.ndarray:
    return image.pixels if isinstance(image, ImagePatch) else np.asarray(image, dtype=np.uint8)


def _wrap(image: ImagePatch | np.ndarray, pixels: np.ndarray):
    if isinstance(image, ImagePatch):
        return ImagePatch(id=image.id, pixels=pixels, label=image.label, split=image.split)
    return pixels


def add_salt_pepper(image: ImagePatch | np.ndarray, fraction: float, seed: int):
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    src = _pixels(image)
    rng = np.random.default_rng(seed)
    n = int(round(fraction * src.size))
    out = src.copy()
    flat = out.reshape(-1)
    pos = rng.choice(src.size, size=n, replace=False)
    flat[pos] = rng.integers(0, 2, size=n, dtype=np.uint8) * 255
    return _wrap(image, out)


def dust_positions(shape: tuple[int, int], spec: NoiseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (flat positions, new values) for one noise draw."""
    size = shape[0] * shape[1]
    if spec.total > size:
        raise ValueError(f"noise budget {spec.total} exceeds {size} pixels")
    rng = np.random.default_rng(spec.seed)
    pos = rng.choice(size, size=spec.total, replace=False)
    low = rng.integers(spec.low_band[0], spec.low_band[1], size=spec.n_low, endpoint=False)
    high = rng.integers(spec.high_band[0], spec.high_band[1], size=spec.n_high, endpoint=True)
    return pos, np.concatenate([low, high]).astype(np.uint8)


def add_dust_noise(image: ImagePatch | np.ndarray, spec: NoiseSpec):
    """Overwrite ``spec.total`` distinct pixels with band-limited gray values."""
    src = _pixels(image)
    pos, values = dust_positions(src.shape, spec)
    out = src.copy()
    out.reshape(-1)[pos] = values
    return _wrap(image, out)


def spec_for_level(shape: tuple[int, int], level: float, low_high_ratio: float = 0.5, seed: int = 0, bands: dict | None = None) -> NoiseSpec:
    """Split ``round(level * H * W)`` noisy pixels between bands; ``low_high_ratio`` is the low-band share."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"noise level must be in [0, 1], got {level}")
    if not 0.0 <= low_high_ratio <= 1.0:
        raise ValueError(f"low_high_ratio must be in [0, 1], got {low_high_ratio}")
    total = int(round(level * shape[0] * shape[1]))
    n_low = int(round(total * low_high_ratio))
    return NoiseSpec(n_low=n_low, n_high=total - n_low, seed=seed, **(bands or DEFAULT_BANDS))


def derive_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_noisy_dataset(
    clean: Sequence[ImagePatch | np.ndarray],
    level: float,
    low_high_ratio: float = 0.5,
    seed: int = 0,
    bands: dict | None = None,
) -> list[tuple]:
    """Pair every clean patch with a noised copy; patch i uses the i-th derived seed."""
    seeds = derive_seeds(seed, len(clean))
    pairs = []
    for img, s in zip(clean, seeds):
        spec = spec_for_level(_pixels(img).shape, level, low_high_ratio, s, bands)
        pairs.append((add_dust_noise(img, spec), img))
    return pairs


def noisy_array(clean: np.ndarray, level: float, low_high_ratio: float = 0.5, seed: int = 0) -> np.ndarray:
    """Vectorised convenience over an (N, H, W) uint8 stack; same draws as ``make_noisy_dataset``."""
    pairs = make_noisy_dataset(list(clean), level, low_high_ratio, seed)
    if not pairs:
        return clean.copy()
    return np.stack([n for n, _ in pairs])
