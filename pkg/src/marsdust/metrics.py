"""MAE, PSNR, SSIM and multi-scale SSIM, plus a batch scoring harness.

All metrics take 2-D arrays (or (H, W, C) arrays, averaged over channels)
already scaled to ``data_range``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self) -> None:
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.data_range <= 0:
            raise ValueError("data_range must be positive")
        if self.window_size < 1 or self.sigma <= 0:
            raise ValueError("window_size must be >= 1 and sigma > 0")

    def window(self) -> np.ndarray:
        """1-D Gaussian taps; the 2-D window is their outer product and sums to 1."""
        x = np.arange(self.window_size, dtype=np.float64) - (self.window_size - 1) / 2.0
        g = np.exp(-(x**2) / (2.0 * self.sigma**2))
        return g / g.sum()


def _as_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _as_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _as_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _valid_filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(x, g.size, axis=1) @ g


def _ssim_maps(a: np.ndarray, b: np.ndarray, params: SsimParams) -> tuple[np.ndarray, np.ndarray]:
    if min(a.shape[:2]) < params.window_size:
        raise ValueError(f"image {a.shape[:2]} smaller than the {params.window_size}px window")
    g = params.window()
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    mu_a = _valid_filter(a, g)
    mu_b = _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a * mu_a
    var_b = _valid_filter(b * b, g) - mu_b * mu_b
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return lum * cs, cs


def _channels(a: np.ndarray) -> list[np.ndarray]:
    if a.ndim == 2:
        return [a]
    if a.ndim == 3:
        return [a[..., c] for c in range(a.shape[-1])]
    raise ValueError(f"expected a 2-D or 3-D image, got shape {a.shape}")


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over all valid Gaussian-window positions."""
    a, b = _as_pair(a, b)
    vals = [_ssim_maps(x, y, params)[0].mean() for x, y in zip(_channels(a), _channels(b))]
    return float(np.mean(vals))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scales(shape: tuple[int, ...], window_size: int = 11, max_scales: int = 5) -> int:
    """Number of dyadic scales that keep the coarsest image at least one window wide."""
    side = min(shape[:2])
    n = 0
    while n < max_scales and side >= window_size:
        n += 1
        side //= 2
    return n


def ms_ssim_details(a, b, params: SsimParams = SsimParams(), weights: Sequence[float] = MS_SSIM_WEIGHTS) -> tuple[float, int]:
    """Return (MS-SSIM, scales used). Weights are truncated and renormalised on small images."""
    a, b = _as_pair(a, b)
    weights = np.asarray(weights, dtype=np.float64)
    n = ms_ssim_scales(a.shape, params.window_size, weights.size)
    if n == 0:
        raise ValueError(f"image {a.shape[:2]} smaller than the {params.window_size}px window")
    if n < weights.size:
        warnings.warn(f"MS-SSIM on {a.shape[:2]} uses {n} of {weights.size} scales", stacklevel=2)
        weights = weights[:n] / weights[:n].sum()
    per_channel = []
    for x, y in zip(_channels(a), _channels(b)):
        value = 1.0
        for j in range(n):
            full, cs = _ssim_maps(x, y, params)
            term = full.mean() if j == n - 1 else cs.mean()
            # negative contrast-structure terms are clipped before the fractional power
            value *= max(term, 0.0) ** weights[j]
            if j < n - 1:
                x, y = _downsample(x), _downsample(y)
        per_channel.append(value)
    return float(np.mean(per_channel)), n


def ms_ssim(a, b, params: SsimParams = SsimParams(), weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    return ms_ssim_details(a, b, params, weights)[0]


@dataclass
class MetricReport:
    mae: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    msssim: list[float] = field(default_factory=list)
    pair_ids: list[str] = field(default_factory=list)
    resolution: tuple[int, int] | None = None
    msssim_scales: int | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.mae)

    @property
    def n_psnr_infinite(self) -> int:
        return sum(math.isinf(v) for v in self.psnr)

    def means(self) -> dict[str, float]:
        finite_psnr = [v for v in self.psnr if not math.isinf(v)]

        def _mean(vals):
            return float(math.fsum(vals) / len(vals)) if vals else math.nan

        return {
            "mae": _mean(self.mae),
            "psnr": _mean(finite_psnr) if finite_psnr else (math.inf if self.psnr else math.nan),
            "ssim": _mean(self.ssim),
            "msssim": _mean(self.msssim),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = [None if math.isinf(v) else v for v in self.psnr]
        means = self.means()
        d["means"] = {k: (None if math.isinf(v) else v) for k, v in means.items()}
        d["n_pairs"] = self.n_pairs
        d["n_psnr_infinite"] = self.n_psnr_infinite
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "mae", "psnr", "ssim", "msssim"])
            for row in zip(self.pair_ids, self.mae, self.psnr, self.ssim, self.msssim):
                w.writerow(row)


def evaluate_denoiser(
    restored: Sequence[np.ndarray] | np.ndarray,
    clean: Sequence[np.ndarray] | np.ndarray,
    params: SsimParams = SsimParams(),
    *,
    match_resolution: bool = False,
    pair_ids: Sequence[str] | None = None,
) -> MetricReport:
    """Score aligned restored/clean pairs.

    With ``match_resolution`` the clean images are bilinearly resized to the
    restored images' resolution before scoring (used for 256px GAN outputs).
    """
    if len(restored) != len(clean):
        raise ValueError(f"misaligned sets: {len(restored)} restored vs {len(clean)} clean")
    report = MetricReport(pair_ids=list(pair_ids) if pair_ids is not None else [str(i) for i in range(len(clean))])
    if len(report.pair_ids) != len(clean):
        raise ValueError("pair_ids length does not match the sets")
    for r, c in zip(restored, clean):
        r = np.asarray(r, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if r.ndim == 3 and r.shape[-1] == 1:
            r = r[..., 0]
        if c.ndim == 3 and c.shape[-1] == 1:
            c = c[..., 0]
        if r.shape != c.shape:
            if not match_resolution:
                raise ValueError(f"shape mismatch: {r.shape} vs {c.shape}")
            from .dataset_io import resize_array

            c = resize_array(c.astype(np.float32), r.shape[:2]).astype(np.float64)
        report.mae.append(mae(r, c))
        report.psnr.append(psnr(r, c, params.data_range))
        report.ssim.append(ssim(r, c, params))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            value, scales = ms_ssim_details(r, c, params)
        report.msssim.append(value)
        report.msssim_scales = scales
        report.resolution = tuple(r.shape[:2])  # type: ignore[assignment]
    return report
