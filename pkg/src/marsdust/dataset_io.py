"""Manifest and patch loading, normalization, resizing and seeded split preparation."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

DUSTY = "dusty"
NOT_DUSTY = "not_dusty"
LABELS = (NOT_DUSTY, DUSTY)
LABEL_CODES = {NOT_DUSTY: 0, DUSTY: 1}
SPLITS = ("train", "val", "test")
MODES = ("unit", "standardized", "signed_unit")
PATCH_SIZE = (100, 100)

DEFAULT_COLUMNS = {"path": "path", "label": "label", "split": "split"}

_LABEL_ALIASES = {
    "dusty": DUSTY,
    "dust": DUSTY,
    "1": DUSTY,
    "not_dusty": NOT_DUSTY,
    "not dusty": NOT_DUSTY,
    "notdusty": NOT_DUSTY,
    "not-dusty": NOT_DUSTY,
    "non-dusty": NOT_DUSTY,
    "non_dusty": NOT_DUSTY,
    "clear": NOT_DUSTY,
    "0": NOT_DUSTY,
}
_SPLIT_ALIASES = {
    "train": "train",
    "training": "train",
    "val": "val",
    "valid": "val",
    "validation": "val",
    "test": "test",
    "testing": "test",
}


class ManifestError(ValueError):
    """Raised when a manifest row carries an unknown token or a duplicate path."""


class DecodeError(ValueError):
    """Raised when an image file cannot be decoded."""


@dataclass(frozen=True)
class ManifestRow:
    image_path: str
    label: str
    split: str


@dataclass
class SplitManifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def counts(self) -> dict[str, int]:
        c = Counter(r.split for r in self.rows)
        return {s: c.get(s, 0) for s in SPLITS}

    def label_counts(self, split: str) -> dict[str, int]:
        c = Counter(r.label for r in self.rows if r.split == split)
        return {lab: c.get(lab, 0) for lab in LABELS}

    def select(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.image_path


@dataclass
class ImagePatch:
    id: str
    pixels: np.ndarray
    label: str | None = None
    split: str | None = None

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2:
            raise ValueError(f"patch {self.id!r} must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            if self.pixels.min() < 0 or self.pixels.max() > 255:
                raise ValueError(f"patch {self.id!r} has values outside [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have the same channel count")
        if any(s == 0 for s in self.std):
            raise ValueError("degenerate channel: std is zero")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> ChannelStats:
        return cls(tuple(d["mean"]), tuple(d["std"]))


@dataclass
class NormalizedImage:
    """Real-valued image of shape (H, W, C) plus what is needed to invert it."""

    pixels: np.ndarray
    mode: str
    stats: ChannelStats | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def to_unit(self) -> np.ndarray:
        if self.mode == "unit":
            return self.pixels
        if self.mode == "signed_unit":
            return (self.pixels + 1.0) / 2.0
        assert self.stats is not None
        mean, std = _broadcast_stats(self.stats, self.pixels.shape[-1])
        return self.pixels * std + mean

    def denormalize(self) -> np.ndarray:
        """Return 8-bit raw pixels; single-channel images come back 2-D."""
        raw = np.clip(np.rint(self.to_unit() * 255.0), 0, 255).astype(np.uint8)
        return raw[..., 0] if raw.shape[-1] == 1 else raw


def _broadcast_stats(stats: ChannelStats, channels: int) -> tuple[np.ndarray, np.ndarray]:
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if mean.size == 1:
        mean = np.repeat(mean, channels)
        std = np.repeat(std, channels)
    if mean.size != channels:
        raise ValueError(f"stats have {mean.size} channels, image has {channels}")
    return mean, std


def _normalize_token(value: str, aliases: dict[str, str], kind: str, lineno: int) -> str:
    key = value.strip().lower()
    if key not in aliases:
        raise ManifestError(f"row {lineno}: unknown {kind} token {value!r}")
    return aliases[key]


def load_manifest(csv_path: str | Path, columns: dict[str, str] | None = None) -> SplitManifest:
    """Parse a manifest CSV with path/label/split columns.

    ``columns`` maps the logical names ``path``, ``label`` and ``split`` to the
    header names actually used in the file. Image paths are resolved relative to
    the CSV's directory.
    """
    csv_path = Path(csv_path)
    cols = {**DEFAULT_COLUMNS, **(columns or {})}
    with csv_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in cols.values() if c not in header]
        if missing:
            raise ManifestError(f"{csv_path}: header lacks columns {missing}; found {header}")
        rows = []
        seen: set[str] = set()
        # lineno counts the header as line 1
        for lineno, rec in enumerate(reader, start=2):
            path = rec[cols["path"]].strip()
            if path in seen:
                raise ManifestError(f"row {lineno}: duplicate image path {path!r}")
            seen.add(path)
            rows.append(
                ManifestRow(
                    image_path=path,
                    label=_normalize_token(rec[cols["label"]], _LABEL_ALIASES, "label", lineno),
                    split=_normalize_token(rec[cols["split"]], _SPLIT_ALIASES, "split", lineno),
                )
            )
    manifest = SplitManifest(rows=rows, root=csv_path.parent)
    log.info("manifest %s: %s", csv_path, manifest.counts())
    return manifest


def load_patch(
    path: str | Path,
    *,
    label: str | None = None,
    split: str | None = None,
    warnings: Counter | None = None,
) -> ImagePatch:
    """Read a PNG (or any PIL-readable image) or ``.npy`` array as an 8-bit patch.

    Multi-channel inputs are averaged to one channel and counted under
    ``warnings["multichannel"]`` when a counter is supplied.
    """
    path = Path(path)
    try:
        if path.suffix.lower() == ".npy":
            arr = np.load(path, allow_pickle=False)
        else:
            with Image.open(path) as im:
                im.load()
                arr = np.asarray(im)
    except (OSError, ValueError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc

    if arr.ndim == 3:
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        else:
            if arr.shape[-1] == 4:
                arr = arr[..., :3]
            arr = np.rint(arr.astype(np.float64).mean(axis=-1))
            if warnings is not None:
                warnings["multichannel"] += 1
            log.warning("%s: multi-channel image averaged to grayscale", path)
    if arr.ndim != 2:
        raise DecodeError(f"{path}: unsupported array shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and arr.size and arr.max() <= 1.0:
            arr = np.rint(arr * 255.0)
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return ImagePatch(id=path.stem, pixels=arr, label=label, split=split)


def normalize(patch: ImagePatch | np.ndarray, mode: str = "unit", stats: ChannelStats | None = None) -> NormalizedImage:
    raw = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    if raw.ndim == 2:
        raw = raw[..., None]
    unit = raw.astype(np.float32) / 255.0
    if mode == "unit":
        return NormalizedImage(unit, mode)
    if mode == "signed_unit":
        return NormalizedImage(unit * 2.0 - 1.0, mode)
    if mode == "standardized":
        if stats is None:
            raise ValueError("standardized mode requires channel stats")
        mean, std = _broadcast_stats(stats, unit.shape[-1])
        return NormalizedImage(((unit - mean) / std).astype(np.float32), mode, stats)
    raise ValueError(f"unknown normalization mode {mode!r}")


def resize_array(pixels: np.ndarray, target: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resize an (H, W) or (H, W, C) float array."""
    h, w = target
    if h < 1 or w < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    if pixels.shape[:2] == (h, w):
        return pixels.copy()
    squeeze = pixels.ndim == 2
    arr = pixels[..., None] if squeeze else pixels
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    if method == "bilinear":
        out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    elif method == "nearest":
        out = F.interpolate(t, size=(h, w), mode="nearest-exact")
    else:
        raise ValueError(f"unknown resize method {method!r}")
    res = out[0].permute(1, 2, 0).numpy()
    return res[..., 0] if squeeze else res


def resize(image: NormalizedImage, target: tuple[int, int], method: str = "bilinear") -> NormalizedImage:
    return NormalizedImage(resize_array(image.pixels, target, method), image.mode, image.stats)


def to_rgb_stack(image: NormalizedImage) -> NormalizedImage:
    if image.pixels.shape[-1] != 1:
        raise ValueError(f"expected a single-channel image, got {image.pixels.shape[-1]} channels")
    stats = image.stats
    if stats is not None and len(stats.mean) == 1:
        stats = ChannelStats(stats.mean * 3, stats.std * 3)
    return NormalizedImage(np.repeat(image.pixels, 3, axis=-1), image.mode, stats)


def compute_channel_stats(patches: Iterable[ImagePatch]) -> ChannelStats:
    """Mean/std of unit-scaled pixels, accumulated in float64 over all patches."""
    total = 0
    s = 0.0
    ss = 0.0
    for p in patches:
        u = p.pixels.astype(np.float64) / 255.0
        total += u.size
        s += u.sum()
        ss += np.square(u).sum()
    if total == 0:
        raise ValueError("no pixels to compute stats over")
    mean = s / total
    std = float(np.sqrt(max(ss / total - mean**2, 0.0)))
    return ChannelStats((mean,), (std,))


def load_rows(
    manifest: SplitManifest,
    rows: Sequence[ManifestRow],
    workers: int = 1,
    loader: Callable[..., ImagePatch] = load_patch,
) -> list[ImagePatch]:
    def _one(row: ManifestRow) -> ImagePatch:
        patch = loader(manifest.resolve(row), label=row.label, split=row.split)
        patch.id = row.image_path
        return patch

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(_one, rows))
    return [_one(r) for r in rows]


def prepare_split(
    manifest: SplitManifest,
    split: str,
    seed: int,
    workers: int = 1,
    loader: Callable[..., ImagePatch] = load_patch,
) -> list[tuple[ImagePatch, int]]:
    """Load one split and return it shuffled by ``seed`` with dusty=1, not_dusty=0."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rows = manifest.select(split)
    order = np.random.default_rng(seed).permutation(len(rows))
    patches = load_rows(manifest, [rows[i] for i in order], workers=workers, loader=loader)
    return [(p, LABEL_CODES[p.label]) for p in patches]  # type: ignore[index]


def code_to_label(code: int) -> str:
    return LABELS[int(code)]


def stack_unit(patches: Sequence[ImagePatch]) -> np.ndarray:
    """Stack raw patches into an (N, H, W) float32 array scaled to [0, 1]."""
    if not patches:
        return np.zeros((0, *PATCH_SIZE), dtype=np.float32)
    return np.stack([p.pixels for p in patches]).astype(np.float32) / 255.0


def batch_resize(images: np.ndarray, target: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resize an (N, H, W) stack."""
    if images.shape[1:3] == tuple(target):
        return images.copy()
    t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))[:, None]
    mode = "nearest-exact" if method == "nearest" else "bilinear"
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(t, size=tuple(target), mode=mode, **kwargs)[:, 0].numpy()


# -- NPY cache -------------------------------------------------------------


def cache_key(split: str, mode: str, target: tuple[int, int], seed: int) -> str:
    return f"{split}_{mode}_{target[0]}x{target[1]}_seed{seed}"


def save_npy(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` in NPY v1.0 layout, little-endian and C-ordered."""
    arr = np.ascontiguousarray(array)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, arr, version=(1, 0), allow_pickle=False)


def load_npy(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return np.lib.format.read_array(fh, allow_pickle=False)


def load_split_arrays(
    manifest: SplitManifest,
    split: str,
    *,
    seed: int,
    mode: str = "unit",
    target: tuple[int, int] = PATCH_SIZE,
    stats: ChannelStats | None = None,
    cache_dir: str | Path | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (X, y) with X of shape (N, H, W) in the requested mode, shuffled by seed.

    When ``cache_dir`` is given, arrays are cached as NPY files keyed by
    (split, mode, target, seed).
    """
    if cache_dir is not None:
        key = cache_key(split, mode, target, seed)
        xp = Path(cache_dir) / f"{key}_x.npy"
        yp = Path(cache_dir) / f"{key}_y.npy"
        if xp.exists() and yp.exists():
            return load_npy(xp), load_npy(yp)
    items = prepare_split(manifest, split, seed, workers=workers)
    x = batch_resize(stack_unit([p for p, _ in items]), target)
    if mode == "signed_unit":
        x = x * 2.0 - 1.0
    elif mode == "standardized":
        if stats is None:
            raise ValueError("standardized mode requires channel stats")
        x = (x - stats.mean[0]) / stats.std[0]
    elif mode != "unit":
        raise ValueError(f"unknown normalization mode {mode!r}")
    x = x.astype(np.float32)
    y = np.array([code for _, code in items], dtype=np.int64)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_npy(xp, x)
        save_npy(yp, y)
    return x, y
