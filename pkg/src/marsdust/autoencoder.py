"""Convolutional autoencoder denoisers at 100, 64 and 128 pixel resolutions."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from .dataset_io import batch_resize
from .metrics import MetricReport, SsimParams, evaluate_denoiser
from .noise_model import noisy_array

log = logging.getLogger(__name__)

# variant -> (input side, bottleneck side); the bottleneck has one channel
VARIANTS = {
    "base100": (100, 25),
    "down64": (64, 8),
    "up128_z256": (128, 16),
    "up128_z1024": (128, 32),
}


@dataclass(frozen=True)
class AEArchitecture:
    variant: str
    base_filters: int = 32

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown autoencoder variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.base_filters < 2:
            raise ValueError("base_filters must be >= 2")

    @property
    def input_size(self) -> int:
        return VARIANTS[self.variant][0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_size, self.input_size, 1)

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        side = VARIANTS[self.variant][1]
        return (side, side, 1)

    @property
    def n_stages(self) -> int:
        inp, z = VARIANTS[self.variant]
        return int(round(math.log2(inp / z)))

    def encoder_stages(self) -> list[list[int]]:
        """Conv output channels per stage; every stage ends in a 2x2 max-pool."""
        f = self.base_filters
        stages = [[f, f]]
        stages += [[f] for _ in range(self.n_stages - 2)]
        stages.append([max(f // 2, 1), 1])
        return stages


def _conv(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True)]


class Autoencoder(nn.Module):
    def __init__(self, arch: AEArchitecture) -> None:
        super().__init__()
        self.arch = arch
        enc: list[nn.Module] = []
        cin = 1
        stages = arch.encoder_stages()
        for chans in stages:
            for c in chans:
                enc += _conv(cin, c)
                cin = c
            enc.append(nn.MaxPool2d(2))
        dec: list[nn.Module] = []
        for chans in reversed(stages):
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            # mirror the stage, dropping the single-channel squeeze conv
            for c in [c for c in reversed(chans) if c != 1]:
                dec += _conv(cin, c)
                cin = c
        dec += [nn.Conv2d(cin, 1, 3, padding=1), nn.Sigmoid()]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        s = self.arch.input_size
        return (1, s, s)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def build_autoencoder(arch: AEArchitecture | str, base_filters: int = 32) -> Autoencoder:
    if isinstance(arch, str):
        arch = AEArchitecture(arch, base_filters)
    return Autoencoder(arch)


@dataclass
class AETrainConfig:
    epochs: int = 100
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 3e-4
    loss: str = "bce"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss not in ("bce", "mse"):
            raise ValueError(f"loss must be 'bce' or 'mse', got {self.loss!r}")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")


def _to_tensor(images: np.ndarray, side: int, what: str) -> torch.Tensor:
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 4 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 3 or x.shape[1:] != (side, side):
        raise ValueError(f"{what} must have shape (N, {side}, {side}), got {x.shape}; resize first")
    return torch.from_numpy(np.ascontiguousarray(x))[:, None]


def _fit(
    model: Autoencoder,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: AETrainConfig,
    seed: int,
    val: tuple[np.ndarray, np.ndarray] | None,
) -> list[dict]:
    side = model.arch.input_size
    x = _to_tensor(inputs, side, "inputs")
    y = _to_tensor(targets, side, "targets")
    if len(x) != len(y) or len(x) == 0:
        raise ValueError(f"need nonempty paired data, got {len(x)} inputs and {len(y)} targets")
    xv = yv = None
    if val is not None:
        xv, yv = _to_tensor(val[0], side, "val inputs"), _to_tensor(val[1], side, "val targets")

    torch.manual_seed(seed)
    loader = DataLoader(TensorDataset(x, y), batch_size=config.batch_size, shuffle=True, generator=torch.Generator().manual_seed(seed))
    loss_fn = nn.BCELoss() if config.loss == "bce" else nn.MSELoss()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        total = 0.0
        for xb, yb in loader:
            opt.zero_grad()
            loss = loss_fn(model(xb), yb)
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
        rec = {"epoch": epoch, "loss": total / len(x)}
        if xv is not None:
            rec["val_loss"] = _eval_loss(model, xv, yv, loss_fn, config.batch_size)
        history.append(rec)
        log.info("autoencoder epoch %d: %s", epoch, rec)
    model.eval()
    return history


@torch.no_grad()
def _eval_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, loss_fn, batch_size: int) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(x), batch_size):
        total += loss_fn(model(x[i : i + batch_size]), y[i : i + batch_size]).item() * len(x[i : i + batch_size])
    return total / len(x)


def train_reconstruction(model: Autoencoder, clean: np.ndarray, config: AETrainConfig = AETrainConfig(), seed: int = 0, val: np.ndarray | None = None):
    """Identity training on clean images at the model's resolution."""
    history = _fit(model, clean, clean, config, seed, (val, val) if val is not None else None)
    return model, history


def train_denoiser(
    model: Autoencoder,
    noisy: np.ndarray,
    clean: np.ndarray,
    config: AETrainConfig = AETrainConfig(),
    seed: int = 0,
    val: tuple[np.ndarray, np.ndarray] | None = None,
):
    if np.shape(noisy) != np.shape(clean):
        raise ValueError(f"unpaired data: noisy {np.shape(noisy)} vs clean {np.shape(clean)}")
    history = _fit(model, noisy, clean, config, seed, val)
    return model, history


@torch.no_grad()
def denoise(model: Autoencoder, noisy: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Restore an (N, S, S) unit-range stack at the model's resolution."""
    x = _to_tensor(noisy, model.arch.input_size, "noisy images")
    model.eval()
    out = [model(x[i : i + batch_size])[:, 0] for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, *x.shape[2:]), dtype=np.float32)
    return torch.cat(out).numpy()


def prepare_pairs(clean_raw: np.ndarray, level: float, side: int, low_high_ratio: float = 0.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Noise raw uint8 patches at native size, then scale both members to unit range at ``side``."""
    noisy = noisy_array(np.asarray(clean_raw, dtype=np.uint8), level, low_high_ratio, seed)
    to_unit = lambda a: batch_resize(a.astype(np.float32) / 255.0, (side, side))  # noqa: E731
    return to_unit(noisy), to_unit(np.asarray(clean_raw))


def noise_sweep(
    model: Autoencoder,
    clean_raw: np.ndarray,
    levels: Sequence[float],
    *,
    seed: int = 0,
    low_high_ratio: float = 0.5,
    params: SsimParams = SsimParams(),
    csv_path: str | Path | None = None,
) -> dict[float, MetricReport]:
    if list(levels) != sorted(levels):
        raise ValueError("noise levels must be sorted ascending")
    side = model.arch.input_size
    reports = {}
    for level in levels:
        noisy, clean = prepare_pairs(clean_raw, level, side, low_high_ratio, seed)
        reports[float(level)] = evaluate_denoiser(denoise(model, noisy), clean, params)
    if csv_path is not None:
        write_sweep_csv(reports, csv_path)
    return reports


def write_sweep_csv(reports: dict[float, MetricReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "mae", "psnr", "ssim", "msssim"])
        for level, rep in reports.items():
            m = rep.means()
            w.writerow([level, m["mae"], m["psnr"], m["ssim"], m["msssim"]])


# -- persistence -----------------------------------------------------------


def save_denoiser(model: nn.Module, model_dir: str | Path, extra: dict | None = None) -> None:
    d = Path(model_dir)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "weights.pt")
    if isinstance(model, Autoencoder):
        meta = {"architecture": "autoencoder", **asdict(model.arch)}
    else:
        meta = {"architecture": "pix2pix", **getattr(model, "build_args", {})}
    (d / "metadata.json").write_text(json.dumps({**meta, **(extra or {})}, indent=2, sort_keys=True, default=str))


def load_denoiser(model_dir: str | Path) -> nn.Module:
    d = Path(model_dir)
    meta = json.loads((d / "metadata.json").read_text())
    if meta["architecture"] == "autoencoder":
        model: nn.Module = build_autoencoder(AEArchitecture(meta["variant"], meta.get("base_filters", 32)))
    elif meta["architecture"] == "pix2pix":
        from .pix2pix import build_generator

        model = build_generator(channels=meta.get("channels", 1), base_filters=meta.get("base_filters", 64))
    else:
        raise ValueError(f"{d} does not hold a denoiser (architecture={meta['architecture']!r})")
    model.load_state_dict(torch.load(d / "weights.pt", map_location="cpu", weights_only=True))
    return model.eval()
