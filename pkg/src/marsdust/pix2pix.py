"""Pix2Pix denoiser: U-Net generator, 70x70 PatchGAN discriminator, BCE + L1 training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dataset_io import ImagePatch, resize_array

log = logging.getLogger(__name__)

IMAGE_SIZE = 256
JITTER_SIZE = 286


@dataclass
class GanConfig:
    image_size: int = IMAGE_SIZE
    generator_lr: float = 2e-4
    discriminator_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 10
    lambda_l1: float = 100.0
    batch_size: int = 1
    channels: int = 1
    base_filters: int = 64

    def __post_init__(self) -> None:
        if self.generator_lr <= 0 or self.discriminator_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_l1 <= 0:
            raise ValueError("lambda_l1 must be positive")
        if self.image_size != IMAGE_SIZE:
            raise ValueError(f"image_size must be {IMAGE_SIZE}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class GanLossRecord:
    gen_total: float
    gen_adversarial: float
    gen_l1: float
    disc_loss: float
    epoch: int = 0
    step: int = 0


# -- preprocessing ---------------------------------------------------------


def _raw(p: ImagePatch | np.ndarray) -> np.ndarray:
    return p.pixels if isinstance(p, ImagePatch) else np.asarray(p)


def preprocess_pair(noisy, clean, train_mode: bool = False, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (input, target) tensors of shape (1, 256, 256) in [-1, 1].

    Training mode resizes both to 286, takes the same random 256 crop and
    applies the same random horizontal mirror to both members.
    """
    a = _raw(noisy).astype(np.float32) / 127.5 - 1.0
    b = _raw(clean).astype(np.float32) / 127.5 - 1.0
    if a.shape != b.shape:
        raise ValueError(f"pair size mismatch: {a.shape} vs {b.shape}")
    if train_mode:
        pair = np.stack([a, b], axis=-1)
        pair = resize_array(pair, (JITTER_SIZE, JITTER_SIZE))
        rng = np.random.default_rng(seed)
        top, left = rng.integers(0, JITTER_SIZE - IMAGE_SIZE + 1, size=2)
        pair = pair[top : top + IMAGE_SIZE, left : left + IMAGE_SIZE]
        if rng.random() < 0.5:
            pair = pair[:, ::-1]
        a, b = pair[..., 0], pair[..., 1]
    else:
        a = resize_array(a, (IMAGE_SIZE, IMAGE_SIZE))
        b = resize_array(b, (IMAGE_SIZE, IMAGE_SIZE))
    to_t = lambda x: torch.from_numpy(np.ascontiguousarray(np.clip(x, -1.0, 1.0), dtype=np.float32))[None]  # noqa: E731
    return to_t(a), to_t(b)


# -- networks --------------------------------------------------------------


def _down(cin: int, cout: int, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _up(cin: int, cout: int, dropout: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False), nn.BatchNorm2d(cout)]
    if dropout:
        layers.append(nn.Dropout(0.5))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class UNetGenerator(nn.Module):
    """Eight stride-2 encoder blocks (256 -> 1) and a mirrored decoder with skip concatenation."""

    def __init__(self, channels: int = 1, base_filters: int = 64) -> None:
        super().__init__()
        f = base_filters
        self.build_args = {"channels": channels, "base_filters": base_filters}
        self.down_channels = [f, 2 * f, 4 * f, 8 * f, 8 * f, 8 * f, 8 * f, 8 * f]
        self.up_channels = [8 * f, 8 * f, 8 * f, 8 * f, 4 * f, 2 * f, f]
        self.down = nn.ModuleList()
        cin = channels
        for i, c in enumerate(self.down_channels):
            # no norm on the first block or on the 1x1 innermost block
            self.down.append(_down(cin, c, norm=0 < i < len(self.down_channels) - 1))
            cin = c
        self.up = nn.ModuleList()
        skips = list(reversed(self.down_channels[:-1]))
        for i, c in enumerate(self.up_channels):
            self.up.append(_up(cin, c, dropout=i < 3))
            cin = c + skips[i]
        self.last = nn.ConvTranspose2d(cin, channels, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor, return_trace: bool = False):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        trace = [tuple(x.shape[1:])]
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = torch.cat([block(x), skip], dim=1)
            trace.append(tuple(x.shape[1:]))
        out = torch.tanh(self.last(x))
        return (out, trace) if return_trace else out


class PatchDiscriminator(nn.Module):
    """Conditional 70x70 PatchGAN: (input, candidate) -> 30x30 logit map at 256px."""

    def __init__(self, channels: int = 1, base_filters: int = 64) -> None:
        super().__init__()
        f = base_filters
        self.model = nn.Sequential(
            nn.Conv2d(2 * channels, f, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(f, 2 * f, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * f),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * f, 4 * f, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(4 * f),
            nn.LeakyReLU(0.2),
            nn.ZeroPad2d(1),
            nn.Conv2d(4 * f, 8 * f, 4, stride=1, bias=False),
            nn.BatchNorm2d(8 * f),
            nn.LeakyReLU(0.2),
            nn.ZeroPad2d(1),
            nn.Conv2d(8 * f, 1, 4, stride=1),
        )

    def forward(self, inp: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return self.model(torch.cat([inp, candidate], dim=1))


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


def build_generator(channels: int = 1, base_filters: int = 64) -> UNetGenerator:
    g = UNetGenerator(channels, base_filters)
    g.apply(_init_weights)
    return g


def build_discriminator(channels: int = 1, base_filters: int = 64) -> PatchDiscriminator:
    d = PatchDiscriminator(channels, base_filters)
    d.apply(_init_weights)
    return d


# -- losses and training ---------------------------------------------------


def gan_losses(disc_real_logits, disc_fake_logits, fake_image, target_image, lambda_l1: float = 100.0) -> dict[str, torch.Tensor]:
    """Generator and discriminator objectives as tensors (keys mirror GanLossRecord)."""
    if fake_image.shape != target_image.shape:
        raise ValueError(f"shape mismatch: {tuple(fake_image.shape)} vs {tuple(target_image.shape)}")
    adv = F.binary_cross_entropy_with_logits(disc_fake_logits, torch.ones_like(disc_fake_logits))
    l1 = torch.mean(torch.abs(target_image - fake_image))
    disc = F.binary_cross_entropy_with_logits(disc_real_logits, torch.ones_like(disc_real_logits)) + F.binary_cross_entropy_with_logits(
        disc_fake_logits, torch.zeros_like(disc_fake_logits)
    )
    return {"gen_total": adv + lambda_l1 * l1, "gen_adversarial": adv, "gen_l1": l1, "disc_loss": disc}


class DivergenceError(RuntimeError):
    pass


def _pair_raw(pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(_raw(n), _raw(c)) for n, c in pairs]


def train_pix2pix(
    pairs: Sequence[tuple],
    config: GanConfig = GanConfig(),
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> tuple[UNetGenerator, list[GanLossRecord]]:
    """Alternate one discriminator and one generator update per batch.

    ``pairs`` holds (noisy, clean) raw uint8 patches. With ``out_dir`` the
    generator is checkpointed and the loss history written after every epoch.
    """
    pairs = _pair_raw(pairs)
    if not pairs:
        raise ValueError("train_pix2pix needs at least one pair")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = build_generator(config.channels, config.base_filters)
    disc = build_discriminator(config.channels, config.base_filters)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.generator_lr, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.discriminator_lr, betas=betas)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[GanLossRecord] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        gen.train()
        disc.train()
        order = rng.permutation(len(pairs))
        for i in range(0, len(order), config.batch_size):
            batch = [preprocess_pair(*pairs[j], train_mode=True, seed=int(rng.integers(2**31))) for j in order[i : i + config.batch_size]]
            inp = torch.stack([b[0] for b in batch])
            tgt = torch.stack([b[1] for b in batch])

            fake = gen(inp)
            opt_d.zero_grad()
            d_losses = gan_losses(disc(inp, tgt), disc(inp, fake.detach()), fake.detach(), tgt, config.lambda_l1)
            d_losses["disc_loss"].backward()
            opt_d.step()

            opt_g.zero_grad()
            fake_logits = disc(inp, fake)
            g_losses = gan_losses(d_losses["disc_loss"].new_zeros(fake_logits.shape), fake_logits, fake, tgt, config.lambda_l1)
            g_losses["gen_total"].backward()
            opt_g.step()

            step += 1
            rec = GanLossRecord(
                gen_total=g_losses["gen_total"].item(),
                gen_adversarial=g_losses["gen_adversarial"].item(),
                gen_l1=g_losses["gen_l1"].item(),
                disc_loss=d_losses["disc_loss"].item(),
                epoch=epoch,
                step=step,
            )
            if not all(math.isfinite(v) for v in (rec.gen_total, rec.gen_adversarial, rec.gen_l1, rec.disc_loss)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {rec}")
            history.append(rec)
        summary = summarize_history(history, epoch)
        log.info("pix2pix epoch %d: %s", epoch, summary)
        if out is not None:
            torch.save(gen.state_dict(), out / f"generator_epoch{epoch:03d}.pt")
            (out / "loss_history.json").write_text(json.dumps([asdict(r) for r in history]))
    gen.eval()
    return gen, history


def summarize_history(history: Sequence[GanLossRecord], epoch: int | None = None) -> dict[str, float]:
    """Mean of each loss over one epoch (or the whole run when ``epoch`` is None)."""
    recs = [r for r in history if epoch is None or r.epoch == epoch]
    if not recs:
        return {}
    keys = ("gen_total", "gen_adversarial", "gen_l1", "disc_loss")
    return {k: float(np.mean([getattr(r, k) for r in recs])) for k in keys}


@torch.no_grad()
def translate(generator: UNetGenerator, noisy: torch.Tensor) -> torch.Tensor:
    """Map a (C, 256, 256) or (N, C, 256, 256) tensor in [-1, 1] to the restored image."""
    x = noisy if noisy.ndim == 4 else noisy[None]
    if tuple(x.shape[-2:]) != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} input, got {tuple(x.shape[-2:])}")
    generator.eval()
    out = generator(x)
    return out if noisy.ndim == 4 else out[0]


def restore_batch(generator: UNetGenerator, noisy_raw: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
    """Translate raw uint8 patches; returns (N, 256, 256) in [0, 1]."""
    outs = []
    for i in range(0, len(noisy_raw), batch_size):
        x = torch.stack([preprocess_pair(n, n)[0] for n in noisy_raw[i : i + batch_size]])
        outs.append(((translate(generator, x)[:, 0] + 1.0) / 2.0).numpy())
    return np.concatenate(outs) if outs else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
