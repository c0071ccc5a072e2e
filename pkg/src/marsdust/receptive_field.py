"""Receptive-field arithmetic over a flat stack of torch layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from torch import nn


@dataclass(frozen=True)
class RFEntry:
    layer: str
    rf: int
    jump: int
    start: float  # input coordinate of the first output unit's field centre


def _pair(v) -> int:
    if isinstance(v, tuple):
        if len(set(v)) != 1:
            raise ValueError(f"anisotropic layer parameter {v} not supported")
        return int(v[0])
    return int(v)


def receptive_field(layers: Iterable[nn.Module]) -> list[RFEntry]:
    """Walk layers in order and return rf/jump/start after each spatial layer.

    Layers without spatial extent (activations, norms, dropout) are skipped.
    """
    rf, jump, start = 1, 1, 0.5
    out = []
    for layer in layers:
        if isinstance(layer, (nn.Conv2d, nn.MaxPool2d, nn.AvgPool2d)):
            k = _pair(layer.kernel_size)
            s = _pair(layer.stride)
            p = _pair(layer.padding) if not isinstance(layer.padding, str) else (k - 1) // 2
            d = _pair(getattr(layer, "dilation", 1))
            k_eff = d * (k - 1) + 1
        elif isinstance(layer, nn.ZeroPad2d):
            pads = layer.padding
            if len(set(pads)) != 1:
                raise ValueError(f"asymmetric padding {pads} not supported")
            k_eff, s, p = 1, 1, pads[0]
        else:
            continue
        rf = rf + (k_eff - 1) * jump
        start = start + ((k_eff - 1) / 2.0 - p) * jump
        jump = jump * s
        out.append(RFEntry(type(layer).__name__, rf, jump, start))
    return out


def flatten_layers(module: nn.Module) -> list[nn.Module]:
    return [m for m in module.modules() if not list(m.children())]
