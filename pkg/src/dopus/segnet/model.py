"""Dual-encoder U-shape network with convolutional GRU bottlenecks.

The top encoder sees B-mode (optionally stacked with the Doppler mask), the
bottom encoder sees the Doppler mask alone. Each encoder may run a ConvGRU
at its deepest level; the two bottleneck tensors are concatenated and fused
by a convolution before the decoder, whose skip connections come from the
top encoder only (plus the bottom encoder for variant 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ConvGruCell",
    "convgru_step",
    "DopUsVariant",
    "VARIANTS",
    "get_variant",
    "DopUsNet",
    "RecurrentState",
    "count_parameters",
]


class ConvGruCell(nn.Module):
    """Gated recurrent unit with convolutional gates.

    z = sig(W_z * [x, h]);  r = sig(W_r * [x, h])
    h~ = tanh(W * [x, r . h]);  h' = (1 - z) . h + z . h~
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        cat = in_channels + hidden_channels
        pad = kernel_size // 2
        self.w_z = nn.Conv2d(cat, hidden_channels, kernel_size, padding=pad)
        self.w_r = nn.Conv2d(cat, hidden_channels, kernel_size, padding=pad)
        self.w = nn.Conv2d(cat, hidden_channels, kernel_size, padding=pad)
        bound = 1.0 / math.sqrt(cat * kernel_size * kernel_size)
        for conv in (self.w_z, self.w_r, self.w):
            nn.init.uniform_(conv.weight, -bound, bound)
            nn.init.zeros_(conv.bias)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
            raise ValueError(f"input {tuple(x.shape)} and hidden {tuple(h.shape)} disagree")
        if x.shape[1] != self.in_channels or h.shape[1] != self.hidden_channels:
            raise ValueError("channel count does not match the cell")
        xh = torch.cat([x, h], dim=1)
        z = torch.sigmoid(self.w_z(xh))
        r = torch.sigmoid(self.w_r(xh))
        h_tilde = torch.tanh(self.w(torch.cat([x, r * h], dim=1)))
        return (1.0 - z) * h + z * h_tilde


def convgru_step(cell: ConvGruCell, x_t: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
    return cell(x_t, h_prev)


@dataclass(frozen=True)
class DopUsVariant:
    name: str
    top_input: str  # "B" or "BD"
    bottom_input: Optional[str]  # "D" or None
    rnn_top: bool
    rnn_bottom: bool
    bottom_skips: bool = False
    widths: tuple = (8, 16, 32)
    batch_norm: bool = True

    def __post_init__(self):
        if self.top_input not in ("B", "BD"):
            raise ValueError("top_input must be 'B' or 'BD'")
        if self.bottom_input not in (None, "D"):
            raise ValueError("bottom_input must be None or 'D'")
        if self.bottom_input is None and (self.rnn_bottom or self.bottom_skips):
            raise ValueError("bottom-encoder options need a bottom encoder")
        if len(self.widths) < 2 or min(self.widths) <= 0:
            raise ValueError("need at least two positive encoder widths")

    @property
    def recurrent(self) -> bool:
        return self.rnn_top or self.rnn_bottom

    def with_widths(self, widths) -> "DopUsVariant":
        return replace(self, widths=tuple(widths))


VARIANTS: dict[str, DopUsVariant] = {
    v.name: v
    for v in (
        DopUsVariant("unet-b", "B", None, False, False),
        DopUsVariant("unet-bd", "BD", None, False, False),
        DopUsVariant("unet-bd-rnn", "BD", None, True, False),
        DopUsVariant("dopus0", "BD", "D", False, False),
        DopUsVariant("dopus1", "B", "D", True, True, bottom_skips=True),
        DopUsVariant("dopus2", "BD", "D", False, True),
        DopUsVariant("dopus3", "B", "D", True, True),
        DopUsVariant("dopus4", "BD", "D", True, True),
    )
}

_ALIASES = {"dopus-0": "dopus0", "dopus-1": "dopus1", "dopus-2": "dopus2", "dopus-3": "dopus3",
            "dopus-4": "dopus4", "unet_b": "unet-b", "unet_bd": "unet-bd", "unet_bd_rnn": "unet-bd-rnn"}


def get_variant(name: str, widths=None) -> DopUsVariant:
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    v = VARIANTS[key]
    return v.with_widths(widths) if widths is not None else v


def _conv_block(cin: int, cout: int, bn: bool) -> nn.Sequential:
    layers = []
    for i, o in ((cin, cout), (cout, cout)):
        layers += [nn.Conv2d(i, o, 3, padding=1, bias=not bn)]
        if bn:
            layers.append(nn.BatchNorm2d(o))
        layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


def _conv_bn_relu(cin: int, cout: int, k: int, bn: bool) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, k, padding=k // 2, bias=not bn)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


class _Encoder(nn.Module):
    def __init__(self, in_ch: int, widths, bn: bool):
        super().__init__()
        chans = [in_ch, *widths]
        self.blocks = nn.ModuleList(_conv_block(chans[i], chans[i + 1], bn) for i in range(len(widths)))

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        return x, skips


class RecurrentState(NamedTuple):
    top: Optional[torch.Tensor]
    bottom: Optional[torch.Tensor]

    def detach(self) -> "RecurrentState":
        return RecurrentState(*(None if h is None else h.detach() for h in self))


class DopUsNet(nn.Module):
    """One network of the family, selected by a :class:`DopUsVariant`."""

    def __init__(self, variant: DopUsVariant):
        super().__init__()
        self.variant = variant
        w = list(variant.widths)
        bn = variant.batch_norm
        deep = w[-1]
        self.top = _Encoder(len(variant.top_input), w, bn)
        self.bottom = _Encoder(1, w, bn) if variant.bottom_input else None
        self.gru_top = ConvGruCell(deep, deep) if variant.rnn_top else None
        self.gru_bottom = ConvGruCell(deep, deep) if variant.rnn_bottom else None
        self.fusion = _conv_bn_relu(2 * deep, deep, 3, bn) if self.bottom is not None else None
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        skip_mult = 2 if variant.bottom_skips else 1
        for i in range(len(w) - 1, 0, -1):
            self.up.append(_conv_bn_relu(w[i], w[i - 1], 3, bn))
            self.dec.append(_conv_block(w[i - 1] * (1 + skip_mult), w[i - 1], bn))
        self.head = nn.Conv2d(w[0], 1, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and not any(m is c for c in self._gru_convs()):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def _gru_convs(self):
        for cell in (self.gru_top, self.gru_bottom):
            if cell is not None:
                yield from (cell.w_z, cell.w_r, cell.w)

    @property
    def levels(self) -> int:
        return len(self.variant.widths)

    def initial_state(self, batch: int, height: int, width: int, dtype=None, device=None) -> RecurrentState:
        """Zero hidden states for a sequence start at input size ``height`` x ``width``."""
        f = 2 ** (self.levels - 1)
        if height % f or width % f:
            raise ValueError(f"input size must be divisible by {f}")
        dtype = dtype or next(self.parameters()).dtype
        shape = (batch, self.variant.widths[-1], height // f, width // f)

        def z(flag):
            return torch.zeros(shape, dtype=dtype, device=device) if flag else None

        return RecurrentState(z(self.variant.rnn_top), z(self.variant.rnn_bottom))

    def split_inputs(self, bmode: torch.Tensor, doppler: torch.Tensor):
        top = bmode if self.variant.top_input == "B" else torch.cat([bmode, doppler], dim=1)
        return top, doppler

    def forward(self, bmode: torch.Tensor, doppler: torch.Tensor, state: Optional[RecurrentState] = None):
        """One time step. Returns (probabilities in (0, 1), next state).

        Recurrent variants need an explicit state; use :meth:`initial_state`
        at the start of a sequence.
        """
        if bmode.shape != doppler.shape or bmode.ndim != 4 or bmode.shape[1] != 1:
            raise ValueError("bmode and doppler must both be (B, 1, H, W)")
        if self.variant.recurrent and state is None:
            raise RuntimeError("recurrent state not initialised; call initial_state() at sequence start")
        x_top, x_bot = self.split_inputs(bmode, doppler)
        deep, skips = self.top(x_top)
        h_top = h_bot = None
        if self.gru_top is not None:
            h_top = convgru_step(self.gru_top, deep, state.top)
            deep = h_top
        if self.bottom is not None:
            deep_b, skips_b = self.bottom(x_bot)
            if self.gru_bottom is not None:
                h_bot = convgru_step(self.gru_bottom, deep_b, state.bottom)
                deep_b = h_bot
            deep = self.fusion(torch.cat([deep, deep_b], dim=1))
        else:
            skips_b = None
        x = deep
        for k, (up, dec) in enumerate(zip(self.up, self.dec)):
            lvl = self.levels - 2 - k
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            parts = [x, skips[lvl]]
            if self.variant.bottom_skips:
                parts.append(skips_b[lvl])
            x = dec(torch.cat(parts, dim=1))
        prob = torch.sigmoid(self.head(x))
        return prob, RecurrentState(h_top, h_bot)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
