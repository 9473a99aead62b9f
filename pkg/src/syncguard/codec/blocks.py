"""Convolutional building blocks for the embedder / extractor trunks.

All blocks operate on ``[B, C, T, H]`` spectrogram features and preserve the
shape. Dilations apply along both time and frequency.
"""

from __future__ import annotations

import torch
from torch import nn

from ..errors import ContractError

BLOCK_PATTERNS = ("dr+dg", "dr", "dg", "plain")


def _conv(channels_in: int, channels_out: int, kernel_size: int, dilation: int) -> nn.Conv2d:
    pad = dilation * (kernel_size - 1) // 2
    return nn.Conv2d(channels_in, channels_out, kernel_size, padding=pad, dilation=dilation)


class _Block(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels

    def _check(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ContractError(
                f"{type(self).__name__} expects [B, {self.channels}, T, H], got {tuple(x.shape)}"
            )


class DilatedResidualBlock(_Block):
    """``x + conv(act(conv(x)))`` with both convolutions dilated."""

    def __init__(self, channels: int, dilation: int, kernel_size: int = 3):
        super().__init__(channels)
        self.dilation = dilation
        self.conv1 = _conv(channels, channels, kernel_size, dilation)
        self.conv2 = _conv(channels, channels, kernel_size, dilation)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return x + self.conv2(self.act(self.conv1(x)))


class DilatedGatedBlock(_Block):
    """Shortcut plus a WaveNet-style gate: ``x + tanh(a) * sigmoid(b)``."""

    def __init__(self, channels: int, dilation: int, kernel_size: int = 3):
        super().__init__(channels)
        self.dilation = dilation
        self.conv = _conv(channels, 2 * channels, kernel_size, dilation)

    def gated(self, x: torch.Tensor) -> torch.Tensor:
        a, b = self.conv(x).chunk(2, dim=1)
        return torch.tanh(a) * torch.sigmoid(b)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return x + self.gated(x)


class PlainConvBlock(_Block):
    """Ablation stand-in: undilated conv + activation, no residual or gate."""

    def __init__(self, channels: int, dilation: int = 1, kernel_size: int = 3):
        super().__init__(channels)
        self.dilation = 1
        self.conv = _conv(channels, channels, kernel_size, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.act(self.conv(x))


def make_blocks(
    pattern: str, channels: int, dilations: tuple[int, ...], kernel_size: int = 3
) -> nn.ModuleList:
    """Build the trunk. ``dr+dg`` alternates DR and DG blocks, starting with DR."""
    if pattern not in BLOCK_PATTERNS:
        raise ValueError(f"unknown block pattern {pattern!r}; choose from {BLOCK_PATTERNS}")
    blocks = []
    for i, d in enumerate(dilations):
        if pattern == "plain":
            blocks.append(PlainConvBlock(channels, 1, kernel_size))
        elif pattern == "dr" or (pattern == "dr+dg" and i % 2 == 0):
            blocks.append(DilatedResidualBlock(channels, d, kernel_size))
        else:
            blocks.append(DilatedGatedBlock(channels, d, kernel_size))
    return nn.ModuleList(blocks)


class SkipInjection(nn.Module):
    """1x1 projection of ``concat(carrier, broadcast_message)`` added to a block input.

    The message part is projected once per ``[B, C_w, 1, H]`` frame and
    broadcast over time; for a 1x1 kernel this equals projecting the
    concatenated, broadcast tensor.
    """

    def __init__(self, channels: int, carrier_channels: int = 1, message_channels: int = 0):
        super().__init__()
        self.carrier = nn.Conv2d(carrier_channels, channels, 1)
        self.message = nn.Conv2d(message_channels, channels, 1, bias=False) if message_channels else None

    def forward(self, carrier: torch.Tensor, message: torch.Tensor | None = None) -> torch.Tensor:
        out = self.carrier(carrier)
        if self.message is not None and message is not None:
            out = out + self.message(message)
        return out
