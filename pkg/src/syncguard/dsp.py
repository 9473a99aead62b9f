"""Differentiable STFT analysis / ISTFT synthesis on linear magnitude spectrograms.

Spectrograms are time-major: ``[..., T, H]`` with ``H = fft_size // 2 + 1``.
Frames are centered with reflect padding, so frame ``t`` is centred on sample
``t * hop_length`` and ``T = 1 + M // hop_length``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch

from .errors import ContractError, InputTooShortError, ParameterError

WINDOW_KINDS = ("hann", "hamming", "blackman")


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop_length: int = 256
    window_length: int = 1024
    window_kind: str = "hann"

    def __post_init__(self):
        if self.window_length > self.fft_size:
            raise ParameterError("window_length must not exceed fft_size")
        if self.hop_length <= 0 or 2 * self.hop_length > self.window_length:
            raise ParameterError("hop_length must give at least 2x overlap")
        if self.window_kind not in WINDOW_KINDS:
            raise ParameterError(f"unknown window kind {self.window_kind!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length

    def window(self, dtype=torch.float32, device=None) -> torch.Tensor:
        fn = {
            "hann": torch.hann_window,
            "hamming": torch.hamming_window,
            "blackman": torch.blackman_window,
        }[self.window_kind]
        return fn(self.window_length, periodic=True, dtype=dtype, device=device)

    def to_dict(self) -> dict:
        return asdict(self)


class SpectroPair(NamedTuple):
    magnitude: torch.Tensor
    phase: torch.Tensor


def _check_length(n_samples: int, cfg: StftConfig) -> None:
    if n_samples < cfg.window_length:
        raise InputTooShortError(
            f"clip of {n_samples} samples is shorter than one window ({cfg.window_length})"
        )


def complex_stft(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Complex STFT of ``x[..., M]`` returned as ``[..., T, H]``."""
    _check_length(x.shape[-1], cfg)
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.window_length,
        window=cfg.window(flat.dtype, flat.device),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    spec = spec.transpose(-1, -2)
    return spec.reshape(*lead, spec.shape[-2], spec.shape[-1])


def safe_angle(z: torch.Tensor) -> torch.Tensor:
    """``angle(z)`` whose gradient is zero (not NaN) where ``z == 0``."""
    re, im = z.real, z.imag
    zero = (re == 0) & (im == 0)
    re = torch.where(zero, torch.ones_like(re), re)
    return torch.atan2(im, re)


def stft(x: torch.Tensor, cfg: StftConfig = StftConfig()) -> SpectroPair:
    """Magnitude and phase of the centred STFT; differentiable w.r.t. ``x``."""
    z = complex_stft(x, cfg)
    return SpectroPair(z.abs(), safe_angle(z))


def istft_complex(z: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    """Overlap-add synthesis of ``z[..., T, H]`` trimmed or zero-padded to ``length``."""
    if z.shape[-1] != cfg.n_bins:
        raise ContractError(f"expected {cfg.n_bins} frequency bins, got {z.shape[-1]}")
    lead = z.shape[:-2]
    flat = z.reshape(-1, z.shape[-2], z.shape[-1]).transpose(-1, -2)
    n_frames = flat.shape[-1]
    # last sample still covered by the final (centred) frame
    covered = cfg.hop_length * (n_frames - 1) + cfg.window_length // 2 - 1
    y = torch.istft(
        flat,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.window_length,
        window=cfg.window(flat.real.dtype, flat.device),
        center=True,
        length=min(length, covered),
    )
    if length > covered:
        y = torch.nn.functional.pad(y, (0, length - covered))
    return y.reshape(*lead, length)


def istft(spec: SpectroPair, cfg: StftConfig = StftConfig(), length: int | None = None) -> torch.Tensor:
    """Resynthesise a waveform from magnitude and phase.

    ``length`` defaults to ``hop_length * (T - 1)``, the largest length whose
    every sample is covered by the window-square normalisation.
    """
    mag, phase = spec
    if mag.shape != phase.shape:
        raise ContractError(f"magnitude {tuple(mag.shape)} and phase {tuple(phase.shape)} differ")
    if mag.dim() < 2:
        raise ContractError("spectrogram must be at least [T, H]")
    n_frames = mag.shape[-2]
    if length is None:
        length = cfg.hop_length * (n_frames - 1)
    if length > n_frames * cfg.hop_length:
        raise ContractError(f"length {length} exceeds T*hop = {n_frames * cfg.hop_length}")
    z = torch.polar(mag, phase)
    return istft_complex(z, cfg, length)


def bin_frequencies(cfg: StftConfig, sample_rate: int) -> torch.Tensor:
    return torch.arange(cfg.n_bins) * (sample_rate / cfg.fft_size)


def expected_phase_advance(cfg: StftConfig, dtype=torch.float32) -> torch.Tensor:
    """Phase a stationary sinusoid centred on each bin gains over one hop."""
    return 2 * math.pi * cfg.hop_length * torch.arange(cfg.n_bins, dtype=dtype) / cfg.fft_size
