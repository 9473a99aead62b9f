"""Differentiable time-scale modification and pitch scaling.

The magnitude spectrogram is linearly interpolated along time. Phase is
re-synthesised by a phase vocoder: each output frame advances the previous
output phase by the instantaneous per-hop advance measured at its source
position, where the measured inter-frame difference is first reduced to the
principal range around the bin's nominal advance.
"""

from __future__ import annotations

import math

import torch

from ..dsp import SpectroPair, StftConfig, complex_stft, expected_phase_advance, istft_complex, safe_angle
from ..errors import ParameterError
from .resample import resample_to_length

RATE_RANGE = (0.5, 2.0)
MAX_SEMITONES = 12.0


def princarg(x: torch.Tensor) -> torch.Tensor:
    """Map angles into ``(-pi, pi]``."""
    return x - 2 * math.pi * torch.ceil((x - math.pi) / (2 * math.pi))


def _check_rate(rate: float, what: str = "rate") -> None:
    lo, hi = RATE_RANGE
    if not lo <= rate <= hi:
        raise ParameterError(f"{what} {rate} outside [{lo}, {hi}]")


def warped_frame_count(n_frames: int, rate: float) -> int:
    return max(2, int(round(rate * n_frames)))


def _source_grid(n_in: int, n_out: int, device) -> tuple[torch.Tensor, torch.Tensor]:
    pos = torch.arange(n_out, dtype=torch.float64, device=device) * ((n_in - 1) / (n_out - 1))
    lo = torch.clamp(torch.floor(pos).long(), max=n_in - 2)
    return lo, pos - lo


def timewarp_spectrogram(
    spec: SpectroPair,
    rate: float,
    cfg: StftConfig = StftConfig(),
    phase_mode: str = "cumulative",
) -> SpectroPair:
    """Stretch ``[..., T, H]`` magnitude/phase to ``max(2, round(rate * T))`` frames.

    ``rate`` multiplies duration. ``phase_mode="literal"`` uses the per-frame
    form ``p(t) + princarg(p(t+1) - p(t)) * rate`` without accumulation.
    """
    _check_rate(rate)
    mag, phase = spec
    n_in = mag.shape[-2]
    if n_in < 2:
        raise ParameterError("time warping needs at least 2 frames")
    n_out = warped_frame_count(n_in, rate)
    lo, frac = _source_grid(n_in, n_out, mag.device)
    frac = frac.to(mag.dtype).unsqueeze(-1)

    mag_out = (1 - frac) * mag[..., lo, :] + frac * mag[..., lo + 1, :]

    step = phase[..., 1:, :] - phase[..., :-1, :]
    if phase_mode == "literal":
        phase_out = phase[..., lo, :] + princarg(step[..., lo, :]) * rate
    elif phase_mode == "cumulative":
        nominal = expected_phase_advance(cfg, phase.dtype).to(phase.device)
        advance = nominal + princarg(step - nominal)
        increments = advance[..., lo[:-1], :]
        start = phase[..., :1, :]
        phase_out = torch.cat([start, start + torch.cumsum(increments, dim=-2)], dim=-2)
    else:
        raise ParameterError(f"unknown phase_mode {phase_mode!r}")
    return SpectroPair(mag_out, phase_out)


def tsm(
    x: torch.Tensor,
    rate: float,
    cfg: StftConfig = StftConfig(),
    phase_mode: str = "cumulative",
) -> torch.Tensor:
    """Time-scale ``x[..., M]`` to ``round(rate * M)`` samples, keeping pitch."""
    _check_rate(rate)
    z = complex_stft(x, cfg)
    warped = timewarp_spectrogram(SpectroPair(z.abs(), safe_angle(z)), rate, cfg, phase_mode)
    length = int(round(rate * x.shape[-1]))
    return istft_complex(torch.polar(*warped), cfg, length)


def semitones_to_ratio(semitones: float) -> float:
    return 2.0 ** (semitones / 12.0)


def pitch_scale_ratio(x: torch.Tensor, ratio: float, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Multiply all frequencies by ``ratio`` while keeping ``M`` samples.

    Stretches the duration by ``ratio`` with :func:`tsm`, then resamples the
    result back onto the original length.
    """
    _check_rate(ratio, "pitch ratio")
    if ratio == 1.0:
        return x
    stretched = tsm(x, ratio, cfg)
    return resample_to_length(stretched, x.shape[-1])


def pitch_scale(x: torch.Tensor, semitones: float, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    if abs(semitones) > MAX_SEMITONES:
        raise ParameterError(f"|semitones| must be <= {MAX_SEMITONES}, got {semitones}")
    return pitch_scale_ratio(x, semitones_to_ratio(semitones), cfg)
