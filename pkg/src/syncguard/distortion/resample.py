"""Windowed-sinc resampling expressed as a (time-varying) convolution.

Output sample ``j`` sits at input position ``j / ratio`` and is the dot product
of the neighbouring input samples with a Kaiser-windowed sinc kernel. The map
is linear in the input, so gradients flow to every sample.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch

from ..errors import ParameterError

ZERO_CROSSINGS = 24
KAISER_BETA = 8.6
ROLLOFF = 0.94


@lru_cache(maxsize=64)
def _kernel(n_in: int, n_out: int, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    cutoff = 1.0 if ratio >= 1.0 else ratio * ROLLOFF
    half = int(math.ceil(ZERO_CROSSINGS / cutoff))
    positions = np.arange(n_out, dtype=np.float64) / ratio
    base = np.floor(positions).astype(np.int64)
    offsets = np.arange(-half, half + 1, dtype=np.int64)
    idx = base[:, None] + offsets[None, :]
    tau = positions[:, None] - idx
    # continuous Kaiser window evaluated at the fractional offsets
    arg = np.clip(1.0 - (tau / (half + 1)) ** 2, 0.0, None)
    window = np.i0(KAISER_BETA * np.sqrt(arg)) / np.i0(KAISER_BETA)
    weights = cutoff * np.sinc(cutoff * tau) * window
    valid = (idx >= 0) & (idx < n_in)
    weights = np.where(valid, weights, 0.0)
    idx = np.clip(idx, 0, n_in - 1)
    return idx, weights


def resample(x: torch.Tensor, ratio: float, length: int | None = None) -> torch.Tensor:
    """Resample ``x[..., M]`` by ``ratio`` (output rate / input rate).

    The output has ``round(ratio * M)`` samples unless ``length`` is given,
    in which case ``length`` samples are produced on the same time grid.
    """
    if not 0.25 <= ratio <= 4.0:
        raise ParameterError(f"resample ratio {ratio} outside [0.25, 4]")
    return _apply(x, ratio, length)


def _apply(x: torch.Tensor, ratio: float, length: int | None) -> torch.Tensor:
    n_in = x.shape[-1]
    n_out = int(round(ratio * n_in)) if length is None else int(length)
    if ratio == 1.0 and n_out == n_in:
        return x
    idx, weights = _kernel(n_in, n_out, float(ratio))
    idx_t = torch.from_numpy(idx).to(x.device)
    w_t = torch.from_numpy(weights).to(device=x.device, dtype=x.dtype)
    gathered = x[..., idx_t]
    return (gathered * w_t).sum(dim=-1)


def resample_to_length(x: torch.Tensor, length: int) -> torch.Tensor:
    """Stretch ``x`` onto exactly ``length`` samples (ratio ``length / M``)."""
    ratio = length / x.shape[-1]
    return resample(x, ratio, length=length)


def resample_rate(x: torch.Tensor, orig_rate: int, new_rate: int) -> torch.Tensor:
    """Convert between sample rates; reduces the rate ratio to lowest terms."""
    if orig_rate == new_rate:
        return x
    g = math.gcd(orig_rate, new_rate)
    up, down = new_rate // g, orig_rate // g
    # file ingestion may exceed the attack range (e.g. 96 kHz sources)
    return _apply(x, up / down, None)
