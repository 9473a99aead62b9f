"""Training-time distortion layer and evaluation attack suite."""

from .attacks import (
    AttackSpec,
    AttackUnavailableError,
    amplitude,
    apply_attack,
    apply_chain,
    crop,
    format_chain,
    gaussian_noise,
    identity,
    jitter,
    lowpass,
    mp3,
    mp3_codec_available,
    mp3_proxy,
    parse_attack,
    parse_chain,
    requantize,
    resample_attack,
)
from .resample import resample, resample_rate, resample_to_length
from .sampler import LEVELS, AttackSampler, default_training_sampler, sample_attack
from .timewarp import (
    pitch_scale,
    pitch_scale_ratio,
    princarg,
    semitones_to_ratio,
    timewarp_spectrogram,
    tsm,
)

__all__ = [
    "LEVELS",
    "AttackSampler",
    "AttackSpec",
    "AttackUnavailableError",
    "amplitude",
    "apply_attack",
    "apply_chain",
    "crop",
    "default_training_sampler",
    "format_chain",
    "gaussian_noise",
    "identity",
    "jitter",
    "lowpass",
    "mp3",
    "mp3_codec_available",
    "mp3_proxy",
    "parse_attack",
    "parse_chain",
    "pitch_scale",
    "pitch_scale_ratio",
    "princarg",
    "requantize",
    "resample",
    "resample_attack",
    "resample_rate",
    "resample_to_length",
    "sample_attack",
    "semitones_to_ratio",
    "timewarp_spectrogram",
    "tsm",
]
