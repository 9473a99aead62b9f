"""Signal-processing and desynchronisation attacks on ``[..., M]`` waveforms.

Every attack is a pure function of (input, parameters, seed). Operations with
no useful derivative (quantisation, external codecs) pass gradients straight
through.
"""

from __future__ import annotations

import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..dsp import StftConfig
from ..errors import DegenerateInputError, ParameterError, SyncGuardError
from .resample import resample, resample_to_length
from .timewarp import pitch_scale, pitch_scale_ratio, semitones_to_ratio, tsm

DEFAULT_RATE = 22050
CROP_POSITIONS = ("begin", "middle", "end", "random")


class AttackUnavailableError(SyncGuardError):
    """An evaluation attack depends on an external tool that is not installed."""


def _generator(seed: int | None) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def straight_through(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Value of ``y`` with the gradient of the identity."""
    return x + (y - x).detach()


def identity(x: torch.Tensor) -> torch.Tensor:
    return x


def amplitude(x: torch.Tensor, scale: float) -> torch.Tensor:
    if not 0 < scale <= 2:
        raise ParameterError(f"amplitude scale {scale} outside (0, 2]")
    return x * scale


def requantize(x: torch.Tensor, bits: int) -> torch.Tensor:
    """Uniform quantiser with step ``2**(1 - bits)`` on [-1, 1]."""
    if not 4 <= bits <= 16:
        raise ParameterError(f"requantize bits {bits} outside [4, 16]")
    step = 2.0 ** (1 - bits)
    return straight_through(x, torch.round(x / step) * step)


@lru_cache(maxsize=32)
def lowpass_taps(cutoff_hz: float, sample_rate: int, n_taps: int = 511, beta: float = 8.6) -> np.ndarray:
    """Kaiser-windowed sinc low-pass FIR, unity gain at DC."""
    fc = cutoff_hz / sample_rate
    n = np.arange(n_taps) - (n_taps - 1) / 2
    h = 2 * fc * np.sinc(2 * fc * n) * np.kaiser(n_taps, beta)
    return h / h.sum()


def lowpass(x: torch.Tensor, cutoff_hz: float, sample_rate: int = DEFAULT_RATE) -> torch.Tensor:
    if not 0 < cutoff_hz < sample_rate / 2:
        raise ParameterError(f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate / 2})")
    taps = torch.from_numpy(lowpass_taps(float(cutoff_hz), int(sample_rate))).to(x)
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, x.shape[-1])
    y = F.conv1d(flat, taps.flip(0).view(1, 1, -1), padding=taps.numel() // 2)
    return y.reshape(*lead, x.shape[-1])


def gaussian_noise(x: torch.Tensor, snr_db: float, seed: int | None = None) -> torch.Tensor:
    """Add white noise scaled so each row's SNR equals ``snr_db`` exactly."""
    if not 0 <= snr_db <= 60:
        raise ParameterError(f"noise SNR {snr_db} dB outside [0, 60]")
    noise = torch.randn(x.shape, generator=_generator(seed), dtype=torch.float64).to(x)
    p_signal = x.pow(2).sum(dim=-1, keepdim=True)
    if torch.any(p_signal == 0):
        raise DegenerateInputError("cannot set an SNR on a zero-energy clip")
    p_noise = noise.pow(2).sum(dim=-1, keepdim=True)
    scale = torch.sqrt(p_signal / (p_noise * 10 ** (snr_db / 10)))
    return x + noise * scale


# MP3 training proxy: band limit plus codec-like noise at a bitrate-dependent SNR
_PROXY_NOISE_SNR = {64: 30.0, 128: 40.0}


def mp3_proxy(x: torch.Tensor, kbps: int, sample_rate: int = DEFAULT_RATE, seed: int | None = None) -> torch.Tensor:
    if kbps not in _PROXY_NOISE_SNR:
        raise ParameterError(f"mp3 bitrate must be one of {sorted(_PROXY_NOISE_SNR)}")
    y = lowpass(x, 0.8 * sample_rate / 2, sample_rate)
    p_signal = y.pow(2).sum(dim=-1, keepdim=True)
    noise = torch.rand(x.shape, generator=_generator(seed), dtype=torch.float64).to(x) - 0.5
    p_noise = noise.pow(2).sum(dim=-1, keepdim=True)
    scale = torch.sqrt(p_signal / (p_noise * 10 ** (_PROXY_NOISE_SNR[kbps] / 10)))
    return y + noise * scale


def mp3_codec_available() -> bool:
    return shutil.which("ffmpeg") is not None


def _align(reference: np.ndarray, decoded: np.ndarray, max_lag: int = 4096) -> np.ndarray:
    """Shift ``decoded`` by the lag maximising cross-correlation, then fit to ``len(reference)``."""
    n = len(reference)
    size = 1 << int(math.ceil(math.log2(n + len(decoded))))
    corr = np.fft.irfft(np.fft.rfft(decoded, size) * np.conj(np.fft.rfft(reference, size)), size)
    lags = np.concatenate([corr[: max_lag + 1], corr[-max_lag:]])
    lag_values = np.concatenate([np.arange(max_lag + 1), -np.arange(max_lag, 0, -1)])
    lag = int(lag_values[np.argmax(lags)])
    if lag > 0:
        decoded = decoded[lag:]
    elif lag < 0:
        decoded = np.concatenate([np.zeros(-lag), decoded])
    out = np.zeros(n)
    out[: min(n, len(decoded))] = decoded[:n]
    return out


def mp3_codec(x: torch.Tensor, kbps: int, sample_rate: int = DEFAULT_RATE) -> torch.Tensor:
    """Real MP3 round trip through ffmpeg, realigned to the input length."""
    if not mp3_codec_available():
        raise AttackUnavailableError("mp3 attack needs ffmpeg on PATH")
    from ..audio_io import AudioClip, load_audio, save_audio

    rows = x.detach().reshape(-1, x.shape[-1]).cpu().double().numpy()
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        src, enc, dec = Path(tmp, "in.wav"), Path(tmp, "c.mp3"), Path(tmp, "out.wav")
        for row in rows:
            save_audio(AudioClip(row, sample_rate), src)
            for cmd in (
                ["ffmpeg", "-y", "-loglevel", "error", "-i", str(src), "-b:a", f"{kbps}k", str(enc)],
                ["ffmpeg", "-y", "-loglevel", "error", "-i", str(enc), "-ar", str(sample_rate), "-ac", "1", str(dec)],
            ):
                proc = subprocess.run(cmd, capture_output=True)
                if proc.returncode != 0:
                    raise AttackUnavailableError(f"ffmpeg failed: {proc.stderr.decode(errors='replace')}")
            decoded = load_audio(dec, sample_rate).samples.astype(np.float64)
            out.append(_align(row, decoded))
    y = torch.from_numpy(np.stack(out)).to(x).reshape(x.shape)
    return straight_through(x, y)


def mp3(
    x: torch.Tensor,
    kbps: int,
    sample_rate: int = DEFAULT_RATE,
    training: bool = True,
    seed: int | None = None,
) -> torch.Tensor:
    """MP3 compression: differentiable proxy in training, the real codec otherwise."""
    if training:
        return mp3_proxy(x, kbps, sample_rate, seed)
    return mp3_codec(x, kbps, sample_rate)


def resample_attack(x: torch.Tensor, ratio: float) -> torch.Tensor:
    """Resample by ``ratio`` and back onto the original length."""
    return resample_to_length(resample(x, ratio), x.shape[-1])


def crop(
    x: torch.Tensor,
    fraction: float,
    position: str = "random",
    seed: int | None = None,
    min_length: int = StftConfig().window_length,
) -> torch.Tensor:
    """Remove a contiguous span of ``round(fraction * M)`` samples."""
    if not 0 <= fraction <= 0.95:
        raise ParameterError(f"crop fraction {fraction} outside [0, 0.95]")
    if position not in CROP_POSITIONS:
        raise ParameterError(f"crop position must be one of {CROP_POSITIONS}")
    m = x.shape[-1]
    n = int(round(fraction * m))
    if m - n < min_length:
        raise DegenerateInputError(f"cropping leaves {m - n} samples, fewer than {min_length}")
    if n == 0:
        return x
    if position == "begin":
        start = 0
    elif position == "end":
        start = m - n
    elif position == "middle":
        start = (m - n) // 2
    else:
        start = int(torch.randint(0, m - n + 1, (1,), generator=_generator(seed)))
    return torch.cat([x[..., :start], x[..., start + n :]], dim=-1)


def jitter(x: torch.Tensor, one_in_k: int, seed: int | None = None) -> torch.Tensor:
    """Delete one uniformly chosen sample from every full block of ``one_in_k``."""
    if one_in_k < 2:
        raise ParameterError(f"jitter block size must be >= 2, got {one_in_k}")
    m = x.shape[-1]
    n_blocks = m // one_in_k
    drop = torch.randint(0, one_in_k, (n_blocks,), generator=_generator(seed))
    keep = torch.ones(m, dtype=torch.bool)
    keep[torch.arange(n_blocks) * one_in_k + drop] = False
    return x[..., keep.nonzero().squeeze(-1).to(x.device)]


# ---------------------------------------------------------------------------
# Attack specifications


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = ALIASES.get(self.kind, self.kind)
        if kind not in PARAMS:
            raise ParameterError(f"unknown attack {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        unknown = set(self.params) - set(PARAMS[kind])
        if unknown:
            raise ParameterError(f"{kind} got unknown parameters {sorted(unknown)}")
        merged = {**PARAMS[kind], **self.params}
        object.__setattr__(self, "params", merged)
        if self.is_concrete():
            _validate(kind, merged)

    def __hash__(self):
        return hash((self.kind, tuple(sorted((k, str(v)) for k, v in self.params.items()))))

    def is_concrete(self) -> bool:
        return not any(isinstance(v, (tuple, list)) for v in self.params.values())

    def concretize(self, rng: np.random.Generator) -> "AttackSpec":
        """Draw concrete values for range ``(lo, hi)`` or choice ``[a, b, ...]`` parameters."""
        out = {}
        for k, v in self.params.items():
            if isinstance(v, tuple):
                out[k] = float(rng.uniform(v[0], v[1]))
            elif isinstance(v, list):
                out[k] = v[int(rng.integers(len(v)))]
            else:
                out[k] = v
        return AttackSpec(self.kind, out)

    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        body = ",".join(f"{k}={_fmt(v)}" for k, v in self.params.items() if v is not None)
        return f"{self.kind}:{body}"


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return f"{v[0]:g}~{v[1]:g}"
    if isinstance(v, list):
        return "/".join(_fmt(i) for i in v)
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


PARAMS: dict[str, dict] = {
    "identity": {},
    "tsm": {"rate": 1.0},
    "pitch_scale": {"ratio": None, "semitones": None},
    "resample": {"ratio": 0.9},
    "gaussian_noise": {"snr": 30.0},
    "mp3": {"kbps": 64},
    "amplitude": {"scale": 0.85},
    "requantize": {"bits": 8},
    "lowpass": {"cutoff": 6000.0},
    "crop": {"fraction": 0.1, "position": "random"},
    "jitter": {"k": 100},
}

ALIASES = {"noise": "gaussian_noise", "pitch": "pitch_scale", "ps": "pitch_scale", "lpf": "lowpass"}


def _validate(kind: str, p: dict) -> None:
    if kind == "tsm":
        if not 0.5 <= p["rate"] <= 2.0:
            raise ParameterError(f"tsm rate {p['rate']} outside [0.5, 2]")
    elif kind == "pitch_scale":
        if (p["ratio"] is None) == (p["semitones"] is None):
            raise ParameterError("pitch_scale needs exactly one of ratio / semitones")
        ratio = p["ratio"] if p["ratio"] is not None else semitones_to_ratio(p["semitones"])
        if not 0.5 <= ratio <= 2.0:
            raise ParameterError(f"pitch ratio {ratio} outside [0.5, 2]")
    elif kind == "crop":
        if not 0 <= p["fraction"] <= 0.95:
            raise ParameterError(f"crop fraction {p['fraction']} outside [0, 0.95]")
        if p["position"] not in CROP_POSITIONS:
            raise ParameterError(f"crop position {p['position']!r} not in {CROP_POSITIONS}")
    elif kind == "jitter":
        if int(p["k"]) < 2:
            raise ParameterError("jitter k must be >= 2")
    elif kind == "resample":
        if not 0.25 <= p["ratio"] <= 4:
            raise ParameterError(f"resample ratio {p['ratio']} outside [0.25, 4]")
    elif kind == "gaussian_noise":
        if not 0 <= p["snr"] <= 60:
            raise ParameterError(f"noise SNR {p['snr']} outside [0, 60]")
    elif kind == "mp3":
        if int(p["kbps"]) not in (64, 128):
            raise ParameterError("mp3 kbps must be 64 or 128")
    elif kind == "amplitude":
        if not 0 < p["scale"] <= 2:
            raise ParameterError(f"amplitude scale {p['scale']} outside (0, 2]")
    elif kind == "requantize":
        if not 4 <= int(p["bits"]) <= 16:
            raise ParameterError("requantize bits must lie in [4, 16]")


def apply_attack(
    x: torch.Tensor,
    spec: AttackSpec,
    seed: int | None = None,
    sample_rate: int = DEFAULT_RATE,
    training: bool = False,
    cfg: StftConfig = StftConfig(),
) -> torch.Tensor:
    """Apply one concrete attack to ``x[..., M]``."""
    if not spec.is_concrete():
        raise ParameterError(f"attack {spec.label()} still has sampled parameters")
    p, kind = spec.params, spec.kind
    if kind == "identity":
        return x
    if kind == "tsm":
        return tsm(x, float(p["rate"]), cfg)
    if kind == "pitch_scale":
        if p["ratio"] is not None:
            return pitch_scale_ratio(x, float(p["ratio"]), cfg)
        return pitch_scale(x, float(p["semitones"]), cfg)
    if kind == "resample":
        return resample_attack(x, float(p["ratio"]))
    if kind == "gaussian_noise":
        return gaussian_noise(x, float(p["snr"]), seed)
    if kind == "mp3":
        return mp3(x, int(p["kbps"]), sample_rate, training=training, seed=seed)
    if kind == "amplitude":
        return amplitude(x, float(p["scale"]))
    if kind == "requantize":
        return requantize(x, int(p["bits"]))
    if kind == "lowpass":
        return lowpass(x, float(p["cutoff"]), sample_rate)
    if kind == "crop":
        return crop(x, float(p["fraction"]), p["position"], seed, cfg.window_length)
    if kind == "jitter":
        return jitter(x, int(p["k"]), seed)
    raise ParameterError(f"unhandled attack {kind!r}")


def apply_chain(
    x: torch.Tensor,
    chain: list[AttackSpec],
    seed: int | None = None,
    sample_rate: int = DEFAULT_RATE,
    training: bool = False,
    cfg: StftConfig = StftConfig(),
) -> torch.Tensor:
    """Apply attacks left to right; stage ``i`` receives seed ``seed + i``."""
    base = 0 if seed is None else seed
    for i, spec in enumerate(chain):
        x = apply_attack(x, spec, base + i, sample_rate, training, cfg)
    return x


# ---------------------------------------------------------------------------
# Chain mini-grammar:
#   chain  := attack ("|" attack)*
#   attack := kind [":" param ("," param)*]
#   param  := name "=" value
#   value  := number | word | number "~" number (uniform range) | v "/" v ... (choice)


def _parse_scalar(text: str):
    text = text.strip()
    try:
        v = float(text)
    except ValueError:
        return text
    return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v


def _parse_value(text: str):
    if "~" in text:
        lo, hi = text.split("~", 1)
        return (float(lo), float(hi))
    if "/" in text:
        return [_parse_scalar(t) for t in text.split("/")]
    return _parse_scalar(text)


_PARAM_ALIASES = {"snr_db": "snr", "one_in_k": "k", "cutoff_hz": "cutoff", "semitone": "semitones"}


def parse_attack(text: str) -> AttackSpec:
    text = text.strip()
    if not text:
        raise ParameterError("empty attack specification")
    kind, _, rest = text.partition(":")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        if "=" not in item:
            raise ParameterError(f"attack parameter {item!r} is not name=value")
        name, value = item.split("=", 1)
        name = _PARAM_ALIASES.get(name.strip(), name.strip())
        params[name] = _parse_value(value)
    return AttackSpec(kind.strip(), params)


def parse_chain(text: str) -> list[AttackSpec]:
    return [parse_attack(part) for part in text.split("|")]


def format_chain(chain: list[AttackSpec]) -> str:
    return "|".join(spec.label() for spec in chain)
