"""PCM16 WAV ingestion/persistence and fixed-length dataset segmentation."""

from __future__ import annotations

import logging
import random
import wave
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .distortion.resample import resample_rate
from .errors import AudioFormatError, ConfigurationError, ParameterError

logger = logging.getLogger(__name__)

WORKING_RATE = 22050
PCM16_SCALE = 32767.0
MIN_SEGMENT_SECONDS = 0.5
_FILE_CACHE_SIZE = 16


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = WORKING_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise AudioFormatError(f"AudioClip must be mono, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")
        self.samples = samples

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.samples).to(dtype)

    @classmethod
    def from_tensor(cls, x: torch.Tensor, sample_rate: int = WORKING_RATE) -> "AudioClip":
        return cls(x.detach().cpu().reshape(-1).to(torch.float32).numpy(), sample_rate)


def _read_pcm16(path: Path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except FileNotFoundError:
        raise
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if width != 2:
        raise AudioFormatError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    data = np.frombuffer(raw, dtype="<i2")
    if data.size == 0:
        raise AudioFormatError(f"{path}: WAV file holds no samples")
    data = data.reshape(-1, n_channels).astype(np.float32) / PCM16_SCALE
    return np.clip(data, -1.0, 1.0), rate


def load_audio(path: str | Path, target_rate: int = WORKING_RATE) -> AudioClip:
    """Read a PCM16 WAV, average channels to mono and resample to ``target_rate``."""
    if target_rate <= 0:
        raise ParameterError("target_rate must be positive")
    data, rate = _read_pcm16(Path(path))
    mono = data[:, 0] if data.shape[1] == 1 else data.mean(axis=1)
    if rate != target_rate:
        mono = resample_rate(torch.from_numpy(mono).double(), rate, target_rate).float().numpy()
    return AudioClip(mono, target_rate)


def save_audio(clip: AudioClip, path: str | Path) -> None:
    """Write ``clip`` as 16-bit PCM mono; samples are clamped to [-1, 1] first."""
    q = np.round(np.clip(clip.samples, -1.0, 1.0) * PCM16_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(q.tobytes())


def wav_num_samples(path: str | Path, target_rate: int = WORKING_RATE) -> int:
    """Length a file will have after ``load_audio`` without decoding it."""
    try:
        with wave.open(str(path), "rb") as wf:
            n, rate = wf.getnframes(), wf.getframerate()
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if rate == target_rate:
        return n
    return int(round(n * target_rate / rate))


@dataclass
class DatasetSpec:
    root_path: str
    segment_seconds: float = 1.0
    split: str = "train"
    shuffle_seed: int = 0
    sample_rate: int = WORKING_RATE

    def __post_init__(self):
        if self.segment_seconds < MIN_SEGMENT_SECONDS:
            raise ConfigurationError(
                f"segment_seconds must be >= {MIN_SEGMENT_SECONDS}, got {self.segment_seconds}"
            )
        if self.split not in ("train", "test"):
            raise ConfigurationError(f"split must be 'train' or 'test', got {self.split!r}")

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))

    def files(self) -> list[Path]:
        """WAV files of this split: ``root/<split>/`` when present, else ``root`` itself."""
        root = Path(self.root_path)
        split_dir = root / self.split
        base = split_dir if split_dir.is_dir() else root
        return sorted(p for p in base.rglob("*.wav") if p.is_file())


def iterate_segments(spec: DatasetSpec) -> Iterator[AudioClip]:
    """Yield fixed-length segments in a seed-determined order.

    Remainders shorter than a segment are dropped; a file shorter than one
    segment yields nothing and logs a warning.
    """
    files = spec.files()
    if not files:
        raise ConfigurationError(f"no WAV files found under {spec.root_path}")
    seg = spec.segment_samples
    index: list[tuple[int, int]] = []
    for i, path in enumerate(files):
        n = wav_num_samples(path, spec.sample_rate)
        if n < seg:
            logger.warning("%s is shorter than one %.2fs segment; skipped", path, spec.segment_seconds)
        index.extend((i, k * seg) for k in range(n // seg))
    random.Random(spec.shuffle_seed).shuffle(index)

    cache: OrderedDict[int, np.ndarray] = OrderedDict()
    for file_idx, start in index:
        if file_idx in cache:
            cache.move_to_end(file_idx)
        else:
            cache[file_idx] = load_audio(files[file_idx], spec.sample_rate).samples
            if len(cache) > _FILE_CACHE_SIZE:
                cache.popitem(last=False)
        samples = cache[file_idx]
        yield AudioClip(samples[start : start + seg].copy(), spec.sample_rate)


def load_segments(spec: DatasetSpec, limit: int | None = None) -> torch.Tensor:
    """Materialise the segment stream as a ``[N, L]`` tensor."""
    out = []
    for clip in iterate_segments(spec):
        out.append(clip.tensor())
        if limit is not None and len(out) >= limit:
            break
    if not out:
        raise ConfigurationError(f"dataset at {spec.root_path} produced no segments")
    return torch.stack(out)
