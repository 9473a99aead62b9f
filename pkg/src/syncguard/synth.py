"""Synthetic speech-like corpus for desk-scale training and tests.

Clips alternate voiced syllables (harmonic source with a gliding f0 shaped by
three formants), unvoiced fricative bursts and short pauses over a faint
noise floor.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import WORKING_RATE, AudioClip, save_audio


def _envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    attack = max(1, int(n * rng.uniform(0.1, 0.3)))
    release = max(1, int(n * rng.uniform(0.2, 0.4)))
    env = np.ones(n)
    env[:attack] = np.linspace(0, 1, attack)
    env[-release:] = np.minimum(env[-release:], np.linspace(1, 0, release))
    return env


def _voiced(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    f0_start = rng.uniform(90, 240)
    f0 = f0_start * (1 + rng.uniform(-0.25, 0.25) * t / max(t[-1], 1e-9))
    f0 *= 1 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 7) * t)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    formants = [rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2500, 3800)]
    bandwidths = [rng.uniform(60, 140), rng.uniform(80, 200), rng.uniform(120, 300)]
    out = np.zeros(n)
    n_harm = int((sr / 2 - 200) / f0_start)
    mean_f0 = float(f0.mean())
    for h in range(1, n_harm + 1):
        f = h * mean_f0
        gain = sum(1.0 / (1 + ((f - fc) / bw) ** 2) for fc, bw in zip(formants, bandwidths))
        gain = (gain + 0.02) / h**0.5
        out += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return out * _envelope(n, rng)


def _fricative(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1 / sr)
    lo = rng.uniform(2000, 5000)
    spec *= 1 / (1 + np.exp(-(freqs - lo) / 300))
    return np.fft.irfft(spec, n) * _envelope(n, rng) * 0.3


def synth_speech(seconds: float, rng: np.random.Generator, sr: int = WORKING_RATE) -> np.ndarray:
    n_total = int(round(seconds * sr))
    out = np.zeros(n_total)
    pos = 0
    while pos < n_total:
        kind = rng.choice(["voiced", "fricative", "pause"], p=[0.65, 0.2, 0.15])
        n = int(sr * rng.uniform(0.08, 0.3))
        n = min(n, n_total - pos)
        if n < 16:
            break
        if kind == "voiced":
            seg = _voiced(n, sr, rng) * rng.uniform(0.5, 1.0)
        elif kind == "fricative":
            seg = _fricative(n, sr, rng)
        else:
            seg = np.zeros(n)
        out[pos : pos + n] += seg
        pos += n
    out += 0.003 * rng.standard_normal(n_total)
    rms = np.sqrt(np.mean(out**2))
    out *= rng.uniform(0.05, 0.12) / max(rms, 1e-9)
    peak = np.abs(out).max()
    if peak > 0.95:
        out *= 0.95 / peak
    return out.astype(np.float32)


def write_corpus(
    root: str | Path,
    n_train: int,
    n_test: int,
    seconds: float = 4.0,
    seed: int = 0,
) -> Path:
    """Write ``root/train/*.wav`` and ``root/test/*.wav``; existing files are kept."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, count in (("train", n_train), ("test", n_test)):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            samples = synth_speech(seconds, rng)
            path = d / f"{split}_{i:04d}.wav"
            if not path.exists():
                save_audio(AudioClip(samples), path)
    return root
