"""Clip-level embedding / extraction, checkpoints and parameter accounting."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

from ..audio_io import AudioClip
from ..errors import CheckpointError, ContractError, InputTooShortError
from .message import Message
from .model import ModelConfig, SyncGuardModel

CHECKPOINT_FORMAT = "syncguard-checkpoint"
CHECKPOINT_VERSION = 1


def _as_batch(clip: AudioClip, model: SyncGuardModel) -> torch.Tensor:
    win = model.config.stft.window_length
    if len(clip) < win:
        raise InputTooShortError(f"clip has {len(clip)} samples; at least {win} required")
    param = next(model.parameters())
    return clip.tensor(param.dtype).to(param.device).unsqueeze(0)


@torch.no_grad()
def embed(clip: AudioClip, message: Message, model: SyncGuardModel) -> AudioClip:
    """Watermark ``clip``; the result has the same length and sample rate."""
    if len(message) != model.config.n_bits:
        raise ContractError(f"message has {len(message)} bits, model expects {model.config.n_bits}")
    x = _as_batch(clip, model)
    bits = message.tensor().to(x).unsqueeze(0)
    a_w = model.embed(x, bits)
    return AudioClip.from_tensor(a_w[0], clip.sample_rate)


@torch.no_grad()
def extract(clip: AudioClip, model: SyncGuardModel) -> tuple[Message, np.ndarray]:
    """Blind extraction: returns the thresholded message and the soft scores in [0, 1]."""
    x = _as_batch(clip, model)
    soft = model.extract_soft(x)[0].cpu().double().numpy()
    bits = (soft >= 0.5).astype(np.uint8)
    return Message(bits, model.config.pattern_len), soft


@torch.no_grad()
def discriminate(clip: AudioClip, model: SyncGuardModel) -> float:
    """Discriminator logit; ``sigmoid(logit)`` is the probability that the clip is clean.

    The adversarial losses push ``sigmoid(D(a))`` up and ``sigmoid(D(a_w))`` down.
    """
    if len(clip) == 0:
        raise ContractError("cannot discriminate an empty clip")
    param = next(model.parameters())
    x = clip.tensor(param.dtype).to(param.device).unsqueeze(0)
    return float(model.discriminate(x)[0])


def count_parameters(model: SyncGuardModel) -> tuple[int, int]:
    """Exact ``(encoder, decoder)`` parameter counts; the discriminator is excluded."""
    enc = sum(p.numel() for m in model.encoder_modules() for p in m.parameters())
    dec = sum(p.numel() for m in model.decoder_modules() for p in m.parameters())
    return enc, dec


def save_checkpoint(model: SyncGuardModel, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "training_stage": model.training_stage,
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> SyncGuardModel:
    """Rebuild a model from ``path``.

    ``expect`` pins the configuration the caller relies on; any difference
    (bit count, STFT settings, ...) raises :class:`CheckpointError`.
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a syncguard checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    cfg = ModelConfig.from_dict(payload["model_config"])
    if expect is not None and expect != cfg:
        diffs = [
            k for k, v in expect.to_dict().items() if cfg.to_dict().get(k) != v
        ]
        raise CheckpointError(f"{path}: checkpoint config differs from expected in {diffs}")
    model = SyncGuardModel(cfg)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match config ({exc})") from exc
    model.training_stage = int(payload.get("training_stage", 1))
    model.eval()
    return model


def checkpoint_extra(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    return payload.get("extra", {})


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
