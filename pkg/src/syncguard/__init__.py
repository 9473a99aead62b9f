"""SyncGuard: frame-wise broadcast audio watermarking robust to desynchronisation."""

__version__ = "0.1.0"

from .audio_io import AudioClip, DatasetSpec, load_audio, save_audio  # noqa: E402
from .codec import Message, ModelConfig, SyncGuardModel, embed, extract, load_checkpoint, save_checkpoint  # noqa: E402
from .distortion import apply_attack, apply_chain, parse_chain  # noqa: E402

__all__ = [
    "AudioClip", "DatasetSpec", "Message", "ModelConfig", "SyncGuardModel", "__version__",
    "apply_attack", "apply_chain", "embed", "extract", "load_audio", "load_checkpoint",
    "parse_chain", "save_audio", "save_checkpoint",
]
